#include "regmerge/stats.hpp"

#include <algorithm>

#include "regmerge/error.hpp"
#include "regmerge/kernels.hpp"
#include "regmerge/rng.hpp"

namespace regmerge {

using nlohmann::json;

void CollectConfig::validate() const {
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    if (max_batches == 0) throw ValidationError("max_batches must be >= 1");
}

json to_json(const CollectConfig& c) {
    return json{{"batch_size", c.batch_size}, {"max_batches", c.max_batches}, {"seed", c.seed}};
}

CollectConfig collect_config_from_json(const json& j) {
    CollectConfig c;
    try {
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_batches = j.value("max_batches", c.max_batches);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("collect config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<std::size_t> collection_order(std::size_t n, const CollectConfig& cfg) {
    cfg.validate();
    Philox rng(cfg.seed, 0x5747);
    auto order = rng.permutation(n);
    const std::size_t cap = cfg.batch_size * cfg.max_batches;
    if (order.size() > cap) order.resize(cap);
    return order;
}

GramStats collect_gram(const ModelInstance& model, const Dataset& data, const CollectConfig& cfg) {
    if (data.size() == 0) throw ValidationError("collect_gram: empty dataset");
    const auto order = collection_order(data.size(), cfg);

    GramStats stats;
    stats.batch_cap = cfg.max_batches;
    for (const auto& [key, value] : model.params.metadata)
        if (key == "architecture" || key == "seed" || key == "dataset") stats.metadata[key] = value;

    std::vector<std::vector<double>> sums(model.linear_layer_names.size());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        const Dataset batch = data.subset(std::span(order).subspan(start, end - start));
        const ForwardTrace trace = forward(model, batch.x, true);
        for (std::size_t j = 0; j < sums.size(); ++j) {
            const Matrix& x = trace.layer_inputs.at(model.linear_layer_names[j]);
            if (sums[j].empty()) sums[j].assign(x.cols() * x.cols(), 0.0);
            kernels::gram_accumulate(x.rows(), x.cols(), x.data(), sums[j]);
        }
    }
    for (std::size_t j = 0; j < sums.size(); ++j) {
        const std::size_t d = model.weight(model.linear_layer_names[j]).shape[0];
        stats.layers[model.linear_layer_names[j]] = {Matrix(d, d, std::move(sums[j])), order.size()};
    }
    return stats;
}

FisherStats collect_fisher(const ModelInstance& model, const Dataset& data, const CollectConfig& cfg) {
    if (data.size() == 0) throw ValidationError("collect_fisher: empty dataset");
    const std::size_t classes = model.spec.num_classes;
    if (classes < 2)
        throw ValidationError("collect_fisher: a single-output (regression) head has no class distribution; "
                              "Fisher is only defined for classifiers");
    const auto order = collection_order(data.size(), cfg);

    std::vector<std::vector<double>> acc;
    for (const auto& [name, t] : model.params.entries()) acc.emplace_back(t.numel(), 0.0);

    auto accumulate = [&](const NamedTensorMap& grads, double weight) {
        std::size_t k = 0;
        for (const auto& [name, g] : grads.entries()) {
            auto& a = acc[k++];
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += weight * g.values[i] * g.values[i];
        }
    };

    const bool bernoulli = model.spec.output == OutputMode::sigmoid;
    for (std::size_t idx : order) {
        Matrix x(1, data.x.cols());
        std::copy(data.x.row(idx).begin(), data.x.row(idx).end(), x.row(0).begin());
        const ForwardPass pass(model, x);
        const Matrix logits = pass.logits();
        const Matrix prob = bernoulli ? sigmoid(logits) : softmax_rows(logits);
        Matrix dlogits(1, classes);
        for (std::size_t y = 0; y < classes; ++y) {
            const double p = prob(0, y);
            if (bernoulli) {
                // d log p / dz_c is (1−s) for outcome 1 and −s for outcome 0.
                std::fill(dlogits.data().begin(), dlogits.data().end(), 0.0);
                dlogits(0, y) = 1.0;
                accumulate(pass.backward(dlogits), p * (1.0 - p));
            } else {
                if (p == 0.0) continue;
                for (std::size_t c = 0; c < classes; ++c) dlogits(0, c) = (c == y ? 1.0 : 0.0) - prob(0, c);
                accumulate(pass.backward(dlogits), p);
            }
        }
    }

    FisherStats out;
    out.example_count = order.size();
    const double n = static_cast<double>(order.size());
    std::size_t k = 0;
    for (const auto& [name, t] : model.params.entries()) {
        auto& a = acc[k++];
        for (double& v : a) v /= n;
        out.diag.insert(name, Tensor(t.shape, DType::f64, std::move(a)));
    }
    for (const auto& [key, value] : model.params.metadata)
        if (key == "architecture" || key == "seed" || key == "dataset") out.diag.metadata[key] = value;
    return out;
}

}  // namespace regmerge
