#include "regmerge/perm.hpp"

#include <algorithm>
#include <limits>

#include "regmerge/error.hpp"
#include "regmerge/kernels.hpp"

namespace regmerge {

using nlohmann::json;

Permutation Permutation::identity(std::size_t n) {
    Permutation p;
    for (std::size_t i = 0; i < n; ++i) p.mapping.push_back(i);
    return p;
}

Permutation Permutation::inverse() const {
    validate();
    Permutation inv;
    inv.mapping.resize(mapping.size());
    for (std::size_t i = 0; i < mapping.size(); ++i) inv.mapping[mapping[i]] = i;
    return inv;
}

double Permutation::identity_fraction() const {
    if (mapping.empty()) return 1.0;
    std::size_t fixed = 0;
    for (std::size_t i = 0; i < mapping.size(); ++i) fixed += mapping[i] == i;
    return static_cast<double>(fixed) / static_cast<double>(mapping.size());
}

void Permutation::validate() const {
    std::vector<bool> seen(mapping.size(), false);
    for (std::size_t v : mapping) {
        if (v >= mapping.size() || seen[v]) throw ValidationError("permutation is not a bijection");
        seen[v] = true;
    }
}

GroundMetric weight_ground_metric(const Matrix& wa, const Matrix& wb) {
    if (wa.rows() != wb.rows() || wa.cols() != wb.cols())
        throw ShapeError("ground metric: " + shape_string(wa) + " vs " + shape_string(wb));
    GroundMetric g;
    g.matrix = Matrix(wa.cols(), wa.cols());
    kernels::column_distances(wa.rows(), wa.cols(), wa.data(), wb.data(), g.matrix.data());
    return g;
}

ActivationSimilarity activation_similarity(const ForwardTrace& a, const ForwardTrace& b, const std::string& layer) {
    auto ia = a.layer_activations.find(layer);
    auto ib = b.layer_activations.find(layer);
    if (ia == a.layer_activations.end() || ib == b.layer_activations.end())
        throw ValidationError("no recorded activations for layer '" + layer + "'");
    const Matrix& za = ia->second;
    const Matrix& zb = ib->second;
    if (za.rows() != zb.rows()) throw ShapeError("activation similarity: traces cover different example counts");
    if (za.cols() != zb.cols()) throw ShapeError("activation similarity: layer widths differ");
    return {matmul_tn(za, zb), layer};
}

Permutation solve_assignment(const Matrix& m, AssignmentMode mode) {
    if (!m.square()) throw ShapeError("assignment needs a square matrix, got " + shape_string(m));
    if (!m.all_finite()) throw ValidationError("assignment matrix has non-finite entries");
    const std::size_t n = m.rows();
    if (n == 0) return {};
    Matrix cost = m;
    if (mode == AssignmentMode::max_similarity) {
        const double mx = *std::max_element(m.data().begin(), m.data().end());
        for (double& v : cost.data()) v = mx - v;
    }
    // Shortest augmenting paths with row/column potentials; arrays are 1-based.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    Permutation out;
    out.mapping.resize(n);
    for (std::size_t j = 1; j <= n; ++j) out.mapping[p[j] - 1] = j - 1;
    return out;
}

double assignment_value(const Matrix& m, const Permutation& p) {
    if (!m.square() || m.rows() != p.size()) throw ShapeError("assignment value: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += m(i, p.mapping[i]);
    return total;
}

namespace {

// Index of hidden layer `fc<k>` in an MLP, 1-based; throws for anything else.
std::size_t hidden_index(const ModelSpec& spec, const std::string& layer) {
    if (spec.architecture != Architecture::mlp)
        throw ValidationError("permutation is only supported for MLP hidden layers; '" + layer +
                              "' belongs to a " + to_string(spec.architecture) + " model");
    for (std::size_t k = 1; k <= spec.depth; ++k)
        if (layer == "fc" + std::to_string(k)) return k;
    throw ValidationError("'" + layer + "' is not a hidden MLP layer (expected fc1..fc" +
                          std::to_string(spec.depth) + ")");
}

std::string next_layer(const ModelSpec& spec, std::size_t k) {
    return k == spec.depth ? "head" : "fc" + std::to_string(k + 1);
}

void check_size(const Permutation& perm, std::size_t n) {
    perm.validate();
    if (perm.size() != n)
        throw ShapeError("permutation of size " + std::to_string(perm.size()) + " for a layer of width " +
                         std::to_string(n));
}

}  // namespace

NamedTensorMap permute_params(const NamedTensorMap& params, const ModelSpec& spec, const std::string& layer,
                              const Permutation& perm) {
    const std::size_t k = hidden_index(spec, layer);
    check_size(perm, spec.hidden_dim);
    NamedTensorMap out = params;
    const std::size_t h = spec.hidden_dim;
    if (const Tensor* w = params.find(layer + ".weight")) {
        Tensor& dst = out.at(layer + ".weight");
        const std::size_t in = w->shape[0];
        for (std::size_t r = 0; r < in; ++r)
            for (std::size_t i = 0; i < h; ++i) dst.values[r * h + i] = w->values[r * h + perm.mapping[i]];
    }
    if (const Tensor* b = params.find(layer + ".bias")) {
        Tensor& dst = out.at(layer + ".bias");
        for (std::size_t i = 0; i < h; ++i) dst.values[i] = b->values[perm.mapping[i]];
    }
    const std::string next = next_layer(spec, k);
    if (const Tensor* w = params.find(next + ".weight")) {
        Tensor& dst = out.at(next + ".weight");
        const std::size_t cols = w->shape[1];
        for (std::size_t i = 0; i < h; ++i)
            std::copy_n(w->values.begin() + static_cast<std::ptrdiff_t>(perm.mapping[i] * cols), cols,
                        dst.values.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
    return out;
}

GramStats permute_gram(const GramStats& gram, const ModelSpec& spec, const std::string& layer,
                       const Permutation& perm) {
    const std::size_t k = hidden_index(spec, layer);
    check_size(perm, spec.hidden_dim);
    GramStats out = gram;
    auto it = out.layers.find(next_layer(spec, k));
    if (it == out.layers.end()) return out;
    const Matrix& g = gram.layers.at(it->first).gram_sum;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < perm.size(); ++j) it->second.gram_sum(i, j) = g(perm.mapping[i], perm.mapping[j]);
    return out;
}

ModelInstance apply_permutation(const ModelInstance& model, const std::string& layer, const Permutation& perm) {
    ModelInstance out = model;
    out.params = permute_params(model.params, model.spec, layer, perm);
    return out;
}

const char* to_string(MatchMethod m) { return m == MatchMethod::weight_based ? "weight_based" : "activation_based"; }

MatchMethod match_method_from_string(const std::string& s) {
    if (s == "weight_based") return MatchMethod::weight_based;
    if (s == "activation_based") return MatchMethod::activation_based;
    throw ValidationError("unknown match method '" + s + "' (expected weight_based or activation_based)");
}

MatchResult match_and_merge(const ModelInstance& a, const ModelInstance& b, MatchMethod method,
                            const MergeConfig& cfg, const MatchInputs& inputs) {
    if (!(a.spec == b.spec)) throw ValidationError("match_and_merge: models have different specs");
    if (a.spec.architecture != Architecture::mlp)
        throw ValidationError("match_and_merge supports MLP models only");
    if (method == MatchMethod::activation_based && !inputs.probe)
        throw ValidationError("activation-based matching needs probe examples");

    const std::string id_a = a.params.metadata.count("dataset") ? a.params.metadata.at("dataset") : "a";
    const std::string id_b = b.params.metadata.count("dataset") ? b.params.metadata.at("dataset") : "b";

    MatchResult result;
    ModelInstance aligned = b;
    std::vector<GramStats> grams = inputs.grams;
    std::vector<FisherStats> fishers = inputs.fishers;
    for (std::size_t k = 1; k <= a.spec.depth; ++k) {
        const std::string layer = "fc" + std::to_string(k);
        Permutation perm;
        if (method == MatchMethod::weight_based) {
            GroundMetric g = weight_ground_metric(a.weight(layer).to_matrix(), aligned.weight(layer).to_matrix());
            g.layer = layer;
            g.model_a = id_a;
            g.model_b = id_b;
            perm = solve_assignment(g.matrix, AssignmentMode::min_cost);
            result.ground_metrics.push_back(std::move(g));
        } else {
            const ForwardTrace ta = forward(a, *inputs.probe, true);
            const ForwardTrace tb = forward(aligned, *inputs.probe, true);
            ActivationSimilarity c = activation_similarity(ta, tb, layer);
            perm = solve_assignment(c.matrix, AssignmentMode::max_similarity);
            result.similarities.push_back(std::move(c));
        }
        aligned = apply_permutation(aligned, layer, perm);
        if (grams.size() == 2) grams[1] = permute_gram(grams[1], a.spec, layer, perm);
        if (fishers.size() == 2) fishers[1].diag = permute_params(fishers[1].diag, a.spec, layer, perm);
        result.permutations[layer] = std::move(perm);
    }
    const std::vector<NamedTensorMap> models{a.params, aligned.params};
    result.merge = merge(models, grams, fishers, cfg);
    return result;
}

namespace {

json grid(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return rows;
}

}  // namespace

json to_json(const MatchResult& r) {
    json grids = json::array();
    for (const auto& g : r.ground_metrics)
        grids.push_back({{"layer", g.layer},
                         {"kind", "ground_metric"},
                         {"model_a", g.model_a},
                         {"model_b", g.model_b},
                         {"rows", g.matrix.rows()},
                         {"cols", g.matrix.cols()},
                         {"matrix", grid(g.matrix)}});
    for (const auto& c : r.similarities)
        grids.push_back({{"layer", c.layer},
                         {"kind", "activation_similarity"},
                         {"rows", c.matrix.rows()},
                         {"cols", c.matrix.cols()},
                         {"matrix", grid(c.matrix)}});
    json perms = json::object();
    for (const auto& [layer, p] : r.permutations)
        perms[layer] = {{"mapping", p.mapping}, {"identity_fraction", p.identity_fraction()}};
    return json{{"grids", grids}, {"permutations", perms}, {"merge_report", to_json(r.merge.report)}};
}

}  // namespace regmerge
