#include "regmerge/merge.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <exception>
#include <numeric>
#include <set>
#include <sstream>

#include "regmerge/error.hpp"

namespace regmerge {

using nlohmann::json;

const char* to_string(MergeAlgorithm a) {
    switch (a) {
        case MergeAlgorithm::simple: return "simple";
        case MergeAlgorithm::fisher: return "fisher";
        case MergeAlgorithm::regmean: return "regmean";
    }
    return "?";
}

const char* to_string(Regularizer r) {
    switch (r) {
        case Regularizer::offdiag_scale: return "offdiag_scale";
        case Regularizer::additive: return "additive";
        case Regularizer::diag_ridge: return "diag_ridge";
    }
    return "?";
}

MergeAlgorithm merge_algorithm_from_string(const std::string& s) {
    if (s == "simple") return MergeAlgorithm::simple;
    if (s == "fisher") return MergeAlgorithm::fisher;
    if (s == "regmean") return MergeAlgorithm::regmean;
    throw ValidationError("unknown merge algorithm '" + s + "' (expected simple, fisher or regmean)");
}

Regularizer regularizer_from_string(const std::string& s) {
    if (s == "offdiag_scale") return Regularizer::offdiag_scale;
    if (s == "additive") return Regularizer::additive;
    if (s == "diag_ridge") return Regularizer::diag_ridge;
    throw ValidationError("unknown regularizer '" + s + "'");
}

void MergeConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
    if (!(beta >= 0.0)) throw ValidationError("beta must be >= 0");
    if (!(gamma >= 0.0)) throw ValidationError("gamma must be >= 0");
    if (weights_override) {
        double sum = 0.0;
        for (double w : *weights_override) {
            if (!(w >= 0.0)) throw ValidationError("merge weights must be non-negative");
            sum += w;
        }
        if (!(sum > 0.0)) throw ValidationError("merge weights must not all be zero");
    }
}

json to_json(const MergeConfig& c) {
    json j{{"algorithm", to_string(c.algorithm)},
           {"regularizer", to_string(c.regularizer)},
           {"alpha", c.alpha},
           {"beta", c.beta},
           {"gamma", c.gamma},
           {"normalize_gram_per_example", c.normalize_gram_per_example},
           {"exclude_patterns", c.exclude_patterns}};
    if (c.weights_override) j["weights_override"] = *c.weights_override;
    return j;
}

MergeConfig merge_config_from_json(const json& j) {
    MergeConfig c;
    try {
        if (j.contains("algorithm")) c.algorithm = merge_algorithm_from_string(j.at("algorithm").get<std::string>());
        if (j.contains("regularizer"))
            c.regularizer = regularizer_from_string(j.at("regularizer").get<std::string>());
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.gamma = j.value("gamma", c.gamma);
        c.normalize_gram_per_example = j.value("normalize_gram_per_example", false);
        c.exclude_patterns = j.value("exclude_patterns", std::vector<std::string>{});
        if (j.contains("weights_override") && !j.at("weights_override").is_null())
            c.weights_override = j.at("weights_override").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("merge config: ") + e.what());
    }
    c.validate();
    return c;
}

json to_json(const MergeReport& r) {
    json solves = json::object();
    for (const auto& [layer, s] : r.solves)
        solves[layer] = json{{"method", to_string(s.method)},
                             {"jitter_applied", s.jitter_applied},
                             {"condition_estimate", s.condition_estimate}};
    return json{{"algorithm", r.algorithm},
                {"model_ids", r.model_ids},
                {"key_method", r.key_method},
                {"excluded", r.excluded},
                {"solves", solves}};
}

namespace {

bool excluded_by(const std::string& name, const std::vector<std::string>& patterns) {
    for (const auto& p : patterns)
        if (fnmatch(p.c_str(), name.c_str(), 0) == 0) return true;
    return false;
}

struct Plan {
    std::vector<std::string> keys;
    MergeReport report;
};

Plan plan_merge(std::span<const NamedTensorMap> models, const MergeConfig& cfg) {
    cfg.validate();
    if (models.empty()) throw ValidationError("merge needs at least one model");
    Plan plan;
    plan.report.algorithm = to_string(cfg.algorithm);
    std::set<std::string> seen_excluded;
    for (std::size_t k = 0; k < models.size(); ++k) {
        const auto& md = models[k].metadata;
        auto id = md.find("id");
        if (id == md.end()) id = md.find("dataset");
        plan.report.model_ids.push_back(id != md.end() ? id->second : "model" + std::to_string(k));
        for (const auto& [name, t] : models[k].entries())
            if (excluded_by(name, cfg.exclude_patterns) && seen_excluded.insert(name).second)
                plan.report.excluded.push_back(name);
    }
    for (const auto& [name, t] : models[0].entries())
        if (!seen_excluded.count(name)) plan.keys.push_back(name);
    const std::set<std::string> key_set(plan.keys.begin(), plan.keys.end());
    for (std::size_t k = 1; k < models.size(); ++k) {
        std::size_t included = 0;
        for (const auto& [name, t] : models[k].entries()) {
            if (seen_excluded.count(name)) continue;
            ++included;
            if (!key_set.count(name))
                throw ValidationError("key '" + name + "' is present in model " + std::to_string(k) +
                                      " but not in model 0; exclude it or fix the inputs");
            if (t.shape != models[0].at(name).shape)
                throw ShapeError("key '" + name + "' has different shapes in model 0 and model " + std::to_string(k));
        }
        if (included != plan.keys.size())
            throw ValidationError("model " + std::to_string(k) + " lacks keys present in model 0");
    }
    return plan;
}

DType output_dtype(std::span<const NamedTensorMap> models, const std::string& key) {
    for (const auto& m : models)
        if (m.at(key).dtype != DType::f32) return DType::f64;
    return DType::f32;
}

std::vector<double> simple_mean(std::span<const NamedTensorMap> models, const std::string& key,
                                const std::vector<double>* weights) {
    std::vector<double> out(models[0].at(key).numel(), 0.0);
    for (std::size_t k = 0; k < models.size(); ++k) {
        const auto& v = models[k].at(key).values;
        const double w = weights ? (*weights)[k] : 1.0;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * v[i];
    }
    if (!weights)
        for (double& v : out) v /= static_cast<double>(models.size());
    return out;
}

NamedTensorMap start_output(std::span<const NamedTensorMap> models, const MergeConfig& cfg) {
    NamedTensorMap out;
    out.metadata = models[0].metadata;
    out.metadata["merge_algorithm"] = to_string(cfg.algorithm);
    return out;
}

MergeResult copy_single(const NamedTensorMap& model, Plan plan, const MergeConfig& cfg, const char* method) {
    MergeResult r;
    r.merged = start_output(std::span(&model, 1), cfg);
    for (const auto& key : plan.keys) {
        r.merged.insert(key, model.at(key));
        plan.report.key_method[key] = method;
    }
    r.report = std::move(plan.report);
    return r;
}

Matrix regularized_gram(const GramStats::Layer& layer, const MergeConfig& cfg) {
    Matrix g = layer.gram_sum;
    if (cfg.normalize_gram_per_example) g *= 1.0 / static_cast<double>(layer.example_count);
    switch (cfg.regularizer) {
        case Regularizer::offdiag_scale: return scale_offdiagonal(g, cfg.alpha);
        case Regularizer::additive:
            for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) += cfg.beta;
            return g;
        case Regularizer::diag_ridge:
            for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) += cfg.gamma * g(i, i);
            return g;
    }
    return g;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

MergeResult merge_simple(std::span<const NamedTensorMap> models, const MergeConfig& cfg) {
    Plan plan = plan_merge(models, cfg);
    std::vector<double> weights;
    if (cfg.weights_override) {
        if (cfg.weights_override->size() != models.size())
            throw ValidationError("weights_override has " + std::to_string(cfg.weights_override->size()) +
                                  " entries for " + std::to_string(models.size()) + " models");
        const double sum = std::accumulate(cfg.weights_override->begin(), cfg.weights_override->end(), 0.0);
        for (double w : *cfg.weights_override) weights.push_back(w / sum);
    }
    if (models.size() == 1) return copy_single(models[0], std::move(plan), cfg, "simple");

    MergeResult r;
    r.merged = start_output(models, cfg);
    for (const auto& key : plan.keys) {
        r.merged.insert(key, Tensor(models[0].at(key).shape, output_dtype(models, key),
                                    simple_mean(models, key, weights.empty() ? nullptr : &weights)));
        plan.report.key_method[key] = "simple";
    }
    r.report = std::move(plan.report);
    return r;
}

MergeResult merge_fisher(std::span<const NamedTensorMap> models, std::span<const FisherStats> fishers,
                         const MergeConfig& cfg) {
    Plan plan = plan_merge(models, cfg);
    if (fishers.size() != models.size())
        throw MissingStatsError("fisher merge needs one Fisher file per model (got " + std::to_string(fishers.size()) +
                                " for " + std::to_string(models.size()) + " models)");
    for (std::size_t k = 0; k < models.size(); ++k) validate(fishers[k], &models[k]);
    if (models.size() == 1) return copy_single(models[0], std::move(plan), cfg, "fisher");

    constexpr double kFloor = 1e-12;
    MergeResult r;
    r.merged = start_output(models, cfg);
    for (const auto& key : plan.keys) {
        const bool covered = std::all_of(fishers.begin(), fishers.end(),
                                         [&](const FisherStats& f) { return f.diag.contains(key); });
        std::vector<double> mean = simple_mean(models, key, nullptr);
        std::string method = "simple_fallback";
        if (covered) {
            method = "fisher";
            for (std::size_t i = 0; i < mean.size(); ++i) {
                double num = 0.0, den = 0.0;
                for (std::size_t k = 0; k < models.size(); ++k) {
                    const double f = fishers[k].diag.at(key).values[i];
                    num += f * models[k].at(key).values[i];
                    den += f;
                }
                if (den >= kFloor) mean[i] = num / den;
                else method = "fisher_partial_fallback";
            }
        }
        r.merged.insert(key, Tensor(models[0].at(key).shape, output_dtype(models, key), std::move(mean)));
        plan.report.key_method[key] = method;
    }
    r.report = std::move(plan.report);
    return r;
}

MergeResult merge_regmean(std::span<const NamedTensorMap> models, std::span<const GramStats> grams,
                          const MergeConfig& cfg) {
    Plan plan = plan_merge(models, cfg);
    if (grams.size() != models.size())
        throw MissingStatsError("regmean needs one Gram file per model (got " + std::to_string(grams.size()) +
                                " for " + std::to_string(models.size()) + " models)");
    for (const auto& g : grams) validate(g);

    std::vector<std::string> linear;
    auto md = models[0].metadata.find("linear_layers");
    if (md != models[0].metadata.end()) {
        linear = split_commas(md->second);
    } else {
        std::set<std::string> names;
        for (const auto& g : grams)
            for (const auto& [layer, _] : g.layers) names.insert(layer);
        linear.assign(names.begin(), names.end());
    }
    const std::set<std::string> key_set(plan.keys.begin(), plan.keys.end());
    std::erase_if(linear, [&](const std::string& l) { return !key_set.count(l + ".weight"); });
    std::sort(linear.begin(), linear.end());

    for (const auto& layer : linear) {
        const Tensor& w = models[0].at(layer + ".weight");
        if (w.shape.size() != 2) throw ShapeError("linear layer '" + layer + "' weight is not 2-D");
        for (std::size_t k = 0; k < grams.size(); ++k) {
            auto it = grams[k].layers.find(layer);
            if (it == grams[k].layers.end())
                throw MissingStatsError("no Gram matrix for layer '" + layer + "' of model " +
                                        plan.report.model_ids[k]);
            if (it->second.gram_sum.rows() != w.shape[0])
                throw ShapeError("Gram for layer '" + layer + "' is " + shape_string(it->second.gram_sum) +
                                 " but the weight has " + std::to_string(w.shape[0]) + " input rows");
        }
    }
    if (models.size() == 1) {
        MergeResult r = copy_single(models[0], std::move(plan), cfg, "simple");
        for (const auto& layer : linear) r.report.key_method[layer + ".weight"] = "regmean";
        return r;
    }

    std::vector<SpdSolveResult> solved(linear.size());
    std::vector<std::exception_ptr> failures(linear.size());
    const long n_layers = static_cast<long>(linear.size());
#pragma omp parallel for schedule(dynamic)
    for (long j = 0; j < n_layers; ++j) {
        try {
            const std::string& layer = linear[static_cast<std::size_t>(j)];
            Matrix a, b;
            for (std::size_t k = 0; k < models.size(); ++k) {
                const Matrix g = regularized_gram(grams[k].layers.at(layer), cfg);
                const Matrix gw = matmul(g, models[k].at(layer + ".weight").to_matrix());
                if (k == 0) {
                    a = g;
                    b = gw;
                } else {
                    a += g;
                    b += gw;
                }
            }
            solved[static_cast<std::size_t>(j)] = spd_solve(a, b);
        } catch (...) {
            failures[static_cast<std::size_t>(j)] = std::current_exception();
        }
    }
    for (std::size_t j = 0; j < linear.size(); ++j) {
        if (!failures[j]) continue;
        try {
            std::rethrow_exception(failures[j]);
        } catch (const SingularSystemError& e) {
            throw SingularSystemError("layer '" + linear[j] + "': " + e.what());
        }
    }

    std::map<std::string, std::size_t> solved_index;
    for (std::size_t j = 0; j < linear.size(); ++j) solved_index[linear[j] + ".weight"] = j;

    MergeResult r;
    r.merged = start_output(models, cfg);
    for (const auto& key : plan.keys) {
        auto it = solved_index.find(key);
        if (it == solved_index.end()) {
            r.merged.insert(key, Tensor(models[0].at(key).shape, output_dtype(models, key),
                                        simple_mean(models, key, nullptr)));
            plan.report.key_method[key] = "simple";
            continue;
        }
        SpdSolveResult& s = solved[it->second];
        r.merged.insert(key, Tensor(models[0].at(key).shape, output_dtype(models, key), std::move(s.x).release()));
        plan.report.key_method[key] = "regmean";
        plan.report.solves[linear[it->second]] = s.report;
    }
    r.report = std::move(plan.report);
    return r;
}

MergeResult merge(std::span<const NamedTensorMap> models, std::span<const GramStats> grams,
                  std::span<const FisherStats> fishers, const MergeConfig& cfg) {
    switch (cfg.algorithm) {
        case MergeAlgorithm::simple: return merge_simple(models, cfg);
        case MergeAlgorithm::fisher: return merge_fisher(models, fishers, cfg);
        case MergeAlgorithm::regmean: return merge_regmean(models, grams, cfg);
    }
    throw ValidationError("unknown merge algorithm");
}

double eval_merge_objective(const Matrix& w, std::span<const Matrix> weights, std::span<const Matrix> grams) {
    if (weights.size() != grams.size()) throw ShapeError("objective: weight and Gram counts differ");
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].rows() != w.rows() || weights[i].cols() != w.cols())
            throw ShapeError("objective: weight " + shape_string(weights[i]) + " vs " + shape_string(w));
        if (grams[i].rows() != w.rows() || !grams[i].square())
            throw ShapeError("objective: Gram " + shape_string(grams[i]) + " vs weight " + shape_string(w));
        const Matrix d = w - weights[i];
        const Matrix gd = matmul(grams[i], d);
        for (std::size_t e = 0; e < d.size(); ++e) total += d.data()[e] * gd.data()[e];
    }
    return total;
}

double eval_merge_objective(const Matrix& w, std::span<const NamedTensorMap> models,
                            std::span<const GramStats> grams, const std::string& layer) {
    if (models.size() != grams.size()) throw ShapeError("objective: model and Gram counts differ");
    std::vector<Matrix> ws, gs;
    for (std::size_t i = 0; i < models.size(); ++i) {
        ws.push_back(models[i].at(layer + ".weight").to_matrix());
        auto it = grams[i].layers.find(layer);
        if (it == grams[i].layers.end()) throw MissingStatsError("no Gram matrix for layer '" + layer + "'");
        gs.push_back(it->second.gram_sum);
    }
    return eval_merge_objective(w, ws, gs);
}

std::vector<int> ensemble_predict(std::span<const ModelInstance> models, const Matrix& x) {
    if (models.empty()) throw ValidationError("ensemble needs at least one model");
    Matrix sum;
    for (const auto& m : models) {
        const Matrix logits = forward(m, x).logits;
        if (sum.empty()) {
            sum = logits;
        } else {
            if (logits.cols() != sum.cols()) throw ShapeError("ensemble members disagree on the number of classes");
            sum += logits;
        }
    }
    sum *= 1.0 / static_cast<double>(models.size());
    return argmax_rows(sum);
}

json to_json(const GreedyResult& r) {
    json solo = json::array(), steps = json::array();
    for (const auto& [id, m] : r.solo) solo.push_back({{"id", id}, {"metric", m}});
    for (const auto& s : r.trajectory)
        steps.push_back({{"candidate", s.candidate}, {"subset", s.subset}, {"metric", s.metric}, {"accepted", s.accepted}});
    return json{{"solo", solo}, {"trajectory", steps}, {"accepted", r.accepted}, {"final_metric", r.final_metric}};
}

GreedyResult greedy_merge(std::span<const GreedyCandidate> candidates, const ModelEvaluator& evaluate,
                          const MergeConfig& cfg) {
    if (candidates.empty()) throw ValidationError("greedy merge needs at least one candidate");
    std::vector<double> solo(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) solo[i] = evaluate(candidates[i].model);
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return solo[a] > solo[b]; });

    GreedyResult out;
    for (std::size_t i : order) out.solo.emplace_back(candidates[i].id, solo[i]);
    const GreedyCandidate& anchor = candidates[order[0]];
    std::vector<std::size_t> subset{order[0]};
    out.accepted = {anchor.id};
    out.final_metric = solo[order[0]];
    out.merged = anchor.model.params;
    out.trajectory.push_back({anchor.id, out.accepted, out.final_metric, true});

    for (std::size_t pos = 1; pos < order.size(); ++pos) {
        std::vector<std::size_t> trial = subset;
        trial.push_back(order[pos]);
        std::vector<NamedTensorMap> models;
        std::vector<GramStats> grams;
        std::vector<FisherStats> fishers;
        std::vector<std::string> ids;
        for (std::size_t i : trial) {
            models.push_back(candidates[i].model.params);
            if (candidates[i].gram) grams.push_back(*candidates[i].gram);
            if (candidates[i].fisher) fishers.push_back(*candidates[i].fisher);
            ids.push_back(candidates[i].id);
        }
        MergeResult merged = merge(models, grams, fishers, cfg);
        // Excluded keys keep the anchor's values so the candidate stays evaluable.
        NamedTensorMap full = anchor.model.params;
        for (const auto& [name, t] : merged.merged.entries()) full.set(name, t);
        const double metric = evaluate(with_params(anchor.model, full));
        const bool accept = metric >= out.final_metric;
        out.trajectory.push_back({candidates[order[pos]].id, ids, metric, accept});
        if (accept) {
            subset = std::move(trial);
            out.accepted = std::move(ids);
            out.final_metric = metric;
            out.merged = std::move(full);
        }
    }
    return out;
}

}  // namespace regmerge
