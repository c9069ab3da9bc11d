#pragma once

// Simple, Fisher-weighted and RegMean merging of checkpoints that share an
// initialisation, plus logit ensembling and greedy subset merging.

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "regmerge/linalg.hpp"
#include "regmerge/model.hpp"
#include "regmerge/tensor_io.hpp"

namespace regmerge {

enum class MergeAlgorithm { simple, fisher, regmean };

/// How each Gram matrix G is regularised before the RegMean solve.
///   offdiag_scale: α·G + (1−α)·diag(G)
///   additive:      G + β·I
///   diag_ridge:    G + γ·diag(G)   (same solution as offdiag_scale at α = 1/(1+γ))
enum class Regularizer { offdiag_scale, additive, diag_ridge };

const char* to_string(MergeAlgorithm a);
const char* to_string(Regularizer r);
MergeAlgorithm merge_algorithm_from_string(const std::string& s);
Regularizer regularizer_from_string(const std::string& s);

struct MergeConfig {
    MergeAlgorithm algorithm = MergeAlgorithm::regmean;
    Regularizer regularizer = Regularizer::offdiag_scale;
    double alpha = 0.9;
    double beta = 0.0;
    double gamma = 0.0;
    /// Divide each Gram by its example count first, so models count equally
    /// regardless of how much data they saw.
    bool normalize_gram_per_example = false;
    /// fnmatch-style globs; matching keys are left out of the merged checkpoint.
    std::vector<std::string> exclude_patterns;
    /// Per-model weights for simple averaging, normalised to sum to one.
    std::optional<std::vector<double>> weights_override;

    void validate() const;
};

nlohmann::json to_json(const MergeConfig& c);
MergeConfig merge_config_from_json(const nlohmann::json& j);

struct MergeReport {
    std::string algorithm;
    std::vector<std::string> model_ids;
    /// Method actually used per merged key: regmean, fisher, simple or simple_fallback.
    std::map<std::string, std::string> key_method;
    std::vector<std::string> excluded;
    std::map<std::string, SpdSolveReport> solves;
};

nlohmann::json to_json(const MergeReport& r);

struct MergeResult {
    NamedTensorMap merged;
    MergeReport report;
};

MergeResult merge_simple(std::span<const NamedTensorMap> models, const MergeConfig& cfg);

/// θ = Σ F_i⊙θ_i / Σ F_i per entry. Entries whose Fisher sum is below 1e-12,
/// or keys with no Fisher at all, fall back to the simple mean.
MergeResult merge_fisher(std::span<const NamedTensorMap> models, std::span<const FisherStats> fishers,
                         const MergeConfig& cfg);

/// Per linear layer W = (Σ G̃_i)⁻¹ Σ G̃_i W_i; every other key is averaged.
/// The linear layers come from the `linear_layers` checkpoint metadata, or
/// from the Gram files when that key is absent.
MergeResult merge_regmean(std::span<const NamedTensorMap> models, std::span<const GramStats> grams,
                          const MergeConfig& cfg);

/// Dispatches on cfg.algorithm; unused stats may be empty.
MergeResult merge(std::span<const NamedTensorMap> models, std::span<const GramStats> grams,
                  std::span<const FisherStats> fishers, const MergeConfig& cfg);

/// Σ_i tr((W − W_i)ᵀ G_i (W − W_i)), the summed squared output distance.
double eval_merge_objective(const Matrix& w, std::span<const Matrix> weights, std::span<const Matrix> grams);
double eval_merge_objective(const Matrix& w, std::span<const NamedTensorMap> models,
                            std::span<const GramStats> grams, const std::string& layer);

/// argmax of the mean logits; ties go to the lowest class index.
std::vector<int> ensemble_predict(std::span<const ModelInstance> models, const Matrix& x);

struct GreedyCandidate {
    std::string id;
    ModelInstance model;
    std::optional<GramStats> gram;
    std::optional<FisherStats> fisher;
};

struct GreedyStep {
    std::string candidate;
    std::vector<std::string> subset;
    double metric = 0.0;
    bool accepted = false;
};

struct GreedyResult {
    /// Solo metric per candidate, in visiting order (best first).
    std::vector<std::pair<std::string, double>> solo;
    /// First entry is the best single model; later entries are tentative merges.
    std::vector<GreedyStep> trajectory;
    std::vector<std::string> accepted;
    double final_metric = 0.0;
    NamedTensorMap merged;
};

nlohmann::json to_json(const GreedyResult& r);

using ModelEvaluator = std::function<double(const ModelInstance&)>;

/// Visits candidates by descending solo metric (stable) and keeps a candidate
/// when the merged validation metric does not decrease.
GreedyResult greedy_merge(std::span<const GreedyCandidate> candidates, const ModelEvaluator& evaluate,
                          const MergeConfig& cfg);

}  // namespace regmerge
