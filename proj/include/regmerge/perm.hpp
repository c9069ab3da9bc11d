#pragma once

// Hidden-unit permutation matching between two models, by weight distances
// or activation correlations, and function-preserving permutation of MLPs.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "regmerge/linalg.hpp"
#include "regmerge/merge.hpp"
#include "regmerge/model.hpp"

namespace regmerge {

/// mapping[i] is the unit of model B matched to unit i of model A.
struct Permutation {
    std::vector<std::size_t> mapping;

    static Permutation identity(std::size_t n);
    std::size_t size() const noexcept { return mapping.size(); }
    Permutation inverse() const;
    /// Fraction of fixed points.
    double identity_fraction() const;
    /// Throws ValidationError unless mapping is a bijection on 0..n-1.
    void validate() const;

    friend bool operator==(const Permutation&, const Permutation&) = default;
};

struct GroundMetric {
    Matrix matrix;
    std::string layer, model_a, model_b;
};

struct ActivationSimilarity {
    Matrix matrix;
    std::string layer;
};

/// M[i][j] = ‖wa[:,i] − wb[:,j]‖₂ over weight columns (one column per output unit).
GroundMetric weight_ground_metric(const Matrix& wa, const Matrix& wb);

/// C = Z_Aᵀ Z_B over the post-nonlinearity activations recorded for `layer`.
ActivationSimilarity activation_similarity(const ForwardTrace& a, const ForwardTrace& b, const std::string& layer);

enum class AssignmentMode { min_cost, max_similarity };

/// Optimal linear assignment (Hungarian algorithm, O(n³)). max_similarity is
/// solved as min_cost on (max − C).
Permutation solve_assignment(const Matrix& m, AssignmentMode mode);
/// Σ_i m[i][mapping[i]].
double assignment_value(const Matrix& m, const Permutation& p);

/// Reorders hidden layer `layer` of an MLP so that new unit i is old unit
/// mapping[i]: incoming weight columns and bias entries, and the rows of the
/// next layer's weight. The network function is unchanged. Only MLP hidden
/// layers (fc1..fcD) are supported; other layers feed residual streams.
ModelInstance apply_permutation(const ModelInstance& model, const std::string& layer, const Permutation& perm);

/// The same reordering applied to a map with the model's keys (e.g. a Fisher diagonal).
NamedTensorMap permute_params(const NamedTensorMap& params, const ModelSpec& spec, const std::string& layer,
                              const Permutation& perm);
/// Reorders the Gram of the layer fed by `layer`'s units.
GramStats permute_gram(const GramStats& gram, const ModelSpec& spec, const std::string& layer,
                       const Permutation& perm);

enum class MatchMethod { weight_based, activation_based };

const char* to_string(MatchMethod m);
MatchMethod match_method_from_string(const std::string& s);

struct MatchInputs {
    /// Probe examples for activation-based matching.
    std::optional<Matrix> probe;
    std::vector<GramStats> grams;      // {a, b} when merging with regmean
    std::vector<FisherStats> fishers;  // {a, b} when merging with fisher
};

struct MatchResult {
    MergeResult merge;
    std::map<std::string, Permutation> permutations;
    std::vector<GroundMetric> ground_metrics;
    std::vector<ActivationSimilarity> similarities;
};

/// Matches every hidden layer of b to a in forward order, permutes b (and its
/// stats) accordingly, then merges the pair with `cfg`.
MatchResult match_and_merge(const ModelInstance& a, const ModelInstance& b, MatchMethod method,
                            const MergeConfig& cfg, const MatchInputs& inputs = {});

/// Numeric grids for plotting: {layer, kind, model_a, model_b, rows, cols, matrix, permutation}.
nlohmann::json to_json(const MatchResult& r);

}  // namespace regmerge
