#pragma once

// Releasable statistics: per-linear-layer Gram sums and the expected-Fisher
// diagonal. Both are computed from private data and shipped without it.

#include <cstddef>
#include <cstdint>

#include <json.hpp>

#include "regmerge/dataset.hpp"
#include "regmerge/model.hpp"
#include "regmerge/tensor_io.hpp"

namespace regmerge {

struct CollectConfig {
    std::size_t batch_size = 32;
    std::size_t max_batches = 1000;
    /// Fixes the (single) order in which examples are visited.
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const CollectConfig& c);
CollectConfig collect_config_from_json(const nlohmann::json& j);

/// The examples a collection run visits: a seeded permutation of the data,
/// truncated to batch_size·max_batches.
std::vector<std::size_t> collection_order(std::size_t n, const CollectConfig& cfg);

/// Σ x xᵀ of every linear layer's inputs over the visited examples, in 64-bit.
/// example_count is the number of examples (mini-transformer per-token
/// layers see seq_len rows per example).
GramStats collect_gram(const ModelInstance& model, const Dataset& data, const CollectConfig& cfg);

/// Expected Fisher diagonal under the model's own predictive distribution,
/// by exact enumeration of the classes, averaged over the visited examples.
/// Sigmoid (multi-label) models use one Bernoulli per class, which reduces to
/// Σ_c s_c(1−s_c)·(∂z_c/∂θ)². Single-output models have no class
/// distribution and are rejected with ValidationError.
FisherStats collect_fisher(const ModelInstance& model, const Dataset& data, const CollectConfig& cfg);

}  // namespace regmerge
