#pragma once

// Oracle run over the seeded benchmarks. Its output is checked in as
// tests/data/expectations.json and recomputed by the acceptance tests.

#include <filesystem>

#include <json.hpp>

namespace regmerge {

inline constexpr double kAlphaSweep[] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
inline constexpr std::size_t kBatchSweep[] = {1, 10, 100, 1000};

/// Benchmark reports (noniid, multidomain, sweep_alpha, sweep_batches,
/// greedy) and the golden pipeline run under `scratch`.
nlohmann::json compute_expectations(const std::filesystem::path& scratch);

/// Differences between two expectation documents: numbers beyond `tol`
/// absolute, any string or structural mismatch. Empty when they agree.
std::vector<std::string> compare_expectations(const nlohmann::json& expected, const nlohmann::json& actual,
                                              double tol);

}  // namespace regmerge
