#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regmerge/linalg.hpp"

namespace regmerge {

enum class MetricKind { accuracy, macro_f1, matthews };

const char* to_string(MetricKind k);
MetricKind metric_from_string(const std::string& s);

double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Unweighted mean of per-class F1 over the classes that occur in `labels`.
/// With `restrict_to`, only those classes (that also occur) are averaged.
double macro_f1(std::span<const int> predictions, std::span<const int> labels,
                std::optional<std::span<const int>> restrict_to = std::nullopt);

/// Multiclass Matthews correlation (Gorodkin's R_K); 0 when undefined.
double matthews(std::span<const int> predictions, std::span<const int> labels);

/// Dispatches on kind. Throws ValidationError on empty or mismatched inputs.
double metric(std::span<const int> predictions, std::span<const int> labels, MetricKind kind);

/// Macro-F1 over label columns for 0/1 prediction and target matrices,
/// averaging classes with at least one positive target.
double multilabel_macro_f1(const Matrix& predictions, const Matrix& targets);

}  // namespace regmerge
