#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "regmerge/linalg.hpp"

namespace regmerge {

/// Labelled examples: one row of `x` per example.
///
/// Single-label data uses `y` (class ids in [0, num_classes)). Multi-label
/// data additionally carries `targets`, a 0/1 matrix of shape n×num_classes;
/// `y` then holds the lowest positive class (or 0) for bookkeeping only.
struct Dataset {
    Matrix x;
    std::vector<int> y;
    std::size_t num_classes = 0;
    std::optional<Matrix> targets;

    std::size_t size() const noexcept { return y.size(); }
    bool multi_label() const noexcept { return targets.has_value(); }

    Dataset subset(std::span<const std::size_t> indices) const;
    /// Rows [begin, end).
    Dataset slice(std::size_t begin, std::size_t end) const;
    static Dataset concat(std::span<const Dataset> parts);

    /// Throws ValidationError/ShapeError when fields disagree.
    void validate() const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

nlohmann::json to_json(const Dataset& d);
Dataset dataset_from_json(const nlohmann::json& j);
void write_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace regmerge
