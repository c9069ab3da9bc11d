#pragma once

// Parametric synthetic classification tasks with controllable domain shift,
// and the key-class non-iid partitioner.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "regmerge/dataset.hpp"

namespace regmerge {

enum class Generator { gaussian_blobs, rotated_blobs, moon_mixtures };

const char* to_string(Generator g);
Generator generator_from_string(const std::string& s);

/// How one domain departs from the shared class geometry.
struct DomainShift {
    /// Added to every example; empty means no offset.
    std::vector<double> mean_offset;
    /// Radians, applied to coordinate pairs (0,1), (2,3), ... (rotated_blobs only).
    double rotation = 0.0;
    /// Class sampling probabilities; empty means uniform.
    std::vector<double> class_prior;
};

struct SyntheticTask {
    std::string name = "task";
    Generator generator = Generator::gaussian_blobs;
    std::size_t input_dim = 8;
    std::size_t num_classes = 4;
    DomainShift shift;
    std::size_t train = 1000, val = 200, test = 500;
    /// Draws the class geometry; domains of one task share it.
    std::uint64_t task_seed = 0;
    /// Draws the examples.
    std::uint64_t seed = 0;
    double separation = 3.0;
    double noise = 1.0;

    void validate() const;
};

nlohmann::json to_json(const SyntheticTask& t);
SyntheticTask synthetic_task_from_json(const nlohmann::json& j);

struct TaskSplits {
    Dataset train, val, test;
};

/// Examples are drawn in one sequence (train, then val, then test), so the
/// splits never share a draw and regenerate bit-exactly from the seeds.
TaskSplits generate(const SyntheticTask& task);

struct PartitionSpec {
    /// nullopt draws the key class at random.
    std::optional<int> key_class;
    double key_fraction = 0.8;
    std::size_t partition_size = 1000;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const PartitionSpec& p);
PartitionSpec partition_spec_from_json(const nlohmann::json& j);

struct Partitions {
    Dataset first, second;
    int key_class = 0;
    /// Key-class examples in `first` before subsampling.
    std::size_t key_in_first = 0;
};

/// key_fraction of the key class goes to the first partition and everything
/// else to the second; non-key examples then move (uniformly, without
/// replacement) from the larger side until both sides are equal, and each
/// side is subsampled to partition_size.
Partitions make_noniid_partitions(const Dataset& data, const PartitionSpec& spec);

}  // namespace regmerge
