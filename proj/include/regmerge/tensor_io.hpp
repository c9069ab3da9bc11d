#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "regmerge/linalg.hpp"

namespace regmerge {

enum class DType { f32, f64 };

const char* to_string(DType d);
std::size_t dtype_size(DType d);

/// A dense tensor of rank ≥ 0. Values are held as doubles; f32 tensors hold
/// values that are exactly representable as float (rounded on construction).
struct Tensor {
    std::vector<std::size_t> shape;
    DType dtype = DType::f64;
    std::vector<double> values;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, DType dtype, std::vector<double> values);

    static Tensor from_matrix(const Matrix& m, DType dtype = DType::f64);
    static Tensor vector(std::vector<double> v, DType dtype = DType::f64);

    std::size_t numel() const;
    /// 2-D view as a matrix copy; rank-1 tensors become a 1×n row.
    Matrix to_matrix() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Checkpoint: ordered (name → tensor) entries plus string metadata.
class NamedTensorMap {
public:
    using Entry = std::pair<std::string, Tensor>;

    bool contains(std::string_view name) const;
    const Tensor& at(std::string_view name) const;
    Tensor& at(std::string_view name);
    const Tensor* find(std::string_view name) const;

    /// Appends a new entry; the name must be valid and not present.
    void insert(std::string name, Tensor t);
    /// Replaces an existing entry's tensor in place or appends a new one.
    void set(std::string name, Tensor t);

    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::vector<std::string> names() const;
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::map<std::string, std::string> metadata;

    friend bool operator==(const NamedTensorMap& a, const NamedTensorMap& b) {
        return a.entries_ == b.entries_ && a.metadata == b.metadata;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

/// Names must be non-empty and match [A-Za-z0-9_.]+.
bool valid_tensor_name(std::string_view name);

/// Per-linear-layer inner-product matrices Σ x xᵀ, releasable without the data.
struct GramStats {
    struct Layer {
        Matrix gram_sum;
        std::uint64_t example_count = 0;
        friend bool operator==(const Layer&, const Layer&) = default;
    };
    std::map<std::string, Layer> layers;
    std::uint64_t batch_cap = 0;
    std::map<std::string, std::string> metadata;

    friend bool operator==(const GramStats&, const GramStats&) = default;
};

/// Diagonal Fisher estimate per parameter (same shapes as the checkpoint).
struct FisherStats {
    NamedTensorMap diag;
    std::uint64_t example_count = 0;

    friend bool operator==(const FisherStats&, const FisherStats&) = default;
};

/// Checks the GramStats invariants: square symmetric gram (1e-9 relative),
/// non-negative diagonal, positive example counts. Throws ValidationError.
void validate(const GramStats& g);
/// Non-negative entries; when a checkpoint is given, keys must be a subset of its keys.
void validate(const FisherStats& f, const NamedTensorMap* checkpoint = nullptr);

// File format shared by .ckpt/.gram/.fisher:
//   u64 LE header length | UTF-8 JSON header | payload of LE IEEE-754 values.
// The header lists {name, dtype, shape, offset, length} per entry (offsets
// relative to the payload start) and a string metadata map.

std::vector<std::uint8_t> encode_checkpoint(const NamedTensorMap& map);
NamedTensorMap decode_checkpoint(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_gram(const GramStats& stats);
GramStats decode_gram(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_fisher(const FisherStats& stats);
FisherStats decode_fisher(std::span<const std::uint8_t> bytes);

void write_checkpoint(const NamedTensorMap& map, const std::filesystem::path& path);
NamedTensorMap read_checkpoint(const std::filesystem::path& path);
void write_gram(const GramStats& stats, const std::filesystem::path& path);
GramStats read_gram(const std::filesystem::path& path);
void write_fisher(const FisherStats& stats, const std::filesystem::path& path);
FisherStats read_fisher(const std::filesystem::path& path);

/// Which kind of file the header declares ("checkpoint", "gram" or "fisher").
std::string peek_kind(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Hex SHA-256 of a byte buffer / file.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace regmerge
