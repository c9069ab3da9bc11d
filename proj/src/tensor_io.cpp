#include "regmerge/tensor_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "regmerge/error.hpp"

namespace regmerge {

using nlohmann::json;

const char* to_string(ParseErrorKind kind) {
    switch (kind) {
        case ParseErrorKind::io: return "io error";
        case ParseErrorKind::malformed_header: return "malformed header";
        case ParseErrorKind::duplicate_key: return "duplicate header key";
        case ParseErrorKind::truncated_payload: return "truncated payload";
        case ParseErrorKind::shape_mismatch: return "shape/length mismatch";
        case ParseErrorKind::unknown_dtype: return "unknown dtype";
        case ParseErrorKind::wrong_kind: return "wrong file kind";
    }
    return "parse error";
}

const char* to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }
std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

static std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape_, DType dtype_, std::vector<double> values_)
    : shape(std::move(shape_)), dtype(dtype_), values(std::move(values_)) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("tensor shape product " + std::to_string(shape_numel(shape)) +
                         " != data length " + std::to_string(values.size()));
    if (dtype == DType::f32)
        for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

Tensor Tensor::from_matrix(const Matrix& m, DType dtype) {
    return Tensor({m.rows(), m.cols()}, dtype, m.values());
}

Tensor Tensor::vector(std::vector<double> v, DType dtype) {
    const std::size_t n = v.size();
    return Tensor({n}, dtype, std::move(v));
}

std::size_t Tensor::numel() const { return shape_numel(shape); }

Matrix Tensor::to_matrix() const {
    if (shape.size() == 2) return Matrix(shape[0], shape[1], values);
    if (shape.size() == 1) return Matrix(1, shape[0], values);
    throw ShapeError("tensor of rank " + std::to_string(shape.size()) + " is not a matrix");
}

bool valid_tensor_name(std::string_view name) {
    if (name.empty()) return false;
    return std::all_of(name.begin(), name.end(), [](char c) {
        return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' ||
               c == '.';
    });
}

bool NamedTensorMap::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const Tensor* NamedTensorMap::find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& NamedTensorMap::at(std::string_view name) const {
    if (const Tensor* t = find(name)) return *t;
    throw ValidationError("no tensor named '" + std::string(name) + "'");
}

Tensor& NamedTensorMap::at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no tensor named '" + std::string(name) + "'");
    return entries_[it->second].second;
}

void NamedTensorMap::insert(std::string name, Tensor t) {
    if (!valid_tensor_name(name)) throw ValidationError("invalid tensor name '" + name + "'");
    if (contains(name)) throw ValidationError("duplicate tensor name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
}

void NamedTensorMap::set(std::string name, Tensor t) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        insert(std::move(name), std::move(t));
        return;
    }
    entries_[it->second].second = std::move(t);
}

std::vector<std::string> NamedTensorMap::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.push_back(name);
    return out;
}

void validate(const GramStats& g) {
    for (const auto& [name, layer] : g.layers) {
        const Matrix& m = layer.gram_sum;
        if (!m.square()) throw ValidationError("gram '" + name + "' is not square");
        if (layer.example_count == 0) throw ValidationError("gram '" + name + "' has example_count 0");
        if (!m.all_finite()) throw ValidationError("gram '" + name + "' has non-finite entries");
        const double scale = m.max_abs();
        for (std::size_t i = 0; i < m.rows(); ++i) {
            if (m(i, i) < 0.0) throw ValidationError("gram '" + name + "' has a negative diagonal entry");
            for (std::size_t j = i + 1; j < m.cols(); ++j)
                if (std::abs(m(i, j) - m(j, i)) > 1e-9 * scale)
                    throw ValidationError("gram '" + name + "' is not symmetric");
        }
    }
}

void validate(const FisherStats& f, const NamedTensorMap* checkpoint) {
    for (const auto& [name, t] : f.diag.entries()) {
        for (double v : t.values)
            if (!(v >= 0.0)) throw ValidationError("fisher '" + name + "' has a negative or NaN entry");
        if (checkpoint) {
            const Tensor* p = checkpoint->find(name);
            if (!p) throw ValidationError("fisher key '" + name + "' is not in the checkpoint");
            if (p->shape != t.shape) throw ShapeError("fisher '" + name + "' shape differs from parameter");
        }
    }
}

// ---------------------------------------------------------------------------
// Binary encoding

namespace {

constexpr int kFormatVersion = 1;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_values(std::vector<std::uint8_t>& out, const std::vector<double>& values, DType dtype) {
    if (dtype == DType::f64) {
        for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
        return;
    }
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

std::vector<double> get_values(const std::uint8_t* p, std::size_t count, DType dtype) {
    std::vector<double> out(count);
    if (dtype == DType::f64) {
        for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<double>(get_u64(p + 8 * i));
        return out;
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
        out[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return out;
}

struct RawEntry {
    std::string name;
    Tensor tensor;
    json extra = json::object();
};

struct RawFile {
    std::string kind;
    std::map<std::string, std::string> metadata;
    json attributes = json::object();
    std::vector<RawEntry> entries;
};

std::vector<std::uint8_t> encode_raw(const RawFile& file) {
    json header;
    header["format"] = "regmerge";
    header["version"] = kFormatVersion;
    header["kind"] = file.kind;
    header["metadata"] = file.metadata;
    for (const auto& [k, v] : file.attributes.items()) header[k] = v;

    json entries = json::array();
    std::uint64_t offset = 0;
    for (const auto& e : file.entries) {
        const std::uint64_t length = e.tensor.numel() * dtype_size(e.tensor.dtype);
        json j = e.extra;
        j["name"] = e.name;
        j["dtype"] = to_string(e.tensor.dtype);
        j["shape"] = e.tensor.shape;
        j["offset"] = offset;
        j["length"] = length;
        entries.push_back(std::move(j));
        offset += length;
    }
    header["entries"] = std::move(entries);

    const std::string text = header.dump();
    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& e : file.entries) put_values(out, e.tensor.values, e.tensor.dtype);
    return out;
}

// Parses JSON and rejects any object carrying the same key twice.
json parse_header_json(std::string_view text) {
    std::vector<std::set<std::string>> seen;
    std::string duplicate;
    json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
        switch (event) {
            case json::parse_event_t::object_start: seen.emplace_back(); break;
            case json::parse_event_t::object_end:
                if (!seen.empty()) seen.pop_back();
                break;
            case json::parse_event_t::key: {
                const auto key = parsed.get<std::string>();
                if (!seen.empty() && !seen.back().insert(key).second && duplicate.empty()) duplicate = key;
                break;
            }
            default: break;
        }
        return true;
    };
    json header;
    try {
        header = json::parse(text.begin(), text.end(), cb);
    } catch (const json::exception& e) {
        throw ParseError(ParseErrorKind::malformed_header, e.what());
    }
    if (!duplicate.empty()) throw ParseError(ParseErrorKind::duplicate_key, "key '" + duplicate + "'");
    return header;
}

template <typename T>
T header_get(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(ParseErrorKind::malformed_header, std::string("missing '") + key + "'");
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ParseError(ParseErrorKind::malformed_header, std::string("bad '") + key + "': " + e.what());
    }
}

RawFile decode_raw(std::span<const std::uint8_t> bytes, std::string_view expected_kind) {
    if (bytes.size() < 8) throw ParseError(ParseErrorKind::truncated_payload, "file shorter than 8 bytes");
    const std::uint64_t header_len = get_u64(bytes.data());
    if (header_len > bytes.size() - 8)
        throw ParseError(ParseErrorKind::malformed_header,
                         "header length " + std::to_string(header_len) + " exceeds file size");
    const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
    const json header = parse_header_json(text);
    if (!header.is_object()) throw ParseError(ParseErrorKind::malformed_header, "header is not an object");

    if (header_get<std::string>(header, "format") != "regmerge")
        throw ParseError(ParseErrorKind::malformed_header, "not a regmerge file");
    if (header_get<int>(header, "version") != kFormatVersion)
        throw ParseError(ParseErrorKind::malformed_header, "unsupported version");

    RawFile file;
    file.kind = header_get<std::string>(header, "kind");
    if (!expected_kind.empty() && file.kind != expected_kind)
        throw ParseError(ParseErrorKind::wrong_kind,
                         "expected '" + std::string(expected_kind) + "', found '" + file.kind + "'");
    file.metadata = header_get<std::map<std::string, std::string>>(header, "metadata");
    for (const auto& [k, v] : header.items())
        if (k != "format" && k != "version" && k != "kind" && k != "metadata" && k != "entries")
            file.attributes[k] = v;

    const auto payload = bytes.subspan(8 + header_len);
    const auto entries_it = header.find("entries");
    if (entries_it == header.end()) throw ParseError(ParseErrorKind::malformed_header, "missing 'entries'");
    const json& entries = *entries_it;
    if (!entries.is_array()) throw ParseError(ParseErrorKind::malformed_header, "'entries' is not an array");
    std::set<std::string> names;
    for (const json& e : entries) {
        if (!e.is_object()) throw ParseError(ParseErrorKind::malformed_header, "entry is not an object");
        RawEntry raw;
        raw.name = header_get<std::string>(e, "name");
        if (!valid_tensor_name(raw.name))
            throw ParseError(ParseErrorKind::malformed_header, "invalid tensor name '" + raw.name + "'");
        if (!names.insert(raw.name).second)
            throw ParseError(ParseErrorKind::malformed_header, "duplicate tensor name '" + raw.name + "'");
        const auto dtype_name = header_get<std::string>(e, "dtype");
        DType dtype;
        if (dtype_name == "f32") dtype = DType::f32;
        else if (dtype_name == "f64") dtype = DType::f64;
        else throw ParseError(ParseErrorKind::unknown_dtype, "'" + dtype_name + "' for '" + raw.name + "'");
        const auto shape = header_get<std::vector<std::size_t>>(e, "shape");
        const auto offset = header_get<std::uint64_t>(e, "offset");
        const auto length = header_get<std::uint64_t>(e, "length");
        const std::size_t numel = shape_numel(shape);
        if (length != numel * dtype_size(dtype))
            throw ParseError(ParseErrorKind::shape_mismatch, "'" + raw.name + "' declares " +
                                                                 std::to_string(length) + " bytes for " +
                                                                 std::to_string(numel) + " elements");
        if (offset > payload.size() || length > payload.size() - offset)
            throw ParseError(ParseErrorKind::truncated_payload, "'" + raw.name + "' extends past end of file");
        auto values = get_values(payload.data() + offset, numel, dtype);
        raw.tensor = Tensor(shape, dtype, std::move(values));
        for (const auto& [k, v] : e.items())
            if (k != "name" && k != "dtype" && k != "shape" && k != "offset" && k != "length") raw.extra[k] = v;
        file.entries.push_back(std::move(raw));
    }
    return file;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensorMap& map) {
    RawFile file;
    file.kind = "checkpoint";
    file.metadata = map.metadata;
    for (const auto& [name, t] : map.entries()) file.entries.push_back({name, t});
    return encode_raw(file);
}

NamedTensorMap decode_checkpoint(std::span<const std::uint8_t> bytes) {
    RawFile file = decode_raw(bytes, "checkpoint");
    NamedTensorMap map;
    map.metadata = std::move(file.metadata);
    for (auto& e : file.entries) map.insert(std::move(e.name), std::move(e.tensor));
    return map;
}

std::vector<std::uint8_t> encode_gram(const GramStats& stats) {
    RawFile file;
    file.kind = "gram";
    file.metadata = stats.metadata;
    file.attributes["batch_cap"] = stats.batch_cap;
    for (const auto& [name, layer] : stats.layers) {
        RawEntry e{name, Tensor::from_matrix(layer.gram_sum, DType::f64)};
        e.extra["example_count"] = layer.example_count;
        file.entries.push_back(std::move(e));
    }
    return encode_raw(file);
}

GramStats decode_gram(std::span<const std::uint8_t> bytes) {
    RawFile file = decode_raw(bytes, "gram");
    GramStats stats;
    stats.metadata = std::move(file.metadata);
    stats.batch_cap = header_get<std::uint64_t>(file.attributes, "batch_cap");
    for (auto& e : file.entries) {
        if (e.tensor.shape.size() != 2 || e.tensor.shape[0] != e.tensor.shape[1])
            throw ParseError(ParseErrorKind::shape_mismatch, "gram '" + e.name + "' is not a square matrix");
        GramStats::Layer layer;
        layer.gram_sum = e.tensor.to_matrix();
        layer.example_count = header_get<std::uint64_t>(e.extra, "example_count");
        stats.layers.emplace(e.name, std::move(layer));
    }
    return stats;
}

std::vector<std::uint8_t> encode_fisher(const FisherStats& stats) {
    RawFile file;
    file.kind = "fisher";
    file.metadata = stats.diag.metadata;
    file.attributes["example_count"] = stats.example_count;
    for (const auto& [name, t] : stats.diag.entries()) file.entries.push_back({name, t});
    return encode_raw(file);
}

FisherStats decode_fisher(std::span<const std::uint8_t> bytes) {
    RawFile file = decode_raw(bytes, "fisher");
    FisherStats stats;
    stats.diag.metadata = std::move(file.metadata);
    stats.example_count = header_get<std::uint64_t>(file.attributes, "example_count");
    for (auto& e : file.entries) stats.diag.insert(std::move(e.name), std::move(e.tensor));
    return stats;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(ParseErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw ParseError(ParseErrorKind::io, "read failed for " + path.string());
    return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_checkpoint(const NamedTensorMap& map, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(map));
}
NamedTensorMap read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }
void write_gram(const GramStats& stats, const std::filesystem::path& path) {
    write_file_atomic(path, encode_gram(stats));
}
GramStats read_gram(const std::filesystem::path& path) { return decode_gram(read_file_bytes(path)); }
void write_fisher(const FisherStats& stats, const std::filesystem::path& path) {
    write_file_atomic(path, encode_fisher(stats));
}
FisherStats read_fisher(const std::filesystem::path& path) { return decode_fisher(read_file_bytes(path)); }

std::string peek_kind(const std::filesystem::path& path) { return decode_raw(read_file_bytes(path), "").kind; }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed");
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

}  // namespace regmerge
