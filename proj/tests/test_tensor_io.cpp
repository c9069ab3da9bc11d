#include <doctest.h>

#include <cstring>

#include "helpers.hpp"
#include "regmerge/error.hpp"
#include "regmerge/tensor_io.hpp"

using namespace regmerge;
using nlohmann::json;

namespace {

NamedTensorMap sample_checkpoint() {
    NamedTensorMap m;
    m.insert("fc1.weight", Tensor::from_matrix(testutil::random_matrix(3, 4, 1)));
    m.insert("fc1.bias", Tensor::vector({0.1, -0.2, 1e-300, -0.0}, DType::f64));
    m.insert("head.weight", Tensor::from_matrix(testutil::random_matrix(4, 2, 2), DType::f32));
    m.insert("scalar", Tensor({}, DType::f64, {3.5}));
    m.metadata = {{"architecture", "mlp"}, {"note", "ünïcode ✓"}};
    return m;
}

// Splits a file into its JSON header and payload.
std::pair<json, std::vector<std::uint8_t>> split(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | bytes[i];
    const std::string text(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    return {json::parse(text), std::vector<std::uint8_t>(bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n), bytes.end())};
}

std::vector<std::uint8_t> join(const std::string& header, const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> out(8);
    std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(n >> (8 * i));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

ParseErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_checkpoint(bytes);
    } catch (const ParseError& e) {
        return e.kind();
    }
    FAIL("decode succeeded");
    return ParseErrorKind::io;
}

}  // namespace

TEST_CASE("checkpoint round-trips bit-exact") {
    const NamedTensorMap m = sample_checkpoint();
    const auto bytes = encode_checkpoint(m);
    const NamedTensorMap back = decode_checkpoint(bytes);
    CHECK(back == m);
    CHECK(back.names() == m.names());
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(std::signbit(back.at("fc1.bias").values[3]));

    const auto dir = testutil::scratch_dir("tensor_io");
    write_checkpoint(m, dir / "m.ckpt");
    CHECK(read_checkpoint(dir / "m.ckpt") == m);
    CHECK(read_file_bytes(dir / "m.ckpt") == bytes);
    CHECK(peek_kind(dir / "m.ckpt") == "checkpoint");
    CHECK(sha256_file(dir / "m.ckpt") == sha256_hex(bytes));
}

TEST_CASE("f32 tensors hold float-representable values") {
    const Tensor t = Tensor::vector({0.1}, DType::f32);
    CHECK(t.values[0] == static_cast<double>(0.1f));
    CHECK(dtype_size(DType::f32) == 4);
    CHECK(dtype_size(DType::f64) == 8);
}

TEST_CASE("gram and fisher round-trip") {
    GramStats g;
    g.layers["fc1"] = {testutil::random_gram(3, 5, 3), 5};
    g.layers["head"] = {testutil::random_gram(4, 5, 4), 5};
    g.batch_cap = 1000;
    g.metadata["dataset"] = "d0";
    const auto gb = encode_gram(g);
    CHECK(decode_gram(gb) == g);
    CHECK(encode_gram(decode_gram(gb)) == gb);

    FisherStats f;
    f.diag.insert("fc1.weight", Tensor::from_matrix(Matrix(3, 4, 0.25)));
    f.example_count = 17;
    const auto fb = encode_fisher(f);
    CHECK(decode_fisher(fb) == f);

    const auto dir = testutil::scratch_dir("stats_io");
    write_gram(g, dir / "a.gram");
    write_fisher(f, dir / "a.fisher");
    CHECK(read_gram(dir / "a.gram") == g);
    CHECK(read_fisher(dir / "a.fisher") == f);
    CHECK(peek_kind(dir / "a.gram") == "gram");
    CHECK(peek_kind(dir / "a.fisher") == "fisher");
}

TEST_CASE("sha256 known answer") {
    const std::string abc = "abc";
    CHECK(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("parse errors are classified") {
    const auto bytes = encode_checkpoint(sample_checkpoint());
    auto [header, payload] = split(bytes);

    CHECK(kind_of({1, 2, 3}) == ParseErrorKind::truncated_payload);
    CHECK(kind_of(join("{not json", payload)) == ParseErrorKind::malformed_header);

    auto too_long = bytes;
    too_long[0] = 0xff;
    too_long[5] = 0x7f;
    CHECK(kind_of(too_long) == ParseErrorKind::malformed_header);

    std::string dup = header.dump();
    dup.insert(1, "\"kind\":\"checkpoint\",");
    CHECK(kind_of(join(dup, payload)) == ParseErrorKind::duplicate_key);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK(kind_of(truncated) == ParseErrorKind::truncated_payload);

    json bad_shape = header;
    bad_shape["entries"][0]["shape"] = {5, 5};
    CHECK(kind_of(join(bad_shape.dump(), payload)) == ParseErrorKind::shape_mismatch);

    json bad_dtype = header;
    bad_dtype["entries"][0]["dtype"] = "bf16";
    CHECK(kind_of(join(bad_dtype.dump(), payload)) == ParseErrorKind::unknown_dtype);

    json dup_name = header;
    dup_name["entries"][1]["name"] = dup_name["entries"][0]["name"];
    CHECK(kind_of(join(dup_name.dump(), payload)) == ParseErrorKind::malformed_header);

    json no_entries = header;
    no_entries.erase("entries");
    CHECK(kind_of(join(no_entries.dump(), payload)) == ParseErrorKind::malformed_header);

    CHECK_THROWS_AS(decode_gram(bytes), ParseError);
    try {
        decode_fisher(bytes);
    } catch (const ParseError& e) {
        CHECK(e.kind() == ParseErrorKind::wrong_kind);
    }
    CHECK_THROWS_AS(read_checkpoint("/nonexistent/x.ckpt"), Error);
}

TEST_CASE("named tensor map rules") {
    NamedTensorMap m;
    m.insert("a.b_1", Tensor::vector({1}));
    CHECK_THROWS_AS(m.insert("a.b_1", Tensor::vector({2})), ValidationError);
    CHECK_THROWS_AS(m.insert("bad name", Tensor::vector({2})), ValidationError);
    CHECK_THROWS_AS(m.insert("", Tensor::vector({2})), ValidationError);
    m.set("a.b_1", Tensor::vector({3}));
    CHECK(m.at("a.b_1").values[0] == 3);
    CHECK(m.find("missing") == nullptr);
    CHECK(valid_tensor_name("x.Y_9"));
    CHECK_FALSE(valid_tensor_name("x/y"));
    CHECK_THROWS_AS(Tensor({2, 2}, DType::f64, {1, 2, 3}), ShapeError);
}

TEST_CASE("stats validation") {
    GramStats g;
    g.layers["l"] = {Matrix{{1, 2}, {0, 1}}, 3};
    CHECK_THROWS_AS(validate(g), ValidationError);
    g.layers["l"] = {Matrix{{-1, 0}, {0, 1}}, 3};
    CHECK_THROWS_AS(validate(g), ValidationError);
    g.layers["l"] = {Matrix::identity(2), 0};
    CHECK_THROWS_AS(validate(g), ValidationError);
    g.layers["l"] = {Matrix::identity(2), 1};
    CHECK_NOTHROW(validate(g));

    FisherStats f;
    f.diag.insert("w", Tensor::vector({0.0, -1.0}));
    CHECK_THROWS_AS(validate(f), ValidationError);
    FisherStats ok;
    ok.diag.insert("w", Tensor::vector({0.0, 1.0}));
    NamedTensorMap ckpt;
    ckpt.insert("v", Tensor::vector({0.0, 1.0}));
    CHECK_THROWS_AS(validate(ok, &ckpt), ValidationError);
}
