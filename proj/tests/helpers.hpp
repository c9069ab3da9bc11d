#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "regmerge/linalg.hpp"
#include "regmerge/model.hpp"
#include "regmerge/rng.hpp"
#include "regmerge/tensor_io.hpp"

namespace testutil {

using regmerge::Matrix;

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
    regmerge::Philox rng(seed, 77);
    Matrix m(r, c);
    for (double& v : m.data()) v = scale * rng.normal();
    return m;
}

// XᵀX of a random n×d batch: what a Gram statistic looks like.
inline Matrix random_gram(std::size_t d, std::size_t n, std::uint64_t seed) {
    const Matrix x = random_matrix(n, d, seed);
    return regmerge::matmul_tn(x, x);
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
            c(i, j) = static_cast<double>(s);
        }
    return c;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Per-test scratch directory under the build tree, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("regmerge_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline regmerge::ModelInstance perturbed(const regmerge::ModelInstance& m, std::uint64_t seed, double scale) {
    regmerge::NamedTensorMap p = m.params;
    regmerge::Philox rng(seed, 5);
    for (const auto& name : p.names()) {
        regmerge::Tensor& t = p.at(name);
        for (double& v : t.values) v += scale * rng.normal();
    }
    return regmerge::with_params(m, std::move(p));
}

}  // namespace testutil
