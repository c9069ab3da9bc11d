#pragma once

// Hot loops used by linalg, stats collection and the model zoo.
//
// Every kernel exists twice: a plain serial reference and an OpenMP version.
// The parallel versions split work over output rows only, so each output
// element is accumulated in the same order as in the reference and results
// are bit-identical for any thread count.

#include <cstddef>
#include <span>

namespace regmerge::kernels {

namespace serial {

// c(m×n) = a(m×k) · b(k×n)
void matmul_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c);
// c(m×n) = a(k×m)ᵀ · b(k×n)
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c);
// c(m×n) = a(m×k) · b(n×k)ᵀ
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c);
// acc(d×d) += x(n×d)ᵀ · x; upper triangle computed, lower mirrored.
void gram_accumulate(std::size_t n, std::size_t d, std::span<const double> x, std::span<double> acc);
// out(n×n)[i][j] = ‖a[:,i] − b[:,j]‖₂ for a, b of shape m×n.
void column_distances(std::size_t m, std::size_t n, std::span<const double> a,
                      std::span<const double> b, std::span<double> out);

}  // namespace serial

namespace parallel {

void matmul_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c);
void gram_accumulate(std::size_t n, std::size_t d, std::span<const double> x, std::span<double> acc);
void column_distances(std::size_t m, std::size_t n, std::span<const double> a,
                      std::span<const double> b, std::span<double> out);

}  // namespace parallel

// Dispatching entry points used by the rest of the library.
using parallel::column_distances;
using parallel::gram_accumulate;
using parallel::matmul_nn;
using parallel::matmul_nt;
using parallel::matmul_tn;

/// Caps the OpenMP worker count (0 restores the runtime default).
void set_thread_count(int n);
int thread_count();

}  // namespace regmerge::kernels
