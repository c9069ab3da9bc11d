#include "regmerge/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace regmerge::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 15;

// Row kernels shared by both variants; each writes output row i only.

inline void nn_row(std::size_t i, std::size_t k, std::size_t n, const double* a, const double* b,
                   double* c) {
    double* __restrict ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
        const double aip = ai[p];
        const double* __restrict bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
}

inline void tn_row(std::size_t i, std::size_t m, std::size_t k, std::size_t n, const double* a,
                   const double* b, double* c) {
    double* __restrict ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double api = a[p * m + i];
        const double* __restrict bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
}

inline void nt_row(std::size_t i, std::size_t k, std::size_t n, const double* a, const double* b,
                   double* c) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c[i * n + j] = s;
    }
}

inline void gram_row(std::size_t i, std::size_t rows, std::size_t d, const double* x, double* acc) {
    double* acc_i = acc + i * d;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * d;
        const double xi = xr[i];
        for (std::size_t j = i; j < d; ++j) acc_i[j] += xi * xr[j];
    }
}

inline void mirror_upper(std::size_t d, double* acc) {
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) acc[j * d + i] = acc[i * d + j];
}

inline void dist_row(std::size_t i, std::size_t m, std::size_t n, const double* a, const double* b,
                     double* out) {
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
            const double diff = a[r * n + i] - b[r * n + j];
            s += diff * diff;
        }
        out[i * n + j] = std::sqrt(s);
    }
}

}  // namespace

namespace serial {

void matmul_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c) {
    for (std::size_t i = 0; i < m; ++i) nn_row(i, k, n, a.data(), b.data(), c.data());
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c) {
    for (std::size_t i = 0; i < m; ++i) tn_row(i, m, k, n, a.data(), b.data(), c.data());
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c) {
    for (std::size_t i = 0; i < m; ++i) nt_row(i, k, n, a.data(), b.data(), c.data());
}

void gram_accumulate(std::size_t n, std::size_t d, std::span<const double> x, std::span<double> acc) {
    for (std::size_t i = 0; i < d; ++i) gram_row(i, n, d, x.data(), acc.data());
    mirror_upper(d, acc.data());
}

void column_distances(std::size_t m, std::size_t n, std::span<const double> a,
                      std::span<const double> b, std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) dist_row(i, m, n, a.data(), b.data(), out.data());
}

}  // namespace serial

namespace parallel {

void matmul_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c) {
    const auto rows = static_cast<long>(m);
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork) firstprivate(k, n, pa, pb, pc)
    for (long i = 0; i < rows; ++i) nn_row(static_cast<std::size_t>(i), k, n, pa, pb, pc);
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c) {
    const auto rows = static_cast<long>(m);
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork) firstprivate(m, k, n, pa, pb, pc)
    for (long i = 0; i < rows; ++i) tn_row(static_cast<std::size_t>(i), m, k, n, pa, pb, pc);
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a,
               std::span<const double> b, std::span<double> c) {
    const auto rows = static_cast<long>(m);
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork) firstprivate(k, n, pa, pb, pc)
    for (long i = 0; i < rows; ++i) nt_row(static_cast<std::size_t>(i), k, n, pa, pb, pc);
}

void gram_accumulate(std::size_t n, std::size_t d, std::span<const double> x, std::span<double> acc) {
    const auto dim = static_cast<long>(d);
    // Triangular rows are uneven, so hand them out dynamically.
    const double* px = x.data();
    double* pacc = acc.data();
#pragma omp parallel for schedule(dynamic, 4) if (n * d * d >= 2 * kParallelWork) firstprivate(n, d, px, pacc)
    for (long i = 0; i < dim; ++i) gram_row(static_cast<std::size_t>(i), n, d, px, pacc);
    mirror_upper(d, acc.data());
}

void column_distances(std::size_t m, std::size_t n, std::span<const double> a,
                      std::span<const double> b, std::span<double> out) {
    const auto cols = static_cast<long>(n);
    const double* pa = a.data();
    const double* pb = b.data();
    double* pout = out.data();
#pragma omp parallel for schedule(static) if (m * n * n >= kParallelWork) firstprivate(m, n, pa, pb, pout)
    for (long i = 0; i < cols; ++i) dist_row(static_cast<std::size_t>(i), m, n, pa, pb, pout);
}

}  // namespace parallel

void set_thread_count(int n) {
#ifdef _OPENMP
    static const int default_threads = omp_get_max_threads();
    omp_set_num_threads(n > 0 ? n : default_threads);
#else
    (void)n;
#endif
}

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace regmerge::kernels
