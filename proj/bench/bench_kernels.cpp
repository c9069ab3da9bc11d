// Serial reference vs OpenMP kernels: wall time per call and a bit-identity check.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "regmerge/kernels.hpp"
#include "regmerge/rng.hpp"

namespace k = regmerge::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    regmerge::Philox rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

double seconds_per_call(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

void report(const std::string& name, double serial, double parallel, bool identical) {
    std::printf("%-28s serial %9.3f ms  parallel %9.3f ms  speedup %5.2fx  %s\n", name.c_str(), serial * 1e3,
                parallel * 1e3, serial / parallel, identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    const std::size_t n = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 256;
    const int reps = argc > 2 ? std::atoi(argv[2]) : 5;
    std::printf("size %zu, %d reps, %d threads\n", n, reps, k::thread_count());
    bool all_identical = true;

    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> c1(n * n), c2(n * n);
    using Kernel = void (*)(std::size_t, std::size_t, std::size_t, std::span<const double>, std::span<const double>,
                            std::span<double>);
    const std::pair<const char*, std::pair<Kernel, Kernel>> matmuls[] = {
        {"matmul_nn", {k::serial::matmul_nn, k::parallel::matmul_nn}},
        {"matmul_tn", {k::serial::matmul_tn, k::parallel::matmul_tn}},
        {"matmul_nt", {k::serial::matmul_nt, k::parallel::matmul_nt}},
    };
    for (const auto& [name, fns] : matmuls) {
        const double s = seconds_per_call([&] { fns.first(n, n, n, a, b, c1); }, reps);
        const double p = seconds_per_call([&] { fns.second(n, n, n, a, b, c2); }, reps);
        report(name, s, p, c1 == c2);
        all_identical &= c1 == c2;
    }

    const std::size_t rows = 16 * n;
    const auto x = random_vec(rows * n, 3);
    const double s = seconds_per_call([&] { std::fill(c1.begin(), c1.end(), 0.0); k::serial::gram_accumulate(rows, n, x, c1); }, reps);
    const double p = seconds_per_call([&] { std::fill(c2.begin(), c2.end(), 0.0); k::parallel::gram_accumulate(rows, n, x, c2); }, reps);
    report("gram_accumulate", s, p, c1 == c2);
    all_identical &= c1 == c2;

    const double sd = seconds_per_call([&] { k::serial::column_distances(n, n, a, b, c1); }, reps);
    const double pd = seconds_per_call([&] { k::parallel::column_distances(n, n, a, b, c2); }, reps);
    report("column_distances", sd, pd, c1 == c2);
    all_identical &= c1 == c2;

    return all_identical ? 0 : 1;
}
