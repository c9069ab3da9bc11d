#pragma once

// Independent reference computations the library is checked against.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "regmerge/linalg.hpp"
#include "regmerge/model.hpp"
#include "regmerge/perm.hpp"

namespace oracle {

using regmerge::Matrix;

// Largest relative gap between central finite differences of the loss and
// the analytic gradient. Denominators are floored at `floor`.
inline double gradient_check(const regmerge::ModelInstance& model, const regmerge::Dataset& batch, double h = 1e-5,
                             double floor = 1e-4) {
    const auto analytic = regmerge::loss_and_grads(model, batch).grads;
    double worst = 0.0;
    for (const auto& name : model.params.names()) {
        const auto& t = model.params.at(name);
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            auto plus = model.params, minus = model.params;
            plus.at(name).values[i] += h;
            minus.at(name).values[i] -= h;
            const double lp = regmerge::loss_and_grads(regmerge::with_params(model, plus), batch).loss;
            const double lm = regmerge::loss_and_grads(regmerge::with_params(model, minus), batch).loss;
            const double fd = (lp - lm) / (2 * h);
            const double an = analytic.at(name).values[i];
            worst = std::max(worst, std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), floor}));
        }
    }
    return worst;
}

inline std::vector<double> log_softmax_row(const Matrix& logits, std::size_t r) {
    double m = -INFINITY;
    for (double v : logits.row(r)) m = std::max(m, v);
    double s = 0.0;
    for (double v : logits.row(r)) s += std::exp(v - m);
    std::vector<double> out;
    for (double v : logits.row(r)) out.push_back(v - m - std::log(s));
    return out;
}

// F_j = mean_n Σ_c p_c(x_n) (∂ log p_c(x_n) / ∂θ_j)², derivatives by central differences.
inline regmerge::NamedTensorMap fisher_by_differences(const regmerge::ModelInstance& model, const Matrix& x,
                                                       double h = 1e-6) {
    const Matrix logits = regmerge::forward(model, x).logits;
    regmerge::NamedTensorMap out;
    for (const auto& name : model.params.names()) {
        const auto& t = model.params.at(name);
        std::vector<double> f(t.values.size(), 0.0);
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            auto plus = model.params, minus = model.params;
            plus.at(name).values[i] += h;
            minus.at(name).values[i] -= h;
            const Matrix lp = regmerge::forward(regmerge::with_params(model, plus), x).logits;
            const Matrix lm = regmerge::forward(regmerge::with_params(model, minus), x).logits;
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const auto base = log_softmax_row(logits, r);
                const auto a = log_softmax_row(lp, r), b = log_softmax_row(lm, r);
                for (std::size_t c = 0; c < base.size(); ++c) {
                    const double d = (a[c] - b[c]) / (2 * h);
                    f[i] += std::exp(base[c]) * d * d;
                }
            }
            f[i] /= static_cast<double>(x.rows());
        }
        out.insert(name, regmerge::Tensor(t.shape, regmerge::DType::f64, std::move(f)));
    }
    return out;
}

inline double objective(const Matrix& w, std::span<const Matrix> ws, std::span<const Matrix> gs) {
    double total = 0.0;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const Matrix d = w - ws[i];
        const Matrix gd = regmerge::matmul(gs[i], d);
        for (std::size_t k = 0; k < d.size(); ++k) total += d.data()[k] * gd.data()[k];
    }
    return total;
}

// Plain gradient descent on Σ_i tr((W−W_i)ᵀ G_i (W−W_i)) from the simple average,
// with step 1/L where L = 2·λ_max(Σ G_i) from power iteration.
inline Matrix gradient_descent_merge(std::span<const Matrix> ws, std::span<const Matrix> gs, int steps = 10000) {
    Matrix gsum(gs[0].rows(), gs[0].cols());
    for (const auto& g : gs) gsum += g;
    std::vector<double> v(gsum.rows(), 1.0);
    double lambda = 0.0;
    for (int it = 0; it < 500; ++it) {
        std::vector<double> nv(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = 0; j < v.size(); ++j) nv[i] += gsum(i, j) * v[j];
        double norm = 0.0;
        for (double x : nv) norm += x * x;
        norm = std::sqrt(norm);
        lambda = norm;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = nv[i] / norm;
    }
    const double step = 1.0 / (2.0 * lambda * 1.01);
    Matrix w(ws[0].rows(), ws[0].cols());
    for (const auto& wi : ws) w += wi;
    w *= 1.0 / static_cast<double>(ws.size());
    for (int s = 0; s < steps; ++s) {
        Matrix grad(w.rows(), w.cols());
        for (std::size_t i = 0; i < ws.size(); ++i) grad += 2.0 * regmerge::matmul(gs[i], w - ws[i]);
        w -= step * grad;
    }
    return w;
}

// Best assignment by enumerating every permutation.
inline double exhaustive_assignment(const Matrix& m, bool maximize) {
    std::vector<std::size_t> p(m.rows());
    std::iota(p.begin(), p.end(), 0);
    double best = maximize ? -INFINITY : INFINITY;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) s += m(i, p[i]);
        best = maximize ? std::max(best, s) : std::min(best, s);
    } while (std::next_permutation(p.begin(), p.end()));
    return best;
}

}  // namespace oracle
