#include "regmerge/linalg.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <optional>

#include "regmerge/error.hpp"
#include "regmerge/kernels.hpp"

namespace regmerge {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

std::vector<double> Matrix::diag() const {
    const std::size_t n = std::min(rows_, cols_);
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = (*this)(i, i);
    return d;
}

double Matrix::trace() const {
    double t = 0.0;
    for (double v : diag()) t += v;
    return t;
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

static void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
}

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "subtract");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

std::string shape_string(const Matrix& m) {
    return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_string(a) + " x " + shape_string(b));
    Matrix c(a.rows(), b.cols());
    kernels::matmul_nn(a.rows(), a.cols(), b.cols(), a.data(), b.data(), c.data());
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + shape_string(a) + "ᵀ x " + shape_string(b));
    Matrix c(a.cols(), b.cols());
    kernels::matmul_tn(a.cols(), a.rows(), b.cols(), a.data(), b.data(), c.data());
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_string(a) + " x " + shape_string(b) + "ᵀ");
    Matrix c(a.rows(), b.rows());
    kernels::matmul_nt(a.rows(), a.cols(), b.rows(), a.data(), b.data(), c.data());
    return c;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

const char* to_string(SolveMethod m) {
    return m == SolveMethod::cholesky ? "cholesky" : "cholesky_with_jitter";
}

namespace {

// Lower-triangular L with a + jitter·I = L·Lᵀ, or nullopt when a pivot falls
// below n·eps·max(diag a) (singular or indefinite within working precision).
std::optional<Matrix> cholesky(const Matrix& a, double jitter) {
    const std::size_t n = a.rows();
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)) + jitter);
    const double tol = static_cast<double>(n) * DBL_EPSILON * max_diag;

    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double pivot = a(j, j) + jitter;
        for (std::size_t p = 0; p < j; ++p) pivot -= l(j, p) * l(j, p);
        if (!(pivot > tol)) return std::nullopt;
        const double ljj = std::sqrt(pivot);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
    const std::size_t n = l.rows();
    const std::size_t m = b.cols();
    Matrix x = b;
    // L·y = b
    for (std::size_t i = 0; i < n; ++i) {
        auto xi = x.row(i);
        for (std::size_t p = 0; p < i; ++p) {
            const double lip = l(i, p);
            const auto xp = x.row(p);
            for (std::size_t c = 0; c < m; ++c) xi[c] -= lip * xp[c];
        }
        const double inv = 1.0 / l(i, i);
        for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
    }
    // Lᵀ·x = y
    for (std::size_t ii = n; ii-- > 0;) {
        auto xi = x.row(ii);
        for (std::size_t p = ii + 1; p < n; ++p) {
            const double lpi = l(p, ii);
            const auto xp = x.row(p);
            for (std::size_t c = 0; c < m; ++c) xi[c] -= lpi * xp[c];
        }
        const double inv = 1.0 / l(ii, ii);
        for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
    }
    return x;
}

double condition_from_factor(const Matrix& l) {
    double lo = INFINITY, hi = 0.0;
    for (std::size_t i = 0; i < l.rows(); ++i) {
        lo = std::min(lo, l(i, i));
        hi = std::max(hi, l(i, i));
    }
    if (l.rows() == 0) return 1.0;
    const double r = hi / lo;
    return r * r;
}

}  // namespace

SpdSolveResult spd_solve(const Matrix& a, const Matrix& b) {
    if (!a.square()) throw ShapeError("spd_solve: matrix not square " + shape_string(a));
    if (b.rows() != a.rows())
        throw ShapeError("spd_solve: rhs " + shape_string(b) + " does not match " + shape_string(a));
    if (!a.all_finite() || !b.all_finite()) throw ValidationError("spd_solve: non-finite input");

    const std::size_t n = a.rows();
    const double scale = a.max_abs();
    double asym = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) asym = std::max(asym, std::abs(a(i, j) - a(j, i)));
    if (asym > 1e-9 * scale)
        throw ValidationError("spd_solve: matrix not symmetric (max asymmetry " + std::to_string(asym) + ")");

    SpdSolveResult out;
    if (n == 0) {
        out.x = b;
        return out;
    }

    if (auto l = cholesky(a, 0.0)) {
        out.x = cholesky_solve(*l, b);
        out.report.condition_estimate = condition_from_factor(*l);
        return out;
    }

    const double mean_diag = a.trace() / static_cast<double>(n);
    if (mean_diag > 0.0) {
        for (double rel = 1e-8; rel <= 1e-2 * (1.0 + 1e-9); rel *= 10.0) {
            const double jitter = rel * mean_diag;
            if (auto l = cholesky(a, jitter)) {
                out.x = cholesky_solve(*l, b);
                out.report.jitter_applied = jitter;
                out.report.condition_estimate = condition_from_factor(*l);
                out.report.method = SolveMethod::cholesky_with_jitter;
                return out;
            }
        }
    }
    throw SingularSystemError("spd_solve: system singular after jitter up to 1e-2*trace/n (trace=" +
                              std::to_string(a.trace()) + ")");
}

Matrix scale_offdiagonal(const Matrix& g, double alpha) {
    if (!g.square()) throw ShapeError("scale_offdiagonal: matrix not square " + shape_string(g));
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ValidationError("scale_offdiagonal: alpha must lie in [0,1], got " + std::to_string(alpha));
    Matrix out = g;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            if (i != j) out(i, j) = alpha * g(i, j);
    return out;
}

}  // namespace regmerge
