#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace regmerge {

/// Dense row-major matrix of doubles. Dimensions are checked on construction;
/// there is no implicit broadcasting anywhere in the library.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> diag);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    bool square() const noexcept { return rows_ == cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }
    std::vector<double> release() && { return std::move(data_); }

    Matrix transposed() const;
    std::vector<double> diag() const;
    double trace() const;
    double max_abs() const;
    bool all_finite() const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

/// Standard product with 64-bit accumulation; throws ShapeError when a.cols != b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ without materialising the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// Largest |a - b| entry; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

enum class SolveMethod { cholesky, cholesky_with_jitter };

const char* to_string(SolveMethod m);

struct SpdSolveReport {
    double jitter_applied = 0.0;
    /// (max L_ii / min L_ii)^2 of the accepted factor: a cheap lower bound on cond_2.
    double condition_estimate = 1.0;
    SolveMethod method = SolveMethod::cholesky;
};

struct SpdSolveResult {
    Matrix x;
    SpdSolveReport report;
};

/// Solves a·X = b for symmetric positive (semi-)definite a.
///
/// Cholesky is attempted first. A failed factorisation is retried with
/// a + eps·I where eps starts at 1e-8·trace(a)/n and grows ×10 up to
/// 1e-2·trace(a)/n. The jitter that was needed is recorded in the report.
///
/// Throws ValidationError when a is not symmetric to 1e-9·max|a|,
/// ShapeError on dimension mismatch and SingularSystemError when the
/// ladder is exhausted.
SpdSolveResult spd_solve(const Matrix& a, const Matrix& b);

/// α·G + (1-α)·diag(G): shrinks off-diagonal entries, keeps the diagonal bit-exact.
Matrix scale_offdiagonal(const Matrix& g, double alpha);

std::string shape_string(const Matrix& m);

}  // namespace regmerge
