// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace diffora {

/// Dense row-major matrix of doubles. Column vectors are n x 1 matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);
    static Matrix column(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    Matrix col(std::size_t c) const;
    void set_col(std::size_t c, const Matrix& v);

    Matrix transpose() const;
    Matrix reshaped(std::size_t rows, std::size_t cols) const;

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double s) noexcept;

    bool all_finite() const noexcept;
    double max_abs() const noexcept;
    double frobenius() const noexcept;
    double sum() const noexcept;
    double trace() const;

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool operator==(const Matrix& o) const noexcept = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without forming the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ without forming the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
double dot(const Matrix& a, const Matrix& b);

/// True iff both matrices have the same shape and identical bit patterns.
bool bitwise_equal(const Matrix& a, const Matrix& b) noexcept;

/// Counter-based random stream. Draw k of stream (seed, stream_id) is a pure
/// function of (seed, stream_id, k), so streams can be split per layer,
/// module, or sample index without any shared state.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream_id = 0) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_; }
    std::uint64_t position() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept;
    /// Uniform in the open interval (0, 1).
    double uniform() noexcept;
    /// Standard normal via Box-Muller; consumes two uniforms per draw.
    double normal() noexcept;
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept;

    /// Independent child stream keyed by (this stream, key).
    SeededRng derive(std::uint64_t key) const noexcept;

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, SeededRng& rng);
/// m x 1 vector of independent fair +-1 signs.
Matrix sign_vector(std::size_t m, SeededRng& rng);

/// All eigenvalues of a symmetric matrix in ascending order, via cyclic
/// Jacobi rotations run until the off-diagonal Frobenius norm is below tol.
std::vector<double> symmetric_eigenvalues(const Matrix& m, double tol = 1e-12);
double min_eigenvalue(const Matrix& m, double tol = 1e-12);

/// Solves M x = b for symmetric positive definite M by Cholesky
/// factorization followed by one step of iterative refinement.
Matrix solve_spd(const Matrix& m, const Matrix& b);

}  // namespace diffora
