// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <string>

#include "diffora/errors.hpp"

namespace diffora {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw Error(ErrorKind::dimension, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
    }
}

constexpr std::size_t kMaxEigenDim = 256;
constexpr double kSymmetryTol = 1e-10;

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw Error(ErrorKind::dimension, "data length " + std::to_string(data_.size()) + " does not match " +
                                              std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw Error(ErrorKind::dimension, "ragged initializer list");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
}

Matrix Matrix::column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::col(std::size_t c) const {
    Matrix out(rows_, 1);
    for (std::size_t r = 0; r < rows_; ++r) out(r, 0) = (*this)(r, c);
    return out;
}

void Matrix::set_col(std::size_t c, const Matrix& v) {
    if (v.rows() != rows_ || v.cols() != 1 || c >= cols_) {
        throw Error(ErrorKind::dimension, "set_col: " + shape_str(v) + " into " + shape_str(*this));
    }
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v(r, 0);
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::reshaped(std::size_t rows, std::size_t cols) const {
    return Matrix(rows, cols, data_);
}

Matrix& Matrix::operator+=(const Matrix& o) {
    require_same_shape(*this, o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    require_same_shape(*this, o, "sub");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Matrix::max_abs() const noexcept {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

double Matrix::frobenius() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
}

double Matrix::sum() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Matrix::trace() const {
    if (rows_ != cols_) throw Error(ErrorKind::shape, "trace of non-square " + shape_str(*this));
    double s = 0.0;
    for (std::size_t i = 0; i < rows_; ++i) s += (*this)(i, i);
    return s;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorKind::dimension, "matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw Error(ErrorKind::dimension, "matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
    }
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto arow = a.row(k);
        auto brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            auto crow = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw Error(ErrorKind::dimension, "matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto arow = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto brow = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
            c(i, j) = s;
        }
    }
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) cd[i] *= bd[i];
    return c;
}

double dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
    return s;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) noexcept {
    if (!a.same_shape(b)) return false;
    return a.empty() || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Random streams

std::uint64_t mix64(std::uint64_t x) noexcept {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream_id) noexcept
    : seed_(seed), stream_(stream_id), key_(mix64(mix64(seed) ^ (stream_id * 0xd1b54a32d192ed03ULL + 1))) {}

std::uint64_t SeededRng::next_u64() noexcept {
    return mix64(key_ ^ mix64(counter_++));
}

double SeededRng::uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double SeededRng::normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SeededRng::below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; bias is below 2^-64 * n and irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

SeededRng SeededRng::derive(std::uint64_t key) const noexcept {
    return SeededRng(seed_, mix64(stream_ ^ mix64(key + 0x632be59bd9b4e019ULL)));
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, SeededRng& rng) {
    if (rows == 0 || cols == 0) {
        throw Error(ErrorKind::dimension, "gaussian_matrix needs positive dimensions");
    }
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

Matrix sign_vector(std::size_t m, SeededRng& rng) {
    if (m == 0) throw Error(ErrorKind::dimension, "sign_vector needs m >= 1");
    Matrix out(m, 1);
    for (double& v : out.data()) v = (rng.next_u64() >> 63) ? 1.0 : -1.0;
    return out;
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver

namespace {

Matrix checked_symmetric(const Matrix& m) {
    if (m.rows() != m.cols()) throw Error(ErrorKind::shape, "eigensolve of non-square " + shape_str(m));
    if (m.rows() == 0) throw Error(ErrorKind::shape, "eigensolve of empty matrix");
    if (m.rows() > kMaxEigenDim) throw Error(ErrorKind::shape, "eigensolve limited to n <= 256");
    if (!m.all_finite()) throw Error(ErrorKind::shape, "eigensolve of non-finite matrix");
    const std::size_t n = m.rows();
    const double scale = std::max(1.0, m.max_abs());
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (std::abs(m(i, j) - m(j, i)) > kSymmetryTol * scale) {
                throw Error(ErrorKind::shape, "matrix is not symmetric at (" + std::to_string(i) + "," +
                                                  std::to_string(j) + ")");
            }
            s(i, j) = 0.5 * (m(i, j) + m(j, i));
        }
    }
    return s;
}

double off_diagonal_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

}  // namespace

std::vector<double> symmetric_eigenvalues(const Matrix& m, double tol) {
    Matrix a = checked_symmetric(m);
    const std::size_t n = a.rows();
    // Roundoff puts a floor under the reachable off-diagonal norm.
    const double floor = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, a.frobenius());
    const double target = std::max(tol, floor);
    constexpr int kMaxSweeps = 100;

    for (int sweep = 0; sweep < kMaxSweeps && off_diagonal_norm(a) >= target; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
            }
        }
    }

    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
    std::sort(eig.begin(), eig.end());
    return eig;
}

double min_eigenvalue(const Matrix& m, double tol) {
    return symmetric_eigenvalues(m, tol).front();
}

// ---------------------------------------------------------------------------
// Cholesky solve

namespace {

bool cholesky(const Matrix& m, Matrix& l) {
    const std::size_t n = m.rows();
    l = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = m(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0)) return false;
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = m(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return true;
}

Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
    const std::size_t n = l.rows();
    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = x(i, c);
            for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

}  // namespace

Matrix solve_spd(const Matrix& m, const Matrix& b) {
    const Matrix sym = checked_symmetric(m);
    if (b.rows() != sym.rows() || b.cols() == 0) {
        throw Error(ErrorKind::dimension, "solve_spd: " + shape_str(m) + " with rhs " + shape_str(b));
    }
    Matrix l;
    const double lambda_min_floor = 1e-10;
    if (!cholesky(sym, l)) {
        throw DefinitenessError("matrix is not positive definite", min_eigenvalue(sym));
    }
    double min_pivot = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < l.rows(); ++i) min_pivot = std::min(min_pivot, l(i, i) * l(i, i));
    if (min_pivot <= lambda_min_floor) {
        const double lmin = min_eigenvalue(sym);
        if (lmin <= lambda_min_floor) throw DefinitenessError("matrix is not positive definite", lmin);
    }
    Matrix x = cholesky_solve(l, b);
    Matrix residual = b - matmul(sym, x);
    x += cholesky_solve(l, residual);
    return x;
}

}  // namespace diffora
