// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"

#include "diffora/errors.hpp"
#include "diffora/numerics.hpp"

using namespace diffora;

namespace {

Matrix random_symmetric(std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    Matrix g = gaussian_matrix(n, n, rng);
    return 0.5 * (g + g.transpose());
}

Matrix random_spd(std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    Matrix g = gaussian_matrix(n, n, rng);
    Matrix m = matmul_tn(g, g);
    for (std::size_t i = 0; i < n; ++i) m(i, i) += 0.5;
    return m;
}

}  // namespace

TEST_CASE("gaussian_matrix is deterministic per seed") {
    SeededRng a(42), b(42);
    CHECK(gaussian_matrix(1, 1, a)(0, 0) == gaussian_matrix(1, 1, b)(0, 0));

    SeededRng c(43);
    SeededRng d(42);
    CHECK(gaussian_matrix(1, 1, c)(0, 0) != gaussian_matrix(1, 1, d)(0, 0));
}

TEST_CASE("gaussian_matrix stream does not depend on shape") {
    SeededRng a(9), b(9);
    const Matrix m23 = gaussian_matrix(2, 3, a);
    const Matrix m32 = gaussian_matrix(3, 2, b);
    for (std::size_t i = 0; i < 6; ++i) CHECK(m23.data()[i] == m32.data()[i]);
}

TEST_CASE("gaussian_matrix moments on a large draw") {
    SeededRng rng(2026);
    const Matrix m = gaussian_matrix(1000, 1000, rng);
    const double n = static_cast<double>(m.size());
    const double mean = m.sum() / n;
    double var = 0.0;
    for (double v : m.data()) var += (v - mean) * (v - mean);
    var /= n - 1.0;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("gaussian_matrix rejects zero dimensions") {
    SeededRng rng(1);
    CHECK_THROWS_AS(gaussian_matrix(0, 3, rng), Error);
    CHECK_THROWS_AS(gaussian_matrix(3, 0, rng), Error);
}

TEST_CASE("sign_vector") {
    SeededRng a(5), b(5);
    CHECK(bitwise_equal(sign_vector(4, a), sign_vector(4, b)));

    SeededRng rng(77);
    const Matrix s = sign_vector(10000, rng);
    for (double e : s.data()) CHECK(e * e == 1.0);
    CHECK(std::abs(s.sum() / 10000.0) < 0.05);

    CHECK_THROWS_AS(sign_vector(0, rng), Error);
}

TEST_CASE("derived streams are reproducible and distinct") {
    SeededRng root(11);
    SeededRng x = root.derive(3);
    SeededRng y = root.derive(3);
    SeededRng z = root.derive(4);
    const double vx = x.normal();
    CHECK(vx == y.normal());
    CHECK(vx != z.normal());
}

TEST_CASE("min_eigenvalue closed forms") {
    CHECK(min_eigenvalue(Matrix::identity(3)) == doctest::Approx(1.0).epsilon(1e-15));
    const double d[] = {2.0, 5.0, -1.0};
    CHECK(min_eigenvalue(Matrix::diagonal(d)) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(min_eigenvalue(Matrix{{0.5, 0.1}, {0.1, 0.5}}) == doctest::Approx(0.4).epsilon(1e-14));
}

TEST_CASE("min_eigenvalue matches bisection oracle on random 8x8") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Matrix m = random_symmetric(8, seed);
        const double expected = oracle::bisection_min_eigenvalue(m);
        CHECK(std::abs(min_eigenvalue(m, 1e-12) - expected) <= 1e-8);
    }
}

TEST_CASE("eigenvalue multiset matches trace and cofactor determinant") {
    for (std::size_t n = 2; n <= 6; ++n) {
        const Matrix m = random_symmetric(n, 100 + n);
        const auto eig = symmetric_eigenvalues(m);
        const double sum = std::accumulate(eig.begin(), eig.end(), 0.0);
        const double prod = std::accumulate(eig.begin(), eig.end(), 1.0, std::multiplies<>());
        const double tr = m.trace();
        const double det = oracle::cofactor_det(m);
        CHECK(std::abs(sum - tr) <= 1e-8 * std::max(1.0, std::abs(tr)));
        CHECK(std::abs(prod - det) <= 1e-8 * std::max(1.0, std::abs(det)));
    }
}

TEST_CASE("min_eigenvalue rejects malformed input") {
    CHECK_THROWS_AS(min_eigenvalue(Matrix(2, 3)), Error);
    CHECK_THROWS_AS(min_eigenvalue(Matrix{{1.0, 2.0}, {0.0, 1.0}}), Error);
    try {
        min_eigenvalue(Matrix(2, 3));
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::shape);
    }
}

TEST_CASE("tiny asymmetry is symmetrized") {
    Matrix m{{2.0, 1.0}, {1.0 + 1e-12, 2.0}};
    CHECK(min_eigenvalue(m) == doctest::Approx(1.0).epsilon(1e-11));
}

TEST_CASE("solve_spd") {
    const Matrix x = solve_spd(Matrix::identity(2), Matrix{{3.0}, {-1.0}});
    CHECK(x(0, 0) == 3.0);
    CHECK(x(1, 0) == -1.0);

    CHECK(solve_spd(Matrix{{4.0}}, Matrix{{8.0}})(0, 0) == 2.0);

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Matrix m = random_spd(6, seed);
        SeededRng rng(seed + 50);
        const Matrix b = gaussian_matrix(6, 1, rng);
        const Matrix sol = solve_spd(m, b);
        const Matrix residual = matmul(m, sol) - b;
        CHECK(residual.max_abs() <= 1e-8 * b.max_abs());
    }
}

TEST_CASE("solve_spd reports the offending eigenvalue") {
    const double d[] = {1.0, -2.0};
    try {
        solve_spd(Matrix::diagonal(d), Matrix(2, 1, 1.0));
        FAIL("expected definiteness error");
    } catch (const DefinitenessError& e) {
        CHECK(e.eigenvalue() == doctest::Approx(-2.0));
        CHECK(e.kind() == ErrorKind::definiteness);
    }
}

TEST_CASE("matmul associativity and transposed variants") {
    SeededRng rng(8);
    const Matrix a = gaussian_matrix(8, 8, rng);
    const Matrix b = gaussian_matrix(8, 8, rng);
    const Matrix c = gaussian_matrix(8, 8, rng);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    const double scale = std::max(1.0, left.max_abs());
    CHECK((left - right).max_abs() <= 1e-10 * scale);

    CHECK((matmul(a, b) - oracle::naive_matmul(a, b)).max_abs() <= 1e-12);
    CHECK((matmul_tn(a, b) - oracle::naive_matmul(a.transpose(), b)).max_abs() <= 1e-12);
    CHECK((matmul_nt(a, b) - oracle::naive_matmul(a, b.transpose())).max_abs() <= 1e-12);
    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), Error);
}
