// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "diffora/adapters.hpp"
#include "diffora/errors.hpp"

using namespace diffora;

namespace {

LowRankAdapter trained_adapter(std::size_t d, std::size_t k, std::size_t r, std::uint64_t seed) {
    SeededRng rng(seed);
    LowRankAdapter ad = init_adapter(d, k, r, 2.0 * static_cast<double>(r), rng);
    ad.b = gaussian_matrix(d, r, rng);
    return ad;
}

Matrix materialized_delta(const LowRankAdapter& ad) {
    Matrix m = oracle::naive_matmul(ad.b, ad.a);
    for (double& v : m.data()) v *= ad.alpha / static_cast<double>(ad.rank);
    return m;
}

}  // namespace

TEST_CASE("init_adapter zero-initializes b so delta is zero") {
    for (std::size_t r = 1; r <= 4; ++r) {
        SeededRng rng(r);
        const LowRankAdapter ad = init_adapter(6, 5, r, 16.0, rng);
        CHECK(ad.a.rows() == r);
        CHECK(ad.a.cols() == 5);
        CHECK(ad.b.rows() == 6);
        CHECK(ad.b.cols() == r);
        CHECK(ad.b.max_abs() == 0.0);
        const Matrix d = delta(ad);
        CHECK(d.rows() == 6);
        CHECK(d.cols() == 5);
        CHECK(d.max_abs() == 0.0);
    }
}

TEST_CASE("init_adapter is deterministic in its stream") {
    SeededRng r1(42), r2(42);
    const LowRankAdapter a = init_adapter(4, 4, 2, 16.0, r1);
    const LowRankAdapter b = init_adapter(4, 4, 2, 16.0, r2);
    CHECK(bitwise_equal(a.a, b.a));
}

TEST_CASE("init_adapter draws a with variance 1/r") {
    // 2000 independent 4 x 8 draws give 64000 entries; the sample variance of
    // N(0, 1/4) has relative standard error sqrt(2/64000) ~ 0.6%.
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::uint64_t s = 0; s < 2000; ++s) {
        SeededRng rng(7, s);
        const LowRankAdapter ad = init_adapter(8, 8, 4, 16.0, rng);
        for (double v : ad.a.data()) {
            sum += v;
            sq += v * v;
            ++count;
        }
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sq / static_cast<double>(count) - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(var == doctest::Approx(0.25).epsilon(0.03));
}

TEST_CASE("init_adapter rejects ranks outside [1, min(d, k)]") {
    SeededRng rng(1);
    CHECK_THROWS_AS(init_adapter(4, 3, 4, 1.0, rng), Error);
    CHECK_THROWS_AS(init_adapter(4, 3, 0, 1.0, rng), Error);
    try {
        init_adapter(2, 8, 3, 1.0, rng);
        FAIL("expected a rank error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::rank);
    }
    CHECK_THROWS_AS(init_adapter(4, 4, 2, 1.0, rng, 1.0), Error);
}

TEST_CASE("delta of a rank-one hand case") {
    LowRankAdapter ad;
    ad.rank = 1;
    ad.alpha = 1.0;
    ad.b = Matrix{{1.0}, {0.0}};
    ad.a = Matrix{{2.0, 3.0}};
    CHECK(delta(ad) == Matrix{{2.0, 3.0}, {0.0, 0.0}});
}

TEST_CASE("delta matches the explicit product oracle") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const LowRankAdapter ad = trained_adapter(5, 5, 2, s);
        const Matrix got = delta(ad);
        const Matrix want = materialized_delta(ad);
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("gated_forward identities") {
    SeededRng rng(3);
    const Matrix w0 = gaussian_matrix(5, 4, rng);
    const Matrix x = gaussian_matrix(4, 3, rng);

    SeededRng fresh_rng(9);
    const LowRankAdapter fresh = init_adapter(5, 4, 2, 16.0, fresh_rng);
    const LowRankAdapter trained = trained_adapter(5, 4, 2, 11);

    SUBCASE("gate zero is the base map") { CHECK(bitwise_equal(gated_forward(w0, trained, 0.0, x), matmul(w0, x))); }
    SUBCASE("fresh adapter is the base map") { CHECK(bitwise_equal(gated_forward(w0, fresh, 1.0, x), matmul(w0, x))); }
    SUBCASE("factored path matches the materialized delta") {
        const Matrix got = gated_forward(w0, trained, 0.3, x);
        Matrix dw = materialized_delta(trained);
        for (double& v : dw.data()) v *= 0.3;
        Matrix want = oracle::naive_matmul(w0, x);
        const Matrix extra = oracle::naive_matmul(dw, x);
        for (std::size_t i = 0; i < want.size(); ++i) want.data()[i] += extra.data()[i];
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
    }
    SUBCASE("gate linearity") {
        const Matrix f0 = gated_forward(w0, trained, 0.0, x);
        const Matrix f1 = gated_forward(w0, trained, 1.0, x);
        for (double g : {0.1, 0.37, 0.8}) {
            const Matrix fg = gated_forward(w0, trained, g, x);
            for (std::size_t i = 0; i < fg.size(); ++i) {
                const double lhs = fg.data()[i] - f0.data()[i];
                const double rhs = g * (f1.data()[i] - f0.data()[i]);
                CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(rhs)));
            }
        }
    }
}

TEST_CASE("gated_forward rejects non-conformal shapes") {
    SeededRng rng(3);
    const Matrix w0 = gaussian_matrix(5, 4, rng);
    const LowRankAdapter ad = trained_adapter(5, 4, 2, 1);
    CHECK_THROWS_AS(gated_forward(w0, ad, 1.0, gaussian_matrix(3, 2, rng)), Error);
    const LowRankAdapter wrong = trained_adapter(4, 4, 2, 1);
    CHECK_THROWS_AS(gated_forward(w0, wrong, 1.0, gaussian_matrix(4, 2, rng)), Error);
}

TEST_CASE("dropout mask keeps the expected fraction and rescales") {
    SeededRng rng(5);
    const Matrix mask = dropout_mask(100, 100, 0.25, rng);
    std::size_t kept = 0;
    for (double v : mask.data()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
        kept += v != 0.0;
    }
    CHECK(static_cast<double>(kept) / 10000.0 == doctest::Approx(0.75).epsilon(0.03));
    SeededRng rng2(5);
    CHECK(dropout_mask(3, 3, 0.0, rng2) == Matrix(3, 3, 1.0));
}

TEST_CASE("shared bank stores one entry per family") {
    SharedAdapterBank bank;
    CHECK(bank.size() == 0);
    CHECK_FALSE(bank.contains(Family::Q));
    CHECK_THROWS_AS(bank.at(Family::Q), Error);
    SeededRng rng(1);
    bank.put(Family::Q, init_adapter(8, 8, 1, 16.0, rng));
    bank.put(Family::D, init_adapter(8, 16, 2, 16.0, rng));
    CHECK(bank.size() == 2);
    CHECK(bank.contains(Family::D));
    CHECK(bank.parameter_count() == (8 + 8) + (2 * 16 + 8 * 2));
}

TEST_CASE("family names round-trip") {
    for (Family f : kFamilies) CHECK(family_from_name(family_name(f)) == f);
    CHECK_FALSE(family_from_name("X").has_value());
    CHECK(family_name(Family::I) == "I");
}
