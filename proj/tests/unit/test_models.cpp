// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "reference_model.hpp"

#include "diffora/errors.hpp"
#include "diffora/models.hpp"
#include "diffora/optim.hpp"

using namespace diffora;

namespace {

Matrix unit_columns(std::size_t d, std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    Matrix x = gaussian_matrix(d, n, rng);
    for (std::size_t c = 0; c < n; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < d; ++r) s += x(r, c) * x(r, c);
        for (std::size_t r = 0; r < d; ++r) x(r, c) /= std::sqrt(s);
    }
    return x;
}

ModularShape small_shape() { return ModularShape{2, 4, 6, 3, 2}; }

/// Network with own adapters everywhere, B drawn so the update is non-zero.
ModularNet live_net(const ModularShape& shape, std::uint64_t seed, std::size_t rank = 2) {
    ModularNet net = make_base_modular(shape, SeededRng(seed));
    attach_all_adapters(net, rank, 2.0 * static_cast<double>(rank), SeededRng(seed, 1));
    SeededRng rng(seed, 2);
    for (std::size_t l = 0; l < shape.layers; ++l)
        for (Family f : kFamilies) {
            LowRankAdapter* ad = net.adapter_at(l, f);
            ad->b = gaussian_matrix(ad->b.rows(), ad->b.cols(), rng);
            ad->b *= 0.3;
        }
    return net;
}

Matrix random_gates(std::size_t layers, std::uint64_t seed) {
    SeededRng rng(seed, 3);
    Matrix g(layers, kFamilyCount);
    for (double& v : g.data()) v = 0.2 + 0.8 * rng.uniform();
    return g;
}

}  // namespace

TEST_CASE("theory_forward matches a hand-computed two-unit network") {
    TheoryNet net;
    net.w0 = Matrix{{1.0, -1.0}, {0.0, 0.0}};
    net.w = Matrix(2, 2);
    net.a = Matrix{{1.0}, {-1.0}};
    net.gamma = Matrix(2, 2, 1.0);
    const Matrix x{{0.6}, {0.8}};
    // unit 0: z = 0.6 > 0; unit 1: z = -0.6 -> 0. f = 0.6 / sqrt(2).
    CHECK(theory_forward(net, x)(0, 0) == doctest::Approx(0.6 / std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("theory_forward rejects non-unit inputs") {
    const TheoryNet net = make_theory_net(3, 4, 1.0, SeededRng(1));
    CHECK_THROWS_AS(theory_forward(net, Matrix(3, 1, 1.0)), Error);
    try {
        theory_forward(net, Matrix(3, 1, 1.0));
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::normalization);
    }
}

TEST_CASE("theory_grad agrees with central differences away from kinks") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t d = 2 + seed % 7, m = 3 + seed % 13, n = 1 + seed % 5;
        TheoryNet net = make_theory_net(d, m, 1.0, SeededRng(seed));
        SeededRng grng(seed, 9);
        for (double& g : net.gamma.data()) g = grng.uniform() < 0.3 ? 0.0 : 1.0;
        const Matrix x = unit_columns(d, n, seed + 100);
        SeededRng yr(seed, 7);
        const Matrix y = gaussian_matrix(n, 1, yr);
        const Matrix grad = theory_grad(net, x, y);

        const Matrix z = matmul_tn(net.w0 + hadamard(net.gamma, net.w), x);
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < m; ++c) {
                bool near_kink = false;
                for (std::size_t i = 0; i < n; ++i) near_kink |= std::abs(z(c, i)) < 1e-6;
                if (near_kink) continue;
                const double fd =
                    oracle::central_difference([&] { return theory_loss(net, x, y); }, net.w(r, c), 1e-6);
                if (net.gamma(r, c) == 0.0) {
                    CHECK(grad(r, c) == 0.0);
                } else {
                    CHECK(oracle::relative_error(grad(r, c), fd) <= 1e-4);
                }
            }
    }
}

TEST_CASE("make_theory_net is reproducible and draws each part from its own stream") {
    const TheoryNet a = make_theory_net(4, 8, 0.5, SeededRng(3));
    const TheoryNet b = make_theory_net(4, 8, 0.5, SeededRng(3));
    CHECK(bitwise_equal(a.w0, b.w0));
    CHECK(bitwise_equal(a.w, b.w));
    CHECK(bitwise_equal(a.a, b.a));
    for (double v : a.a.data()) CHECK(std::abs(v) == 1.0);
    const TheoryNet c = make_theory_net(4, 8, 1.0, SeededRng(3));
    CHECK(bitwise_equal(a.w, c.w));
}

TEST_CASE("weight shapes per family") {
    const ModularShape s{1, 4, 6, 3, 1};
    CHECK(s.weight_shape(Family::Q) == std::pair<std::size_t, std::size_t>{4, 4});
    CHECK(s.weight_shape(Family::I) == std::pair<std::size_t, std::size_t>{6, 4});
    CHECK(s.weight_shape(Family::D) == std::pair<std::size_t, std::size_t>{4, 6});
    CHECK(s.input_size() == 12);
}

TEST_CASE("modular_forward matches the materialized-weight reference") {
    const ModularShape shape = small_shape();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ModularNet net = live_net(shape, seed);
        const Matrix gates = random_gates(shape.layers, seed);
        SeededRng xr(seed, 4);
        const Matrix x = gaussian_matrix(shape.model_dim, shape.seq_len, xr);
        const Matrix got = modular_forward(net, gates, x);
        const Matrix want = oracle::reference_forward(net, gates, x);
        for (std::size_t o = 0; o < shape.out_dim; ++o) CHECK(got(o, 0) == doctest::Approx(want(o, 0)).epsilon(1e-12));
    }
}

TEST_CASE("modular_predict stacks per-sample forwards of row-major reshaped columns") {
    const ModularShape shape = small_shape();
    const ModularNet net = live_net(shape, 11);
    const Matrix gates = unit_gates(shape.layers);
    SeededRng xr(12);
    const Matrix xs = gaussian_matrix(shape.input_size(), 3, xr);
    const Matrix pred = modular_predict(net, gates, xs);
    REQUIRE(pred.rows() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        Matrix x(shape.model_dim, shape.seq_len);
        for (std::size_t r = 0; r < shape.input_size(); ++r) x.data()[r] = xs(r, i);
        const Matrix one = modular_forward(net, gates, x);
        for (std::size_t o = 0; o < shape.out_dim; ++o) CHECK(pred(i, o) == one(o, 0));
    }
}

TEST_CASE("fresh adapters leave the base output bitwise unchanged") {
    const ModularShape shape = small_shape();
    const ModularNet base = make_base_modular(shape, SeededRng(5));
    ModularNet adapted = base;
    attach_all_adapters(adapted, 2, 4.0, SeededRng(6));
    SeededRng xr(7);
    const Matrix xs = gaussian_matrix(shape.input_size(), 20, xr);
    CHECK(bitwise_equal(modular_predict(base, unit_gates(2), xs), modular_predict(adapted, unit_gates(2), xs)));
}

TEST_CASE("modular_loss_grad agrees with central differences") {
    const ModularShape shape = small_shape();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ModularNet net = live_net(shape, seed + 20);
        // Route Q and I through the shared bank to cover accumulation.
        SeededRng br(seed, 5);
        LowRankAdapter shared_q = init_adapter(4, 4, 1, 3.0, br);
        shared_q.b = gaussian_matrix(4, 1, br);
        net.bank().put(Family::Q, shared_q);
        for (std::size_t l = 0; l < shape.layers; ++l) net.set_shared(l, Family::Q);
        Matrix gates = random_gates(shape.layers, seed);
        SeededRng xr(seed, 6);
        const Matrix xs = gaussian_matrix(shape.input_size(), 3, xr);
        const Matrix ys = gaussian_matrix(3, shape.out_dim, xr);
        const LossAndGradients lg = modular_loss_grad(net, gates, xs, ys);
        CHECK(lg.loss == doctest::Approx(oracle::reference_loss(net, gates, xs, ys)).epsilon(1e-12));

        auto loss = [&] { return modular_loss(net, gates, xs, ys); };
        auto check_matrix = [&](Matrix& param, const Matrix& grad) {
            REQUIRE(param.same_shape(grad));
            for (std::size_t i = 0; i < param.size(); ++i) {
                const double fd = oracle::central_difference(loss, param.data()[i], 1e-6);
                CHECK(oracle::relative_error(grad.data()[i], fd) <= 1e-4);
            }
        };
        for (std::size_t l = 0; l < shape.layers; ++l)
            for (Family f : kFamilies) {
                if (net.module(l, f).slot != SlotKind::own) continue;
                check_matrix(net.module(l, f).own.a, lg.grad.own_at(l, f).a);
                check_matrix(net.module(l, f).own.b, lg.grad.own_at(l, f).b);
            }
        check_matrix(net.bank().at(Family::Q).a, lg.grad.shared[index_of(Family::Q)].a);
        check_matrix(net.bank().at(Family::Q).b, lg.grad.shared[index_of(Family::Q)].b);
        check_matrix(gates, lg.grad.gates);
    }
}

TEST_CASE("zero gates produce zero adapter gradients and leave those adapters untouched") {
    const ModularShape shape = small_shape();
    ModularNet net = live_net(shape, 31);
    Matrix gates = unit_gates(shape.layers);
    gates(0, index_of(Family::V)) = 0.0;
    gates(1, index_of(Family::D)) = 0.0;
    SeededRng xr(32);
    const Matrix xs = gaussian_matrix(shape.input_size(), 4, xr);
    const Matrix ys = gaussian_matrix(4, shape.out_dim, xr);
    const ModularNet before = net;
    const LossAndGradients lg = modular_loss_grad(net, gates, xs, ys);
    CHECK(lg.grad.own_at(0, Family::V).a.max_abs() == 0.0);
    CHECK(lg.grad.own_at(1, Family::D).b.max_abs() == 0.0);
    apply_adapter_step(net, lg.grad, 0.1);
    CHECK(bitwise_equal(net.module(0, Family::V).own.a, before.module(0, Family::V).own.a));
    CHECK(bitwise_equal(net.module(1, Family::D).own.b, before.module(1, Family::D).own.b));
    CHECK_FALSE(bitwise_equal(net.module(0, Family::Q).own.b, before.module(0, Family::Q).own.b));
    CHECK(same_base_weights(net, before));
}

TEST_CASE("trainable parameters count own adapters and referenced bank entries once") {
    const ModularShape shape{3, 4, 4, 2, 1};
    ModularNet net = make_base_modular(shape, SeededRng(1));
    CHECK(net.trainable_parameter_count() == 0);
    SeededRng rng(2);
    net.set_own(0, Family::Q, init_adapter(4, 4, 2, 1.0, rng));
    CHECK(net.trainable_parameter_count() == 16);
    net.bank().put(Family::K, init_adapter(4, 4, 1, 1.0, rng));
    CHECK(net.trainable_parameter_count() == 16);  // not referenced yet
    for (std::size_t l = 0; l < 3; ++l) net.set_shared(l, Family::K);
    CHECK(net.trainable_parameter_count() == 24);
    CHECK(net.adapter_at(0, Family::K) == net.adapter_at(2, Family::K));
}

TEST_CASE("structural errors") {
    const ModularShape shape = small_shape();
    ModularNet net = make_base_modular(shape, SeededRng(1));
    SeededRng rng(2);
    CHECK_THROWS_AS(net.set_own(0, Family::I, init_adapter(4, 4, 1, 1.0, rng)), Error);
    CHECK_THROWS_AS(net.set_shared(0, Family::V), Error);
    CHECK_THROWS_AS(modular_forward(net, Matrix(1, 6, 1.0), Matrix(4, 3)), Error);
    CHECK_THROWS_AS(modular_predict(net, unit_gates(2), Matrix(5, 2)), Error);

    std::vector<LayerRecord> layers(1);
    for (Family f : kFamilies) layers[0].modules[index_of(f)].weight = Matrix(3, 3);
    try {
        ModularNet bad(ModularShape{1, 4, 4, 2, 1}, layers, Matrix(1, 4));
        FAIL("expected a sharing error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::sharing);
    }
}
