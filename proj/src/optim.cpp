// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/optim.hpp"

#include <cmath>

#include "diffora/errors.hpp"

namespace diffora {

void gd_step(Matrix& params, const Matrix& grads, double eta) {
    if (!params.same_shape(grads)) throw Error(ErrorKind::dimension, "gd_step: parameter and gradient shapes differ");
    if (!grads.all_finite()) throw DivergenceError("non-finite gradient", 0, {});
    auto p = params.data();
    auto g = grads.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= eta * g[i];
}

namespace {

void step_pair(LowRankAdapter& ad, const AdapterGrad& g, AdapterGrad* vel, double eta, double mu) {
    if (vel == nullptr || mu == 0.0) {
        gd_step(ad.a, g.a, eta);
        gd_step(ad.b, g.b, eta);
        return;
    }
    vel->a *= mu;
    vel->a += g.a;
    vel->b *= mu;
    vel->b += g.b;
    gd_step(ad.a, vel->a, eta);
    gd_step(ad.b, vel->b, eta);
}

}  // namespace

void apply_adapter_step(ModularNet& net, const ModularGradients& grads, double eta, MomentumState* momentum) {
    const double mu = momentum ? momentum->momentum : 0.0;
    if (momentum && mu != 0.0 && !momentum->initialized) {
        momentum->velocity = grads;
        for (auto& g : momentum->velocity.own) {
            g.a *= 0.0;
            g.b *= 0.0;
        }
        for (auto& g : momentum->velocity.shared) {
            g.a *= 0.0;
            g.b *= 0.0;
        }
        momentum->initialized = true;
    }
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        for (Family f : kFamilies) {
            ModuleRecord& rec = net.module(l, f);
            if (rec.slot != SlotKind::own) continue;
            AdapterGrad* vel = (momentum && mu != 0.0) ? &momentum->velocity.own_at(l, f) : nullptr;
            step_pair(rec.own, grads.own_at(l, f), vel, eta, mu);
        }
    }
    for (Family f : kFamilies) {
        if (!net.bank().contains(f)) continue;
        AdapterGrad* vel = (momentum && mu != 0.0) ? &momentum->velocity.shared[index_of(f)] : nullptr;
        step_pair(net.bank().at(f), grads.shared[index_of(f)], vel, eta, mu);
    }
}

}  // namespace diffora
