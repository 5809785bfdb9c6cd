// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <vector>

#include "diffora/models.hpp"
#include "diffora/numerics.hpp"

namespace diffora {

/// p ← p - eta·g. Throws a divergence error on a non-finite gradient.
void gd_step(Matrix& params, const Matrix& grads, double eta);

/// Heavy-ball state for the adapter parameters of one ModularNet. Unused
/// when momentum is zero, which is plain gradient descent.
struct MomentumState {
    double momentum = 0.0;
    ModularGradients velocity;
    bool initialized = false;
};

/// Applies one descent step to every own adapter and every bank entry.
/// Frozen base weights and the head are never touched.
void apply_adapter_step(ModularNet& net, const ModularGradients& grads, double eta, MomentumState* momentum = nullptr);

}  // namespace diffora
