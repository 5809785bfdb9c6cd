// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "diffora/models.hpp"
#include "diffora/numerics.hpp"
#include "diffora/optim.hpp"

namespace diffora {

/// Differentiable adaptation matrix. Each row of gamma_bar is the softmax of
/// the matching logits row; gamma_bin holds the top-k selection once the
/// state has been discretized.
struct DamState {
    Matrix logits;
    Matrix gamma_bar;
    std::optional<Matrix> gamma_bin;
    double rho = 1.0;
    std::size_t k = 1;

    std::size_t layers() const { return logits.rows(); }
    std::size_t modules() const { return logits.cols(); }
};

/// ⌊rho·N⌋, with a 1e-9 guard so ratios such as 0.7·10 land on 7.
std::size_t selection_count(double rho, std::size_t modules);

DamState init_dam(std::size_t layers, std::size_t modules, double rho);

/// Row-wise max-shifted exponential normalization.
Matrix gamma_from_logits(const Matrix& logits);

/// Back-propagates dL/dγ̄ through gamma_from_logits to dL/dθ.
Matrix logits_gradient(const Matrix& gamma_bar, const Matrix& gate_grad);

/// Keeps the k largest entries of each row; ties at the k-th value go to the
/// lower column index, so every row has exactly k ones.
Matrix top_k_rows(const Matrix& gamma_bar, std::size_t k);

DamState discretize(const DamState& dam);

/// Shannon entropy (nats) of every row, with 0·ln 0 = 0.
std::vector<double> row_entropy(const Matrix& gamma_bar);

/// True when the median row entropy exceeds 0.9·ln N, i.e. the relaxed
/// matrix barely discriminates between modules.
bool sharing_heuristic(const Matrix& gamma_bar);

struct BatchRef {
    const Matrix& x;
    const Matrix& y;
};

struct StepLoss {
    double train = 0.0;
    double valid = 0.0;
};

struct BilevelOptions {
    double eta = 0.01;
    /// Learning rate of the logits update; negative means "same as eta".
    double eta_dam = -1.0;
    std::size_t inner_steps = 1;
    double momentum = 0.0;
    /// Global index of the first step, for divergence diagnostics.
    std::size_t step_offset = 0;
};

/// One outer update of the logits on the validation loss (adapters held
/// fixed, first-order) followed by inner_steps descent steps of all adapter
/// parameters on the training loss (gates held fixed). Appends one StepLoss
/// per update to `log` when given.
void bilevel_step(DamState& dam, ModularNet& net, BatchRef train, BatchRef valid, const BilevelOptions& opts,
                  std::vector<StepLoss>* log = nullptr, MomentumState* momentum = nullptr,
                  const SeededRng* dropout_rng = nullptr);

struct AttachOptions {
    std::size_t r_l = 4;
    std::size_t r_s = 1;
    double alpha = 16.0;
    double dropout_p = 0.0;
    bool sharing = true;
    /// Keep an existing own adapter on selected modules instead of a fresh one.
    bool warm_start = false;
};

/// Wires adapters according to gamma_bin: selected modules get own adapters
/// of rank r_l; unselected modules reference their family's bank entry of
/// rank r_s when sharing is on and carry nothing otherwise.
void attach_sharing(const DamState& dam, ModularNet& net, const AttachOptions& opts, const SeededRng& rng);

/// L x N CSV with a header row of family names.
void write_dam_csv(const std::filesystem::path& path, const Matrix& values);
Matrix read_dam_csv(const std::filesystem::path& path);

}  // namespace diffora
