// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "diffora/adapters.hpp"
#include "diffora/numerics.hpp"

namespace diffora {

// ---------------------------------------------------------------------------
// TheoryNet: f(x) = (1/√m) Σ_r a_r · ReLU((w0_r + γ_r ∘ w_r)ᵀ x)
//
// Hidden unit r owns column r of the d x m matrices w0, w and gamma.

struct TheoryNet {
    Matrix w0;     // d x m, frozen
    Matrix w;      // d x m, trainable increment
    Matrix a;      // m x 1, fixed ±1
    Matrix gamma;  // d x m, entries in {0, 1}

    std::size_t input_dim() const { return w0.rows(); }
    std::size_t width() const { return w0.cols(); }
};

/// w0 ~ N(0, w0_scale² I), w ~ N(0, I), a uniform ±1, gamma all ones. Each
/// part draws from its own derived stream.
TheoryNet make_theory_net(std::size_t d, std::size_t m, double w0_scale, const SeededRng& rng);

/// Throws a normalization error unless every column of x has unit norm.
void require_unit_columns(const Matrix& x, double tol = 1e-8);

Matrix theory_forward(const TheoryNet& net, const Matrix& x);
double theory_loss(const TheoryNet& net, const Matrix& x, const Matrix& y);
/// Gradient of theory_loss with respect to w. Coordinates with γ = 0 get 0.
Matrix theory_grad(const TheoryNet& net, const Matrix& x, const Matrix& y);

// ---------------------------------------------------------------------------
// ModularNet: L single-head attention blocks with a ReLU feed-forward, each
// holding six frozen linear maps (Q, K, V, I, O, D) and optional adapters.
//
// A sample is a model_dim x seq_len matrix whose columns are positions. In
// a dataset, sample i is column i of a (model_dim * seq_len) x n matrix,
// stored row-major.

struct ModularShape {
    std::size_t layers = 2;
    std::size_t model_dim = 8;
    std::size_t ffn_dim = 8;
    std::size_t seq_len = 4;
    std::size_t out_dim = 1;

    std::size_t input_size() const { return model_dim * seq_len; }
    /// (rows, cols) of the base weight for a family.
    std::pair<std::size_t, std::size_t> weight_shape(Family f) const;
};

enum class SlotKind { none, own, shared };

struct ModuleRecord {
    Matrix weight;  // frozen base weight
    SlotKind slot = SlotKind::none;
    LowRankAdapter own;  // meaningful only when slot == own
};

struct LayerRecord {
    std::array<ModuleRecord, kFamilyCount> modules;
};

class ModularNet {
public:
    ModularNet() = default;
    ModularNet(ModularShape shape, std::vector<LayerRecord> layers, Matrix head);

    const ModularShape& shape() const { return shape_; }
    std::size_t layer_count() const { return layers_.size(); }

    const ModuleRecord& module(std::size_t layer, Family f) const { return layers_.at(layer).modules[index_of(f)]; }
    ModuleRecord& module(std::size_t layer, Family f) { return layers_.at(layer).modules[index_of(f)]; }

    /// The adapter a module's forward pass uses: its own, its family's bank
    /// entry, or nullptr when the slot is empty.
    const LowRankAdapter* adapter_at(std::size_t layer, Family f) const;
    LowRankAdapter* adapter_at(std::size_t layer, Family f);

    const Matrix& head() const { return head_; }
    SharedAdapterBank& bank() { return bank_; }
    const SharedAdapterBank& bank() const { return bank_; }

    void set_own(std::size_t layer, Family f, LowRankAdapter adapter);
    void set_shared(std::size_t layer, Family f);
    void clear_adapter(std::size_t layer, Family f);

    /// Own adapters plus bank entries, each counted once.
    std::size_t trainable_parameter_count() const;

private:
    ModularShape shape_;
    std::vector<LayerRecord> layers_;
    Matrix head_;  // out_dim x model_dim, frozen
    SharedAdapterBank bank_;
};

/// Random frozen base network with empty adapter slots. Weights are drawn
/// N(0, weight_scale² / fan_in).
ModularNet make_base_modular(const ModularShape& shape, const SeededRng& rng, double weight_scale = 1.0,
                             std::size_t rank = 0);

/// Gives every module a fresh own adapter of the given rank.
void attach_all_adapters(ModularNet& net, std::size_t rank, double alpha, const SeededRng& rng,
                         double dropout_p = 0.0);

/// All-ones L x 6 gate matrix.
Matrix unit_gates(std::size_t layers);

/// Forward pass for one sample (model_dim x seq_len). Returns out_dim x 1.
Matrix modular_forward(const ModularNet& net, const Matrix& gates, const Matrix& x);

/// Forward pass for a dataset (input_size x n). Returns n x out_dim.
Matrix modular_predict(const ModularNet& net, const Matrix& gates, const Matrix& xs);

/// Mean over samples of ½‖f(x_i) - y_i‖².
double modular_loss(const ModularNet& net, const Matrix& gates, const Matrix& xs, const Matrix& ys);

struct AdapterGrad {
    Matrix a;
    Matrix b;
};

struct ModularGradients {
    std::vector<AdapterGrad> own;  // layer * 6 + family; empty for non-own slots
    std::array<AdapterGrad, kFamilyCount> shared;  // empty when the bank lacks that family
    Matrix gates;  // L x 6

    AdapterGrad& own_at(std::size_t layer, Family f) { return own[layer * kFamilyCount + index_of(f)]; }
    const AdapterGrad& own_at(std::size_t layer, Family f) const { return own[layer * kFamilyCount + index_of(f)]; }
};

struct LossAndGradients {
    double loss = 0.0;
    ModularGradients grad;
};

/// Loss and its gradient with respect to every adapter parameter and every
/// gate. When dropout_rng is given, adapters with dropout_p > 0 see an
/// inverted-dropout mask on their input.
LossAndGradients modular_loss_grad(const ModularNet& net, const Matrix& gates, const Matrix& xs, const Matrix& ys,
                                   const SeededRng* dropout_rng = nullptr);

/// Bitwise comparison of all frozen base weights and the head.
bool same_base_weights(const ModularNet& a, const ModularNet& b);

}  // namespace diffora
