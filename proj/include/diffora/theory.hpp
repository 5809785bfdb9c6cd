// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "diffora/models.hpp"
#include "diffora/numerics.hpp"

namespace diffora {

/// Monte-Carlo estimate of the gated Gram matrix
///   H_ij = x_iᵀx_j · P[(w0_r + γ_r ∘ w)ᵀx_i ≥ 0 and (w0_r + γ_r ∘ w)ᵀx_j ≥ 0]
/// over w ~ N(0, I) and r uniform over the hidden units.
struct GramEstimate {
    Matrix h;          // n x n
    Matrix indicator;  // n x n joint-activation frequencies
    Matrix std_error;  // n x n standard error of each indicator mean
    std::size_t samples = 0;

    /// Standard error of each entry of h, i.e. |x_iᵀx_j| · std_error.
    Matrix h_std_error(const Matrix& x) const;
};

/// Gated and ungated estimates built from the same (w, r) draws, plus the
/// exact mean of the per-draw indicator differences I^{Γw} - I^w.
struct CoupledGram {
    GramEstimate gated;
    GramEstimate ungated;
    Matrix premise;  // n x n
    Matrix premise_std_error;
};

/// w0 and gamma are d x m with hidden unit r in column r. Draw s uses the
/// stream rng.derive(s), so the result does not depend on `workers`.
GramEstimate estimate_gram(const Matrix& x, const Matrix& w0, const Matrix& gamma, std::size_t samples,
                           const SeededRng& rng, std::size_t workers = 1);

CoupledGram estimate_coupled_gram(const Matrix& x, const Matrix& w0, const Matrix& gamma, std::size_t samples,
                                  const SeededRng& rng, std::size_t workers = 1);

struct EigenComparison {
    double lambda_gamma = 0.0;
    double lambda_0 = 0.0;
    /// λ_min(I^{Γw} - I^w); NaN when no coupled premise was supplied.
    double premise_lambda_min = 0.0;
    /// 3 · (largest entry standard error) · n, the Monte-Carlo tolerance.
    double noise_floor = 0.0;
    bool premise_holds = false;
    bool dominance_holds = false;
};

EigenComparison eigen_compare(const GramEstimate& gated, const GramEstimate& ungated, const Matrix& x,
                              const Matrix* premise = nullptr);
EigenComparison eigen_compare(const CoupledGram& coupled, const Matrix& x);

/// Least-squares slope of ln(residual) against t = step·eta, fitted from the
/// first point up to the first tenfold drop (at least 10 points).
double fit_convergence_rate(const std::vector<double>& residuals, double eta);

struct GeneralizationTerm {
    double tight = 0.0;  // √(yᵀH⁻¹y / N)
    double loose = 0.0;  // √(yᵀy / (λ_min N))
    double lambda_min = 0.0;
    double regularization = 0.0;  // ridge added to H, 0 when none was needed
};

GeneralizationTerm generalization_term(const Matrix& y, const Matrix& h, std::size_t sample_count);

/// η = κ·C·√(yᵀH⁻¹y) / (m √N).
double theorem_step_size(const Matrix& y, const Matrix& h, std::size_t sample_count, std::size_t width,
                         double kappa = 0.1, double c = 1.0);

/// Runs `steps` descent steps on w and returns ‖f - y‖² before the first
/// step and after each step (steps + 1 entries).
std::vector<double> train_theory_net(TheoryNet& net, const Matrix& x, const Matrix& y, double eta, std::size_t steps);

/// d x m gate: hidden units are split into `groups` contiguous blocks and
/// exactly `active` randomly chosen blocks are switched on.
Matrix module_gamma(std::size_t d, std::size_t m, std::size_t groups, std::size_t active, const SeededRng& rng);

}  // namespace diffora
