// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string_view>

#include "diffora/numerics.hpp"

namespace diffora {

/// The six linear-map roles of one transformer layer.
enum class Family : std::size_t { Q = 0, K = 1, V = 2, I = 3, O = 4, D = 5 };

inline constexpr std::size_t kFamilyCount = 6;
inline constexpr std::array<Family, kFamilyCount> kFamilies = {Family::Q, Family::K, Family::V,
                                                               Family::I, Family::O, Family::D};

std::string_view family_name(Family f);
std::optional<Family> family_from_name(std::string_view name);
inline std::size_t index_of(Family f) { return static_cast<std::size_t>(f); }

/// Low-rank update ΔW = (alpha / rank) · B·A for a d x k weight.
struct LowRankAdapter {
    Matrix a;  // rank x k
    Matrix b;  // d x rank
    std::size_t rank = 0;
    double alpha = 1.0;
    double dropout_p = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
    std::size_t out_dim() const { return b.rows(); }
    std::size_t in_dim() const { return a.cols(); }
    std::size_t parameter_count() const { return a.size() + b.size(); }
};

/// A is drawn N(0, 1/r) and B starts at zero, so delta() is zero at init.
LowRankAdapter init_adapter(std::size_t d, std::size_t k, std::size_t r, double alpha, SeededRng& rng,
                            double dropout_p = 0.0);

Matrix delta(const LowRankAdapter& adapter);

/// w0·x + gate·(alpha/r)·B·(A·x), evaluated without materializing ΔW.
Matrix gated_forward(const Matrix& w0, const LowRankAdapter& adapter, double gate, const Matrix& x);

/// Inverted-dropout mask: each entry is 0 with probability p, else 1/(1-p).
Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, SeededRng& rng);

/// One adapter per module family, referenced by every unselected module of
/// that family. Referencing sites hold the family key, never a copy.
class SharedAdapterBank {
public:
    bool contains(Family f) const { return adapters_.contains(f); }
    const LowRankAdapter& at(Family f) const;
    LowRankAdapter& at(Family f);
    void put(Family f, LowRankAdapter adapter);
    std::size_t size() const { return adapters_.size(); }
    std::size_t parameter_count() const;
    const std::map<Family, LowRankAdapter>& entries() const { return adapters_; }

private:
    std::map<Family, LowRankAdapter> adapters_;
};

}  // namespace diffora
