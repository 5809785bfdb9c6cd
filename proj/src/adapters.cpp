// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/adapters.hpp"

#include <cmath>
#include <string>

#include "diffora/errors.hpp"

namespace diffora {

namespace {
constexpr std::array<std::string_view, kFamilyCount> kNames = {"Q", "K", "V", "I", "O", "D"};
}

std::string_view family_name(Family f) { return kNames[index_of(f)]; }

std::optional<Family> family_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kFamilyCount; ++i)
        if (kNames[i] == name) return kFamilies[i];
    return std::nullopt;
}

LowRankAdapter init_adapter(std::size_t d, std::size_t k, std::size_t r, double alpha, SeededRng& rng,
                            double dropout_p) {
    if (r < 1 || r > std::min(d, k)) {
        throw Error(ErrorKind::rank, "rank " + std::to_string(r) + " outside [1, min(" + std::to_string(d) + ", " +
                                         std::to_string(k) + ")]");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
        throw Error(ErrorKind::configuration, "dropout probability must lie in [0, 1)");
    }
    LowRankAdapter ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    ad.a = gaussian_matrix(r, k, rng);
    ad.a *= 1.0 / std::sqrt(static_cast<double>(r));
    ad.b = Matrix(d, r);
    return ad;
}

Matrix delta(const LowRankAdapter& adapter) {
    Matrix d = matmul(adapter.b, adapter.a);
    d *= adapter.scaling();
    return d;
}

Matrix gated_forward(const Matrix& w0, const LowRankAdapter& adapter, double gate, const Matrix& x) {
    if (w0.cols() != x.rows() || adapter.in_dim() != w0.cols() || adapter.out_dim() != w0.rows()) {
        throw Error(ErrorKind::dimension, "gated_forward: incompatible weight, adapter, and input shapes");
    }
    Matrix h = matmul(w0, x);
    if (gate == 0.0) return h;
    Matrix branch = matmul(adapter.b, matmul(adapter.a, x));
    branch *= gate * adapter.scaling();
    h += branch;
    return h;
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, SeededRng& rng) {
    Matrix mask(rows, cols, 1.0);
    if (p <= 0.0) return mask;
    const double keep = 1.0 / (1.0 - p);
    for (double& v : mask.data()) v = rng.uniform() < p ? 0.0 : keep;
    return mask;
}

const LowRankAdapter& SharedAdapterBank::at(Family f) const {
    auto it = adapters_.find(f);
    if (it == adapters_.end()) {
        throw Error(ErrorKind::sharing, "no shared adapter for family " + std::string(family_name(f)));
    }
    return it->second;
}

LowRankAdapter& SharedAdapterBank::at(Family f) {
    return const_cast<LowRankAdapter&>(static_cast<const SharedAdapterBank&>(*this).at(f));
}

void SharedAdapterBank::put(Family f, LowRankAdapter adapter) { adapters_.insert_or_assign(f, std::move(adapter)); }

std::size_t SharedAdapterBank::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [f, ad] : adapters_) n += ad.parameter_count();
    return n;
}

}  // namespace diffora
