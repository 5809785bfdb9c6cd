// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <thread>

#include "diffora/errors.hpp"

namespace diffora {

Matrix GramEstimate::h_std_error(const Matrix& x) const {
    const Matrix xx = matmul_tn(x, x);
    Matrix out = std_error;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= std::abs(xx.data()[i]);
    return out;
}

namespace {

constexpr std::size_t kMaxGramPoints = 64;

struct JointCounts {
    std::vector<std::uint64_t> gated;
    std::vector<std::uint64_t> ungated;
    std::vector<std::uint64_t> differ;

    explicit JointCounts(std::size_t n) : gated(n * n), ungated(n * n), differ(n * n) {}
    JointCounts& operator+=(const JointCounts& o) {
        for (std::size_t i = 0; i < gated.size(); ++i) {
            gated[i] += o.gated[i];
            ungated[i] += o.ungated[i];
            differ[i] += o.differ[i];
        }
        return *this;
    }
};

void sample_range(const Matrix& x, const Matrix& w0, const Matrix& gamma, const SeededRng& rng, std::size_t begin,
                  std::size_t end, bool want_ungated, JointCounts& counts) {
    const std::size_t d = x.rows();
    const std::size_t n = x.cols();
    const std::size_t m = w0.cols();
    std::vector<double> w(d);
    std::vector<double> zg(d), zu(d);
    std::vector<unsigned char> bg(n), bu(n);
    for (std::size_t s = begin; s < end; ++s) {
        SeededRng stream = rng.derive(s);
        const std::size_t r = static_cast<std::size_t>(stream.below(m));
        for (std::size_t k = 0; k < d; ++k) w[k] = stream.normal();
        for (std::size_t k = 0; k < d; ++k) {
            zg[k] = w0(k, r) + gamma(k, r) * w[k];
            zu[k] = w0(k, r) + w[k];
        }
        for (std::size_t i = 0; i < n; ++i) {
            double pg = 0.0, pu = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                pg += zg[k] * x(k, i);
                pu += zu[k] * x(k, i);
            }
            bg[i] = pg >= 0.0;
            bu[i] = pu >= 0.0;
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                const bool g = bg[i] && bg[j];
                counts.gated[i * n + j] += g;
                if (want_ungated) {
                    const bool u = bu[i] && bu[j];
                    counts.ungated[i * n + j] += u;
                    counts.differ[i * n + j] += g != u;
                }
            }
        }
    }
}

JointCounts sample_counts(const Matrix& x, const Matrix& w0, const Matrix& gamma, std::size_t samples,
                          const SeededRng& rng, std::size_t workers, bool want_ungated) {
    require_unit_columns(x);
    if (samples < 1) throw Error(ErrorKind::configuration, "Gram estimate needs at least one sample");
    if (x.cols() == 0 || x.cols() > kMaxGramPoints) {
        throw Error(ErrorKind::dimension, "Gram estimates support 1..64 points");
    }
    if (w0.rows() != x.rows() || !gamma.same_shape(w0) || w0.cols() == 0) {
        throw Error(ErrorKind::dimension, "w0 and gamma must be d x m with d matching the data");
    }
    const std::size_t n = x.cols();
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, samples / 1024));
    std::vector<JointCounts> partial(workers, JointCounts(n));
    std::vector<std::thread> threads;
    const std::size_t chunk = (samples + workers - 1) / workers;
    for (std::size_t t = 0; t < workers; ++t) {
        const std::size_t begin = std::min(samples, t * chunk);
        const std::size_t end = std::min(samples, begin + chunk);
        if (t + 1 == workers) {
            sample_range(x, w0, gamma, rng, begin, end, want_ungated, partial[t]);
        } else {
            threads.emplace_back(sample_range, std::cref(x), std::cref(w0), std::cref(gamma), std::cref(rng), begin,
                                 end, want_ungated, std::ref(partial[t]));
        }
    }
    for (auto& th : threads) th.join();
    JointCounts total(n);
    for (const auto& p : partial) total += p;
    return total;
}

GramEstimate to_estimate(const Matrix& x, const std::vector<std::uint64_t>& counts, std::size_t samples) {
    const std::size_t n = x.cols();
    const double s = static_cast<double>(samples);
    const Matrix xx = matmul_tn(x, x);
    GramEstimate est;
    est.samples = samples;
    est.indicator = Matrix(n, n);
    est.std_error = Matrix(n, n);
    est.h = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            const double p = static_cast<double>(counts[i * n + j]) / s;
            const double se = std::sqrt(p * (1.0 - p) / s);
            for (auto [a, b] : {std::pair{i, j}, std::pair{j, i}}) {
                est.indicator(a, b) = p;
                est.std_error(a, b) = se;
            }
            // Symmetric by construction: both triangles get the same product.
            const double hij = 0.5 * (xx(i, j) + xx(j, i)) * p;
            est.h(i, j) = hij;
            est.h(j, i) = hij;
        }
    }
    return est;
}

}  // namespace

GramEstimate estimate_gram(const Matrix& x, const Matrix& w0, const Matrix& gamma, std::size_t samples,
                           const SeededRng& rng, std::size_t workers) {
    const JointCounts c = sample_counts(x, w0, gamma, samples, rng, workers, false);
    return to_estimate(x, c.gated, samples);
}

CoupledGram estimate_coupled_gram(const Matrix& x, const Matrix& w0, const Matrix& gamma, std::size_t samples,
                                  const SeededRng& rng, std::size_t workers) {
    const JointCounts c = sample_counts(x, w0, gamma, samples, rng, workers, true);
    CoupledGram out;
    out.gated = to_estimate(x, c.gated, samples);
    out.ungated = to_estimate(x, c.ungated, samples);
    const std::size_t n = x.cols();
    const double s = static_cast<double>(samples);
    out.premise = Matrix(n, n);
    out.premise_std_error = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            const auto g = static_cast<std::int64_t>(c.gated[i * n + j]);
            const auto u = static_cast<std::int64_t>(c.ungated[i * n + j]);
            const double mean = static_cast<double>(g - u) / s;
            const double second = static_cast<double>(c.differ[i * n + j]) / s;
            const double se = std::sqrt(std::max(0.0, second - mean * mean) / s);
            out.premise(i, j) = out.premise(j, i) = mean;
            out.premise_std_error(i, j) = out.premise_std_error(j, i) = se;
        }
    }
    return out;
}

EigenComparison eigen_compare(const GramEstimate& gated, const GramEstimate& ungated, const Matrix& x,
                              const Matrix* premise) {
    if (!gated.h.same_shape(ungated.h) || gated.h.rows() != x.cols()) {
        throw Error(ErrorKind::shape, "Gram estimates do not describe the same points");
    }
    EigenComparison cmp;
    cmp.lambda_gamma = min_eigenvalue(gated.h);
    cmp.lambda_0 = min_eigenvalue(ungated.h);
    const double max_se = std::max(gated.h_std_error(x).max_abs(), ungated.h_std_error(x).max_abs());
    cmp.noise_floor = 3.0 * max_se * static_cast<double>(x.cols());
    if (premise) {
        if (!premise->same_shape(gated.h)) throw Error(ErrorKind::shape, "premise matrix has the wrong shape");
        cmp.premise_lambda_min = min_eigenvalue(*premise);
        cmp.premise_holds = cmp.premise_lambda_min >= -cmp.noise_floor;
    } else {
        cmp.premise_lambda_min = std::numeric_limits<double>::quiet_NaN();
    }
    cmp.dominance_holds = cmp.lambda_gamma >= cmp.lambda_0 - cmp.noise_floor;
    return cmp;
}

EigenComparison eigen_compare(const CoupledGram& coupled, const Matrix& x) {
    return eigen_compare(coupled.gated, coupled.ungated, x, &coupled.premise);
}

double fit_convergence_rate(const std::vector<double>& residuals, double eta) {
    if (residuals.size() < 10) throw Error(ErrorKind::domain, "need at least 10 residuals to fit a rate");
    if (!(eta > 0.0)) throw Error(ErrorKind::domain, "step size must be positive");
    for (double r : residuals) {
        if (!(r > 0.0) || !std::isfinite(r)) throw Error(ErrorKind::domain, "residuals must be positive and finite");
    }
    const double decade = residuals.front() / 10.0;
    std::size_t last = residuals.size() - 1;
    for (std::size_t i = 1; i < residuals.size(); ++i) {
        if (residuals[i] <= decade) {
            last = i;
            break;
        }
    }
    last = std::max<std::size_t>(last, 9);
    const std::size_t count = last + 1;
    double st = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        st += static_cast<double>(i) * eta;
        sy += std::log(residuals[i]);
    }
    const double mt = st / static_cast<double>(count);
    const double my = sy / static_cast<double>(count);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double dt = static_cast<double>(i) * eta - mt;
        num += dt * (std::log(residuals[i]) - my);
        den += dt * dt;
    }
    return num / den;
}

GeneralizationTerm generalization_term(const Matrix& y, const Matrix& h, std::size_t sample_count) {
    if (h.rows() != h.cols() || y.rows() != h.rows() || y.cols() != 1) {
        throw Error(ErrorKind::dimension, "generalization_term needs n x n Gram and n x 1 labels");
    }
    if (sample_count == 0) throw Error(ErrorKind::configuration, "sample count must be positive");
    GeneralizationTerm out;
    Matrix reg = h;
    out.lambda_min = min_eigenvalue(reg);
    constexpr double kFloor = 1e-10;
    constexpr double kRidge = 1e-8;
    if (out.lambda_min <= kFloor) {
        out.regularization = kRidge;
        for (std::size_t i = 0; i < reg.rows(); ++i) reg(i, i) += kRidge;
        out.lambda_min = min_eigenvalue(reg);
        if (out.lambda_min <= kFloor) {
            throw DefinitenessError("Gram matrix is indefinite even after regularization", out.lambda_min);
        }
    }
    const double n = static_cast<double>(sample_count);
    const Matrix sol = solve_spd(reg, y);
    out.tight = std::sqrt(std::max(0.0, dot(y, sol)) / n);
    out.loose = std::sqrt(dot(y, y) / (out.lambda_min * n));
    return out;
}

double theorem_step_size(const Matrix& y, const Matrix& h, std::size_t sample_count, std::size_t width, double kappa,
                         double c) {
    const GeneralizationTerm g = generalization_term(y, h, sample_count);
    const double quad = g.tight * g.tight * static_cast<double>(sample_count);
    return kappa * c * std::sqrt(quad) / (static_cast<double>(width) * std::sqrt(static_cast<double>(sample_count)));
}

std::vector<double> train_theory_net(TheoryNet& net, const Matrix& x, const Matrix& y, double eta, std::size_t steps) {
    std::vector<double> residuals;
    residuals.reserve(steps + 1);
    residuals.push_back(2.0 * theory_loss(net, x, y));
    for (std::size_t s = 0; s < steps; ++s) {
        const Matrix g = theory_grad(net, x, y);
        if (!g.all_finite()) throw DivergenceError("non-finite TheoryNet gradient", s, {residuals.back()});
        auto w = net.w.data();
        auto gd = g.data();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * gd[i];
        const double r = 2.0 * theory_loss(net, x, y);
        if (!std::isfinite(r)) throw DivergenceError("non-finite TheoryNet residual", s, {residuals.back()});
        residuals.push_back(r);
    }
    return residuals;
}

Matrix module_gamma(std::size_t d, std::size_t m, std::size_t groups, std::size_t active, const SeededRng& rng) {
    if (groups < 1 || groups > m || active > groups) {
        throw Error(ErrorKind::configuration, "module gate needs 1 <= groups <= m and active <= groups");
    }
    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng stream = rng;
    for (std::size_t i = groups; i > 1; --i) std::swap(order[i - 1], order[stream.below(i)]);
    std::vector<bool> on(groups, false);
    for (std::size_t i = 0; i < active; ++i) on[order[i]] = true;
    Matrix gamma(d, m);
    for (std::size_t r = 0; r < m; ++r) {
        const std::size_t g = r * groups / m;
        if (!on[g]) continue;
        for (std::size_t k = 0; k < d; ++k) gamma(k, r) = 1.0;
    }
    return gamma;
}

}  // namespace diffora
