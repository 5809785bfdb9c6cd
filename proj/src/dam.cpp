// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/dam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "csv.hpp"
#include "diffora/errors.hpp"
#include "diffora/io.hpp"

namespace diffora {

std::size_t selection_count(double rho, std::size_t modules) {
    if (!(rho > 0.0 && rho <= 1.0)) throw Error(ErrorKind::configuration, "rho must lie in (0, 1]");
    return static_cast<std::size_t>(std::floor(rho * static_cast<double>(modules) + 1e-9));
}

DamState init_dam(std::size_t layers, std::size_t modules, double rho) {
    if (layers == 0 || modules == 0) throw Error(ErrorKind::configuration, "DAM needs L, N >= 1");
    const std::size_t k = selection_count(rho, modules);
    if (k < 1) {
        throw Error(ErrorKind::configuration, "floor(rho * N) = 0 selects no module (rho=" + format_double(rho) +
                                                  ", N=" + std::to_string(modules) + ")");
    }
    DamState dam;
    dam.logits = Matrix(layers, modules);
    dam.gamma_bar = gamma_from_logits(dam.logits);
    dam.rho = rho;
    dam.k = k;
    return dam;
}

Matrix gamma_from_logits(const Matrix& logits) {
    Matrix g = logits;
    for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            total += v;
        }
        for (double& v : row) v /= total;
    }
    return g;
}

Matrix logits_gradient(const Matrix& gamma_bar, const Matrix& gate_grad) {
    if (!gamma_bar.same_shape(gate_grad)) throw Error(ErrorKind::dimension, "logits_gradient shape mismatch");
    Matrix out(gamma_bar.rows(), gamma_bar.cols());
    for (std::size_t r = 0; r < gamma_bar.rows(); ++r) {
        double inner = 0.0;
        for (std::size_t c = 0; c < gamma_bar.cols(); ++c) inner += gamma_bar(r, c) * gate_grad(r, c);
        for (std::size_t c = 0; c < gamma_bar.cols(); ++c) out(r, c) = gamma_bar(r, c) * (gate_grad(r, c) - inner);
    }
    return out;
}

Matrix top_k_rows(const Matrix& gamma_bar, std::size_t k) {
    const std::size_t n = gamma_bar.cols();
    if (k < 1 || k > n) throw Error(ErrorKind::configuration, "k must lie in [1, N]");
    Matrix bin(gamma_bar.rows(), n);
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < gamma_bar.rows(); ++r) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return gamma_bar(r, a) > gamma_bar(r, b); });
        for (std::size_t i = 0; i < k; ++i) bin(r, order[i]) = 1.0;
    }
    return bin;
}

DamState discretize(const DamState& dam) {
    DamState out = dam;
    out.gamma_bin = top_k_rows(dam.gamma_bar, dam.k);
    return out;
}

std::vector<double> row_entropy(const Matrix& gamma_bar) {
    std::vector<double> h(gamma_bar.rows(), 0.0);
    for (std::size_t r = 0; r < gamma_bar.rows(); ++r)
        for (double p : gamma_bar.row(r))
            if (p > 0.0) h[r] -= p * std::log(p);
    return h;
}

bool sharing_heuristic(const Matrix& gamma_bar) {
    std::vector<double> h = row_entropy(gamma_bar);
    if (h.empty()) return false;
    std::sort(h.begin(), h.end());
    const std::size_t n = h.size();
    const double median = (n % 2) ? h[n / 2] : 0.5 * (h[n / 2 - 1] + h[n / 2]);
    return median > 0.9 * std::log(static_cast<double>(gamma_bar.cols()));
}

namespace {

void check_finite_loss(double loss, std::size_t step, const std::vector<StepLoss>* log) {
    if (std::isfinite(loss)) return;
    std::vector<double> last;
    if (log) {
        for (auto it = log->rbegin(); it != log->rend() && last.size() < 3; ++it) last.push_back(it->train);
    }
    throw DivergenceError("non-finite loss", step, std::move(last));
}

}  // namespace

void bilevel_step(DamState& dam, ModularNet& net, BatchRef train, BatchRef valid, const BilevelOptions& opts,
                  std::vector<StepLoss>* log, MomentumState* momentum, const SeededRng* dropout_rng) {
    if (train.x.cols() == 0 || valid.x.cols() == 0) throw Error(ErrorKind::data, "empty batch");
    if (dam.layers() != net.layer_count() || dam.modules() != kFamilyCount) {
        throw Error(ErrorKind::dimension, "DAM shape does not match the network");
    }
    const double eta_dam = opts.eta_dam < 0.0 ? opts.eta : opts.eta_dam;
    std::size_t step = opts.step_offset;

    // Outer: first-order gradient of the validation loss through the gates.
    {
        const LossAndGradients valid_lg = modular_loss_grad(net, dam.gamma_bar, valid.x, valid.y);
        check_finite_loss(valid_lg.loss, step, log);
        const Matrix dtheta = logits_gradient(dam.gamma_bar, valid_lg.grad.gates);
        if (!dtheta.all_finite()) throw DivergenceError("non-finite logits gradient", step, {});
        gd_step(dam.logits, dtheta, eta_dam);
        dam.gamma_bar = gamma_from_logits(dam.logits);
        if (log) {
            const double tl = modular_loss(net, dam.gamma_bar, train.x, train.y);
            const double vl = modular_loss(net, dam.gamma_bar, valid.x, valid.y);
            check_finite_loss(tl, step, log);
            log->push_back({tl, vl});
        }
        ++step;
    }

    // Inner: adapter descent on the training loss with the gates held fixed.
    for (std::size_t t = 0; t < opts.inner_steps; ++t, ++step) {
        std::optional<SeededRng> drop;
        if (dropout_rng) drop = dropout_rng->derive(step);
        const LossAndGradients lg = modular_loss_grad(net, dam.gamma_bar, train.x, train.y, drop ? &*drop : nullptr);
        check_finite_loss(lg.loss, step, log);
        try {
            apply_adapter_step(net, lg.grad, opts.eta, momentum);
        } catch (const DivergenceError&) {
            throw DivergenceError("non-finite adapter gradient", step, {});
        }
        if (log) {
            const double tl = modular_loss(net, dam.gamma_bar, train.x, train.y);
            const double vl = modular_loss(net, dam.gamma_bar, valid.x, valid.y);
            check_finite_loss(tl, step, log);
            log->push_back({tl, vl});
        }
    }
}

void attach_sharing(const DamState& dam, ModularNet& net, const AttachOptions& opts, const SeededRng& rng) {
    if (!dam.gamma_bin) throw Error(ErrorKind::configuration, "attach_sharing needs a discretized DAM");
    const Matrix& gamma = *dam.gamma_bin;
    if (gamma.rows() != net.layer_count() || gamma.cols() != kFamilyCount) {
        throw Error(ErrorKind::dimension, "DAM shape does not match the network");
    }
    if (opts.sharing && opts.r_s < 1) throw Error(ErrorKind::configuration, "shared rank must be >= 1");
    const ModularShape& shape = net.shape();
    for (Family f : kFamilies) {
        const auto [r0, c0] = shape.weight_shape(f);
        for (std::size_t l = 0; l < net.layer_count(); ++l) {
            const Matrix& w = net.module(l, f).weight;
            if (w.rows() != r0 || w.cols() != c0) {
                throw Error(ErrorKind::sharing, "family " + std::string(family_name(f)) +
                                                    " differs in shape across layers");
            }
        }
    }

    net.bank() = SharedAdapterBank{};
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        for (Family f : kFamilies) {
            const bool selected = gamma(l, index_of(f)) == 1.0;
            if (selected) {
                if (opts.warm_start && net.module(l, f).slot == SlotKind::own) continue;
                const auto [d, k] = shape.weight_shape(f);
                SeededRng stream = rng.derive(l * kFamilyCount + index_of(f));
                net.set_own(l, f, init_adapter(d, k, opts.r_l, opts.alpha, stream, opts.dropout_p));
            } else if (opts.sharing) {
                if (!net.bank().contains(f)) {
                    const auto [d, k] = shape.weight_shape(f);
                    SeededRng stream = rng.derive(1'000'000 + index_of(f));
                    net.bank().put(f, init_adapter(d, k, opts.r_s, opts.alpha, stream, opts.dropout_p));
                }
                net.set_shared(l, f);
            } else {
                net.clear_adapter(l, f);
            }
        }
    }
}

void write_dam_csv(const std::filesystem::path& path, const Matrix& values) {
    std::string out;
    for (std::size_t c = 0; c < values.cols(); ++c) {
        if (c) out += ',';
        out += values.cols() == kFamilyCount ? std::string(family_name(kFamilies[c])) : "m" + std::to_string(c + 1);
    }
    out += '\n';
    for (std::size_t r = 0; r < values.rows(); ++r) {
        for (std::size_t c = 0; c < values.cols(); ++c) {
            if (c) out += ',';
            out += format_double(values(r, c));
        }
        out += '\n';
    }
    atomic_write(path, out);
}

Matrix read_dam_csv(const std::filesystem::path& path) {
    const auto rows = csv::split(read_file(path));
    if (rows.empty()) throw ParseError("missing header", 1);
    const std::size_t n = rows.front().cells.size();
    Matrix m(rows.size() - 1, n);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].cells.size() != n) throw ParseError("ragged row", rows[r].line);
        for (std::size_t c = 0; c < n; ++c) m(r - 1, c) = csv::parse_number(rows[r].cells[c], rows[r].line);
    }
    return m;
}

}  // namespace diffora
