// Copyright (c) 2026, The diffora-lab Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "diffora/models.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "diffora/errors.hpp"

namespace diffora {

// ---------------------------------------------------------------------------
// TheoryNet

TheoryNet make_theory_net(std::size_t d, std::size_t m, double w0_scale, const SeededRng& rng) {
    SeededRng w0_stream = rng.derive(1);
    SeededRng w_stream = rng.derive(2);
    SeededRng a_stream = rng.derive(3);
    TheoryNet net;
    net.w0 = gaussian_matrix(d, m, w0_stream);
    net.w0 *= w0_scale;
    net.w = gaussian_matrix(d, m, w_stream);
    net.a = sign_vector(m, a_stream);
    net.gamma = Matrix(d, m, 1.0);
    return net;
}

void require_unit_columns(const Matrix& x, double tol) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) s += x(r, c) * x(r, c);
        if (std::abs(std::sqrt(s) - 1.0) > tol) {
            throw Error(ErrorKind::normalization, "column " + std::to_string(c) + " has norm " +
                                                      std::to_string(std::sqrt(s)));
        }
    }
}

namespace {

void check_theory_shapes(const TheoryNet& net, const Matrix& x) {
    const std::size_t d = net.input_dim();
    const std::size_t m = net.width();
    if (!net.w.same_shape(net.w0) || !net.gamma.same_shape(net.w0) || net.a.rows() != m || net.a.cols() != 1) {
        throw Error(ErrorKind::dimension, "inconsistent TheoryNet parameter shapes");
    }
    if (x.rows() != d) {
        throw Error(ErrorKind::dimension, "input has " + std::to_string(x.rows()) + " rows, net expects " +
                                              std::to_string(d));
    }
    require_unit_columns(x);
}

/// m x n pre-activations (w0_r + γ_r ∘ w_r)ᵀ x_i.
Matrix preactivations(const TheoryNet& net, const Matrix& x) {
    Matrix eff = net.w0 + hadamard(net.gamma, net.w);
    return matmul_tn(eff, x);
}

Matrix forward_from(const TheoryNet& net, const Matrix& z) {
    const std::size_t m = net.width();
    const std::size_t n = z.cols();
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));
    Matrix out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
            const double zr = z(r, i);
            if (zr > 0.0) s += net.a(r, 0) * zr;
        }
        out(i, 0) = s * inv_sqrt_m;
    }
    return out;
}

void check_labels(const Matrix& y, std::size_t n) {
    if (y.rows() != n || y.cols() != 1) {
        throw Error(ErrorKind::dimension, "labels must be " + std::to_string(n) + "x1");
    }
}

}  // namespace

Matrix theory_forward(const TheoryNet& net, const Matrix& x) {
    check_theory_shapes(net, x);
    return forward_from(net, preactivations(net, x));
}

double theory_loss(const TheoryNet& net, const Matrix& x, const Matrix& y) {
    check_labels(y, x.cols());
    const Matrix f = theory_forward(net, x);
    double loss = 0.0;
    for (std::size_t i = 0; i < f.rows(); ++i) {
        const double r = f(i, 0) - y(i, 0);
        loss += 0.5 * r * r;
    }
    return loss;
}

Matrix theory_grad(const TheoryNet& net, const Matrix& x, const Matrix& y) {
    check_theory_shapes(net, x);
    check_labels(y, x.cols());
    const std::size_t m = net.width();
    const std::size_t n = x.cols();
    const Matrix z = preactivations(net, x);
    const Matrix f = forward_from(net, z);
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));

    // coef(i, r) = (f_i - y_i) a_r / √m · 1{z_ri > 0}
    Matrix coef(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const double res = (f(i, 0) - y(i, 0)) * inv_sqrt_m;
        for (std::size_t r = 0; r < m; ++r) {
            if (z(r, i) > 0.0) coef(i, r) = res * net.a(r, 0);
        }
    }
    return hadamard(matmul(x, coef), net.gamma);
}

// ---------------------------------------------------------------------------
// ModularNet structure

std::pair<std::size_t, std::size_t> ModularShape::weight_shape(Family f) const {
    switch (f) {
    case Family::I: return {ffn_dim, model_dim};
    case Family::D: return {model_dim, ffn_dim};
    default: return {model_dim, model_dim};
    }
}

ModularNet::ModularNet(ModularShape shape, std::vector<LayerRecord> layers, Matrix head)
    : shape_(shape), layers_(std::move(layers)), head_(std::move(head)) {
    if (layers_.size() != shape_.layers) throw Error(ErrorKind::dimension, "layer count does not match shape");
    for (const auto& layer : layers_) {
        for (Family f : kFamilies) {
            const auto [r, c] = shape_.weight_shape(f);
            const Matrix& w = layer.modules[index_of(f)].weight;
            if (w.rows() != r || w.cols() != c) {
                throw Error(ErrorKind::sharing, "family " + std::string(family_name(f)) +
                                                    " has inconsistent shapes across layers");
            }
        }
    }
    if (head_.rows() != shape_.out_dim || head_.cols() != shape_.model_dim) {
        throw Error(ErrorKind::dimension, "head must be out_dim x model_dim");
    }
}

const LowRankAdapter* ModularNet::adapter_at(std::size_t layer, Family f) const {
    const ModuleRecord& rec = module(layer, f);
    switch (rec.slot) {
    case SlotKind::own: return &rec.own;
    case SlotKind::shared: return &bank_.at(f);
    case SlotKind::none: return nullptr;
    }
    return nullptr;
}

LowRankAdapter* ModularNet::adapter_at(std::size_t layer, Family f) {
    return const_cast<LowRankAdapter*>(static_cast<const ModularNet&>(*this).adapter_at(layer, f));
}

void ModularNet::set_own(std::size_t layer, Family f, LowRankAdapter adapter) {
    const auto [r, c] = shape_.weight_shape(f);
    if (adapter.out_dim() != r || adapter.in_dim() != c) {
        throw Error(ErrorKind::dimension, "adapter does not fit module " + std::string(family_name(f)));
    }
    ModuleRecord& rec = module(layer, f);
    rec.slot = SlotKind::own;
    rec.own = std::move(adapter);
}

void ModularNet::set_shared(std::size_t layer, Family f) {
    if (!bank_.contains(f)) {
        throw Error(ErrorKind::sharing, "bank has no adapter for family " + std::string(family_name(f)));
    }
    ModuleRecord& rec = module(layer, f);
    rec.slot = SlotKind::shared;
    rec.own = LowRankAdapter{};
}

void ModularNet::clear_adapter(std::size_t layer, Family f) {
    ModuleRecord& rec = module(layer, f);
    rec.slot = SlotKind::none;
    rec.own = LowRankAdapter{};
}

std::size_t ModularNet::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_)
        for (const auto& rec : layer.modules)
            if (rec.slot == SlotKind::own) n += rec.own.parameter_count();
    for (const auto& [f, ad] : bank_.entries()) {
        bool referenced = false;
        for (std::size_t l = 0; l < layers_.size(); ++l) referenced |= module(l, f).slot == SlotKind::shared;
        if (referenced) n += ad.parameter_count();
    }
    return n;
}

ModularNet make_base_modular(const ModularShape& shape, const SeededRng& rng, double weight_scale, std::size_t rank) {
    if (shape.layers == 0 || shape.model_dim == 0 || shape.ffn_dim == 0 || shape.seq_len == 0 ||
        shape.out_dim == 0) {
        throw Error(ErrorKind::dimension, "modular shape needs positive sizes");
    }
    std::vector<LayerRecord> layers(shape.layers);
    for (std::size_t l = 0; l < shape.layers; ++l) {
        for (Family f : kFamilies) {
            const auto [r, c] = shape.weight_shape(f);
            SeededRng stream = rng.derive(l * kFamilyCount + index_of(f));
            Matrix w;
            if (rank == 0 || rank >= std::min(r, c)) {
                w = gaussian_matrix(r, c, stream);
                w *= weight_scale / std::sqrt(static_cast<double>(c));
            } else {
                const Matrix u = gaussian_matrix(r, rank, stream);
                const Matrix v = gaussian_matrix(rank, c, stream);
                w = matmul(u, v);
                w *= weight_scale / std::sqrt(static_cast<double>(rank * c));
            }
            layers[l].modules[index_of(f)].weight = std::move(w);
        }
    }
    SeededRng head_stream = rng.derive(1'000'003);
    Matrix head = gaussian_matrix(shape.out_dim, shape.model_dim, head_stream);
    head *= 1.0 / std::sqrt(static_cast<double>(shape.model_dim));
    return ModularNet(shape, std::move(layers), std::move(head));
}

void attach_all_adapters(ModularNet& net, std::size_t rank, double alpha, const SeededRng& rng, double dropout_p) {
    const ModularShape& s = net.shape();
    for (std::size_t l = 0; l < s.layers; ++l) {
        for (Family f : kFamilies) {
            const auto [r, c] = s.weight_shape(f);
            SeededRng stream = rng.derive(l * kFamilyCount + index_of(f));
            net.set_own(l, f, init_adapter(r, c, rank, alpha, stream, dropout_p));
        }
    }
}

Matrix unit_gates(std::size_t layers) { return Matrix(layers, kFamilyCount, 1.0); }

bool same_base_weights(const ModularNet& a, const ModularNet& b) {
    if (a.layer_count() != b.layer_count() || !bitwise_equal(a.head(), b.head())) return false;
    for (std::size_t l = 0; l < a.layer_count(); ++l)
        for (Family f : kFamilies)
            if (!bitwise_equal(a.module(l, f).weight, b.module(l, f).weight)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// ModularNet forward / backward

namespace {

struct LinearCache {
    Matrix x;        // input to the module
    Matrix branch_x; // adapter-branch input (x after dropout)
    Matrix mask;     // dropout mask, empty when unused
    Matrix ax;       // A · branch_x, empty without adapter
    Matrix bax;      // B · A · branch_x, unscaled
};

struct LayerCache {
    std::array<LinearCache, kFamilyCount> lin;
    Matrix q, k, v, p, attn, h1, u;
};

struct Workspace {
    std::vector<LayerCache> layers;
    Matrix out_hidden;
};

Matrix linear_forward(const ModuleRecord& rec, const LowRankAdapter* ad, double gate, const Matrix& x,
                      LinearCache* cache, SeededRng* dropout) {
    Matrix h = matmul(rec.weight, x);
    if (cache) cache->x = x;
    if (ad == nullptr) return h;
    Matrix branch_x = x;
    Matrix mask;
    if (dropout != nullptr && ad->dropout_p > 0.0) {
        mask = dropout_mask(x.rows(), x.cols(), ad->dropout_p, *dropout);
        branch_x = hadamard(branch_x, mask);
    }
    Matrix ax = matmul(ad->a, branch_x);
    Matrix bax = matmul(ad->b, ax);
    if (gate != 0.0) {
        Matrix scaled = bax;
        scaled *= gate * ad->scaling();
        h += scaled;
    }
    if (cache) {
        cache->branch_x = std::move(branch_x);
        cache->mask = std::move(mask);
        cache->ax = std::move(ax);
        cache->bax = std::move(bax);
    }
    return h;
}

void softmax_rows(Matrix& s) {
    for (std::size_t r = 0; r < s.rows(); ++r) {
        auto row = s.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            total += v;
        }
        for (double& v : row) v /= total;
    }
}

void check_forward_inputs(const ModularNet& net, const Matrix& gates) {
    if (gates.rows() != net.layer_count() || gates.cols() != kFamilyCount) {
        throw Error(ErrorKind::dimension, "gates must be " + std::to_string(net.layer_count()) + "x6, got " +
                                              std::to_string(gates.rows()) + "x" + std::to_string(gates.cols()));
    }
}

Matrix forward_sample(const ModularNet& net, const Matrix& gates, const Matrix& x, Workspace* ws,
                      const SeededRng* dropout_root) {
    const ModularShape& s = net.shape();
    if (x.rows() != s.model_dim || x.cols() != s.seq_len) {
        throw Error(ErrorKind::dimension, "sample must be model_dim x seq_len");
    }
    const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(s.model_dim));
    if (ws) ws->layers.resize(s.layers);

    Matrix h = x;
    for (std::size_t l = 0; l < s.layers; ++l) {
        LayerCache* lc = ws ? &ws->layers[l] : nullptr;
        auto lin = [&](Family f, const Matrix& in) {
            std::optional<SeededRng> drop;
            if (dropout_root) drop = dropout_root->derive(l * kFamilyCount + index_of(f));
            return linear_forward(net.module(l, f), net.adapter_at(l, f), gates(l, index_of(f)), in,
                                  lc ? &lc->lin[index_of(f)] : nullptr, drop ? &*drop : nullptr);
        };
        Matrix q = lin(Family::Q, h);
        Matrix k = lin(Family::K, h);
        Matrix v = lin(Family::V, h);
        Matrix p = matmul_tn(q, k);  // p(t, s) = q_tᵀ k_s
        p *= inv_sqrt_dim;
        softmax_rows(p);
        Matrix attn = matmul_nt(v, p);  // attn(:, t) = Σ_s p(t, s) v(:, s)
        Matrix h1 = h + lin(Family::O, attn);
        Matrix u = lin(Family::I, h1);
        Matrix act = u;
        for (double& e : act.data()) e = e > 0.0 ? e : 0.0;
        Matrix h2 = h1 + lin(Family::D, act);
        if (lc) {
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->p = std::move(p);
            lc->attn = std::move(attn);
            lc->h1 = std::move(h1);
            lc->u = std::move(u);
        }
        h = std::move(h2);
    }
    Matrix pooled(s.model_dim, 1);
    for (std::size_t d = 0; d < s.model_dim; ++d) {
        double acc = 0.0;
        for (std::size_t t = 0; t < s.seq_len; ++t) acc += h(d, t);
        pooled(d, 0) = acc / static_cast<double>(s.seq_len);
    }
    if (ws) ws->out_hidden = h;
    return matmul(net.head(), pooled);
}

Matrix sample_at(const ModularShape& s, const Matrix& xs, std::size_t i) {
    Matrix x(s.model_dim, s.seq_len);
    for (std::size_t r = 0; r < s.input_size(); ++r) x.data()[r] = xs(r, i);
    return x;
}

void check_dataset(const ModularNet& net, const Matrix& xs, const Matrix* ys) {
    const ModularShape& s = net.shape();
    if (xs.rows() != s.input_size()) {
        throw Error(ErrorKind::dimension, "inputs must have " + std::to_string(s.input_size()) + " rows");
    }
    if (xs.cols() == 0) throw Error(ErrorKind::data, "empty batch");
    if (ys && (ys->rows() != xs.cols() || ys->cols() != s.out_dim)) {
        throw Error(ErrorKind::dimension, "labels must be n x out_dim");
    }
}

/// Backward through one gated linear module. Returns dL/dx and accumulates
/// adapter and gate gradients.
Matrix linear_backward(const ModuleRecord& rec, const LowRankAdapter* ad, double gate, const LinearCache& cache,
                       const Matrix& dh, AdapterGrad* adapter_grad, double& gate_grad) {
    Matrix dx = matmul_tn(rec.weight, dh);
    if (ad == nullptr) return dx;
    const double scale = ad->scaling();
    gate_grad += scale * dot(dh, cache.bax);
    if (gate == 0.0) return dx;
    const double gs = gate * scale;
    Matrix bt_dh = matmul_tn(ad->b, dh);  // rank x T
    Matrix db = matmul_nt(dh, cache.ax);
    db *= gs;
    Matrix da = matmul_nt(bt_dh, cache.branch_x);
    da *= gs;
    adapter_grad->a += da;
    adapter_grad->b += db;
    Matrix dbranch = matmul_tn(ad->a, bt_dh);
    dbranch *= gs;
    if (!cache.mask.empty()) dbranch = hadamard(dbranch, cache.mask);
    dx += dbranch;
    return dx;
}

ModularGradients zero_gradients(const ModularNet& net) {
    ModularGradients g;
    const std::size_t layers = net.layer_count();
    g.own.resize(layers * kFamilyCount);
    for (std::size_t l = 0; l < layers; ++l) {
        for (Family f : kFamilies) {
            const ModuleRecord& rec = net.module(l, f);
            if (rec.slot == SlotKind::own) {
                g.own_at(l, f) = {Matrix(rec.own.a.rows(), rec.own.a.cols()),
                                  Matrix(rec.own.b.rows(), rec.own.b.cols())};
            }
        }
    }
    for (const auto& [f, ad] : net.bank().entries()) {
        g.shared[index_of(f)] = {Matrix(ad.a.rows(), ad.a.cols()), Matrix(ad.b.rows(), ad.b.cols())};
    }
    g.gates = Matrix(layers, kFamilyCount);
    return g;
}

AdapterGrad* grad_slot(ModularGradients& g, const ModularNet& net, std::size_t l, Family f) {
    switch (net.module(l, f).slot) {
    case SlotKind::own: return &g.own_at(l, f);
    case SlotKind::shared: return &g.shared[index_of(f)];
    case SlotKind::none: return nullptr;
    }
    return nullptr;
}

void backward_sample(const ModularNet& net, const Matrix& gates, const Workspace& ws, const Matrix& dout,
                     ModularGradients& g) {
    const ModularShape& s = net.shape();
    const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(s.model_dim));
    Matrix dpooled = matmul_tn(net.head(), dout);
    Matrix dh(s.model_dim, s.seq_len);
    for (std::size_t d = 0; d < s.model_dim; ++d)
        for (std::size_t t = 0; t < s.seq_len; ++t) dh(d, t) = dpooled(d, 0) / static_cast<double>(s.seq_len);

    for (std::size_t l = s.layers; l-- > 0;) {
        const LayerCache& lc = ws.layers[l];
        auto back = [&](Family f, const Matrix& upstream) {
            return linear_backward(net.module(l, f), net.adapter_at(l, f), gates(l, index_of(f)),
                                   lc.lin[index_of(f)], upstream, grad_slot(g, net, l, f), g.gates(l, index_of(f)));
        };
        // h2 = h1 + D(relu(u)), u = I(h1)
        Matrix dact = back(Family::D, dh);
        Matrix du = dact;
        for (std::size_t i = 0; i < du.size(); ++i)
            if (!(lc.u.data()[i] > 0.0)) du.data()[i] = 0.0;
        Matrix dh1 = dh + back(Family::I, du);
        // h1 = h + O(attn)
        Matrix dattn = back(Family::O, dh1);
        // attn = v pᵀ
        Matrix dv = matmul(dattn, lc.p);
        Matrix dp = matmul_tn(dattn, lc.v);
        Matrix dscore(dp.rows(), dp.cols());
        for (std::size_t t = 0; t < dp.rows(); ++t) {
            double inner = 0.0;
            for (std::size_t u = 0; u < dp.cols(); ++u) inner += lc.p(t, u) * dp(t, u);
            for (std::size_t u = 0; u < dp.cols(); ++u) dscore(t, u) = lc.p(t, u) * (dp(t, u) - inner) * inv_sqrt_dim;
        }
        Matrix dq = matmul_nt(lc.k, dscore);
        Matrix dk = matmul(lc.q, dscore);
        Matrix dprev = dh1;
        dprev += back(Family::Q, dq);
        dprev += back(Family::K, dk);
        dprev += back(Family::V, dv);
        dh = std::move(dprev);
    }
}

}  // namespace

Matrix modular_forward(const ModularNet& net, const Matrix& gates, const Matrix& x) {
    check_forward_inputs(net, gates);
    return forward_sample(net, gates, x, nullptr, nullptr);
}

Matrix modular_predict(const ModularNet& net, const Matrix& gates, const Matrix& xs) {
    check_forward_inputs(net, gates);
    check_dataset(net, xs, nullptr);
    const ModularShape& s = net.shape();
    Matrix out(xs.cols(), s.out_dim);
    for (std::size_t i = 0; i < xs.cols(); ++i) {
        const Matrix f = forward_sample(net, gates, sample_at(s, xs, i), nullptr, nullptr);
        for (std::size_t o = 0; o < s.out_dim; ++o) out(i, o) = f(o, 0);
    }
    return out;
}

double modular_loss(const ModularNet& net, const Matrix& gates, const Matrix& xs, const Matrix& ys) {
    check_dataset(net, xs, &ys);
    const Matrix pred = modular_predict(net, gates, xs);
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred.data()[i] - ys.data()[i];
        loss += 0.5 * r * r;
    }
    return loss / static_cast<double>(xs.cols());
}

LossAndGradients modular_loss_grad(const ModularNet& net, const Matrix& gates, const Matrix& xs, const Matrix& ys,
                                   const SeededRng* dropout_rng) {
    check_forward_inputs(net, gates);
    check_dataset(net, xs, &ys);
    const ModularShape& s = net.shape();
    const double inv_n = 1.0 / static_cast<double>(xs.cols());
    LossAndGradients result;
    result.grad = zero_gradients(net);
    Workspace ws;
    for (std::size_t i = 0; i < xs.cols(); ++i) {
        std::optional<SeededRng> drop;
        if (dropout_rng) drop = dropout_rng->derive(i);
        const Matrix f = forward_sample(net, gates, sample_at(s, xs, i), &ws, drop ? &*drop : nullptr);
        Matrix dout(s.out_dim, 1);
        for (std::size_t o = 0; o < s.out_dim; ++o) {
            const double r = f(o, 0) - ys(i, o);
            result.loss += 0.5 * r * r * inv_n;
            dout(o, 0) = r * inv_n;
        }
        backward_sample(net, gates, ws, dout, result.grad);
    }
    return result;
}

}  // namespace diffora
