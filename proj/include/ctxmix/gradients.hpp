#pragma once

#include <span>
#include <vector>

#include "ctxmix/model.hpp"
#include "ctxmix/numerics.hpp"
#include "ctxmix/tensor.hpp"

namespace ctxmix {

namespace detail {

// a: m x k, b: m x n -> aT b: k x n (accumulated into out)
inline void add_matmul_at_b(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < k; ++i) {
            const double av = a(r, i);
            if (av == 0.0) continue;
            const double* brow = b.data() + r * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
}

// a: m x k, b: n x k -> a bT: m x n (accumulated into out)
inline void add_matmul_a_bt(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += dot(a.row(i), b.row(j));
    (void)k;
}

// Backward of y = (x - mu) * inv * gamma + beta for one token.
inline void layer_norm_backward(std::span<const double> x, double mu, double inv,
                                std::span<const double> gamma, std::span<const double> dy,
                                std::span<double> dx_accum, Tensor* dgamma, Tensor* dbeta) {
    const std::size_t d = x.size();
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t e = 0; e < d; ++e) {
        const double xhat = (x[e] - mu) * inv;
        const double g = dy[e] * gamma[e];
        mean_g += g;
        mean_gx += g * xhat;
        if (dgamma) (*dgamma)(e) += dy[e] * xhat;
        if (dbeta) (*dbeta)(e) += dy[e];
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t e = 0; e < d; ++e) {
        const double xhat = (x[e] - mu) * inv;
        const double g = dy[e] * gamma[e];
        dx_accum[e] += inv * (g - mean_g - xhat * mean_gx);
    }
}

// Backward through one encoder layer: d_out is the gradient at t.output,
// returns the gradient at t.input. Parameter gradients accumulate into
// *grads when provided.
inline Tensor backward_encoder_layer(const LayerWeights& lw, const EncoderConfig& cfg,
                                     const LayerTrace& t, const Tensor& d_out,
                                     LayerWeights* grads) {
    const std::size_t n = t.input.dim(0);
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t nh = static_cast<std::size_t>(cfg.num_heads);
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));

    // LN_FFN
    Tensor d_u2({n, d});
    for (std::size_t i = 0; i < n; ++i)
        layer_norm_backward(t.pre_ln_ffn.row(i), t.ln_ffn_mean[i], t.ln_ffn_inv_std[i],
                            lw.ln_ffn_gain.values(), d_out.row(i), d_u2.row(i),
                            grads ? &grads->ln_ffn_gain : nullptr,
                            grads ? &grads->ln_ffn_bias : nullptr);

    // FFN; residual feeds d_z directly.
    Tensor d_z = d_u2;
    Tensor d_hidden({n, f});
    add_matmul_a_bt(d_u2, lw.ffn_w2, d_hidden); // d_fo W2^T
    if (grads) {
        add_matmul_at_b(t.ffn_hidden, d_u2, grads->ffn_w2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < d; ++e) grads->ffn_b2(e) += d_u2(i, e);
    }
    Tensor d_a({n, f});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c)
            d_a(i, c) = t.ffn_pre(i, c) > 0.0 ? d_hidden(i, c) : 0.0;
    add_matmul_a_bt(d_a, lw.ffn_w1, d_z); // += d_a W1^T
    if (grads) {
        add_matmul_at_b(t.post_ln_mha, d_a, grads->ffn_w1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < f; ++c) grads->ffn_b1(c) += d_a(i, c);
    }

    // LN_MHA
    Tensor d_u1({n, d});
    for (std::size_t i = 0; i < n; ++i)
        layer_norm_backward(t.pre_ln_mha.row(i), t.ln_mha_mean[i], t.ln_mha_inv_std[i],
                            lw.ln_mha_gain.values(), d_z.row(i), d_u1.row(i),
                            grads ? &grads->ln_mha_gain : nullptr,
                            grads ? &grads->ln_mha_bias : nullptr);

    Tensor d_x = d_u1; // residual branch

    // W_O and per-head attention
    for (std::size_t h = 0; h < nh; ++h) {
        const auto& hw = lw.heads[h];
        Tensor d_hctx({n, dh});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dh; ++c) {
                const double* wo = lw.w_o.data() + (h * dh + c) * d;
                d_hctx(i, c) = dot(std::span<const double>(wo, d), d_u1.row(i));
            }
        if (grads)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) {
                    const double zc = t.head_ctx[h](i, c);
                    if (zc == 0.0) continue;
                    double* gw = grads->w_o.data() + (h * dh + c) * d;
                    const double* du = d_u1.data() + i * d;
                    for (std::size_t e = 0; e < d; ++e) gw[e] += zc * du[e];
                }

        // z^h_i = sum_j alpha_ij v_j
        Tensor d_v({n, dh});
        Tensor d_alpha({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double a = t.attn(h, i, j);
                for (std::size_t c = 0; c < dh; ++c) d_v(j, c) += a * d_hctx(i, c);
                d_alpha(i, j) = dot(d_hctx.row(i), t.v[h].row(j));
            }

        // softmax rows
        Tensor d_logits({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += t.attn(h, i, j) * d_alpha(i, j);
            for (std::size_t j = 0; j < n; ++j)
                d_logits(i, j) = t.attn(h, i, j) * (d_alpha(i, j) - s);
        }

        Tensor d_q({n, dh});
        Tensor d_k({n, dh});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double dl = d_logits(i, j) * scale;
                if (dl == 0.0) continue;
                for (std::size_t c = 0; c < dh; ++c) {
                    d_q(i, c) += dl * t.k[h](j, c);
                    d_k(j, c) += dl * t.q[h](i, c);
                }
            }

        add_matmul_a_bt(d_q, hw.w_q, d_x);
        add_matmul_a_bt(d_k, hw.w_k, d_x);
        add_matmul_a_bt(d_v, hw.w_v, d_x);
        if (grads) {
            auto& hg = grads->heads[h];
            add_matmul_at_b(t.input, d_q, hg.w_q);
            add_matmul_at_b(t.input, d_k, hg.w_k);
            add_matmul_at_b(t.input, d_v, hg.w_v);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) {
                    hg.b_q(c) += d_q(i, c);
                    hg.b_k(c) += d_k(i, c);
                    hg.b_v(c) += d_v(i, c);
                }
        }
    }

    return d_x;
}

} // namespace detail

// Propagate the gradient at the trace's final representations down to the
// given depth. stop_depth must lie within the trace; parameter gradients for
// the traversed layers accumulate into *param_grads when provided.
inline Tensor backward_to_depth(const ModelWeights& w, const ForwardTrace& trace,
                                Tensor output_grads, int stop_depth,
                                ModelWeights* param_grads = nullptr) {
    if (stop_depth < trace.start_depth || stop_depth > trace.final_depth())
        throw ArgumentError("backward_to_depth: depth " + std::to_string(stop_depth) +
                            " not covered by the trace");
    Tensor g = std::move(output_grads);
    for (int l = trace.final_depth(); l > stop_depth; --l) {
        const std::size_t idx = static_cast<std::size_t>(l - trace.start_depth - 1);
        LayerWeights* lg =
            param_grads ? &param_grads->layers[static_cast<std::size_t>(l - 1)] : nullptr;
        g = detail::backward_encoder_layer(w.layers[static_cast<std::size_t>(l - 1)], w.config,
                                           trace.layers[idx], g, lg);
    }
    return g;
}

// Gradient of the logits at one position back onto the final representations;
// head parameter gradients (and tied-embedding gradients) accumulate when
// param_grads is given.
inline void mlm_head_backward(const ModelWeights& w, std::span<const double> x,
                              std::span<const double> d_logits, std::span<double> dx_accum,
                              ModelWeights* param_grads = nullptr) {
    const std::size_t v = static_cast<std::size_t>(w.config.vocab_size);
    const std::size_t d = static_cast<std::size_t>(w.config.model_dim);
    for (std::size_t t = 0; t < v; ++t) {
        const double dl = d_logits[t];
        if (param_grads) param_grads->mlm_head_bias(t) += dl;
        if (dl == 0.0) continue;
        if (w.config.tied_mlm_head) {
            const auto emb = w.token_embeddings.row(t);
            for (std::size_t e = 0; e < d; ++e) dx_accum[e] += dl * emb[e];
            if (param_grads)
                for (std::size_t e = 0; e < d; ++e)
                    param_grads->token_embeddings(t, e) += dl * x[e];
        } else {
            for (std::size_t e = 0; e < d; ++e) dx_accum[e] += dl * w.mlm_head_weight(e, t);
            if (param_grads)
                for (std::size_t e = 0; e < d; ++e)
                    param_grads->mlm_head_weight(e, t) += dl * x[e];
        }
    }
}

inline void accumulate_embedding_grads(std::span<const int> token_ids, const Tensor& d_x0,
                                       ModelWeights& grads) {
    const std::size_t n = token_ids.size();
    const std::size_t d = d_x0.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < d; ++e) {
            grads.token_embeddings(static_cast<std::size_t>(token_ids[i]), e) += d_x0(i, e);
            grads.position_embeddings(i, e) += d_x0(i, e);
        }
    }
}

enum class GradTarget { Logit, LogProb };

// Exact gradient of the target-class score at the mask position with respect
// to the depth-l token representations (depth 0 = embedding output). The
// default target is the raw logit; LogProb targets log softmax instead.
inline Tensor grad_wrt_layer(const ModelWeights& w, const ForwardTrace& trace, int layer,
                             int target_id, int mask_position,
                             GradTarget target = GradTarget::Logit) {
    const std::size_t n = trace.seq_len();
    if (mask_position < 0 || static_cast<std::size_t>(mask_position) >= n)
        throw ArgumentError("grad_wrt_layer: mask position out of range");
    const std::size_t v = static_cast<std::size_t>(w.config.vocab_size);
    std::vector<double> d_logits(v, 0.0);
    if (target == GradTarget::Logit) {
        d_logits[static_cast<std::size_t>(target_id)] = 1.0;
    } else {
        const std::vector<double> logits = mlm_logits(w, trace, mask_position);
        const std::vector<double> p = softmax(logits);
        for (std::size_t t = 0; t < v; ++t) d_logits[t] = -p[t];
        d_logits[static_cast<std::size_t>(target_id)] += 1.0;
    }
    Tensor d_final({n, static_cast<std::size_t>(w.config.model_dim)});
    mlm_head_backward(w, trace.final_output().row(static_cast<std::size_t>(mask_position)),
                      d_logits, d_final.row(static_cast<std::size_t>(mask_position)));
    return backward_to_depth(w, trace, std::move(d_final), layer);
}

inline Tensor grad_wrt_layer(const ModelWeights& w, std::span<const int> token_ids, int layer,
                             int target_id, int mask_position,
                             GradTarget target = GradTarget::Logit) {
    if (layer < 0 || layer > w.config.num_layers)
        throw ArgumentError("grad_wrt_layer: layer " + std::to_string(layer) + " outside 0.." +
                            std::to_string(w.config.num_layers));
    if (target_id < 0 || target_id >= w.config.vocab_size)
        throw ArgumentError("grad_wrt_layer: target id out of range");
    const ForwardTrace trace = forward(w, token_ids);
    return grad_wrt_layer(w, trace, layer, target_id, mask_position, target);
}

} // namespace ctxmix
