#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxmix/errors.hpp"
#include "ctxmix/numerics.hpp"
#include "ctxmix/rng.hpp"
#include "ctxmix/tensor.hpp"

namespace ctxmix {

struct EncoderConfig {
    int num_layers = 2;
    int num_heads = 2;
    int model_dim = 16;
    int ffn_dim = 32;
    int vocab_size = 16;
    int max_positions = 32;
    double ln_eps = 1e-5;
    bool tied_mlm_head = true;

    int head_dim() const { return model_dim / num_heads; }

    void validate() const {
        if (num_layers < 1 || num_heads < 1 || model_dim < 1 || ffn_dim < 1 ||
            vocab_size < 1 || max_positions < 1)
            throw ArgumentError("EncoderConfig: all dimensions must be >= 1");
        if (model_dim % num_heads != 0)
            throw ArgumentError("EncoderConfig: model_dim " + std::to_string(model_dim) +
                                " not divisible by num_heads " + std::to_string(num_heads));
        if (ln_eps <= 0.0) throw ArgumentError("EncoderConfig: ln_eps must be positive");
    }
};

struct HeadWeights {
    Tensor w_q, w_k, w_v; // model_dim x head_dim
    Tensor b_q, b_k, b_v; // head_dim
};

struct LayerWeights {
    std::vector<HeadWeights> heads;
    Tensor w_o;                     // model_dim x model_dim, no bias
    Tensor ln_mha_gain, ln_mha_bias; // model_dim
    Tensor ffn_w1, ffn_b1;          // model_dim x ffn_dim, ffn_dim
    Tensor ffn_w2, ffn_b2;          // ffn_dim x model_dim, model_dim
    Tensor ln_ffn_gain, ln_ffn_bias; // model_dim
};

struct ModelWeights {
    EncoderConfig config;
    Tensor token_embeddings;    // vocab_size x model_dim
    Tensor position_embeddings; // max_positions x model_dim
    std::vector<LayerWeights> layers;
    Tensor mlm_head_weight; // model_dim x vocab_size; empty when tied
    Tensor mlm_head_bias;   // vocab_size
};

// Canonical (name, tensor) enumeration. Serialization, optimizer state and
// gradient accumulation all walk weights in this one order.
template <class Weights, class Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
    fn("token_embeddings", w.token_embeddings);
    fn("position_embeddings", w.position_embeddings);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        for (std::size_t h = 0; h < lw.heads.size(); ++h) {
            auto& hw = lw.heads[h];
            const std::string q = p + "heads." + std::to_string(h) + ".";
            fn(q + "w_q", hw.w_q);
            fn(q + "w_k", hw.w_k);
            fn(q + "w_v", hw.w_v);
            fn(q + "b_q", hw.b_q);
            fn(q + "b_k", hw.b_k);
            fn(q + "b_v", hw.b_v);
        }
        fn(p + "w_o", lw.w_o);
        fn(p + "ln_mha.gain", lw.ln_mha_gain);
        fn(p + "ln_mha.bias", lw.ln_mha_bias);
        fn(p + "ffn.w1", lw.ffn_w1);
        fn(p + "ffn.b1", lw.ffn_b1);
        fn(p + "ffn.w2", lw.ffn_w2);
        fn(p + "ffn.b2", lw.ffn_b2);
        fn(p + "ln_ffn.gain", lw.ln_ffn_gain);
        fn(p + "ln_ffn.bias", lw.ln_ffn_bias);
    }
    if (!w.config.tied_mlm_head) fn("mlm_head.weight", w.mlm_head_weight);
    fn("mlm_head.bias", w.mlm_head_bias);
}

// Zero-initialized weights with the shapes the config dictates.
inline ModelWeights make_weights(const EncoderConfig& cfg) {
    cfg.validate();
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim);
    const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
    ModelWeights w;
    w.config = cfg;
    w.token_embeddings = Tensor::zeros({v, d});
    w.position_embeddings = Tensor::zeros({static_cast<std::size_t>(cfg.max_positions), d});
    w.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& lw : w.layers) {
        lw.heads.resize(static_cast<std::size_t>(cfg.num_heads));
        for (auto& hw : lw.heads) {
            hw.w_q = Tensor::zeros({d, dh});
            hw.w_k = Tensor::zeros({d, dh});
            hw.w_v = Tensor::zeros({d, dh});
            hw.b_q = Tensor::zeros({dh});
            hw.b_k = Tensor::zeros({dh});
            hw.b_v = Tensor::zeros({dh});
        }
        lw.w_o = Tensor::zeros({d, d});
        lw.ln_mha_gain = Tensor::zeros({d});
        lw.ln_mha_bias = Tensor::zeros({d});
        lw.ffn_w1 = Tensor::zeros({d, f});
        lw.ffn_b1 = Tensor::zeros({f});
        lw.ffn_w2 = Tensor::zeros({f, d});
        lw.ffn_b2 = Tensor::zeros({d});
        lw.ln_ffn_gain = Tensor::zeros({d});
        lw.ln_ffn_bias = Tensor::zeros({d});
    }
    if (!cfg.tied_mlm_head) w.mlm_head_weight = Tensor::zeros({d, v});
    w.mlm_head_bias = Tensor::zeros({v});
    return w;
}

inline ModelWeights zeros_like(const ModelWeights& w) { return make_weights(w.config); }

// Glorot-uniform matrices (bound sqrt(6/(fan_in+fan_out))), zero biases,
// unit layer-norm gains, embeddings uniform in [-0.1, 0.1]. Draw order is
// fixed by for_each_tensor's canonical enumeration of the matrix weights.
inline ModelWeights init_model(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const auto su = [&](std::size_t rows, std::size_t cols) {
        const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
        return Tensor::uniform({rows, cols}, rng, -bound, bound);
    };
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim);
    const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);

    ModelWeights w;
    w.config = cfg;
    w.token_embeddings = Tensor::uniform({v, d}, rng, -0.1, 0.1);
    w.position_embeddings =
        Tensor::uniform({static_cast<std::size_t>(cfg.max_positions), d}, rng, -0.1, 0.1);
    w.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& lw : w.layers) {
        lw.heads.resize(static_cast<std::size_t>(cfg.num_heads));
        for (auto& hw : lw.heads) {
            hw.w_q = su(d, dh);
            hw.w_k = su(d, dh);
            hw.w_v = su(d, dh);
            hw.b_q = Tensor::zeros({dh});
            hw.b_k = Tensor::zeros({dh});
            hw.b_v = Tensor::zeros({dh});
        }
        lw.w_o = su(d, d);
        lw.ln_mha_gain = Tensor::filled({d}, 1.0);
        lw.ln_mha_bias = Tensor::zeros({d});
        lw.ffn_w1 = su(d, f);
        lw.ffn_b1 = Tensor::zeros({f});
        lw.ffn_w2 = su(f, d);
        lw.ffn_b2 = Tensor::zeros({d});
        lw.ln_ffn_gain = Tensor::filled({d}, 1.0);
        lw.ln_ffn_bias = Tensor::zeros({d});
    }
    if (!cfg.tied_mlm_head) w.mlm_head_weight = su(d, v);
    w.mlm_head_bias = Tensor::zeros({v});
    return w;
}

// Every intermediate of one encoder layer, captured for scoring and backprop.
struct LayerTrace {
    Tensor input;               // n x d
    std::vector<Tensor> q, k, v; // per head: n x head_dim
    Tensor attn;                // heads x n x n; each row sums to 1
    std::vector<Tensor> head_ctx; // per head: n x head_dim
    Tensor attn_out;            // n x d, pre-residual MHA output
    Tensor pre_ln_mha;          // n x d, attn_out + input
    std::vector<double> ln_mha_mean, ln_mha_inv_std; // per token
    Tensor post_ln_mha;         // n x d
    Tensor ffn_pre;             // n x ffn_dim, before ReLU
    Tensor ffn_hidden;          // n x ffn_dim, after ReLU
    Tensor ffn_out;             // n x d
    Tensor pre_ln_ffn;          // n x d, ffn_out + post_ln_mha
    std::vector<double> ln_ffn_mean, ln_ffn_inv_std; // per token
    Tensor output;              // n x d
};

// Forward capture. Depth 0 is the embedding output; encoder layer l produces
// the depth-l representations. A trace may start at an interior depth when
// built by forward_from.
struct ForwardTrace {
    std::vector<int> token_ids; // empty when started from raw representations
    int start_depth = 0;
    Tensor start_reps; // n x d representations at start_depth
    std::vector<LayerTrace> layers;
    int logits_position = -1;   // set when forward() was asked to capture logits
    std::vector<double> logits; // final-layer MLM logits at logits_position

    std::size_t seq_len() const { return start_reps.dim(0); }
    int final_depth() const { return start_depth + static_cast<int>(layers.size()); }

    const Tensor& representations(int depth) const {
        if (depth < start_depth || depth > final_depth())
            throw ArgumentError("trace has no depth " + std::to_string(depth) +
                                " (covers " + std::to_string(start_depth) + ".." +
                                std::to_string(final_depth()) + ")");
        if (depth == start_depth) return start_reps;
        return layers[static_cast<std::size_t>(depth - start_depth - 1)].output;
    }

    const LayerTrace& layer(int l) const {
        if (l <= start_depth || l > final_depth())
            throw ArgumentError("trace has no layer " + std::to_string(l));
        return layers[static_cast<std::size_t>(l - start_depth - 1)];
    }

    const Tensor& final_output() const { return representations(final_depth()); }
};

namespace detail {

// One encoder layer from input x; optionally zeroes the value vectors of the
// listed tokens in every head. Queries, keys and the attention weights do not
// depend on the zeroed set, so re-running with a zeroed token reproduces them
// bit for bit.
inline void run_encoder_layer(const LayerWeights& lw, const EncoderConfig& cfg, const Tensor& x,
                              LayerTrace& t, std::span<const int> zeroed_tokens = {}) {
    const std::size_t n = x.dim(0);
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t nh = static_cast<std::size_t>(cfg.num_heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));

    t.input = x;
    t.q.resize(nh);
    t.k.resize(nh);
    t.v.resize(nh);
    t.head_ctx.resize(nh);
    t.attn = Tensor({nh, n, n});

    for (std::size_t h = 0; h < nh; ++h) {
        const auto& hw = lw.heads[h];
        t.q[h] = matmul(x, hw.w_q);
        t.k[h] = matmul(x, hw.w_k);
        t.v[h] = matmul(x, hw.w_v);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dh; ++c) {
                t.q[h](i, c) += hw.b_q(c);
                t.k[h](i, c) += hw.b_k(c);
                t.v[h](i, c) += hw.b_v(c);
            }
        for (int j : zeroed_tokens)
            for (std::size_t c = 0; c < dh; ++c) t.v[h](static_cast<std::size_t>(j), c) = 0.0;

        std::vector<double> logits(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j)
                logits[j] = dot(t.q[h].row(i), t.k[h].row(j)) * scale;
            std::span<double> arow(&t.attn(h, i, 0), n);
            softmax(logits, arow);
        }

        t.head_ctx[h] = Tensor({n, dh});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double a = t.attn(h, i, j);
                for (std::size_t c = 0; c < dh; ++c) t.head_ctx[h](i, c) += a * t.v[h](j, c);
            }
    }

    // Concat heads and project; W_O rows [h*dh, (h+1)*dh) receive head h.
    t.attn_out = Tensor({n, d});
    for (std::size_t h = 0; h < nh; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dh; ++c) {
                const double zc = t.head_ctx[h](i, c);
                if (zc == 0.0) continue;
                const double* wo = lw.w_o.data() + (h * dh + c) * d;
                double* out = t.attn_out.data() + i * d;
                for (std::size_t e = 0; e < d; ++e) out[e] += zc * wo[e];
            }

    t.pre_ln_mha = Tensor({n, d});
    t.post_ln_mha = Tensor({n, d});
    t.ln_mha_mean.assign(n, 0.0);
    t.ln_mha_inv_std.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < d; ++e) t.pre_ln_mha(i, e) = t.attn_out(i, e) + x(i, e);
        const auto u = t.pre_ln_mha.row(i);
        const double mu = mean(u);
        double var = 0.0;
        for (double uv : u) var += (uv - mu) * (uv - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + cfg.ln_eps);
        t.ln_mha_mean[i] = mu;
        t.ln_mha_inv_std[i] = inv;
        for (std::size_t e = 0; e < d; ++e)
            t.post_ln_mha(i, e) = (u[e] - mu) * inv * lw.ln_mha_gain(e) + lw.ln_mha_bias(e);
    }

    t.ffn_pre = matmul(t.post_ln_mha, lw.ffn_w1);
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim);
    t.ffn_hidden = Tensor({n, f});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c) {
            t.ffn_pre(i, c) += lw.ffn_b1(c);
            t.ffn_hidden(i, c) = t.ffn_pre(i, c) > 0.0 ? t.ffn_pre(i, c) : 0.0;
        }
    t.ffn_out = matmul(t.ffn_hidden, lw.ffn_w2);
    t.pre_ln_ffn = Tensor({n, d});
    t.output = Tensor({n, d});
    t.ln_ffn_mean.assign(n, 0.0);
    t.ln_ffn_inv_std.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < d; ++e) {
            t.ffn_out(i, e) += lw.ffn_b2(e);
            t.pre_ln_ffn(i, e) = t.ffn_out(i, e) + t.post_ln_mha(i, e);
        }
        const auto u = t.pre_ln_ffn.row(i);
        const double mu = mean(u);
        double var = 0.0;
        for (double uv : u) var += (uv - mu) * (uv - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + cfg.ln_eps);
        t.ln_ffn_mean[i] = mu;
        t.ln_ffn_inv_std[i] = inv;
        for (std::size_t e = 0; e < d; ++e)
            t.output(i, e) = (u[e] - mu) * inv * lw.ln_ffn_gain(e) + lw.ln_ffn_bias(e);
    }
}

} // namespace detail

// Run encoder layers start_depth+1..L on the given representations.
inline ForwardTrace forward_from(const ModelWeights& w, const Tensor& reps, int start_depth) {
    const EncoderConfig& cfg = w.config;
    if (reps.rank() != 2 || reps.dim(1) != static_cast<std::size_t>(cfg.model_dim))
        throw ShapeError("forward_from: representations " + reps.shape_string() +
                         " do not match model_dim " + std::to_string(cfg.model_dim));
    if (start_depth < 0 || start_depth > cfg.num_layers)
        throw ArgumentError("forward_from: start depth " + std::to_string(start_depth) +
                            " outside 0.." + std::to_string(cfg.num_layers));
    ForwardTrace trace;
    trace.start_depth = start_depth;
    trace.start_reps = reps;
    const int todo = cfg.num_layers - start_depth;
    trace.layers.resize(static_cast<std::size_t>(todo));
    const Tensor* x = &trace.start_reps;
    for (int l = 0; l < todo; ++l) {
        detail::run_encoder_layer(w.layers[static_cast<std::size_t>(start_depth + l)], cfg, *x,
                                  trace.layers[static_cast<std::size_t>(l)]);
        if (!trace.layers[static_cast<std::size_t>(l)].output.all_finite())
            throw NumericError("non-finite activations at layer " +
                               std::to_string(start_depth + l + 1));
        x = &trace.layers[static_cast<std::size_t>(l)].output;
    }
    return trace;
}

inline Tensor embed(const ModelWeights& w, std::span<const int> token_ids) {
    const EncoderConfig& cfg = w.config;
    const std::size_t n = token_ids.size();
    if (n < 1) throw ArgumentError("forward: empty token sequence");
    if (n > static_cast<std::size_t>(cfg.max_positions))
        throw ArgumentError("forward: sequence length " + std::to_string(n) +
                            " exceeds max_positions " + std::to_string(cfg.max_positions));
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    Tensor x({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const int id = token_ids[i];
        if (id < 0 || id >= cfg.vocab_size)
            throw ArgumentError("forward: token id " + std::to_string(id) +
                                " outside vocab of size " + std::to_string(cfg.vocab_size));
        for (std::size_t e = 0; e < d; ++e)
            x(i, e) = w.token_embeddings(static_cast<std::size_t>(id), e) +
                      w.position_embeddings(i, e);
    }
    return x;
}

inline ForwardTrace forward(const ModelWeights& w, std::span<const int> token_ids) {
    ForwardTrace trace = forward_from(w, embed(w, token_ids), 0);
    trace.token_ids.assign(token_ids.begin(), token_ids.end());
    return trace;
}

inline std::vector<double> mlm_logits(const ModelWeights& w, const ForwardTrace& trace,
                                      int position);

// Forward pass that also stores the final-layer MLM logits at one position
// (typically the mask) in the trace.
inline ForwardTrace forward(const ModelWeights& w, std::span<const int> token_ids,
                            int logits_position) {
    ForwardTrace trace = forward(w, token_ids);
    trace.logits = mlm_logits(w, trace, logits_position);
    trace.logits_position = logits_position;
    return trace;
}

struct ZeroedLayerResult {
    Tensor outputs; // n x d: layer-l outputs with the value vectors zeroed
    Tensor attn;    // heads x n x n, recomputed; bit-identical to the trace
};

// Re-executes only layer l (1-based) from the inputs stored in the trace with
// v_j <- 0 in every head for each listed token. Nothing outside that layer is
// touched and the trace itself is never mutated.
inline ZeroedLayerResult forward_value_zeroed(const ModelWeights& w, const ForwardTrace& trace,
                                              int layer, std::span<const int> zeroed_tokens) {
    const EncoderConfig& cfg = w.config;
    if (layer <= trace.start_depth || layer > trace.final_depth() ||
        layer > cfg.num_layers)
        throw ArgumentError("forward_value_zeroed: layer " + std::to_string(layer) +
                            " not covered by the trace");
    const LayerTrace& orig = trace.layer(layer);
    const std::size_t n = orig.input.dim(0);
    if (orig.input.dim(1) != static_cast<std::size_t>(cfg.model_dim) ||
        orig.attn.dim(0) != static_cast<std::size_t>(cfg.num_heads))
        throw ConsistencyError("forward_value_zeroed: trace was produced by a different model");
    for (int j : zeroed_tokens)
        if (j < 0 || static_cast<std::size_t>(j) >= n)
            throw ArgumentError("forward_value_zeroed: token " + std::to_string(j) +
                                " outside sequence of length " + std::to_string(n));
    LayerTrace rerun;
    detail::run_encoder_layer(w.layers[static_cast<std::size_t>(layer - 1)], cfg, orig.input,
                              rerun, zeroed_tokens);
    return {std::move(rerun.output), std::move(rerun.attn)};
}

inline ZeroedLayerResult forward_value_zeroed(const ModelWeights& w, const ForwardTrace& trace,
                                              int layer, int zeroed_token) {
    const int tokens[1] = {zeroed_token};
    return forward_value_zeroed(w, trace, layer, std::span<const int>(tokens));
}

// MLM head over a single representation; logits over the vocabulary.
inline std::vector<double> apply_mlm_head(const ModelWeights& w, std::span<const double> x) {
    const std::size_t v = static_cast<std::size_t>(w.config.vocab_size);
    const std::size_t d = static_cast<std::size_t>(w.config.model_dim);
    std::vector<double> logits(v);
    if (w.config.tied_mlm_head) {
        for (std::size_t t = 0; t < v; ++t)
            logits[t] = dot(x, w.token_embeddings.row(t)) + w.mlm_head_bias(t);
    } else {
        for (std::size_t t = 0; t < v; ++t) {
            double s = w.mlm_head_bias(t);
            for (std::size_t e = 0; e < d; ++e) s += x[e] * w.mlm_head_weight(e, t);
            logits[t] = s;
        }
    }
    return logits;
}

inline std::vector<double> mlm_logits(const ModelWeights& w, const ForwardTrace& trace,
                                      int position) {
    if (position < 0 || static_cast<std::size_t>(position) >= trace.seq_len())
        throw ArgumentError("mlm_logits: position " + std::to_string(position) +
                            " outside sequence of length " + std::to_string(trace.seq_len()));
    return apply_mlm_head(w, trace.final_output().row(static_cast<std::size_t>(position)));
}

} // namespace ctxmix
