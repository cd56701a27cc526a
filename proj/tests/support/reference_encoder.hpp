#pragma once

// Straight-line re-implementation of the encoder equations used as an
// independent oracle. Everything is written with plain loops and local
// helpers on nested vectors; it deliberately shares no forward-pass code
// with the library.

#include <cmath>
#include <vector>

#include "ctxmix/model.hpp"

namespace refimpl {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Vec ref_softmax(const Vec& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    Vec out(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

inline Vec ref_layer_norm(const Vec& x, const Vec& gain, const Vec& bias, double eps) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = (x[i] - mu) / std::sqrt(var + eps) * gain[i] + bias[i];
    return out;
}

struct RefResult {
    std::vector<Mat> reps; // [depth 0..L][token][dim]; depth 0 = embeddings
    // [layer 1..L][head][i][j]
    std::vector<std::vector<Mat>> attn;
};

// Full forward pass; when zero_layer is in 1..L, token zero_token's value
// vectors are zeroed in every head of that layer only.
inline RefResult ref_forward(const ctxmix::ModelWeights& w, const std::vector<int>& ids,
                             int zero_layer = -1, int zero_token = -1) {
    const auto& cfg = w.config;
    const std::size_t n = ids.size();
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t nh = static_cast<std::size_t>(cfg.num_heads);
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim);

    RefResult res;
    Mat x(n, Vec(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < d; ++e)
            x[i][e] = w.token_embeddings(static_cast<std::size_t>(ids[i]), e) +
                      w.position_embeddings(i, e);
    res.reps.push_back(x);

    for (int layer = 1; layer <= cfg.num_layers; ++layer) {
        const auto& lw = w.layers[static_cast<std::size_t>(layer - 1)];
        std::vector<Mat> attn_layer(nh, Mat(n, Vec(n)));
        Mat concat(n, Vec(d, 0.0));

        for (std::size_t h = 0; h < nh; ++h) {
            const auto& hw = lw.heads[h];
            Mat q(n, Vec(dh)), k(n, Vec(dh)), v(n, Vec(dh));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) {
                    double sq = hw.b_q(c), sk = hw.b_k(c), sv = hw.b_v(c);
                    for (std::size_t e = 0; e < d; ++e) {
                        sq += x[i][e] * hw.w_q(e, c);
                        sk += x[i][e] * hw.w_k(e, c);
                        sv += x[i][e] * hw.w_v(e, c);
                    }
                    q[i][c] = sq;
                    k[i][c] = sk;
                    v[i][c] = sv;
                }
            if (layer == zero_layer && zero_token >= 0)
                for (std::size_t c = 0; c < dh; ++c) v[static_cast<std::size_t>(zero_token)][c] = 0.0;

            for (std::size_t i = 0; i < n; ++i) {
                Vec logits(n);
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += q[i][c] * k[j][c];
                    logits[j] = s / std::sqrt(static_cast<double>(cfg.model_dim));
                }
                attn_layer[h][i] = ref_softmax(logits);
            }

            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += attn_layer[h][i][j] * v[j][c];
                    concat[i][h * dh + c] = s;
                }
        }

        Mat z(n, Vec(d));
        for (std::size_t i = 0; i < n; ++i) {
            Vec proj(d, 0.0);
            for (std::size_t e = 0; e < d; ++e)
                for (std::size_t c = 0; c < d; ++c) proj[e] += concat[i][c] * lw.w_o(c, e);
            Vec pre(d);
            for (std::size_t e = 0; e < d; ++e) pre[e] = proj[e] + x[i][e];
            z[i] = ref_layer_norm(pre, lw.ln_mha_gain.values(), lw.ln_mha_bias.values(),
                                  cfg.ln_eps);
        }

        Mat out(n, Vec(d));
        for (std::size_t i = 0; i < n; ++i) {
            Vec hidden(f);
            for (std::size_t c = 0; c < f; ++c) {
                double s = lw.ffn_b1(c);
                for (std::size_t e = 0; e < d; ++e) s += z[i][e] * lw.ffn_w1(e, c);
                hidden[c] = s > 0.0 ? s : 0.0;
            }
            Vec ffn(d);
            for (std::size_t e = 0; e < d; ++e) {
                double s = lw.ffn_b2(e);
                for (std::size_t c = 0; c < f; ++c) s += hidden[c] * lw.ffn_w2(c, e);
                ffn[e] = s;
            }
            Vec pre(d);
            for (std::size_t e = 0; e < d; ++e) pre[e] = ffn[e] + z[i][e];
            out[i] = ref_layer_norm(pre, lw.ln_ffn_gain.values(), lw.ln_ffn_bias.values(),
                                    cfg.ln_eps);
        }

        res.attn.push_back(std::move(attn_layer));
        res.reps.push_back(std::move(out));
        x = res.reps.back();
    }
    return res;
}

inline double ref_cosine_distance(const Vec& a, const Vec& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na < 1e-12 && nb < 1e-12) return 0.0;
    if (na < 1e-12 || nb < 1e-12) return 1.0;
    return 1.0 - ab / (na * nb);
}

// Value-zeroing maps recomputed the slow way: one complete forward pass per
// (layer, zeroed token) pair, cosine distance, then row normalization.
inline std::vector<Mat> ref_value_zeroing(const ctxmix::ModelWeights& w,
                                          const std::vector<int>& ids) {
    const std::size_t n = ids.size();
    const int layers = w.config.num_layers;
    const RefResult base = ref_forward(w, ids);
    std::vector<Mat> maps;
    for (int l = 1; l <= layers; ++l) {
        Mat c(n, Vec(n, 0.0));
        for (std::size_t j = 0; j < n; ++j) {
            const RefResult zeroed = ref_forward(w, ids, l, static_cast<int>(j));
            for (std::size_t i = 0; i < n; ++i)
                c[i][j] = ref_cosine_distance(zeroed.reps[static_cast<std::size_t>(l)][i],
                                              base.reps[static_cast<std::size_t>(l)][i]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) sum += c[i][j];
            if (sum < 1e-12)
                for (std::size_t j = 0; j < n; ++j) c[i][j] = 1.0 / static_cast<double>(n);
            else
                for (std::size_t j = 0; j < n; ++j) c[i][j] /= sum;
        }
        maps.push_back(std::move(c));
    }
    return maps;
}

} // namespace refimpl
