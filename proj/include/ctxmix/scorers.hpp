#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxmix/gradients.hpp"
#include "ctxmix/model.hpp"
#include "ctxmix/numerics.hpp"
#include "ctxmix/rng.hpp"
#include "ctxmix/tensor.hpp"

namespace ctxmix {

// Per-layer context mixing map. Row i scores how much token i depends on each
// context token j. Once normalized, every row is a probability vector.
struct MixingMap {
    int layer = 0;
    std::string method;
    bool normalized = false;
    Tensor scores; // n x n
};

// Per-token scores at the mask position; non-negative, summing to one.
// layer == kAggregated marks scores aggregated across layers.
struct ScoreVector {
    static constexpr int kAggregated = -1;
    std::string method;
    int layer = 0;
    int mask_position = 0;
    std::vector<double> scores;
};

// In-place row normalization; rows that vanish (sum < 1e-12) become uniform.
inline void normalize_rows(Tensor& m) {
    const std::size_t n = m.dim(0), cols = m.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sum += m(i, j);
        if (sum < 1e-12) {
            for (std::size_t j = 0; j < cols; ++j) m(i, j) = 1.0 / static_cast<double>(cols);
        } else {
            for (std::size_t j = 0; j < cols; ++j) m(i, j) /= sum;
        }
    }
}

// Vector normalization with the same uniform fallback; positions listed in
// `excluded` are zeroed first and stay zero.
inline void normalize_scores(std::vector<double>& s, std::span<const int> excluded = {}) {
    for (int e : excluded) s[static_cast<std::size_t>(e)] = 0.0;
    double sum = 0.0;
    std::size_t live = 0;
    std::vector<bool> dead(s.size(), false);
    for (int e : excluded) dead[static_cast<std::size_t>(e)] = true;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (!dead[i]) {
            sum += s[i];
            ++live;
        }
    if (live == 0) throw ArgumentError("normalize_scores: every position excluded");
    if (sum < 1e-12) {
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = dead[i] ? 0.0 : 1.0 / static_cast<double>(live);
    } else {
        for (std::size_t i = 0; i < s.size(); ++i)
            if (!dead[i]) s[i] /= sum;
    }
}

// ---------------------------------------------------------------------------
// Value Zeroing: per layer, zero token j's value vectors in every head, rerun
// that layer only, and score C[i][j] as the distance between token i's
// original and value-zeroed outputs. Rows are then normalized.
inline std::vector<MixingMap> value_zeroing(const ModelWeights& w, const ForwardTrace& trace,
                                            const DistanceKind& kind = {}) {
    const std::size_t n = trace.seq_len();
    std::vector<MixingMap> maps;
    maps.reserve(trace.layers.size());
    for (int layer = trace.start_depth + 1; layer <= trace.final_depth(); ++layer) {
        const Tensor& original = trace.representations(layer);
        DimensionStats stats;
        if (kind.normalize_representations) stats = dimension_stats(original);
        MixingMap map;
        map.layer = layer;
        map.method = "value_zeroing";
        map.scores = Tensor({n, n});
        for (std::size_t j = 0; j < n; ++j) {
            const ZeroedLayerResult zeroed =
                forward_value_zeroed(w, trace, layer, static_cast<int>(j));
            for (std::size_t i = 0; i < n; ++i)
                map.scores(i, j) =
                    distance(zeroed.outputs.row(i), original.row(i), kind,
                             kind.normalize_representations ? &stats : nullptr);
        }
        normalize_rows(map.scores);
        map.normalized = true;
        maps.push_back(std::move(map));
    }
    return maps;
}

inline std::vector<MixingMap> value_zeroing(const ModelWeights& w, std::span<const int> token_ids,
                                            const DistanceKind& kind = {}) {
    return value_zeroing(w, forward(w, token_ids), kind);
}

// ---------------------------------------------------------------------------
// Raw attention averaged over heads; rows are already stochastic.
inline std::vector<MixingMap> attn_raw(const ForwardTrace& trace) {
    const std::size_t n = trace.seq_len();
    std::vector<MixingMap> maps;
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const Tensor& a = trace.layers[l].attn;
        const std::size_t nh = a.dim(0);
        MixingMap map;
        map.layer = trace.start_depth + static_cast<int>(l) + 1;
        map.method = "attn";
        map.normalized = true;
        map.scores = Tensor({n, n});
        for (std::size_t h = 0; h < nh; ++h)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    map.scores(i, j) += a(h, i, j) / static_cast<double>(nh);
        maps.push_back(std::move(map));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Rollout aggregation: R^l = C^l . R^(l-1) with R^0 = I. With add_identity,
// each map first becomes 0.5 C + 0.5 I (the equal-contribution residual
// assumption of the original attention-rollout formulation).
inline std::vector<MixingMap> attn_rollout(const std::vector<MixingMap>& maps,
                                           bool add_identity) {
    if (maps.empty()) throw ArgumentError("attn_rollout: no maps given");
    const std::size_t n = maps.front().scores.dim(0);
    for (const auto& m : maps) {
        if (m.scores.dim(0) != n || m.scores.dim(1) != n)
            throw ShapeError("attn_rollout: maps disagree on shape");
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (m.scores(i, j) < -1e-9)
                    throw ArgumentError("attn_rollout: negative entry in input map");
                sum += m.scores(i, j);
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw ArgumentError("attn_rollout: input rows must be stochastic (row " +
                                    std::to_string(i) + " sums to " + std::to_string(sum) + ")");
        }
    }
    std::vector<MixingMap> out;
    out.reserve(maps.size());
    Tensor rolled = Tensor::identity(n);
    for (const auto& m : maps) {
        Tensor step = m.scores;
        if (add_identity) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    step(i, j) = 0.5 * step(i, j) + (i == j ? 0.5 : 0.0);
        }
        rolled = matmul(step, rolled);
        MixingMap agg;
        agg.layer = m.layer;
        agg.method = m.method + "_rollout";
        agg.normalized = true;
        agg.scores = rolled;
        out.push_back(std::move(agg));
    }
    return out;
}

namespace detail {

// Per head, the value vectors projected through that head's W_O block:
// transformed[h].row(j) = v^h_j W_O[h*dh:(h+1)*dh, :].
inline std::vector<Tensor> transformed_values(const LayerTrace& t, const LayerWeights& lw,
                                              const EncoderConfig& cfg) {
    const std::size_t n = t.input.dim(0);
    const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t nh = static_cast<std::size_t>(cfg.num_heads);
    std::vector<Tensor> transformed(nh);
    for (std::size_t h = 0; h < nh; ++h) {
        transformed[h] = Tensor({n, d});
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < dh; ++c) {
                const double vc = t.v[h](j, c);
                if (vc == 0.0) continue;
                const double* wo = lw.w_o.data() + (h * dh + c) * d;
                double* out = transformed[h].data() + j * d;
                for (std::size_t e = 0; e < d; ++e) out[e] += vc * wo[e];
            }
    }
    return transformed;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Norm-based scores: || sum_h alpha^h_ij (v^h_j W_O^h) ||, row-normalized.
// Summing the raw contributions over j reproduces the pre-residual MHA output.
inline std::vector<MixingMap> attn_norm(const ForwardTrace& trace, const ModelWeights& w) {
    const std::size_t n = trace.seq_len();
    const std::size_t d = static_cast<std::size_t>(w.config.model_dim);
    std::vector<MixingMap> maps;
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const LayerTrace& t = trace.layers[l];
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(trace.start_depth) + l];
        const auto transformed = detail::transformed_values(t, lw, w.config);
        MixingMap map;
        map.layer = trace.start_depth + static_cast<int>(l) + 1;
        map.method = "attn_norm";
        map.scores = Tensor({n, n});
        std::vector<double> contrib(d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                std::fill(contrib.begin(), contrib.end(), 0.0);
                for (std::size_t h = 0; h < transformed.size(); ++h) {
                    const double a = t.attn(h, i, j);
                    const auto row = transformed[h].row(j);
                    for (std::size_t e = 0; e < d; ++e) contrib[e] += a * row[e];
                }
                map.scores(i, j) = l2_norm(contrib);
            }
        normalize_rows(map.scores);
        map.normalized = true;
        maps.push_back(std::move(map));
    }
    return maps;
}

// Extends the norm-based score through the first sublayer's residual and,
// optionally, its layer normalization. The residual x_i is credited to token
// i itself. The LN step maps each contribution exactly: mean-center it,
// scale by the full pre-LN vector's 1/sigma_i, multiply by the LN gain; the
// decomposed contributions plus the LN bias rebuild the post-LN vector.
// include_ln = false gives the residual-only variant.
inline std::vector<MixingMap> attn_norm_res_ln(const ForwardTrace& trace, const ModelWeights& w,
                                               bool include_ln = true) {
    const std::size_t n = trace.seq_len();
    const std::size_t d = static_cast<std::size_t>(w.config.model_dim);
    std::vector<MixingMap> maps;
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const LayerTrace& t = trace.layers[l];
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(trace.start_depth) + l];
        const auto transformed = detail::transformed_values(t, lw, w.config);
        MixingMap map;
        map.layer = trace.start_depth + static_cast<int>(l) + 1;
        map.method = include_ln ? "attn_norm_res_ln" : "attn_norm_res";
        map.scores = Tensor({n, n});
        std::vector<double> g(d);
        for (std::size_t i = 0; i < n; ++i) {
            const double inv = t.ln_mha_inv_std[i];
            for (std::size_t j = 0; j < n; ++j) {
                std::fill(g.begin(), g.end(), 0.0);
                for (std::size_t h = 0; h < transformed.size(); ++h) {
                    const double a = t.attn(h, i, j);
                    const auto row = transformed[h].row(j);
                    for (std::size_t e = 0; e < d; ++e) g[e] += a * row[e];
                }
                if (i == j)
                    for (std::size_t e = 0; e < d; ++e) g[e] += t.input(i, e);
                if (include_ln) {
                    const double mu = mean(g);
                    for (std::size_t e = 0; e < d; ++e)
                        g[e] = (g[e] - mu) * inv * lw.ln_mha_gain(e);
                }
                map.scores(i, j) = l2_norm(g);
            }
        }
        normalize_rows(map.scores);
        map.normalized = true;
        maps.push_back(std::move(map));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Gradient x input at one depth: per token, the L2 norm of the elementwise
// product of the target-logit gradient with the representation.
inline ScoreVector grad_x_input(const ModelWeights& w, const ForwardTrace& trace, int layer,
                                int target_id, int mask_position,
                                GradTarget target = GradTarget::Logit) {
    const Tensor grads = grad_wrt_layer(w, trace, layer, target_id, mask_position, target);
    const Tensor& reps = trace.representations(layer);
    const std::size_t n = trace.seq_len(), d = reps.dim(1);
    ScoreVector sv;
    sv.method = "grad_x_input";
    sv.layer = layer;
    sv.mask_position = mask_position;
    sv.scores.resize(n);
    std::vector<double> prod(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < d; ++e) prod[e] = grads(i, e) * reps(i, e);
        sv.scores[i] = l2_norm(prod);
    }
    normalize_scores(sv.scores);
    return sv;
}

enum class BaselineKind { ZeroVector, PlaceholderToken };

// PlaceholderToken uses the depth-l representations of an all-placeholder
// sequence of the same length as the baseline point.
struct Baseline {
    BaselineKind kind = BaselineKind::ZeroVector;
    int placeholder_id = -1; // required for PlaceholderToken
};

struct IgResult {
    Tensor attributions; // n x d
    double f_input = 0.0;
    double f_baseline = 0.0;
};

// Midpoint-rule integrated gradients of the target logit along the straight
// path from the baseline to the depth-l representations.
inline IgResult integrated_gradients_raw(const ModelWeights& w, const ForwardTrace& trace,
                                         int layer, int target_id, int mask_position, int steps,
                                         const Baseline& baseline = {},
                                         GradTarget target = GradTarget::Logit) {
    if (steps < 1) throw ArgumentError("integrated_gradients: steps must be >= 1");
    const Tensor& x = trace.representations(layer);
    const std::size_t n = x.dim(0), d = x.dim(1);

    Tensor base({n, d});
    if (baseline.kind == BaselineKind::PlaceholderToken) {
        if (baseline.placeholder_id < 0 || baseline.placeholder_id >= w.config.vocab_size)
            throw ArgumentError("integrated_gradients: invalid baseline token id " +
                                std::to_string(baseline.placeholder_id));
        const std::vector<int> ids(n, baseline.placeholder_id);
        base = forward(w, ids).representations(layer);
    }

    const auto target_value = [&](const ForwardTrace& tr) {
        const std::vector<double> logits = mlm_logits(w, tr, mask_position);
        if (target == GradTarget::Logit) return logits[static_cast<std::size_t>(target_id)];
        const std::vector<double> p = softmax(logits);
        return std::log(p[static_cast<std::size_t>(target_id)]);
    };

    Tensor grad_sum({n, d});
    for (int s = 1; s <= steps; ++s) {
        const double alpha = (static_cast<double>(s) - 0.5) / static_cast<double>(steps);
        Tensor point({n, d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < d; ++e)
                point(i, e) = base(i, e) + alpha * (x(i, e) - base(i, e));
        const ForwardTrace partial = forward_from(w, point, layer);
        const Tensor g = grad_wrt_layer(w, partial, layer, target_id, mask_position, target);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < d; ++e) grad_sum(i, e) += g(i, e);
    }

    IgResult r;
    r.attributions = Tensor({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < d; ++e)
            r.attributions(i, e) =
                (x(i, e) - base(i, e)) * grad_sum(i, e) / static_cast<double>(steps);
    r.f_input = target_value(forward_from(w, x, layer));
    r.f_baseline = target_value(forward_from(w, base, layer));
    return r;
}

inline ScoreVector integrated_gradients(const ModelWeights& w, const ForwardTrace& trace,
                                        int layer, int target_id, int mask_position, int steps,
                                        const Baseline& baseline = {},
                                        GradTarget target = GradTarget::Logit) {
    const IgResult r =
        integrated_gradients_raw(w, trace, layer, target_id, mask_position, steps, baseline, target);
    const std::size_t n = r.attributions.dim(0);
    ScoreVector sv;
    sv.method = "integrated_gradients";
    sv.layer = layer;
    sv.mask_position = mask_position;
    sv.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) sv.scores[i] = l2_norm(r.attributions.row(i));
    normalize_scores(sv.scores);
    return sv;
}

// ---------------------------------------------------------------------------
// Row m of a mixing map as a score vector, renormalized (optionally with some
// positions excluded, e.g. special tokens).
inline ScoreVector mask_row(const MixingMap& map, int m, std::span<const int> excluded = {}) {
    const std::size_t n = map.scores.dim(0);
    if (m < 0 || static_cast<std::size_t>(m) >= n)
        throw ArgumentError("mask_row: position " + std::to_string(m) +
                            " outside map of size " + std::to_string(n));
    ScoreVector sv;
    sv.method = map.method;
    sv.layer = map.layer;
    sv.mask_position = m;
    sv.scores.assign(map.scores.row(static_cast<std::size_t>(m)).begin(),
                     map.scores.row(static_cast<std::size_t>(m)).end());
    normalize_scores(sv.scores, excluded);
    return sv;
}

// Uniform random scores normalized to sum one; reproducible per seed.
inline ScoreVector random_scores(int n, std::uint64_t seed) {
    if (n < 1) throw ArgumentError("random_scores: n must be >= 1");
    Rng rng(seed);
    ScoreVector sv;
    sv.method = "rand";
    sv.layer = ScoreVector::kAggregated;
    sv.scores.resize(static_cast<std::size_t>(n));
    for (auto& s : sv.scores) s = rng.uniform01();
    normalize_scores(sv.scores);
    return sv;
}

} // namespace ctxmix
