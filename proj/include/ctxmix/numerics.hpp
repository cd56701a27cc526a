#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ctxmix/errors.hpp"
#include "ctxmix/tensor.hpp"

namespace ctxmix {

inline double dot(std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double l2_norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

inline double mean(std::span<const double> u) {
    double s = 0.0;
    for (double x : u) s += x;
    return s / static_cast<double>(u.size());
}

// a: m x k, b: k x n -> m x n
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            const double* brow = b.data() + p * n;
            double* crow = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

// Max-subtracted softmax over a vector; output entries are positive and sum to 1.
inline void softmax(std::span<const double> x, std::span<double> out) {
    if (x.empty()) throw ArgumentError("softmax: empty input");
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] /= sum;
}

inline std::vector<double> softmax(std::span<const double> x) {
    std::vector<double> out(x.size());
    softmax(x, std::span<double>(out));
    return out;
}

// (x - mean) / sqrt(var + eps) * gain + bias, variance with the 1/d denominator.
inline void layer_norm(std::span<const double> x, std::span<const double> gain,
                       std::span<const double> bias, double eps, std::span<double> out) {
    if (x.empty()) throw ArgumentError("layer_norm: empty input");
    if (x.size() != gain.size() || x.size() != bias.size())
        throw ShapeError("layer_norm: input/gain/bias lengths differ");
    const double mu = mean(x);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) * inv * gain[i] + bias[i];
}

inline std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                                      std::span<const double> bias, double eps) {
    std::vector<double> out(x.size());
    layer_norm(x, gain, bias, eps, std::span<double>(out));
    return out;
}

// Fractional ranks (1-based), ties receive their average rank.
inline std::vector<double> fractional_ranks(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

// Spearman rank correlation (Pearson over fractional ranks). Returns nullopt
// when either input is constant, where the correlation is undefined.
inline std::optional<double> spearman_rho(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("spearman_rho: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
    if (a.size() < 2) throw ArgumentError("spearman_rho: need at least 2 points");
    const std::vector<double> ra = fractional_ranks(a);
    const std::vector<double> rb = fractional_ranks(b);
    const double ma = mean(ra), mb = mean(rb);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const double da = ra[i] - ma, db = rb[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

enum class DistanceMetric { Cosine, Euclidean, SpearmanDistance };

struct DistanceKind {
    DistanceMetric metric = DistanceMetric::Cosine;
    // When set, both vectors are standardized per dimension before measuring,
    // using statistics over the token axis supplied by the caller.
    bool normalize_representations = false;
};

// Per-dimension mean/stddev across the rows of an n x d matrix.
struct DimensionStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

inline DimensionStats dimension_stats(const Tensor& rows) {
    const std::size_t n = rows.dim(0), d = rows.dim(1);
    DimensionStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) s.mean[j] += rows(i, j);
    for (std::size_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = rows(i, j) - s.mean[j];
            s.stddev[j] += dv * dv;
        }
    for (std::size_t j = 0; j < d; ++j)
        s.stddev[j] = std::max(std::sqrt(s.stddev[j] / static_cast<double>(n)), 1e-12);
    return s;
}

namespace detail {

inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
    const double nu = l2_norm(u), nv = l2_norm(v);
    // Degenerate-norm convention: 0 when both vanish, 1 when exactly one does.
    if (nu < 1e-12 && nv < 1e-12) return 0.0;
    if (nu < 1e-12 || nv < 1e-12) return 1.0;
    return 1.0 - dot(u, v) / (nu * nv);
}

inline double euclidean_distance(std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
    return std::sqrt(s);
}

// 1 - rank correlation of the component rankings; the same degenerate-input
// convention as cosine (0 if both constant, 1 if exactly one is).
inline double spearman_distance(std::span<const double> u, std::span<const double> v) {
    const auto rho = spearman_rho(u, v);
    if (rho) return 1.0 - *rho;
    const auto constant = [](std::span<const double> x) {
        for (double val : x)
            if (val != x[0]) return false;
        return true;
    };
    return (constant(u) && constant(v)) ? 0.0 : 1.0;
}

} // namespace detail

inline double distance(std::span<const double> u, std::span<const double> v,
                       const DistanceKind& kind, const DimensionStats* stats = nullptr) {
    if (u.size() != v.size())
        throw ShapeError("distance: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()) + " differ");
    if (u.empty()) throw ArgumentError("distance: empty input");

    std::vector<double> su, sv;
    if (kind.normalize_representations) {
        if (stats == nullptr)
            throw ArgumentError("distance: normalize_representations requires caller statistics");
        su.resize(u.size());
        sv.resize(v.size());
        for (std::size_t i = 0; i < u.size(); ++i) {
            su[i] = (u[i] - stats->mean[i]) / stats->stddev[i];
            sv[i] = (v[i] - stats->mean[i]) / stats->stddev[i];
        }
        u = su;
        v = sv;
    }

    switch (kind.metric) {
    case DistanceMetric::Cosine: return detail::cosine_distance(u, v);
    case DistanceMetric::Euclidean: return detail::euclidean_distance(u, v);
    case DistanceMetric::SpearmanDistance: return detail::spearman_distance(u, v);
    }
    throw ArgumentError("distance: unknown metric");
}

} // namespace ctxmix
