#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxmix/data.hpp"
#include "ctxmix/model.hpp"
#include "ctxmix/numerics.hpp"
#include "ctxmix/parallel.hpp"
#include "ctxmix/scorers.hpp"
#include "ctxmix/training.hpp"

namespace ctxmix {

// Total score mass assigned to cue positions: S . xi.
inline double alignment_dot(const ScoreVector& s, std::span<const double> xi) {
    if (s.scores.size() != xi.size())
        throw ShapeError("alignment_dot: score length " + std::to_string(s.scores.size()) +
                         " vs cue vector length " + std::to_string(xi.size()));
    return dot(s.scores, xi);
}

// Average precision of the cue positions under the score ranking. Tokens are
// ranked by descending score; ties break by ascending position.
inline double alignment_ap(const ScoreVector& s, std::span<const double> xi) {
    if (s.scores.size() != xi.size())
        throw ShapeError("alignment_ap: score/cue lengths differ");
    std::size_t cues = 0;
    for (double x : xi) cues += x > 0.5 ? 1 : 0;
    if (cues == 0) throw ArgumentError("alignment_ap: cue vector has no positive entry");
    std::vector<std::size_t> order(s.scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (s.scores[a] != s.scores[b]) return s.scores[a] > s.scores[b];
        return a < b;
    });
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (xi[order[rank]] > 0.5) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    return sum / static_cast<double>(cues);
}

// Number of non-cue tokens scored strictly above the best cue token.
inline int probes_needed(const ScoreVector& s, std::span<const double> xi) {
    if (s.scores.size() != xi.size())
        throw ShapeError("probes_needed: score/cue lengths differ");
    double best_cue = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < xi.size(); ++i)
        if (xi[i] > 0.5) {
            best_cue = std::max(best_cue, s.scores[i]);
            any = true;
        }
    if (!any) throw ArgumentError("probes_needed: cue vector has no positive entry");
    int count = 0;
    for (std::size_t i = 0; i < xi.size(); ++i)
        if (xi[i] <= 0.5 && s.scores[i] > best_cue) ++count;
    return count;
}

// ---------------------------------------------------------------------------
// MDL probing via online coding.

struct ProbeConfig {
    int epochs = 100;        // full-batch gradient descent epochs
    double learning_rate = 0.5;
    double l2 = 1e-4;        // weight decay on the weight matrix, not the bias
};

struct ChunkSchedule {
    std::vector<double> percents = {1, 2, 4, 8, 16, 32, 64, 100};
};

struct ProbeReport {
    std::size_t n = 0;
    int k = 0;
    double mdl_bits = 0.0;
    double compression = 0.0;
    std::vector<std::size_t> boundaries;      // cumulative example counts
    std::vector<double> chunk_codelengths;    // bits per chunk, first is uniform
};

namespace detail {

// Multinomial logistic regression, zero-initialized so that an untrained
// probe (epochs = 0) predicts the uniform distribution exactly.
class LogisticProbe {
public:
    LogisticProbe(std::size_t dim, int classes)
        : dim_(dim), k_(static_cast<std::size_t>(classes)),
          w_(k_ * dim_, 0.0), b_(k_, 0.0) {}

    void fit(std::span<const std::vector<double>* const> xs, std::span<const int> ys,
             const ProbeConfig& cfg) {
        const std::size_t n = xs.size();
        if (n == 0) return;
        std::vector<double> gw(k_ * dim_), gb(k_), p(k_);
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::fill(gw.begin(), gw.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                predict(*xs[i], p);
                for (std::size_t c = 0; c < k_; ++c) {
                    const double delta =
                        p[c] - (static_cast<std::size_t>(ys[i]) == c ? 1.0 : 0.0);
                    gb[c] += delta;
                    const double* x = xs[i]->data();
                    double* g = gw.data() + c * dim_;
                    for (std::size_t e = 0; e < dim_; ++e) g[e] += delta * x[e];
                }
            }
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t c = 0; c < k_; ++c) {
                for (std::size_t e = 0; e < dim_; ++e) {
                    const double g = gw[c * dim_ + e] * inv + cfg.l2 * w_[c * dim_ + e];
                    w_[c * dim_ + e] -= cfg.learning_rate * g;
                }
                b_[c] -= cfg.learning_rate * gb[c] * inv;
            }
        }
    }

    void predict(const std::vector<double>& x, std::vector<double>& out) const {
        std::vector<double> logits(k_);
        for (std::size_t c = 0; c < k_; ++c)
            logits[c] = b_[c] + dot(std::span<const double>(w_.data() + c * dim_, dim_),
                                    std::span<const double>(x.data(), dim_));
        out.resize(k_);
        softmax(logits, out);
    }

private:
    std::size_t dim_;
    std::size_t k_;
    std::vector<double> w_;
    std::vector<double> b_;
};

} // namespace detail

// Online coding: a seeded shuffle orders the data; the first chunk costs
// log2(K) bits per label, each later chunk is coded by a fresh probe trained
// on everything before it. A single-class training prefix falls back to
// add-one-smoothed class-prior coding. Compression = N log2 K / MDL.
inline ProbeReport mdl_online(const std::vector<std::vector<double>>& reps,
                              const std::vector<int>& labels, int num_classes,
                              const ChunkSchedule& schedule, const ProbeConfig& probe_cfg,
                              std::uint64_t seed) {
    const std::size_t n = reps.size();
    if (labels.size() != n)
        throw ShapeError("mdl_online: " + std::to_string(n) + " representations vs " +
                         std::to_string(labels.size()) + " labels");
    if (num_classes < 2) throw ArgumentError("mdl_online: need at least 2 classes");
    const std::size_t min_first = 2 * static_cast<std::size_t>(num_classes);
    if (n < min_first)
        throw ArgumentError("mdl_online: need at least " + std::to_string(min_first) +
                            " points");
    for (int y : labels)
        if (y < 0 || y >= num_classes) throw ArgumentError("mdl_online: label out of range");
    const std::size_t dim = reps.front().size();
    for (const auto& r : reps)
        if (r.size() != dim) throw ShapeError("mdl_online: representations disagree on dim");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.next_below(i)]);

    ProbeReport report;
    report.n = n;
    report.k = num_classes;
    const double log2k = std::log2(static_cast<double>(num_classes));

    std::vector<std::size_t> bounds;
    for (double p : schedule.percents) {
        auto t = static_cast<std::size_t>(
            std::llround(p / 100.0 * static_cast<double>(n)));
        t = std::clamp<std::size_t>(std::max(t, min_first), min_first, n);
        if (bounds.empty() || t > bounds.back()) bounds.push_back(t);
    }
    if (bounds.back() != n) bounds.push_back(n);
    report.boundaries = bounds;

    report.chunk_codelengths.push_back(static_cast<double>(bounds[0]) * log2k);
    report.mdl_bits = report.chunk_codelengths[0];

    for (std::size_t s = 0; s + 1 < bounds.size(); ++s) {
        const std::size_t train_n = bounds[s];
        const std::size_t lo = bounds[s], hi = bounds[s + 1];

        std::vector<const std::vector<double>*> xs(train_n);
        std::vector<int> ys(train_n);
        for (std::size_t i = 0; i < train_n; ++i) {
            xs[i] = &reps[order[i]];
            ys[i] = labels[order[i]];
        }
        std::vector<std::size_t> class_counts(static_cast<std::size_t>(num_classes), 0);
        for (int y : ys) ++class_counts[static_cast<std::size_t>(y)];
        const bool single_class =
            std::count_if(class_counts.begin(), class_counts.end(),
                          [](std::size_t c) { return c > 0; }) < 2;

        double bits = 0.0;
        if (single_class) {
            std::vector<double> prior(static_cast<std::size_t>(num_classes));
            for (std::size_t c = 0; c < prior.size(); ++c)
                prior[c] = (static_cast<double>(class_counts[c]) + 1.0) /
                           (static_cast<double>(train_n) + static_cast<double>(num_classes));
            for (std::size_t i = lo; i < hi; ++i)
                bits -= std::log2(prior[static_cast<std::size_t>(labels[order[i]])]);
        } else {
            detail::LogisticProbe probe(dim, num_classes);
            probe.fit(xs, ys, probe_cfg);
            std::vector<double> p;
            for (std::size_t i = lo; i < hi; ++i) {
                probe.predict(reps[order[i]], p);
                // Guard against numeric zero from saturated logits.
                bits -= std::log2(std::max(p[static_cast<std::size_t>(labels[order[i]])],
                                           1e-15));
            }
        }
        report.chunk_codelengths.push_back(bits);
        report.mdl_bits += bits;
    }

    report.compression = static_cast<double>(n) * log2k / report.mdl_bits;
    return report;
}

// ---------------------------------------------------------------------------
// Blank-out faithfulness.

// Drop in the restricted target probability when token i is replaced by
// [UNK], for every i except the mask position (scored 0).
inline std::vector<double> blank_out_scores(const ModelWeights& w, const AgreementExample& ex) {
    const std::size_t n = ex.token_ids.size();
    const auto prob = [&](const std::vector<int>& ids) {
        const ForwardTrace trace = forward(w, ids);
        const std::vector<double> logits = mlm_logits(w, trace, ex.mask_position);
        return restricted_target_prob(logits[static_cast<std::size_t>(ex.target_id)],
                                      logits[static_cast<std::size_t>(ex.foil_id)]);
    };
    const double p_full = prob(ex.token_ids);
    std::vector<double> drops(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (static_cast<int>(i) == ex.mask_position) continue;
        if (ex.token_ids[i] == Vocab::kUnk) continue; // identical input, exact zero drop
        std::vector<int> ids = ex.token_ids;
        ids[i] = Vocab::kUnk;
        drops[i] = p_full - prob(ids);
    }
    return drops;
}

// Spearman correlation between two layer-indexed series (e.g. compression vs
// alignment); nullopt when either series is constant.
inline std::optional<double> layerwise_correlation(std::span<const double> alignments,
                                                   std::span<const double> compressions) {
    return spearman_rho(alignments, compressions);
}

// ---------------------------------------------------------------------------
// Report assembly.

struct FaithfulnessReport {
    std::vector<std::string> methods;
    std::vector<double> mean_rho;              // per method
    std::vector<std::size_t> counted;          // examples entering each mean
    std::size_t skipped_short = 0;             // sequences shorter than 3 tokens
    std::size_t skipped_degenerate = 0;        // undefined correlations
    // per method x example; NaN where the example was skipped
    std::vector<std::vector<double>> per_example_rho;
    std::vector<std::vector<double>> blank_out; // per example, per token
};

// Correlates blank-out scores with each method's aggregated score vector,
// example by example. aggregated[e] holds one ScoreVector per method for
// example e, in the same order as `methods`.
inline FaithfulnessReport faithfulness_correlation(
    const ModelWeights& w, const Dataset& ds, const std::vector<std::string>& methods,
    const std::vector<std::vector<ScoreVector>>& aggregated, int jobs = 1) {
    if (aggregated.size() != ds.examples.size())
        throw ArgumentError("faithfulness_correlation: scores/examples count mismatch");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    FaithfulnessReport report;
    report.methods = methods;
    report.per_example_rho.assign(methods.size(),
                                  std::vector<double>(ds.examples.size(), nan));

    std::vector<std::vector<double>>& blank = report.blank_out;
    blank.resize(ds.examples.size());
    parallel_for(ds.examples.size(), jobs, [&](std::size_t e) {
        if (ds.examples[e].token_ids.size() >= 3)
            blank[e] = blank_out_scores(w, ds.examples[e]);
    });

    for (std::size_t e = 0; e < ds.examples.size(); ++e) {
        if (ds.examples[e].token_ids.size() < 3) {
            ++report.skipped_short;
            continue;
        }
        for (std::size_t m = 0; m < methods.size(); ++m) {
            const ScoreVector& sv = aggregated[e][m];
            if (sv.scores.size() != blank[e].size())
                throw ArgumentError("faithfulness_correlation: score length mismatch at example " +
                                    std::to_string(e));
            const auto rho = spearman_rho(blank[e], sv.scores);
            if (rho)
                report.per_example_rho[m][e] = *rho;
            else
                ++report.skipped_degenerate;
        }
    }

    report.mean_rho.assign(methods.size(), 0.0);
    report.counted.assign(methods.size(), 0);
    for (std::size_t m = 0; m < methods.size(); ++m) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (double r : report.per_example_rho[m])
            if (!std::isnan(r)) {
                sum += r;
                ++cnt;
            }
        report.counted[m] = cnt;
        report.mean_rho[m] = cnt > 0 ? sum / static_cast<double>(cnt) : nan;
    }
    return report;
}

struct CueAlignmentCell {
    double mean_dot = 0.0;
    double mean_ap = 0.0;
    double mean_probes = 0.0;
    std::vector<double> per_example_dot;
};

// (method, layer) -> averaged alignment metrics over a dataset. scores[e]
// holds the score vectors of example e for any set of methods and layers.
struct CueAlignmentReport {
    std::map<std::pair<std::string, int>, CueAlignmentCell> cells;
};

inline CueAlignmentReport cue_alignment_report(const Dataset& ds,
                                               const std::vector<std::vector<ScoreVector>>& scores) {
    if (scores.size() != ds.examples.size())
        throw ArgumentError("cue_alignment_report: scores/examples count mismatch");
    CueAlignmentReport report;
    std::map<std::pair<std::string, int>, std::size_t> counts;
    for (std::size_t e = 0; e < ds.examples.size(); ++e) {
        const std::vector<double> xi = cue_vector(ds.examples[e]);
        for (const ScoreVector& sv : scores[e]) {
            auto& cell = report.cells[{sv.method, sv.layer}];
            cell.mean_dot += alignment_dot(sv, xi);
            cell.mean_ap += alignment_ap(sv, xi);
            cell.mean_probes += probes_needed(sv, xi);
            cell.per_example_dot.push_back(alignment_dot(sv, xi));
            ++counts[{sv.method, sv.layer}];
        }
    }
    for (auto& [key, cell] : report.cells) {
        const double c = static_cast<double>(counts[key]);
        cell.mean_dot /= c;
        cell.mean_ap /= c;
        cell.mean_probes /= c;
    }
    return report;
}

} // namespace ctxmix
