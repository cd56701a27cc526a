#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctxmix/data.hpp"
#include "ctxmix/gradients.hpp"
#include "ctxmix/model.hpp"
#include "ctxmix/parallel.hpp"
#include "ctxmix/rng.hpp"

namespace ctxmix {

enum class TrainMode { MaskedLM, AgreementFineTune };

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 32;
    int max_steps = 600;
    int eval_interval = 50;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::AgreementFineTune;
    int jobs = 1;

    void validate() const {
        if (learning_rate < 0.0 || batch_size < 1 || max_steps < 0 || eval_interval < 1)
            throw ArgumentError("TrainConfig: rates and sizes must be positive");
    }
};

struct TrainReport {
    std::vector<std::pair<int, double>> loss_curve; // (step, batch loss)
    double final_accuracy = 0.0;
    int steps_executed = 0;
};

// Cross entropy over the two-way softmax restricted to the target and foil
// logits. Invariant to adding a constant to both logits.
inline double restricted_ce(double target_logit, double foil_logit) {
    const double mx = std::max(target_logit, foil_logit);
    const double zt = std::exp(target_logit - mx), zf = std::exp(foil_logit - mx);
    return -std::log(zt / (zt + zf));
}

// Probability of the target under the restricted two-way softmax.
inline double restricted_target_prob(double target_logit, double foil_logit) {
    const double mx = std::max(target_logit, foil_logit);
    const double zt = std::exp(target_logit - mx), zf = std::exp(foil_logit - mx);
    return zt / (zt + zf);
}

// One Adam coordinate update (bias-corrected, step counter t starts at 1).
inline void adam_update(double& w, double& m, double& v, double g, int t, double lr,
                        double beta1, double beta2, double eps) {
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, t));
    const double vhat = v / (1.0 - std::pow(beta2, t));
    w -= lr * mhat / (std::sqrt(vhat) + eps);
}

namespace detail {

inline void zero_all(ModelWeights& w) {
    for_each_tensor(w, [](const std::string&, Tensor& t) {
        std::fill(t.values().begin(), t.values().end(), 0.0);
    });
}

inline void add_scaled(ModelWeights& into, const ModelWeights& from, double scale) {
    std::vector<Tensor*> dst;
    std::vector<const Tensor*> src;
    for_each_tensor(into, [&](const std::string&, Tensor& t) { dst.push_back(&t); });
    for_each_tensor(from, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
    for (std::size_t i = 0; i < dst.size(); ++i)
        for (std::size_t e = 0; e < dst[i]->size(); ++e)
            dst[i]->data()[e] += scale * src[i]->data()[e];
}

// Loss and full-model gradients for one example; grads accumulate.
inline double example_loss_and_grads(const ModelWeights& w, const AgreementExample& ex,
                                     TrainMode mode, ModelWeights& grads) {
    const ForwardTrace trace = forward(w, ex.token_ids);
    const std::size_t m = static_cast<std::size_t>(ex.mask_position);
    const std::vector<double> logits = mlm_logits(w, trace, ex.mask_position);
    const std::size_t v = logits.size();
    std::vector<double> d_logits(v, 0.0);
    double loss = 0.0;
    if (mode == TrainMode::AgreementFineTune) {
        const double lt = logits[static_cast<std::size_t>(ex.target_id)];
        const double lf = logits[static_cast<std::size_t>(ex.foil_id)];
        const double pt = restricted_target_prob(lt, lf);
        loss = restricted_ce(lt, lf);
        d_logits[static_cast<std::size_t>(ex.target_id)] = pt - 1.0;
        d_logits[static_cast<std::size_t>(ex.foil_id)] = 1.0 - pt;
    } else {
        const std::vector<double> p = softmax(logits);
        loss = -std::log(std::max(p[static_cast<std::size_t>(ex.target_id)], 1e-300));
        for (std::size_t t = 0; t < v; ++t) d_logits[t] = p[t];
        d_logits[static_cast<std::size_t>(ex.target_id)] -= 1.0;
    }

    Tensor d_final({trace.seq_len(), static_cast<std::size_t>(w.config.model_dim)});
    mlm_head_backward(w, trace.final_output().row(m), d_logits, d_final.row(m), &grads);
    const Tensor d_x0 = backward_to_depth(w, trace, std::move(d_final), 0, &grads);
    accumulate_embedding_grads(ex.token_ids, d_x0, grads);
    return loss;
}

} // namespace detail

// Fraction of examples whose target logit strictly beats the foil logit at
// the mask position; ties count as incorrect.
inline double evaluate_accuracy(const ModelWeights& w, const Dataset& ds, int jobs = 1) {
    if (ds.examples.empty()) throw ArgumentError("evaluate_accuracy: empty dataset");
    std::vector<char> correct(ds.examples.size(), 0);
    parallel_for(ds.examples.size(), jobs, [&](std::size_t i) {
        const auto& ex = ds.examples[i];
        const ForwardTrace trace = forward(w, ex.token_ids);
        const std::vector<double> logits = mlm_logits(w, trace, ex.mask_position);
        correct[i] = logits[static_cast<std::size_t>(ex.target_id)] >
                             logits[static_cast<std::size_t>(ex.foil_id)]
                         ? 1
                         : 0;
    });
    std::size_t hits = 0;
    for (char c : correct) hits += static_cast<std::size_t>(c);
    return static_cast<double>(hits) / static_cast<double>(ds.examples.size());
}

// Adam training loop over the dataset. AgreementFineTune minimizes the
// restricted two-way cross entropy at the mask; MaskedLM the full-vocabulary
// cross entropy toward the target token. Deterministic given the seed: batch
// order comes from seeded epoch shuffles and per-example gradients are summed
// in batch order via a fixed chunk partition, independent of the job count.
inline std::pair<ModelWeights, TrainReport> train(ModelWeights weights, const Dataset& train_set,
                                                  const TrainConfig& cfg,
                                                  const Dataset* eval_set = nullptr) {
    cfg.validate();
    if (train_set.examples.empty()) throw ArgumentError("train: empty dataset");

    TrainReport report;
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(train_set.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size(); // triggers a shuffle at the first step

    ModelWeights m_state = zeros_like(weights);
    ModelWeights v_state = zeros_like(weights);
    constexpr int kChunks = 8;
    std::vector<ModelWeights> chunk_grads;
    chunk_grads.reserve(kChunks);
    for (int c = 0; c < kChunks; ++c) chunk_grads.push_back(zeros_like(weights));
    ModelWeights grads = zeros_like(weights);
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch_size));

    std::vector<Tensor*> wt, mt, vt, gt;
    for_each_tensor(weights, [&](const std::string&, Tensor& t) { wt.push_back(&t); });
    for_each_tensor(m_state, [&](const std::string&, Tensor& t) { mt.push_back(&t); });
    for_each_tensor(v_state, [&](const std::string&, Tensor& t) { vt.push_back(&t); });
    for_each_tensor(grads, [&](const std::string&, Tensor& t) { gt.push_back(&t); });

    for (int step = 1; step <= cfg.max_steps; ++step) {
        for (auto& b : batch) {
            if (cursor == order.size()) {
                for (std::size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[rng.next_below(i)]);
                cursor = 0;
            }
            b = order[cursor++];
        }

        std::vector<double> chunk_losses(kChunks, 0.0);
        parallel_for(kChunks, cfg.jobs, [&](std::size_t c) {
            detail::zero_all(chunk_grads[c]);
            const std::size_t lo = c * batch.size() / kChunks;
            const std::size_t hi = (c + 1) * batch.size() / kChunks;
            for (std::size_t b = lo; b < hi; ++b)
                chunk_losses[c] += detail::example_loss_and_grads(
                    weights, train_set.examples[batch[b]], cfg.mode, chunk_grads[c]);
        });
        detail::zero_all(grads);
        double loss = 0.0;
        for (int c = 0; c < kChunks; ++c) {
            loss += chunk_losses[static_cast<std::size_t>(c)];
            detail::add_scaled(grads, chunk_grads[static_cast<std::size_t>(c)], 1.0);
        }
        loss /= static_cast<double>(batch.size());
        if (!std::isfinite(loss))
            throw NumericError("training diverged (non-finite loss) at step " +
                               std::to_string(step));

        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        for (std::size_t t = 0; t < wt.size(); ++t)
            for (std::size_t e = 0; e < wt[t]->size(); ++e)
                adam_update(wt[t]->data()[e], mt[t]->data()[e], vt[t]->data()[e],
                            gt[t]->data()[e] * inv_batch, step, cfg.learning_rate, cfg.beta1,
                            cfg.beta2, cfg.adam_eps);

        if (step % cfg.eval_interval == 0 || step == cfg.max_steps)
            report.loss_curve.emplace_back(step, loss);
        report.steps_executed = step;
    }

    report.final_accuracy =
        evaluate_accuracy(weights, eval_set != nullptr ? *eval_set : train_set, cfg.jobs);
    return {std::move(weights), std::move(report)};
}

} // namespace ctxmix
