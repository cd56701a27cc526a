#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "ctxmix/data.hpp"
#include "ctxmix/serialize.hpp"
#include "ctxmix/training.hpp"

using namespace ctxmix;

namespace {

EncoderConfig tiny_config(int vocab) {
    EncoderConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.model_dim = 16;
    cfg.ffn_dim = 24;
    cfg.vocab_size = vocab;
    cfg.max_positions = 16;
    return cfg;
}

bool weights_equal(const ModelWeights& a, const ModelWeights& b) {
    bool equal = true;
    std::vector<const Tensor*> ta, tb;
    for_each_tensor(a, [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    for_each_tensor(b, [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    for (std::size_t i = 0; i < ta.size(); ++i)
        for (std::size_t e = 0; e < ta[i]->size(); ++e)
            if (ta[i]->data()[e] != tb[i]->data()[e]) equal = false;
    return equal;
}

} // namespace

TEST_SUITE("training") {

TEST_CASE("adam update matches the closed form on a two-parameter objective") {
    // Objective f(w) = w0^2 + 3 w1, gradients (2 w0, 3).
    double w0 = 0.7, w1 = -0.2;
    double m0 = 0, v0 = 0, m1 = 0, v1 = 0;
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double g0 = 2.0 * w0, g1 = 3.0;
    adam_update(w0, m0, v0, g0, 1, lr, b1, b2, eps);
    adam_update(w1, m1, v1, g1, 1, lr, b1, b2, eps);

    // Closed form for the first step: mhat = g, vhat = g^2.
    const double want0 = 0.7 - lr * g0 / (std::sqrt(g0 * g0) + eps);
    const double want1 = -0.2 - lr * g1 / (std::sqrt(g1 * g1) + eps);
    CHECK(w0 == doctest::Approx(want0).epsilon(1e-12));
    CHECK(w1 == doctest::Approx(want1).epsilon(1e-12));

    // Second step with fresh gradients follows the recurrence exactly.
    const double g0b = 2.0 * w0;
    double m_ref = (1 - b1) * g0, v_ref = (1 - b2) * g0 * g0;
    m_ref = b1 * m_ref + (1 - b1) * g0b;
    v_ref = b2 * v_ref + (1 - b2) * g0b * g0b;
    const double mhat = m_ref / (1 - std::pow(b1, 2));
    const double vhat = v_ref / (1 - std::pow(b2, 2));
    const double want0b = w0 - lr * mhat / (std::sqrt(vhat) + eps);
    adam_update(w0, m0, v0, g0b, 2, lr, b1, b2, eps);
    CHECK(w0 == doctest::Approx(want0b).epsilon(1e-12));
}

TEST_CASE("restricted cross entropy is shift invariant") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const double lt = rng.uniform(-5, 5), lf = rng.uniform(-5, 5);
        const double c = rng.uniform(-100, 100);
        CHECK(restricted_ce(lt + c, lf + c) ==
              doctest::Approx(restricted_ce(lt, lf)).epsilon(1e-12));
    }
}

TEST_CASE("zero learning rate leaves weights and accuracy unchanged") {
    GeneratorConfig gen;
    gen.count = 32;
    gen.seed = 1;
    const Dataset ds = generate_synthetic(gen);
    const Vocab vocab = build_vocab(default_word_bank());
    const ModelWeights w0 = init_model(tiny_config(vocab.size()), 3);
    const double acc0 = evaluate_accuracy(w0, ds);

    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.max_steps = 5;
    cfg.batch_size = 8;
    auto [w1, report] = train(w0, ds, cfg);
    CHECK(weights_equal(w0, w1));
    CHECK(report.final_accuracy == doctest::Approx(acc0));
}

TEST_CASE("a single example is memorized") {
    GeneratorConfig gen;
    gen.count = 1;
    gen.seed = 2;
    const Dataset ds = generate_synthetic(gen);
    const Vocab vocab = build_vocab(default_word_bank());
    TrainConfig cfg;
    cfg.max_steps = 60;
    cfg.batch_size = 1;
    cfg.learning_rate = 3e-3;
    auto [w, report] = train(init_model(tiny_config(vocab.size()), 4), ds, cfg);
    CHECK(report.final_accuracy == 1.0);
}

TEST_CASE("training leaves shapes intact and checkpoints reload") {
    GeneratorConfig gen;
    gen.count = 16;
    gen.seed = 5;
    const Dataset ds = generate_synthetic(gen);
    const Vocab vocab = build_vocab(default_word_bank());
    const EncoderConfig cfg = tiny_config(vocab.size());
    TrainConfig tc;
    tc.max_steps = 3;
    tc.batch_size = 4;
    auto [w, report] = train(init_model(cfg, 6), ds, tc);

    const ModelWeights fresh = make_weights(cfg);
    std::vector<const Tensor*> ta, tb;
    for_each_tensor(w, [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    for_each_tensor(fresh, [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i]->shape() == tb[i]->shape());

    const auto path = std::filesystem::temp_directory_path() / "ctxmix_test_ft.ctxw";
    save_weights(w, path.string());
    const ModelWeights back = load_weights(path.string());
    CHECK(weights_equal(w, back));
    std::filesystem::remove(path);
}

TEST_CASE("training is deterministic and job-count independent") {
    GeneratorConfig gen;
    gen.count = 24;
    gen.seed = 7;
    const Dataset ds = generate_synthetic(gen);
    const Vocab vocab = build_vocab(default_word_bank());
    const ModelWeights w0 = init_model(tiny_config(vocab.size()), 8);
    TrainConfig cfg;
    cfg.max_steps = 4;
    cfg.batch_size = 8;
    cfg.seed = 11;

    auto [a, ra] = train(w0, ds, cfg);
    auto [b, rb] = train(w0, ds, cfg);
    cfg.jobs = 2;
    auto [c, rc] = train(w0, ds, cfg);
    CHECK(weights_equal(a, b));
    CHECK(weights_equal(a, c));
    CHECK(ra.loss_curve == rc.loss_curve);
}

TEST_CASE("masked-lm mode reduces the loss") {
    GeneratorConfig gen;
    gen.count = 64;
    gen.seed = 9;
    const Dataset ds = generate_synthetic(gen);
    const Vocab vocab = build_vocab(default_word_bank());
    TrainConfig cfg;
    cfg.mode = TrainMode::MaskedLM;
    cfg.max_steps = 40;
    cfg.batch_size = 16;
    cfg.eval_interval = 1;
    auto [w, report] = train(init_model(tiny_config(vocab.size()), 10), ds, cfg);
    REQUIRE(report.loss_curve.size() >= 2);
    CHECK(report.loss_curve.back().second < report.loss_curve.front().second);
}

TEST_CASE("divergence aborts with a numeric error") {
    GeneratorConfig gen;
    gen.count = 8;
    gen.seed = 13;
    const Dataset ds = generate_synthetic(gen);
    const Vocab vocab = build_vocab(default_word_bank());
    TrainConfig cfg;
    cfg.learning_rate = 1e12;
    cfg.max_steps = 50;
    cfg.batch_size = 8;
    CHECK_THROWS_AS(train(init_model(tiny_config(vocab.size()), 14), ds, cfg), NumericError);
}

TEST_CASE("evaluate_accuracy conventions") {
    const Vocab vocab = build_vocab(default_word_bank());

    SUBCASE("hard-wired target logit wins") {
        AgreementExample ex;
        ex.token_ids = {Vocab::kCls, 7, Vocab::kMask, Vocab::kSep};
        ex.mask_position = 2;
        ex.cue_positions = {1};
        ex.target_id = 5;
        ex.foil_id = 6;
        Dataset ds;
        ds.examples = {ex};
        ModelWeights w = init_model(tiny_config(vocab.size()), 15);
        w.mlm_head_bias(5) = 1000.0;
        CHECK(evaluate_accuracy(w, ds) == 1.0);
    }

    SUBCASE("ties count as incorrect") {
        AgreementExample ex;
        ex.token_ids = {Vocab::kCls, 7, Vocab::kMask, Vocab::kSep};
        ex.mask_position = 2;
        ex.cue_positions = {1};
        ex.target_id = 5;
        ex.foil_id = 6;
        Dataset ds;
        ds.examples = {ex};
        const ModelWeights w = make_weights(tiny_config(vocab.size())); // all-zero model
        CHECK(evaluate_accuracy(w, ds) == 0.0);
    }

    SUBCASE("random untrained model sits near chance") {
        GeneratorConfig gen;
        gen.count = 1000;
        gen.seed = 17;
        const Dataset ds = generate_synthetic(gen);
        const ModelWeights w = init_model(tiny_config(vocab.size()), 18);
        const double acc = evaluate_accuracy(w, ds, 2);
        CHECK(acc > 0.45);
        CHECK(acc < 0.55);
    }
}

} // TEST_SUITE
