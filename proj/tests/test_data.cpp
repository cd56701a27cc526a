#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "ctxmix/data.hpp"

using namespace ctxmix;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("ctxmix_test_" + name);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::set<int> number_noun_ids(const WordBank& bank, const Vocab& vocab, bool plural) {
    std::set<int> ids;
    for (const auto& [sg, pl] : bank.noun_pairs) ids.insert(vocab.id(plural ? pl : sg));
    return ids;
}

} // namespace

TEST_SUITE("data") {

TEST_CASE("cue vector") {
    AgreementExample ex;
    ex.token_ids = {Vocab::kCls, 5, Vocab::kMask};
    ex.mask_position = 2;
    ex.cue_positions = {1};
    ex.target_id = 6;
    ex.foil_id = 7;
    SUBCASE("single cue") {
        ex.cue_positions = {0};
        const auto xi = cue_vector(ex);
        CHECK(xi == std::vector<double>{1.0, 0.0, 0.0});
    }
    SUBCASE("two cues and round trip") {
        ex.token_ids = {Vocab::kCls, 5, 5, Vocab::kMask};
        ex.mask_position = 3;
        ex.cue_positions = {1, 2};
        const auto xi = cue_vector(ex);
        CHECK(xi == std::vector<double>{0.0, 1.0, 1.0, 0.0});
        std::vector<int> back;
        for (std::size_t i = 0; i < xi.size(); ++i)
            if (xi[i] == 1.0) back.push_back(static_cast<int>(i));
        CHECK(back == ex.cue_positions);
    }
}

TEST_CASE("generator emits valid, balanced, deterministic data") {
    GeneratorConfig cfg;
    cfg.count = 2000;
    cfg.attractor_rate = 0.25;
    cfg.seed = 9;
    const WordBank bank = default_word_bank();
    const Vocab vocab = build_vocab(bank);
    const Dataset ds = generate_synthetic(cfg, bank);
    REQUIRE(ds.examples.size() == 2000);

    int singular = 0, plural = 0;
    for (const auto& ex : ds.examples) {
        ex.validate(); // throws on violation
        (ex.number_label == NumberLabel::Singular ? singular : plural) += 1;
        CHECK(ex.token_ids.front() == Vocab::kCls);
        CHECK(ex.token_ids.back() == Vocab::kSep);
        CHECK(static_cast<int>(ex.token_ids.size()) >= cfg.min_length);
        CHECK(static_cast<int>(ex.token_ids.size()) <= cfg.max_length);
    }
    CHECK(std::abs(singular - plural) <= 1);

    // The label is a deterministic function of the cue token alone.
    const std::set<int> sg = number_noun_ids(bank, vocab, false);
    const std::set<int> pl = number_noun_ids(bank, vocab, true);
    for (const auto& ex : ds.examples) {
        const int cue_id = ex.token_ids[static_cast<std::size_t>(ex.cue_positions[0])];
        if (ex.number_label == NumberLabel::Singular)
            CHECK(sg.count(cue_id) == 1);
        else
            CHECK(pl.count(cue_id) == 1);
    }
}

TEST_CASE("generator determinism is byte level") {
    GeneratorConfig cfg;
    cfg.count = 100;
    cfg.attractor_rate = 0.5;
    cfg.seed = 4242;
    const auto p1 = temp_file("gen1.jsonl"), p2 = temp_file("gen2.jsonl");
    save_dataset(generate_synthetic(cfg), p1.string());
    save_dataset(generate_synthetic(cfg), p2.string());
    CHECK(read_file(p1) == read_file(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("attractor rate zero means no opposite-number noun") {
    GeneratorConfig cfg;
    cfg.count = 400;
    cfg.attractor_rate = 0.0;
    cfg.min_length = 5;
    cfg.max_length = 5;
    cfg.seed = 3;
    const WordBank bank = default_word_bank();
    const Vocab vocab = build_vocab(bank);
    const std::set<int> sg = number_noun_ids(bank, vocab, false);
    const std::set<int> pl = number_noun_ids(bank, vocab, true);
    for (const auto& ex : generate_synthetic(cfg, bank).examples) {
        const std::set<int>& opposite = ex.number_label == NumberLabel::Singular ? pl : sg;
        for (int id : ex.token_ids) CHECK(opposite.count(id) == 0);
    }
}

TEST_CASE("attractors appear between cue and mask when requested") {
    GeneratorConfig cfg;
    cfg.count = 200;
    cfg.attractor_rate = 1.0;
    cfg.seed = 8;
    const WordBank bank = default_word_bank();
    const Vocab vocab = build_vocab(bank);
    const std::set<int> sg = number_noun_ids(bank, vocab, false);
    const std::set<int> pl = number_noun_ids(bank, vocab, true);
    for (const auto& ex : generate_synthetic(cfg, bank).examples) {
        const std::set<int>& opposite = ex.number_label == NumberLabel::Singular ? pl : sg;
        bool found = false;
        for (int i = ex.cue_positions[0] + 1; i < ex.mask_position; ++i)
            if (opposite.count(ex.token_ids[static_cast<std::size_t>(i)]) == 1) found = true;
        CHECK(found);
        CHECK(ex.phenomenon == "sva_attractor");
    }
}

TEST_CASE("infeasible generator configs are rejected") {
    GeneratorConfig cfg;
    cfg.min_length = 3;
    cfg.max_length = 3;
    CHECK_THROWS_AS(generate_synthetic(cfg), ArgumentError);
    cfg.min_length = 8;
    cfg.max_length = 6;
    CHECK_THROWS_AS(generate_synthetic(cfg), ArgumentError);
}

TEST_CASE("dataset round trip") {
    GeneratorConfig cfg;
    cfg.count = 50;
    cfg.seed = 12;
    cfg.split = Split::Test;
    const Dataset ds = generate_synthetic(cfg);
    const auto path = temp_file("ds.jsonl");
    save_dataset(ds, path.string());
    const Dataset back = load_dataset(path.string());
    CHECK(back.split == Split::Test);
    REQUIRE(back.examples.size() == ds.examples.size());
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        CHECK(back.examples[i].token_ids == ds.examples[i].token_ids);
        CHECK(back.examples[i].mask_position == ds.examples[i].mask_position);
        CHECK(back.examples[i].cue_positions == ds.examples[i].cue_positions);
        CHECK(back.examples[i].target_id == ds.examples[i].target_id);
        CHECK(back.examples[i].foil_id == ds.examples[i].foil_id);
        CHECK(back.examples[i].number_label == ds.examples[i].number_label);
    }
    std::filesystem::remove(path);
}

TEST_CASE("loading rejects invariant violations with line and field") {
    const auto path = temp_file("bad.jsonl");
    std::ofstream out(path.string());
    out << R"({"token_ids":[3,5,2,4],"mask_position":2,"cue_positions":[1],"target_id":6,"foil_id":7,"number_label":"singular","phenomenon":"t"})"
        << '\n';
    // mask inside cue_positions
    out << R"({"token_ids":[3,5,2,4],"mask_position":2,"cue_positions":[2],"target_id":6,"foil_id":7,"number_label":"plural","phenomenon":"t"})"
        << '\n';
    out.close();
    CHECK_THROWS_WITH_AS(load_dataset(path.string()), doctest::Contains(":2:"), IoError);
    CHECK_THROWS_WITH_AS(load_dataset(path.string()), doctest::Contains("cue_positions"),
                         IoError);
    std::filesystem::remove(path);
}

TEST_CASE("hand-written fixture parses to known values") {
    const auto path = temp_file("fixture.jsonl");
    std::ofstream out(path.string());
    out << R"({"token_ids":[3,7,2,4],"mask_position":2,"cue_positions":[1],"target_id":9,"foil_id":10,"number_label":"singular","phenomenon":"sva"})"
        << '\n';
    out << R"({"token_ids":[3,8,6,2,4],"mask_position":3,"cue_positions":[1],"target_id":10,"foil_id":9,"number_label":"plural","phenomenon":"sva"})"
        << '\n';
    out << R"({"token_ids":[3,7,2,6,4],"mask_position":2,"cue_positions":[1],"target_id":9,"foil_id":10,"number_label":"singular","phenomenon":"sva_attractor"})"
        << '\n';
    out.close();
    const Dataset ds = load_dataset(path.string());
    REQUIRE(ds.examples.size() == 3);
    CHECK(ds.split == Split::Test); // default when no metadata line
    CHECK(ds.examples[0].token_ids == std::vector<int>{3, 7, 2, 4});
    CHECK(ds.examples[1].mask_position == 3);
    CHECK(ds.examples[1].number_label == NumberLabel::Plural);
    CHECK(ds.examples[2].phenomenon == "sva_attractor");
    std::filesystem::remove(path);
}

TEST_CASE("vocab round trip and reserved ids") {
    const Vocab v = build_vocab(default_word_bank());
    CHECK(v.tokens[Vocab::kPad] == "[PAD]");
    CHECK(v.tokens[Vocab::kUnk] == "[UNK]");
    CHECK(v.tokens[Vocab::kMask] == "[MASK]");
    CHECK(v.tokens[Vocab::kCls] == "[CLS]");
    CHECK(v.tokens[Vocab::kSep] == "[SEP]");
    CHECK(v.id("nonexistent-token") == Vocab::kUnk);
    const auto path = temp_file("vocab.json");
    save_vocab(v, path.string());
    const Vocab r = load_vocab(path.string());
    CHECK(r.tokens == v.tokens);
    std::filesystem::remove(path);
}

} // TEST_SUITE
