#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ctxmix/errors.hpp"
#include "ctxmix/rng.hpp"

namespace ctxmix {

// Token table. The five reserved ids are fixed constants so that files and
// models stay interchangeable across vocabularies.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kMask = 2;
    static constexpr int kCls = 3;
    static constexpr int kSep = 4;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;

    int size() const { return static_cast<int>(tokens.size()); }

    int id(const std::string& tok) const {
        auto it = index.find(tok);
        return it == index.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size())
            throw ArgumentError("vocab: id " + std::to_string(id) + " out of range");
        return tokens[static_cast<std::size_t>(id)];
    }

    int add(const std::string& tok) {
        auto it = index.find(tok);
        if (it != index.end()) return it->second;
        tokens.push_back(tok);
        index.emplace(tok, size() - 1);
        return size() - 1;
    }

    static Vocab with_reserved() {
        Vocab v;
        v.add("[PAD]");
        v.add("[UNK]");
        v.add("[MASK]");
        v.add("[CLS]");
        v.add("[SEP]");
        return v;
    }

    static bool is_special(int id) { return id == kPad || id == kCls || id == kSep; }
};

enum class NumberLabel { Singular, Plural };

inline const char* to_string(NumberLabel l) {
    return l == NumberLabel::Singular ? "singular" : "plural";
}

struct AgreementExample {
    std::vector<int> token_ids;
    int mask_position = -1;
    std::vector<int> cue_positions; // sorted, non-empty
    int target_id = -1;
    int foil_id = -1;
    NumberLabel number_label = NumberLabel::Singular;
    std::string phenomenon;

    std::size_t length() const { return token_ids.size(); }

    // Throws ArgumentError naming the offending field.
    void validate() const {
        const int n = static_cast<int>(token_ids.size());
        if (n < 1) throw ArgumentError("token_ids: empty sequence");
        if (mask_position < 0 || mask_position >= n)
            throw ArgumentError("mask_position: " + std::to_string(mask_position) +
                                " outside sequence of length " + std::to_string(n));
        if (token_ids[static_cast<std::size_t>(mask_position)] != Vocab::kMask)
            throw ArgumentError("token_ids: mask_position does not hold the [MASK] id");
        if (cue_positions.empty()) throw ArgumentError("cue_positions: empty");
        for (int c : cue_positions) {
            if (c < 0 || c >= n)
                throw ArgumentError("cue_positions: index " + std::to_string(c) +
                                    " outside sequence of length " + std::to_string(n));
            if (c == mask_position)
                throw ArgumentError("cue_positions: contains the mask position");
        }
        if (target_id < 0) throw ArgumentError("target_id: negative");
        if (foil_id < 0) throw ArgumentError("foil_id: negative");
        if (target_id == foil_id) throw ArgumentError("foil_id: equals target_id");
        for (int id : token_ids)
            if (id < 0) throw ArgumentError("token_ids: negative id");
    }
};

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct Dataset {
    std::vector<AgreementExample> examples;
    Split split = Split::Test;

    std::size_t size() const { return examples.size(); }
};

// Binary cue indicator over token positions.
inline std::vector<double> cue_vector(const AgreementExample& ex) {
    std::vector<double> xi(ex.token_ids.size(), 0.0);
    for (int c : ex.cue_positions) xi[static_cast<std::size_t>(c)] = 1.0;
    return xi;
}

// Word material for the synthetic agreement task. Pairs are (singular, plural)
// forms; fillers carry no number information.
struct WordBank {
    std::vector<std::pair<std::string, std::string>> noun_pairs;
    std::vector<std::pair<std::string, std::string>> verb_pairs;
    std::vector<std::string> fillers;
};

inline WordBank default_word_bank() {
    WordBank b;
    b.noun_pairs = {{"dog", "dogs"},       {"cat", "cats"},       {"pilot", "pilots"},
                    {"teacher", "teachers"}, {"bird", "birds"},   {"doctor", "doctors"},
                    {"child", "children"}, {"car", "cars"},       {"house", "houses"},
                    {"picture", "pictures"}, {"friend", "friends"}, {"story", "stories"}};
    b.verb_pairs = {{"walks", "walk"}, {"sleeps", "sleep"}, {"sings", "sing"},
                    {"runs", "run"},   {"smiles", "smile"}, {"waits", "wait"},
                    {"falls", "fall"}, {"plays", "play"}};
    b.fillers = {"the",   "a",      "often",  "really", "quietly", "there", "near",
                 "old",   "young",  "small",  "red",    "happily", "today", "again",
                 "maybe", "slowly", "gently", "still",  "almost",  "once"};
    return b;
}

inline Vocab build_vocab(const WordBank& bank) {
    Vocab v = Vocab::with_reserved();
    for (const auto& [sg, pl] : bank.noun_pairs) {
        v.add(sg);
        v.add(pl);
    }
    for (const auto& [sg, pl] : bank.verb_pairs) {
        v.add(sg);
        v.add(pl);
    }
    for (const auto& f : bank.fillers) v.add(f);
    return v;
}

struct GeneratorConfig {
    int count = 2000;
    double attractor_rate = 0.0; // chance of an opposite-number noun between cue and mask
    int min_length = 8;          // total tokens including [CLS]/[SEP]
    int max_length = 12;
    std::uint64_t seed = 0;
    Split split = Split::Train;
};

// Emits [CLS] filler* SUBJ (filler | attractor)* [MASK] filler* [SEP].
// The label is the subject's number, the cue is the subject position, and
// target/foil are the agreeing/disagreeing forms of one verb. Labels
// alternate so counts stay balanced within one.
inline Dataset generate_synthetic(const GeneratorConfig& cfg,
                                  const WordBank& bank = default_word_bank()) {
    if (cfg.count < 1) throw ArgumentError("generator: count must be >= 1");
    if (cfg.min_length < 4 || cfg.max_length < cfg.min_length)
        throw ArgumentError("generator: length range infeasible (needs at least "
                            "[CLS] SUBJ [MASK] [SEP], i.e. 4 tokens)");
    if (cfg.attractor_rate < 0.0 || cfg.attractor_rate > 1.0)
        throw ArgumentError("generator: attractor_rate outside [0, 1]");
    if (cfg.attractor_rate > 0.0 && cfg.max_length < 5)
        throw ArgumentError("generator: attractors need max_length >= 5");
    if (bank.noun_pairs.empty() || bank.verb_pairs.empty() || bank.fillers.empty())
        throw ArgumentError("generator: word bank must provide nouns, verbs and fillers");

    const Vocab vocab = build_vocab(bank);
    Rng rng(cfg.seed);
    Dataset ds;
    ds.split = cfg.split;
    ds.examples.reserve(static_cast<std::size_t>(cfg.count));

    for (int idx = 0; idx < cfg.count; ++idx) {
        const NumberLabel label = idx % 2 == 0 ? NumberLabel::Singular : NumberLabel::Plural;
        const bool attractor = rng.uniform01() < cfg.attractor_rate;

        const int lo = attractor ? std::max(cfg.min_length, 5) : cfg.min_length;
        const int total =
            lo + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.max_length - lo + 1)));
        int interior = total - 2;   // between [CLS] and [SEP]
        int fillers = interior - 2; // besides SUBJ and [MASK]

        // Split the filler budget into before/between/after segments.
        int k_between = attractor ? 1 : 0;
        fillers -= k_between;
        int k_before = fillers > 0 ? static_cast<int>(rng.next_below(
                                         static_cast<std::uint64_t>(fillers + 1)))
                                   : 0;
        fillers -= k_before;
        int extra_between =
            fillers > 0
                ? static_cast<int>(rng.next_below(static_cast<std::uint64_t>(fillers + 1)))
                : 0;
        k_between += extra_between;
        const int k_after = fillers - extra_between;

        const auto pick_filler = [&] {
            return vocab.id(bank.fillers[rng.next_below(bank.fillers.size())]);
        };
        const auto& noun = bank.noun_pairs[rng.next_below(bank.noun_pairs.size())];
        const auto& verb = bank.verb_pairs[rng.next_below(bank.verb_pairs.size())];

        AgreementExample ex;
        ex.token_ids.push_back(Vocab::kCls);
        for (int i = 0; i < k_before; ++i) ex.token_ids.push_back(pick_filler());
        const int cue = static_cast<int>(ex.token_ids.size());
        ex.token_ids.push_back(
            vocab.id(label == NumberLabel::Singular ? noun.first : noun.second));

        std::vector<int> between(static_cast<std::size_t>(k_between));
        for (auto& t : between) t = pick_filler();
        if (attractor) {
            const auto& other = bank.noun_pairs[rng.next_below(bank.noun_pairs.size())];
            const std::size_t slot = between.empty() ? 0 : rng.next_below(between.size());
            between[slot] =
                vocab.id(label == NumberLabel::Singular ? other.second : other.first);
        }
        for (int t : between) ex.token_ids.push_back(t);

        ex.mask_position = static_cast<int>(ex.token_ids.size());
        ex.token_ids.push_back(Vocab::kMask);
        for (int i = 0; i < k_after; ++i) ex.token_ids.push_back(pick_filler());
        ex.token_ids.push_back(Vocab::kSep);

        ex.cue_positions = {cue};
        ex.number_label = label;
        ex.target_id = vocab.id(label == NumberLabel::Singular ? verb.first : verb.second);
        ex.foil_id = vocab.id(label == NumberLabel::Singular ? verb.second : verb.first);
        ex.phenomenon = attractor ? "sva_attractor" : "sva";
        ex.validate();
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

// JSONL dataset file: an optional metadata first line {"format": ..., "split": ...}
// followed by one example object per line. Loading validates every record and
// reports the line number and field of the first violation.
inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    nlohmann::json meta;
    meta["format"] = "ctxmix-dataset";
    meta["split"] = to_string(ds.split);
    meta["count"] = ds.examples.size();
    out << meta.dump() << '\n';
    for (const auto& ex : ds.examples) {
        nlohmann::json j;
        j["token_ids"] = ex.token_ids;
        j["mask_position"] = ex.mask_position;
        j["cue_positions"] = ex.cue_positions;
        j["target_id"] = ex.target_id;
        j["foil_id"] = ex.foil_id;
        j["number_label"] = to_string(ex.number_label);
        j["phenomenon"] = ex.phenomenon;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    Dataset ds;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
        }
        if (line_no == 1 && j.contains("format")) {
            if (j.value("format", "") != "ctxmix-dataset")
                throw IoError(path + ":1: field format: unknown dataset format");
            const std::string s = j.value("split", "test");
            if (s != "train" && s != "test")
                throw IoError(path + ":1: field split: must be 'train' or 'test'");
            ds.split = s == "train" ? Split::Train : Split::Test;
            continue;
        }
        AgreementExample ex;
        try {
            ex.token_ids = j.at("token_ids").get<std::vector<int>>();
            ex.mask_position = j.at("mask_position").get<int>();
            ex.cue_positions = j.at("cue_positions").get<std::vector<int>>();
            ex.target_id = j.at("target_id").get<int>();
            ex.foil_id = j.at("foil_id").get<int>();
            const std::string lbl = j.at("number_label").get<std::string>();
            if (lbl != "singular" && lbl != "plural")
                throw IoError(path + ":" + std::to_string(line_no) +
                              ": field number_label: must be 'singular' or 'plural'");
            ex.number_label = lbl == "singular" ? NumberLabel::Singular : NumberLabel::Plural;
            ex.phenomenon = j.value("phenomenon", "");
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        std::sort(ex.cue_positions.begin(), ex.cue_positions.end());
        try {
            ex.validate();
        } catch (const ArgumentError& e) {
            throw IoError(path + ":" + std::to_string(line_no) + ": field " + e.what());
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

inline void save_vocab(const Vocab& v, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    nlohmann::json j;
    j["format"] = "ctxmix-vocab";
    j["tokens"] = v.tokens;
    out << j.dump() << '\n';
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed vocab file '" + path + "': " + e.what());
    }
    if (j.value("format", "") != "ctxmix-vocab")
        throw IoError("malformed vocab file '" + path + "': missing format tag");
    Vocab v;
    for (const auto& t : j.at("tokens")) v.add(t.get<std::string>());
    if (v.size() < 5 || v.tokens[0] != "[PAD]" || v.tokens[2] != "[MASK]")
        throw IoError("malformed vocab file '" + path + "': reserved ids disturbed");
    return v;
}

} // namespace ctxmix
