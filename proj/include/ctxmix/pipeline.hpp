#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxmix/data.hpp"
#include "ctxmix/evaluation.hpp"
#include "ctxmix/exporters.hpp"
#include "ctxmix/model.hpp"
#include "ctxmix/parallel.hpp"
#include "ctxmix/scorers.hpp"

namespace ctxmix {

// Methods the score/eval pipelines know. Map methods produce per-layer n x n
// maps plus a rollout aggregate; gradient methods produce per-depth vectors
// whose depth-0 vector doubles as the aggregate; rand is a single vector.
inline const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> methods = {
        "rand",          "attn",         "attn_norm",    "attn_norm_res",
        "attn_norm_res_ln", "value_zeroing", "grad_x_input", "integrated_gradients"};
    return methods;
}

inline bool is_map_method(const std::string& m) {
    return m == "attn" || m == "attn_norm" || m == "attn_norm_res" ||
           m == "attn_norm_res_ln" || m == "value_zeroing";
}

inline bool is_gradient_method(const std::string& m) {
    return m == "grad_x_input" || m == "integrated_gradients";
}

// Rollout identity mixing defaults: maps that do not already carry the
// residual stream (raw and norm-based attention) get the 0.5 C + 0.5 I
// mixing; maps that include residual effects (value zeroing, +RES variants)
// roll out as plain products.
inline bool default_add_identity(const std::string& method) {
    return method == "attn" || method == "attn_norm";
}

struct ScoreOptions {
    std::vector<std::string> methods = known_methods();
    DistanceKind distance{};                 // value_zeroing metric
    std::optional<bool> add_identity;        // overrides default_add_identity for all methods
    bool exclude_special_tokens = false;
    int ig_steps = 64;
    Baseline ig_baseline{};
    GradTarget grad_target = GradTarget::Logit;
    std::uint64_t seed = 0;

    void validate() const {
        if (methods.empty()) throw ArgumentError("score: no methods selected");
        for (const auto& m : methods) {
            bool known = false;
            for (const auto& k : known_methods()) known = known || k == m;
            if (!known) {
                std::string valid;
                for (const auto& k : known_methods()) valid += (valid.empty() ? "" : ", ") + k;
                throw ArgumentError("unknown method '" + m + "' (valid: " + valid + ")");
            }
        }
    }
};

struct MethodScores {
    std::string method;
    std::vector<MixingMap> layer_maps;      // map methods only
    std::optional<MixingMap> aggregated_map; // final rollout product
    std::vector<ScoreVector> layer_scores;  // mask-row or per-depth vectors
    ScoreVector aggregated;                 // rollout mask row / depth-0 / rand
};

struct ExampleScores {
    std::size_t example_index = 0;
    std::vector<MethodScores> methods;

    const MethodScores& method(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return m;
        throw ArgumentError("no scores for method '" + name + "'");
    }
};

inline std::vector<int> special_positions(const AgreementExample& ex) {
    std::vector<int> out;
    for (std::size_t i = 0; i < ex.token_ids.size(); ++i)
        if (Vocab::is_special(ex.token_ids[i])) out.push_back(static_cast<int>(i));
    return out;
}

// All requested scores for one example. example_seed feeds only the rand
// method; everything else is deterministic in the weights and input.
inline ExampleScores score_example(const ModelWeights& w, const AgreementExample& ex,
                                   const ScoreOptions& opt, std::uint64_t example_seed) {
    opt.validate();
    ex.validate();
    const ForwardTrace trace = forward(w, ex.token_ids);
    const int n = static_cast<int>(ex.token_ids.size());
    const std::vector<int> excluded =
        opt.exclude_special_tokens ? special_positions(ex) : std::vector<int>{};

    ExampleScores result;
    for (const std::string& name : opt.methods) {
        MethodScores ms;
        ms.method = name;
        if (name == "rand") {
            ms.aggregated = random_scores(n, example_seed);
            normalize_scores(ms.aggregated.scores, excluded);
            ms.aggregated.mask_position = ex.mask_position;
        } else if (is_map_method(name)) {
            if (name == "attn")
                ms.layer_maps = attn_raw(trace);
            else if (name == "attn_norm")
                ms.layer_maps = attn_norm(trace, w);
            else if (name == "attn_norm_res")
                ms.layer_maps = attn_norm_res_ln(trace, w, false);
            else if (name == "attn_norm_res_ln")
                ms.layer_maps = attn_norm_res_ln(trace, w, true);
            else
                ms.layer_maps = value_zeroing(w, trace, opt.distance);
            for (const auto& map : ms.layer_maps)
                ms.layer_scores.push_back(mask_row(map, ex.mask_position, excluded));
            const bool add_id = opt.add_identity.value_or(default_add_identity(name));
            auto rolled = attn_rollout(ms.layer_maps, add_id);
            ms.aggregated_map = rolled.back();
            ms.aggregated = mask_row(*ms.aggregated_map, ex.mask_position, excluded);
            ms.aggregated.layer = ScoreVector::kAggregated;
        } else { // gradient family: depths 0..L, depth 0 is the aggregate
            for (int depth = 0; depth <= w.config.num_layers; ++depth) {
                ScoreVector sv =
                    name == "grad_x_input"
                        ? grad_x_input(w, trace, depth, ex.target_id, ex.mask_position,
                                       opt.grad_target)
                        : integrated_gradients(w, trace, depth, ex.target_id,
                                               ex.mask_position, opt.ig_steps, opt.ig_baseline,
                                               opt.grad_target);
                normalize_scores(sv.scores, excluded);
                ms.layer_scores.push_back(std::move(sv));
            }
            ms.aggregated = ms.layer_scores.front();
            ms.aggregated.layer = ScoreVector::kAggregated;
        }
        result.methods.push_back(std::move(ms));
    }
    return result;
}

// ---------------------------------------------------------------------------
// JSON document for one example (the scores.jsonl line format).

inline nlohmann::json score_vector_to_json(const ScoreVector& sv) {
    return nlohmann::json(sv.scores);
}

inline nlohmann::json map_to_json(const MixingMap& map) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < map.scores.dim(0); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < map.scores.dim(1); ++j) row.push_back(map.scores(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline nlohmann::json example_scores_to_json(const ExampleScores& scores,
                                             const AgreementExample& ex, const Vocab* vocab,
                                             std::uint64_t seed, bool include_maps) {
    nlohmann::json doc;
    doc["example"] = scores.example_index;
    doc["seed"] = seed;
    doc["mask_position"] = ex.mask_position;
    doc["cue_positions"] = ex.cue_positions;
    doc["target_id"] = ex.target_id;
    doc["foil_id"] = ex.foil_id;
    doc["label"] = to_string(ex.number_label);
    doc["token_ids"] = ex.token_ids;
    if (vocab != nullptr) {
        nlohmann::json toks = nlohmann::json::array();
        for (int id : ex.token_ids) toks.push_back(vocab->token(id));
        doc["tokens"] = std::move(toks);
    }
    nlohmann::json methods;
    for (const auto& ms : scores.methods) {
        nlohmann::json entry;
        if (!ms.layer_scores.empty()) {
            nlohmann::json layers;
            for (const auto& sv : ms.layer_scores) {
                nlohmann::json cell;
                cell["mask_row"] = score_vector_to_json(sv);
                layers[std::to_string(sv.layer)] = std::move(cell);
            }
            if (include_maps)
                for (const auto& map : ms.layer_maps)
                    layers[std::to_string(map.layer)]["map"] = map_to_json(map);
            entry["layers"] = std::move(layers);
        }
        if (!ms.aggregated.scores.empty()) {
            nlohmann::json agg;
            agg["mask_row"] = score_vector_to_json(ms.aggregated);
            if (include_maps && ms.aggregated_map) agg["map"] = map_to_json(*ms.aggregated_map);
            entry["aggregated"] = std::move(agg);
        }
        methods[ms.method] = std::move(entry);
    }
    doc["methods"] = std::move(methods);
    return doc;
}

// Parse one scores.jsonl line back into per-method vectors (used by eval).
struct LoadedScores {
    std::size_t example_index = 0;
    int mask_position = 0;
    // method -> (layer -> mask row); layer kAggregated for the aggregate
    std::map<std::string, std::map<int, std::vector<double>>> rows;
};

inline LoadedScores parse_scores_line(const std::string& line, const std::string& context) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(context + ": invalid JSON: " + e.what());
    }
    LoadedScores out;
    try {
        out.example_index = doc.at("example").get<std::size_t>();
        out.mask_position = doc.at("mask_position").get<int>();
        for (const auto& [method, entry] : doc.at("methods").items()) {
            if (entry.contains("layers"))
                for (const auto& [layer, cell] : entry["layers"].items())
                    out.rows[method][std::stoi(layer)] =
                        cell.at("mask_row").get<std::vector<double>>();
            if (entry.contains("aggregated"))
                out.rows[method][ScoreVector::kAggregated] =
                    entry.at("aggregated").at("mask_row").get<std::vector<double>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(context + ": " + e.what());
    }
    return out;
}

} // namespace ctxmix
