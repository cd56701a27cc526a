// ctxmix command line: generate agreement data, train toy encoders, compute
// context mixing scores, and run the evaluation protocols. Every subcommand
// is deterministic given its --seed; artifacts carry the seed in their
// headers and timestamps go only to the run.log sidecar.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxmix/data.hpp"
#include "ctxmix/evaluation.hpp"
#include "ctxmix/exporters.hpp"
#include "ctxmix/model.hpp"
#include "ctxmix/pipeline.hpp"
#include "ctxmix/serialize.hpp"
#include "ctxmix/training.hpp"

namespace fs = std::filesystem;
using namespace ctxmix;

namespace {

std::string default_out_dir() {
    const char* env = std::getenv("CTXMIX_OUT_DIR");
    return env != nullptr && *env != '\0' ? env : ".";
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

// Timestamps are confined to this sidecar so artifacts stay byte-comparable.
void append_run_log(const std::string& dir, int argc, char** argv) {
    std::ofstream log(fs::path(dir) / "run.log", std::ios::app);
    const std::time_t now = std::time(nullptr);
    char stamp[64];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
    log << stamp << 'Z';
    for (int i = 0; i < argc; ++i) log << ' ' << argv[i];
    log << '\n';
}

// key = value lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IoError(path + ":" + std::to_string(line_no) + ": expected key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

DistanceKind parse_distance(const std::string& name, bool normalize) {
    DistanceKind kind;
    kind.normalize_representations = normalize;
    if (name == "cosine")
        kind.metric = DistanceMetric::Cosine;
    else if (name == "euclidean")
        kind.metric = DistanceMetric::Euclidean;
    else if (name == "spearman")
        kind.metric = DistanceMetric::SpearmanDistance;
    else
        throw ArgumentError("unknown distance '" + name + "' (valid: cosine, euclidean, spearman)");
    return kind;
}

struct GenDataArgs {
    std::string out_dir = default_out_dir();
    std::string config_file;
    int count = 2000;
    double attractor_rate = 0.3;
    int min_length = 8;
    int max_length = 12;
    std::uint64_t seed = 7;
};

int cmd_gen_data(const GenDataArgs& args) {
    ensure_dir(args.out_dir);
    const WordBank bank = default_word_bank();
    const Vocab vocab = build_vocab(bank);
    save_vocab(vocab, (fs::path(args.out_dir) / "vocab.json").string());

    for (const Split split : {Split::Train, Split::Test}) {
        GeneratorConfig gen;
        gen.count = args.count;
        gen.attractor_rate = args.attractor_rate;
        gen.min_length = args.min_length;
        gen.max_length = args.max_length;
        gen.split = split;
        gen.seed = Rng::derive(args.seed, split == Split::Train ? 0 : 1);
        const Dataset ds = generate_synthetic(gen, bank);
        const std::string path =
            (fs::path(args.out_dir) / (std::string(to_string(split)) + ".jsonl")).string();
        save_dataset(ds, path);

        int singular = 0, attractors = 0;
        for (const auto& ex : ds.examples) {
            if (ex.number_label == NumberLabel::Singular) ++singular;
            if (ex.phenomenon == "sva_attractor") ++attractors;
        }
        std::cout << to_string(split) << ": " << ds.examples.size() << " examples, "
                  << singular << " singular / " << ds.examples.size() - singular
                  << " plural, " << attractors << " with attractor -> " << path << "\n";
    }
    std::cout << "vocab: " << vocab.size() << " tokens -> "
              << (fs::path(args.out_dir) / "vocab.json").string() << "\n";
    return 0;
}

struct InitModelArgs {
    std::string vocab_path;
    int vocab_size = 0;
    int layers = 3;
    int heads = 4;
    int dim = 64;
    int ffn_dim = 128;
    int max_positions = 16;
    double ln_eps = 1e-5;
    bool untied = false;
    bool text_mode = false;
    std::uint64_t seed = 7;
    std::string out;
};

int cmd_init_model(const InitModelArgs& args) {
    EncoderConfig cfg;
    cfg.num_layers = args.layers;
    cfg.num_heads = args.heads;
    cfg.model_dim = args.dim;
    cfg.ffn_dim = args.ffn_dim;
    cfg.max_positions = args.max_positions;
    cfg.ln_eps = args.ln_eps;
    cfg.tied_mlm_head = !args.untied;
    if (!args.vocab_path.empty())
        cfg.vocab_size = load_vocab(args.vocab_path).size();
    else if (args.vocab_size > 0)
        cfg.vocab_size = args.vocab_size;
    else
        throw ArgumentError("init-model: provide --vocab or --vocab-size");
    const ModelWeights w = init_model(cfg, args.seed);
    save_weights(w, args.out, args.text_mode ? WeightFileMode::Text : WeightFileMode::Binary);
    std::cout << "initialized L=" << cfg.num_layers << " H=" << cfg.num_heads
              << " d=" << cfg.model_dim << " ffn=" << cfg.ffn_dim << " V=" << cfg.vocab_size
              << " -> " << args.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string weights_in;
    std::string data_path;
    std::string eval_path;
    std::string mode = "finetune";
    TrainConfig config;
    std::string out;
    std::string report_path;
};

int cmd_train(const TrainArgs& args) {
    ModelWeights w = load_weights(args.weights_in);
    const Dataset train_set = load_dataset(args.data_path);
    if (train_set.split != Split::Train)
        throw ArgumentError("train: '" + args.data_path + "' is not a train split");
    Dataset eval_set;
    const Dataset* eval_ptr = nullptr;
    if (!args.eval_path.empty()) {
        eval_set = load_dataset(args.eval_path);
        eval_ptr = &eval_set;
    }
    TrainConfig cfg = args.config;
    if (args.mode == "finetune")
        cfg.mode = TrainMode::AgreementFineTune;
    else if (args.mode == "mlm")
        cfg.mode = TrainMode::MaskedLM;
    else
        throw ArgumentError("train: unknown mode '" + args.mode + "' (valid: finetune, mlm)");

    auto [trained, report] = train(std::move(w), train_set, cfg, eval_ptr);
    save_weights(trained, args.out);
    if (!args.report_path.empty()) {
        std::ofstream out(args.report_path, std::ios::binary);
        if (!out) throw IoError("cannot open '" + args.report_path + "' for writing");
        out << "# seed=" << cfg.seed << "\nstep,loss\n";
        for (const auto& [step, loss] : report.loss_curve)
            out << step << ',' << fmt_double(loss) << '\n';
    }
    std::cout << "steps=" << report.steps_executed << " accuracy="
              << fmt_double(report.final_accuracy) << " -> " << args.out << "\n";
    return 0;
}

struct ScoreArgs {
    std::string weights_path;
    std::string data_path;
    std::string vocab_path;
    std::string out_dir = default_out_dir();
    std::vector<std::string> methods;
    std::string layer_selector = "all"; // all | aggregated | <index>
    std::string distance = "cosine";
    bool normalize_reps = false;
    int add_identity = -1; // -1 per-method default, 0 off, 1 on
    bool exclude_special = false;
    int ig_steps = 64;
    std::string ig_baseline = "zero";
    int ig_placeholder = Vocab::kUnk;
    std::string grad_target = "logit";
    std::uint64_t seed = 7;
    int jobs = 1;
    std::size_t limit = 0; // 0 = all
    bool csv = false;
};

int cmd_score(const ScoreArgs& args) {
    const ModelWeights w = load_weights(args.weights_path);
    Dataset ds = load_dataset(args.data_path);
    if (args.limit > 0 && ds.examples.size() > args.limit) ds.examples.resize(args.limit);
    Vocab vocab;
    const bool have_vocab = !args.vocab_path.empty();
    if (have_vocab) vocab = load_vocab(args.vocab_path);

    ScoreOptions opt;
    if (!args.methods.empty()) opt.methods = args.methods;
    opt.distance = parse_distance(args.distance, args.normalize_reps);
    if (args.add_identity >= 0) opt.add_identity = args.add_identity != 0;
    opt.exclude_special_tokens = args.exclude_special;
    opt.ig_steps = args.ig_steps;
    if (args.ig_baseline == "placeholder")
        opt.ig_baseline = Baseline{BaselineKind::PlaceholderToken, args.ig_placeholder};
    else if (args.ig_baseline != "zero")
        throw ArgumentError("score: unknown baseline '" + args.ig_baseline +
                            "' (valid: zero, placeholder)");
    opt.grad_target = args.grad_target == "logprob" ? GradTarget::LogProb : GradTarget::Logit;
    opt.seed = args.seed;
    opt.validate();

    int layer_filter = -2; // -2 = all, kAggregated = aggregated only, else single layer
    if (args.layer_selector == "all")
        layer_filter = -2;
    else if (args.layer_selector == "aggregated")
        layer_filter = ScoreVector::kAggregated;
    else
        layer_filter = std::stoi(args.layer_selector);

    ensure_dir(args.out_dir);
    if (args.csv) ensure_dir((fs::path(args.out_dir) / "csv").string());

    std::vector<ExampleScores> all(ds.examples.size());
    parallel_for(ds.examples.size(), args.jobs, [&](std::size_t e) {
        all[e] = score_example(w, ds.examples[e], opt, Rng::derive(args.seed, 1000 + e));
        all[e].example_index = e;
    });

    const std::string jsonl_path = (fs::path(args.out_dir) / "scores.jsonl").string();
    std::ofstream out(jsonl_path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + jsonl_path + "' for writing");
    for (std::size_t e = 0; e < all.size(); ++e) {
        ExampleScores filtered = all[e];
        if (layer_filter == ScoreVector::kAggregated) {
            for (auto& ms : filtered.methods) {
                ms.layer_maps.clear();
                ms.layer_scores.clear();
            }
        } else if (layer_filter != -2) {
            for (auto& ms : filtered.methods) {
                std::vector<MixingMap> maps;
                for (auto& m : ms.layer_maps)
                    if (m.layer == layer_filter) maps.push_back(std::move(m));
                std::vector<ScoreVector> rows;
                for (auto& s : ms.layer_scores)
                    if (s.layer == layer_filter) rows.push_back(std::move(s));
                ms.layer_maps = std::move(maps);
                ms.layer_scores = std::move(rows);
                ms.aggregated_map.reset();
                ms.aggregated.scores.clear();
            }
        }
        out << example_scores_to_json(filtered, ds.examples[e], have_vocab ? &vocab : nullptr,
                                      args.seed, true)
                   .dump()
            << '\n';

        if (args.csv) {
            std::vector<std::string> tokens;
            for (int id : ds.examples[e].token_ids)
                tokens.push_back(have_vocab ? vocab.token(id) : std::to_string(id));
            for (const auto& ms : filtered.methods) {
                for (const auto& map : ms.layer_maps) {
                    const std::string name = "ex" + std::to_string(e) + "_" + ms.method +
                                             "_L" + std::to_string(map.layer) + ".csv";
                    write_matrix_csv((fs::path(args.out_dir) / "csv" / name).string(),
                                     map.scores, tokens, ms.method, map.layer, args.seed);
                }
                if (ms.aggregated_map) {
                    const std::string name =
                        "ex" + std::to_string(e) + "_" + ms.method + "_aggregated.csv";
                    write_matrix_csv((fs::path(args.out_dir) / "csv" / name).string(),
                                     ms.aggregated_map->scores, tokens, ms.method,
                                     ScoreVector::kAggregated, args.seed);
                }
            }
        }
    }
    if (!out) throw IoError("write failed for '" + jsonl_path + "'");
    std::cout << "scored " << all.size() << " examples, methods=";
    for (std::size_t i = 0; i < opt.methods.size(); ++i)
        std::cout << (i ? "," : "") << opt.methods[i];
    std::cout << " -> " << jsonl_path << "\n";
    return 0;
}

struct EvalArgs {
    std::string mode;
    std::string weights_path;
    std::string data_path;
    std::string scores_path;
    std::string out_dir = default_out_dir();
    std::uint64_t seed = 7;
    int jobs = 1;
};

// Scores may cover a prefix of the dataset (score --limit); the caller
// truncates the dataset to match.
std::vector<LoadedScores> load_scores_file(const std::string& path, std::size_t dataset_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("missing score artifact '" + path + "' (run the score subcommand first)");
    std::vector<LoadedScores> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        out.push_back(parse_scores_line(line, path + ":" + std::to_string(line_no)));
        if (out.back().example_index != out.size() - 1)
            throw IoError(path + ":" + std::to_string(line_no) +
                          ": example indices are not contiguous from 0");
    }
    if (out.empty()) throw IoError("score artifact '" + path + "' is empty");
    if (out.size() > dataset_size)
        throw IoError("score artifact '" + path + "' holds " + std::to_string(out.size()) +
                      " examples but the dataset has only " + std::to_string(dataset_size));
    return out;
}

int cmd_eval_cue_alignment(const EvalArgs& args) {
    Dataset ds = load_dataset(args.data_path);
    const std::vector<LoadedScores> loaded = load_scores_file(args.scores_path, ds.size());
    ds.examples.resize(loaded.size());

    std::vector<std::vector<ScoreVector>> scores(ds.size());
    for (std::size_t e = 0; e < ds.size(); ++e)
        for (const auto& [method, layers] : loaded[e].rows)
            for (const auto& [layer, row] : layers) {
                ScoreVector sv;
                sv.method = method;
                sv.layer = layer;
                sv.mask_position = ds.examples[e].mask_position;
                sv.scores = row;
                scores[e].push_back(std::move(sv));
            }
    const CueAlignmentReport report = cue_alignment_report(ds, scores);

    ensure_dir(args.out_dir);
    std::vector<CsvRow> rows;
    for (const auto& [key, cell] : report.cells) {
        const std::string layer = key.second == ScoreVector::kAggregated
                                      ? "aggregated"
                                      : std::to_string(key.second);
        rows.push_back({key.first, layer, "dot", cell.mean_dot});
        rows.push_back({key.first, layer, "ap", cell.mean_ap});
        rows.push_back({key.first, layer, "probes_needed", cell.mean_probes});
    }
    write_report_csv((fs::path(args.out_dir) / "cue_alignment.csv").string(), rows, args.seed);
    {
        nlohmann::json doc;
        doc["seed"] = args.seed;
        doc["examples"] = ds.size();
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& [key, cell] : report.cells) {
            nlohmann::json j;
            j["method"] = key.first;
            j["layer"] = key.second;
            j["dot"] = cell.mean_dot;
            j["ap"] = cell.mean_ap;
            j["probes_needed"] = cell.mean_probes;
            cells.push_back(std::move(j));
        }
        doc["cells"] = std::move(cells);
        std::ofstream out(fs::path(args.out_dir) / "cue_alignment.json", std::ios::binary);
        out << doc.dump(2) << '\n';
    }

    // Method x layer grids, one SVG per metric.
    std::vector<std::string> methods;
    std::vector<int> layers;
    for (const auto& [key, cell] : report.cells) {
        if (std::find(methods.begin(), methods.end(), key.first) == methods.end())
            methods.push_back(key.first);
        if (std::find(layers.begin(), layers.end(), key.second) == layers.end())
            layers.push_back(key.second);
    }
    std::sort(layers.begin(), layers.end());
    std::vector<std::string> layer_labels;
    for (int l : layers)
        layer_labels.push_back(l == ScoreVector::kAggregated ? "agg" : "L" + std::to_string(l));
    for (const std::string metric : {"dot", "ap", "probes_needed"}) {
        Tensor grid({methods.size(), layers.size()});
        for (std::size_t mi = 0; mi < methods.size(); ++mi)
            for (std::size_t li = 0; li < layers.size(); ++li) {
                const auto it = report.cells.find({methods[mi], layers[li]});
                if (it == report.cells.end()) continue;
                grid(mi, li) = metric == "dot" ? it->second.mean_dot
                               : metric == "ap" ? it->second.mean_ap
                                                : it->second.mean_probes;
            }
        write_svg_heatmap(
            (fs::path(args.out_dir) / ("alignment_" + metric + ".svg")).string(), grid,
            methods, layer_labels, "cue alignment (" + metric + ")", args.seed);
    }
    std::cout << "cue-alignment over " << ds.size() << " examples -> "
              << (fs::path(args.out_dir) / "cue_alignment.csv").string() << "\n";
    return 0;
}

int cmd_eval_probing(const EvalArgs& args) {
    const ModelWeights w = load_weights(args.weights_path);
    const Dataset ds = load_dataset(args.data_path);
    const int depths = w.config.num_layers;

    nlohmann::json detail = nlohmann::json::array();
    std::vector<CsvRow> rows;
    for (int depth = 0; depth <= depths; ++depth) {
        std::vector<std::vector<double>> reps(ds.size());
        std::vector<int> labels(ds.size());
        parallel_for(ds.size(), args.jobs, [&](std::size_t e) {
            const auto& ex = ds.examples[e];
            const ForwardTrace t = forward(w, ex.token_ids);
            const auto row =
                t.representations(depth).row(static_cast<std::size_t>(ex.mask_position));
            reps[e].assign(row.begin(), row.end());
            labels[e] = ex.number_label == NumberLabel::Singular ? 0 : 1;
        });
        const ProbeReport r = mdl_online(reps, labels, 2, {}, {}, args.seed);
        const std::string layer = std::to_string(depth);
        rows.push_back({"probe", layer, "mdl_bits", r.mdl_bits});
        rows.push_back({"probe", layer, "compression", r.compression});
        nlohmann::json j;
        j["layer"] = depth;
        j["n"] = r.n;
        j["k"] = r.k;
        j["mdl_bits"] = r.mdl_bits;
        j["compression"] = r.compression;
        j["boundaries"] = r.boundaries;
        j["chunk_codelengths"] = r.chunk_codelengths;
        detail.push_back(std::move(j));
    }
    ensure_dir(args.out_dir);
    write_report_csv((fs::path(args.out_dir) / "probing.csv").string(), rows, args.seed);
    nlohmann::json doc;
    doc["seed"] = args.seed;
    doc["layers"] = std::move(detail);
    std::ofstream out(fs::path(args.out_dir) / "probing.json", std::ios::binary);
    out << doc.dump(2) << '\n';
    std::cout << "probing over " << ds.size() << " examples, layers 0.." << depths << " -> "
              << (fs::path(args.out_dir) / "probing.csv").string() << "\n";
    return 0;
}

int cmd_eval_faithfulness(const EvalArgs& args) {
    const ModelWeights w = load_weights(args.weights_path);
    Dataset ds = load_dataset(args.data_path);
    const std::vector<LoadedScores> loaded = load_scores_file(args.scores_path, ds.size());
    ds.examples.resize(loaded.size());

    std::vector<std::string> methods;
    for (const auto& [method, layers] : loaded.front().rows) methods.push_back(method);
    std::vector<std::vector<ScoreVector>> agg(ds.size());
    for (std::size_t e = 0; e < ds.size(); ++e)
        for (const auto& method : methods) {
            const auto& layers = loaded[e].rows.at(method);
            const auto it = layers.find(ScoreVector::kAggregated);
            if (it == layers.end())
                throw IoError("score artifact '" + args.scores_path +
                              "' lacks aggregated rows for '" + method +
                              "'; rerun score with --layer all or aggregated");
            ScoreVector sv;
            sv.method = method;
            sv.layer = ScoreVector::kAggregated;
            sv.mask_position = ds.examples[e].mask_position;
            sv.scores = it->second;
            agg[e].push_back(std::move(sv));
        }

    const FaithfulnessReport report =
        faithfulness_correlation(w, ds, methods, agg, args.jobs);
    ensure_dir(args.out_dir);
    std::vector<CsvRow> rows;
    for (std::size_t m = 0; m < methods.size(); ++m) {
        rows.push_back({methods[m], "aggregated", "mean_spearman_rho", report.mean_rho[m]});
        rows.push_back({methods[m], "aggregated", "examples_counted",
                        static_cast<double>(report.counted[m])});
    }
    rows.push_back({"_all", "aggregated", "skipped_short",
                    static_cast<double>(report.skipped_short)});
    rows.push_back({"_all", "aggregated", "skipped_degenerate",
                    static_cast<double>(report.skipped_degenerate)});
    write_report_csv((fs::path(args.out_dir) / "faithfulness.csv").string(), rows, args.seed);

    // Per-example blank-out vectors, one JSON document per line.
    {
        std::ofstream out(fs::path(args.out_dir) / "blank_out.jsonl", std::ios::binary);
        for (std::size_t e = 0; e < report.blank_out.size(); ++e) {
            nlohmann::json j;
            j["example"] = e;
            j["seed"] = args.seed;
            j["blank_out"] = report.blank_out[e];
            out << j.dump() << '\n';
        }
    }
    {
        nlohmann::json doc;
        doc["seed"] = args.seed;
        doc["examples"] = ds.size();
        doc["skipped_short"] = report.skipped_short;
        doc["skipped_degenerate"] = report.skipped_degenerate;
        nlohmann::json per_method = nlohmann::json::array();
        for (std::size_t m = 0; m < methods.size(); ++m) {
            nlohmann::json j;
            j["method"] = methods[m];
            j["mean_spearman_rho"] = report.mean_rho[m];
            j["examples_counted"] = report.counted[m];
            per_method.push_back(std::move(j));
        }
        doc["methods"] = std::move(per_method);
        std::ofstream out(fs::path(args.out_dir) / "faithfulness.json", std::ios::binary);
        out << doc.dump(2) << '\n';
    }
    std::cout << "faithfulness over " << ds.size() << " examples -> "
              << (fs::path(args.out_dir) / "faithfulness.csv").string() << "\n";
    return 0;
}

struct ExportArgs {
    std::string scores_path;
    std::string vocab_path;
    std::size_t example = 0;
    std::string out_dir = default_out_dir();
};

int cmd_export(const ExportArgs& args) {
    std::ifstream in(args.scores_path, std::ios::binary);
    if (!in)
        throw IoError("missing score artifact '" + args.scores_path +
                      "' (run the score subcommand first)");
    std::string line;
    nlohmann::json doc;
    bool found = false;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(args.scores_path + ":" + std::to_string(line_no) +
                          ": invalid JSON: " + e.what());
        }
        if (j.value("example", static_cast<std::size_t>(-1)) == args.example) {
            doc = std::move(j);
            found = true;
            break;
        }
    }
    if (!found)
        throw IoError("example " + std::to_string(args.example) + " not present in '" +
                      args.scores_path + "'");

    std::vector<std::string> tokens;
    if (doc.contains("tokens")) {
        for (const auto& t : doc["tokens"]) tokens.push_back(t.get<std::string>());
    } else if (!args.vocab_path.empty()) {
        const Vocab vocab = load_vocab(args.vocab_path);
        for (const auto& id : doc.at("token_ids")) tokens.push_back(vocab.token(id.get<int>()));
    } else {
        for (const auto& id : doc.at("token_ids")) tokens.push_back(id.dump());
    }

    ensure_dir(args.out_dir);
    const std::uint64_t seed = doc.value("seed", 0ULL);
    const std::string prefix = "ex" + std::to_string(args.example) + "_";
    {
        std::ofstream pretty(fs::path(args.out_dir) / (prefix + "scores.json"),
                             std::ios::binary);
        pretty << doc.dump(2) << '\n';
    }
    int written = 0;
    for (const auto& [method, entry] : doc.at("methods").items()) {
        const auto emit = [&](const nlohmann::json& cell, const std::string& layer_name,
                              int layer_id) {
            if (!cell.contains("map")) return;
            const auto& rows = cell["map"];
            const std::size_t n = rows.size();
            Tensor m({n, n});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) m(i, j) = rows[i][j].get<double>();
            const std::string base = prefix + method + "_" + layer_name;
            write_matrix_csv((fs::path(args.out_dir) / (base + ".csv")).string(), m, tokens,
                             method, layer_id, seed);
            write_svg_heatmap((fs::path(args.out_dir) / (base + ".svg")).string(), m, tokens,
                              tokens, method + " " + layer_name, seed);
            ++written;
        };
        if (entry.contains("layers"))
            for (const auto& [layer, cell] : entry["layers"].items())
                emit(cell, "L" + layer, std::stoi(layer));
        emit(entry.at("aggregated"), "aggregated", ScoreVector::kAggregated);
    }
    std::cout << "exported example " << args.example << ": " << written
              << " maps -> " << args.out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"context mixing scores for toy transformer encoders"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic agreement dataset");
    gen_cmd->add_option("--out-dir", gen.out_dir, "output directory");
    auto* gen_n = gen_cmd->add_option("--n", gen.count, "examples per split");
    auto* gen_ar = gen_cmd->add_option("--attractor-rate", gen.attractor_rate,
                                       "chance of an opposite-number attractor");
    auto* gen_min = gen_cmd->add_option("--min-len", gen.min_length, "minimum total length");
    auto* gen_max = gen_cmd->add_option("--max-len", gen.max_length, "maximum total length");
    auto* gen_seed = gen_cmd->add_option("--seed", gen.seed, "pipeline seed");
    gen_cmd->add_option("--config", gen.config_file, "key = value config file");

    InitModelArgs init;
    auto* init_cmd = app.add_subcommand("init-model", "initialize encoder weights");
    init_cmd->add_option("--vocab", init.vocab_path, "vocab.json sizing the embedding table");
    init_cmd->add_option("--vocab-size", init.vocab_size, "explicit vocabulary size");
    init_cmd->add_option("--layers", init.layers, "encoder layers");
    init_cmd->add_option("--heads", init.heads, "attention heads");
    init_cmd->add_option("--dim", init.dim, "model dimension");
    init_cmd->add_option("--ffn-dim", init.ffn_dim, "feed-forward dimension");
    init_cmd->add_option("--max-positions", init.max_positions, "maximum sequence length");
    init_cmd->add_option("--ln-eps", init.ln_eps, "layer-norm epsilon");
    init_cmd->add_flag("--untied", init.untied, "untie the MLM head from the embeddings");
    init_cmd->add_flag("--text", init.text_mode, "write the text-mode weight file");
    init_cmd->add_option("--seed", init.seed, "init seed");
    init_cmd->add_option("--out", init.out, "output weight file")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train or fine-tune a model");
    train_cmd->add_option("--weights", tr.weights_in, "input checkpoint")->required();
    train_cmd->add_option("--data", tr.data_path, "train split (jsonl)")->required();
    train_cmd->add_option("--eval-data", tr.eval_path, "held-out split for the report");
    train_cmd->add_option("--mode", tr.mode, "finetune | mlm");
    train_cmd->add_option("--lr", tr.config.learning_rate, "Adam learning rate");
    train_cmd->add_option("--batch-size", tr.config.batch_size, "batch size");
    train_cmd->add_option("--max-steps", tr.config.max_steps, "optimizer steps");
    train_cmd->add_option("--eval-interval", tr.config.eval_interval, "loss logging interval");
    train_cmd->add_option("--seed", tr.config.seed, "training seed");
    train_cmd->add_option("--jobs", tr.config.jobs, "worker threads");
    train_cmd->add_option("--out", tr.out, "output checkpoint")->required();
    train_cmd->add_option("--report", tr.report_path, "loss curve CSV");

    ScoreArgs sc;
    auto* score_cmd = app.add_subcommand("score", "compute context mixing scores");
    score_cmd->add_option("--weights", sc.weights_path, "model checkpoint")->required();
    score_cmd->add_option("--data", sc.data_path, "dataset (jsonl)")->required();
    score_cmd->add_option("--vocab", sc.vocab_path, "vocab.json for token labels");
    score_cmd->add_option("--out-dir", sc.out_dir, "output directory");
    score_cmd->add_option("--method", sc.methods, "methods (repeatable; default all)");
    score_cmd->add_option("--layer", sc.layer_selector, "all | aggregated | <index>");
    score_cmd->add_option("--distance", sc.distance, "cosine | euclidean | spearman");
    score_cmd->add_flag("--normalize-reps", sc.normalize_reps,
                        "standardize representations before distances");
    score_cmd->add_option("--add-identity", sc.add_identity,
                          "override rollout identity mixing (0 or 1)");
    score_cmd->add_flag("--exclude-special", sc.exclude_special,
                        "drop [CLS]/[SEP]/[PAD] from score normalization");
    score_cmd->add_option("--ig-steps", sc.ig_steps, "integrated-gradients steps");
    score_cmd->add_option("--ig-baseline", sc.ig_baseline, "zero | placeholder");
    score_cmd->add_option("--ig-placeholder-id", sc.ig_placeholder,
                          "token id for the placeholder baseline");
    score_cmd->add_option("--grad-target", sc.grad_target, "logit | logprob");
    score_cmd->add_option("--seed", sc.seed, "scoring seed");
    score_cmd->add_option("--jobs", sc.jobs, "worker threads");
    score_cmd->add_option("--limit", sc.limit, "score only the first N examples");
    score_cmd->add_flag("--csv", sc.csv, "also write per-example matrix CSVs");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "run an evaluation protocol");
    eval_cmd->add_option("--mode", ev.mode, "cue-alignment | probing | faithfulness")
        ->required();
    eval_cmd->add_option("--weights", ev.weights_path, "model checkpoint");
    eval_cmd->add_option("--data", ev.data_path, "dataset (jsonl)")->required();
    eval_cmd->add_option("--scores", ev.scores_path, "scores.jsonl from the score subcommand");
    eval_cmd->add_option("--out-dir", ev.out_dir, "output directory");
    eval_cmd->add_option("--seed", ev.seed, "evaluation seed");
    eval_cmd->add_option("--jobs", ev.jobs, "worker threads");

    ExportArgs ex;
    auto* export_cmd = app.add_subcommand("export", "render one example's score maps");
    export_cmd->add_option("--scores", ex.scores_path, "scores.jsonl")->required();
    export_cmd->add_option("--example", ex.example, "example index")->required();
    export_cmd->add_option("--vocab", ex.vocab_path, "vocab.json for token labels");
    export_cmd->add_option("--out-dir", ex.out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_cmd->parsed()) {
            if (!gen.config_file.empty()) {
                const auto kv = parse_config_file(gen.config_file);
                const auto apply = [&](CLI::Option* opt, const char* key, auto& slot) {
                    const auto it = kv.find(key);
                    if (it == kv.end() || opt->count() > 0) return;
                    std::istringstream(it->second) >> slot;
                };
                apply(gen_n, "n", gen.count);
                apply(gen_ar, "attractor_rate", gen.attractor_rate);
                apply(gen_min, "min_len", gen.min_length);
                apply(gen_max, "max_len", gen.max_length);
                apply(gen_seed, "seed", gen.seed);
            }
            ensure_dir(gen.out_dir);
            append_run_log(gen.out_dir, argc, argv);
            return cmd_gen_data(gen);
        }
        if (init_cmd->parsed()) return cmd_init_model(init);
        if (train_cmd->parsed()) return cmd_train(tr);
        if (score_cmd->parsed()) {
            ensure_dir(sc.out_dir);
            append_run_log(sc.out_dir, argc, argv);
            return cmd_score(sc);
        }
        if (eval_cmd->parsed()) {
            ensure_dir(ev.out_dir);
            append_run_log(ev.out_dir, argc, argv);
            if (ev.mode == "cue-alignment") return cmd_eval_cue_alignment(ev);
            if (ev.mode == "probing") return cmd_eval_probing(ev);
            if (ev.mode == "faithfulness") return cmd_eval_faithfulness(ev);
            throw ArgumentError("eval: unknown mode '" + ev.mode +
                                "' (valid: cue-alignment, probing, faithfulness)");
        }
        if (export_cmd->parsed()) {
            ensure_dir(ex.out_dir);
            return cmd_export(ex);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
