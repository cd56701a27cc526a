#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxmix/errors.hpp"
#include "ctxmix/model.hpp"

namespace ctxmix {

// Weight checkpoint: one UTF-8 JSON manifest, a single '\n', then a raw
// little-endian IEEE-754 f64 blob. The manifest carries the encoder config
// and, per tensor, {name, shape, dtype, offset, bytes} with offsets relative
// to the blob start. A text mode stores the values as nested arrays in the
// manifest itself and has no blob; load() accepts both.

namespace detail {

inline void append_le_doubles(std::string& out, const std::vector<double>& xs) {
    static_assert(sizeof(double) == 8);
    const std::size_t base = out.size();
    out.resize(base + xs.size() * 8);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data() + base, xs.data(), xs.size() * 8);
    } else {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, &xs[i], 8);
            for (int b = 0; b < 8; ++b)
                out[base + i * 8 + static_cast<std::size_t>(b)] =
                    static_cast<char>((bits >> (8 * b)) & 0xff);
        }
    }
}

inline double read_le_double(const char* p) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b)
        bits = (bits << 8) | static_cast<std::uint8_t>(p[b]);
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
}

inline nlohmann::json config_to_json(const EncoderConfig& cfg) {
    return {{"num_layers", cfg.num_layers},     {"num_heads", cfg.num_heads},
            {"model_dim", cfg.model_dim},       {"ffn_dim", cfg.ffn_dim},
            {"vocab_size", cfg.vocab_size},     {"max_positions", cfg.max_positions},
            {"ln_eps", cfg.ln_eps},             {"tied_mlm_head", cfg.tied_mlm_head}};
}

inline EncoderConfig config_from_json(const nlohmann::json& j) {
    EncoderConfig cfg;
    try {
        cfg.num_layers = j.at("num_layers").get<int>();
        cfg.num_heads = j.at("num_heads").get<int>();
        cfg.model_dim = j.at("model_dim").get<int>();
        cfg.ffn_dim = j.at("ffn_dim").get<int>();
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.max_positions = j.at("max_positions").get<int>();
        cfg.ln_eps = j.at("ln_eps").get<double>();
        cfg.tied_mlm_head = j.at("tied_mlm_head").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed manifest config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json nested_array(const Tensor& t, std::size_t axis, std::size_t& cursor) {
    nlohmann::json arr = nlohmann::json::array();
    if (axis + 1 == t.rank()) {
        for (std::size_t i = 0; i < t.dim(axis); ++i) arr.push_back(t.data()[cursor++]);
    } else {
        for (std::size_t i = 0; i < t.dim(axis); ++i)
            arr.push_back(nested_array(t, axis + 1, cursor));
    }
    return arr;
}

inline void flatten_into(const nlohmann::json& node, std::vector<double>& out,
                         const std::string& name) {
    if (node.is_array()) {
        for (const auto& child : node) flatten_into(child, out, name);
    } else if (node.is_number()) {
        out.push_back(node.get<double>());
    } else {
        throw IoError("tensor '" + name + "': data contains a non-numeric entry");
    }
}

} // namespace detail

enum class WeightFileMode { Binary, Text };

inline void save_weights(const ModelWeights& w, const std::string& path,
                         WeightFileMode mode = WeightFileMode::Binary) {
    nlohmann::json manifest;
    manifest["format"] = "ctxmix-weights";
    manifest["version"] = 1;
    manifest["mode"] = mode == WeightFileMode::Binary ? "binary" : "text";
    manifest["config"] = detail::config_to_json(w.config);
    nlohmann::json tensors = nlohmann::json::array();
    std::string blob;
    for_each_tensor(w, [&](const std::string& name, const Tensor& t) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = "f64";
        if (mode == WeightFileMode::Binary) {
            entry["offset"] = blob.size();
            entry["bytes"] = t.size() * 8;
            detail::append_le_doubles(blob, t.values());
        } else {
            std::size_t cursor = 0;
            entry["data"] = t.rank() == 0 ? nlohmann::json::array()
                                          : detail::nested_array(t, 0, cursor);
        }
        tensors.push_back(std::move(entry));
    });
    manifest["tensors"] = std::move(tensors);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << manifest.dump() << '\n';
    if (mode == WeightFileMode::Binary) out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline ModelWeights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");

    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest in '" + path + "': " + e.what());
    }
    if (!manifest.is_object() || manifest.value("format", "") != "ctxmix-weights")
        throw IoError("malformed manifest in '" + path + "': missing format tag");
    const std::string mode = manifest.value("mode", "binary");
    if (!manifest.contains("config") || !manifest.contains("tensors"))
        throw IoError("malformed manifest in '" + path + "': missing config or tensors");

    const EncoderConfig cfg = detail::config_from_json(manifest["config"]);
    ModelWeights w = make_weights(cfg);

    std::string blob;
    if (mode == "binary") {
        if (in.get() != '\n')
            throw IoError("malformed manifest in '" + path + "': missing blob delimiter");
        blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    } else if (mode != "text") {
        throw IoError("malformed manifest in '" + path + "': unknown mode '" + mode + "'");
    }

    std::vector<std::string> loaded;
    for (const auto& entry : manifest["tensors"]) {
        const std::string name = entry.value("name", "");
        if (name.empty()) throw IoError("manifest entry without a tensor name");
        Tensor* dst = nullptr;
        for_each_tensor(w, [&](const std::string& n, Tensor& t) {
            if (n == name) dst = &t;
        });
        if (dst == nullptr)
            throw IoError("tensor '" + name + "' is not part of this model configuration");

        std::vector<std::size_t> shape;
        for (const auto& s : entry.at("shape")) shape.push_back(s.get<std::size_t>());
        if (shape != dst->shape())
            throw IoError("tensor '" + name + "': manifest shape " +
                          Tensor::shape_string(shape) + " does not match expected " +
                          dst->shape_string());
        if (entry.value("dtype", "") != "f64")
            throw IoError("tensor '" + name + "': unsupported dtype");

        if (mode == "binary") {
            const std::size_t offset = entry.at("offset").get<std::size_t>();
            const std::size_t bytes = entry.at("bytes").get<std::size_t>();
            if (bytes != dst->size() * 8)
                throw IoError("tensor '" + name + "': byte length " + std::to_string(bytes) +
                              " does not match shape " + dst->shape_string());
            if (offset + bytes > blob.size())
                throw IoError("tensor '" + name + "' is missing from the blob (truncated file?)");
            for (std::size_t i = 0; i < dst->size(); ++i)
                dst->data()[i] = detail::read_le_double(blob.data() + offset + i * 8);
        } else {
            std::vector<double> flat;
            detail::flatten_into(entry.at("data"), flat, name);
            if (flat.size() != dst->size())
                throw IoError("tensor '" + name + "': data holds " +
                              std::to_string(flat.size()) + " values, expected " +
                              std::to_string(dst->size()));
            std::copy(flat.begin(), flat.end(), dst->data());
        }
        loaded.push_back(name);
    }

    std::vector<std::string> expected;
    for_each_tensor(w, [&](const std::string& n, Tensor&) { expected.push_back(n); });
    for (const auto& n : expected)
        if (std::find(loaded.begin(), loaded.end(), n) == loaded.end())
            throw IoError("manifest is missing tensor '" + n + "'");
    return w;
}

} // namespace ctxmix
