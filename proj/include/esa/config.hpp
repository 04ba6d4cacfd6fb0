// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esa/compression.hpp"
#include "esa/engine.hpp"
#include "esa/errors.hpp"
#include "esa/toy_model.hpp"

namespace esa {

struct NeedleOptions {
    std::size_t n_planted = 8;
    std::vector<std::size_t> positions;            // empty: spread evenly over the middle segment
    std::vector<std::size_t> epsilons = {0, 1, 3, 5};
    std::vector<std::size_t> ks = {64};
    std::size_t stream_len = 4096;
    double margin = 1.0;
};

/// Everything a harness command needs. Serialized as JSON.
struct ExperimentConfig {
    EsaConfig esa = EsaConfig::desk();
    ToyModelSpec model;
    TrainHyper train;
    std::uint64_t seed = 0;
    std::size_t corpus_tokens = 50000;   // calibration pairs per layer
    std::uint64_t corpus_seed = 1;
    std::size_t eval_tokens = 2000;      // held-out slice for recall
    std::uint64_t eval_corpus_seed = 2;
    std::size_t recall_k = 200;
    PcaMode pca_mode = PcaMode::per_side;
    std::size_t run_layer = 0;
    std::size_t stream_len = 4096;
    std::uint64_t stream_seed = 3;
    NeedleOptions needle;

    void validate() const {
        esa.validate();
        model.validate();
        if (model.full_dim() != esa.full_dim()) {
            throw ConfigError("config: model d_H=" + std::to_string(model.full_dim()) + " differs from esa d_H=" +
                              std::to_string(esa.full_dim()));
        }
        if (corpus_tokens < 2) throw ConfigError("config: corpus_tokens must be >= 2");
        if (eval_tokens == 0) throw ConfigError("config: eval_tokens must be >= 1");
        if (run_layer >= model.layers) throw ConfigError("config: run_layer out of range");
        if (stream_len == 0) throw ConfigError("config: stream_len must be >= 1");
        if (train.batch == 0 || train.epochs == 0) throw ConfigError("config: train batch and epochs must be >= 1");
        if (!(train.learning_rate > 0.0)) throw ConfigError("config: learning rate must be > 0");
    }

    /// Toy model, corpus and engine at laptop scale: 4 layers, H = 4, d = 32 (d_H = 128), d' = 16, N = 5000.
    static ExperimentConfig desk() {
        ExperimentConfig c;
        c.corpus_tokens = 5000;
        return c;
    }

    /// Engine and model dimensions of the reference 7B/8B setting, N = 50000.
    static ExperimentConfig paper() {
        ExperimentConfig c;
        c.esa = EsaConfig::paper();
        c.model.heads = c.esa.heads;
        c.model.head_dim = c.esa.head_dim;
        c.model.layers = 32;
        c.model.vocabulary = 32000;
        c.corpus_tokens = 50000;
        c.eval_tokens = 2000;
        c.stream_len = 32768;
        c.needle.stream_len = 32768;
        return c;
    }

    /// One seed for model weights, training order and needle streams.
    void apply_seed(std::uint64_t s) {
        seed = s;
        model.seed = s;
        train.seed = s;
    }

    static ExperimentConfig preset(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "paper") return paper();
        throw ConfigError("unknown preset '" + name + "' (expected paper or desk)");
    }
};

namespace detail {

inline const char* to_string(HeadMode m) { return m == HeadMode::uniform_sum ? "uniform_sum" : "individual_max"; }
inline const char* to_string(ScoreBasis b) { return b == ScoreBasis::compressed ? "compressed" : "full_dim"; }
inline const char* to_string(PcaMode m) { return m == PcaMode::per_side ? "per_side" : "joint"; }

inline HeadMode head_mode_from(const std::string& s) {
    if (s == "uniform_sum") return HeadMode::uniform_sum;
    if (s == "individual_max") return HeadMode::individual_max;
    throw ConfigError("config: unknown head_mode '" + s + "'");
}
inline ScoreBasis score_basis_from(const std::string& s) {
    if (s == "compressed") return ScoreBasis::compressed;
    if (s == "full_dim") return ScoreBasis::full_dim;
    throw ConfigError("config: unknown scoring '" + s + "'");
}
inline PcaMode pca_mode_from(const std::string& s) {
    if (s == "per_side") return PcaMode::per_side;
    if (s == "joint") return PcaMode::joint;
    throw ConfigError("config: unknown pca_mode '" + s + "'");
}

// Reads known keys into the fields that already hold defaults; unknown keys are an error.
class JsonReader {
public:
    JsonReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& field) {
        seen_.emplace_back(key);
        if (!j_.contains(key)) return;
        try {
            field = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const nlohmann::json* child(const char* key) {
        seen_.emplace_back(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (std::find(seen_.begin(), seen_.end(), item.key()) == seen_.end()) {
                throw ConfigError(where_ + ": unknown key '" + item.key() + "'");
            }
        }
    }

private:
    const nlohmann::json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const EsaConfig& c) {
    nlohmann::json j = {
        {"heads", c.heads},         {"head_dim", c.head_dim},   {"reduced_dim", c.reduced_dim},
        {"initial_len", c.initial_len}, {"local_len", c.local_len}, {"top_k", c.top_k},
        {"epsilon", c.epsilon},     {"chunk", c.chunk},         {"rope_base", c.rope_base},
        {"head_mode", detail::to_string(c.head_mode)}, {"scoring", detail::to_string(c.scoring)},
    };
    j["global_position"] = c.global_position ? nlohmann::json(*c.global_position) : nlohmann::json(nullptr);
    return j;
}

inline EsaConfig esa_config_from_json(const nlohmann::json& j, EsaConfig c = EsaConfig::desk()) {
    detail::JsonReader r(j, "esa");
    r.get("heads", c.heads);
    r.get("head_dim", c.head_dim);
    r.get("reduced_dim", c.reduced_dim);
    r.get("initial_len", c.initial_len);
    r.get("local_len", c.local_len);
    r.get("top_k", c.top_k);
    r.get("epsilon", c.epsilon);
    r.get("chunk", c.chunk);
    r.get("rope_base", c.rope_base);
    if (const auto* v = r.child("head_mode")) c.head_mode = detail::head_mode_from(v->get<std::string>());
    if (const auto* v = r.child("scoring")) c.scoring = detail::score_basis_from(v->get<std::string>());
    if (const auto* v = r.child("global_position")) {
        if (v->is_null()) {
            c.global_position.reset();
        } else {
            c.global_position = v->get<std::size_t>();
        }
    }
    r.finish();
    return c;
}

inline nlohmann::json to_json(const ToyModelSpec& m) {
    return {
        {"layers", m.layers},
        {"heads", m.heads},
        {"head_dim", m.head_dim},
        {"vocabulary", m.vocabulary},
        {"seed", m.seed},
        {"spectrum_decay", m.spectrum_decay},
        {"qk_gain", m.qk_gain},
        {"mean_scale", m.mean_scale},
        {"nuisance_rank", m.nuisance_rank},
        {"nuisance_scale", m.nuisance_scale},
        {"context_mix", m.context_mix},
        {"motif_count", m.motif_count},
        {"motif_min_len", m.motif_min_len},
        {"motif_max_len", m.motif_max_len},
        {"motif_fraction", m.motif_fraction},
    };
}

inline ToyModelSpec model_spec_from_json(const nlohmann::json& j, ToyModelSpec m) {
    detail::JsonReader r(j, "model");
    r.get("layers", m.layers);
    r.get("heads", m.heads);
    r.get("head_dim", m.head_dim);
    r.get("vocabulary", m.vocabulary);
    r.get("seed", m.seed);
    r.get("spectrum_decay", m.spectrum_decay);
    r.get("qk_gain", m.qk_gain);
    r.get("mean_scale", m.mean_scale);
    r.get("nuisance_rank", m.nuisance_rank);
    r.get("nuisance_scale", m.nuisance_scale);
    r.get("context_mix", m.context_mix);
    r.get("motif_count", m.motif_count);
    r.get("motif_min_len", m.motif_min_len);
    r.get("motif_max_len", m.motif_max_len);
    r.get("motif_fraction", m.motif_fraction);
    r.finish();
    return m;
}

inline nlohmann::json to_json(const TrainHyper& t) {
    return {{"learning_rate", t.learning_rate}, {"batch", t.batch},       {"epochs", t.epochs},
            {"seed", t.seed},                   {"momentum", t.momentum}, {"identity_init", t.identity_init}};
}

inline TrainHyper train_hyper_from_json(const nlohmann::json& j, TrainHyper t) {
    detail::JsonReader r(j, "train");
    r.get("learning_rate", t.learning_rate);
    r.get("batch", t.batch);
    r.get("epochs", t.epochs);
    r.get("seed", t.seed);
    r.get("momentum", t.momentum);
    r.get("identity_init", t.identity_init);
    r.finish();
    return t;
}

inline nlohmann::json to_json(const NeedleOptions& n) {
    return {{"n_planted", n.n_planted}, {"positions", n.positions},   {"epsilons", n.epsilons},
            {"ks", n.ks},               {"stream_len", n.stream_len}, {"margin", n.margin}};
}

inline NeedleOptions needle_options_from_json(const nlohmann::json& j, NeedleOptions n) {
    detail::JsonReader r(j, "needle");
    r.get("n_planted", n.n_planted);
    r.get("positions", n.positions);
    r.get("epsilons", n.epsilons);
    r.get("ks", n.ks);
    r.get("stream_len", n.stream_len);
    r.get("margin", n.margin);
    r.finish();
    return n;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {
        {"esa", to_json(c.esa)},
        {"model", to_json(c.model)},
        {"train", to_json(c.train)},
        {"seed", c.seed},
        {"corpus_tokens", c.corpus_tokens},
        {"corpus_seed", c.corpus_seed},
        {"eval_tokens", c.eval_tokens},
        {"eval_corpus_seed", c.eval_corpus_seed},
        {"recall_k", c.recall_k},
        {"pca_mode", detail::to_string(c.pca_mode)},
        {"run_layer", c.run_layer},
        {"stream_len", c.stream_len},
        {"stream_seed", c.stream_seed},
        {"needle", to_json(c.needle)},
    };
}

/// Fields absent from the JSON keep the values of `base`. A "preset" key selects the base instead.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
    if (j.is_object() && j.contains("preset")) {
        if (!j.at("preset").is_string()) throw ConfigError("config.preset: expected a string");
        base = ExperimentConfig::preset(j.at("preset").get<std::string>());
    }
    ExperimentConfig c = std::move(base);
    detail::JsonReader r(j, "config");
    r.child("preset");
    if (const auto* v = r.child("esa")) c.esa = esa_config_from_json(*v, c.esa);
    if (const auto* v = r.child("model")) c.model = model_spec_from_json(*v, c.model);
    if (const auto* v = r.child("train")) c.train = train_hyper_from_json(*v, c.train);
    if (const auto* v = r.child("needle")) c.needle = needle_options_from_json(*v, c.needle);
    r.get("seed", c.seed);
    r.get("corpus_tokens", c.corpus_tokens);
    r.get("corpus_seed", c.corpus_seed);
    r.get("eval_tokens", c.eval_tokens);
    r.get("eval_corpus_seed", c.eval_corpus_seed);
    r.get("recall_k", c.recall_k);
    if (const auto* v = r.child("pca_mode")) c.pca_mode = detail::pca_mode_from(v->get<std::string>());
    r.get("run_layer", c.run_layer);
    r.get("stream_len", c.stream_len);
    r.get("stream_seed", c.stream_seed);
    r.finish();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j, std::move(base));
}

/// FNV-1a 64 over the compact JSON dump, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string text = to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace esa
