// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Drivers behind the command-line subcommands. Each command takes an ExperimentConfig and an output
// directory, writes its files there and returns what it wrote in memory as well. Every numeric
// output file starts with a "# config_hash=<hash>" line (JSON outputs carry a "config_hash" field).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esa/analysis.hpp"
#include "esa/compression.hpp"
#include "esa/config.hpp"
#include "esa/engine.hpp"
#include "esa/errors.hpp"
#include "esa/io.hpp"
#include "esa/needle.hpp"
#include "esa/oracle.hpp"
#include "esa/toy_model.hpp"

namespace esa::harness {

namespace fs = std::filesystem;

inline fs::path calibration_file(const fs::path& dir, std::size_t layer) {
    return dir / ("layer_" + std::to_string(layer) + ".cal");
}
inline fs::path eval_file(const fs::path& dir, std::size_t layer) {
    return dir / ("eval_layer_" + std::to_string(layer) + ".cal");
}
inline fs::path projection_file(const fs::path& dir, std::size_t layer) {
    return dir / ("layer_" + std::to_string(layer) + ".proj");
}

namespace detail {

inline std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    auto out = io::detail::open_out(path);
    out << text;
    if (!out) throw IoError(path.string() + ": write failed");
}

inline std::string hash_line(const ExperimentConfig& cfg) { return "# config_hash=" + config_hash(cfg) + "\n"; }

inline void write_json(const fs::path& path, nlohmann::json j, const ExperimentConfig& cfg) {
    j["config_hash"] = config_hash(cfg);
    write_text(path, j.dump(2) + "\n");
}

// Runs fn(layer) for every layer concurrently; the first exception is rethrown after all finish.
template <typename Fn>
auto for_each_layer(std::size_t layers, Fn fn) {
    using R = decltype(fn(std::size_t{0}));
    std::vector<std::future<R>> jobs;
    jobs.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) jobs.push_back(std::async(std::launch::async, fn, l));
    for (auto& j : jobs) j.wait();
    std::vector<R> out;
    out.reserve(layers);
    for (auto& j : jobs) out.push_back(j.get());
    return out;
}

inline ProjectionPair load_or_random_projection(const ExperimentConfig& cfg, const std::optional<fs::path>& proj_dir,
                                                std::size_t layer, std::string& source) {
    if (proj_dir) {
        auto pair = io::read_projection(projection_file(*proj_dir, layer), layer);
        if (pair.full_dim() != cfg.esa.full_dim() || pair.reduced_dim() != cfg.esa.reduced_dim) {
            throw ConfigError(projection_file(*proj_dir, layer).string() + ": projection is " +
                              std::to_string(pair.reduced_dim()) + "x" + std::to_string(pair.full_dim()) +
                              ", config wants " + std::to_string(cfg.esa.reduced_dim) + "x" +
                              std::to_string(cfg.esa.full_dim()));
        }
        source = projection_file(*proj_dir, layer).string();
        return pair;
    }
    source = "random";
    return random_projection(cfg.esa.full_dim(), cfg.esa.reduced_dim, cfg.seed, layer);
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// calibrate

struct CalibrateResult {
    std::vector<fs::path> calibration_files;
    std::vector<fs::path> eval_files;
    nlohmann::json manifest;
};

/// Per-layer query/key dumps of the training corpus and of a held-out evaluation corpus.
inline CalibrateResult cmd_calibrate(const ExperimentConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    const ToyModel model(cfg.model);
    const auto train_tokens = model.corpus(cfg.corpus_tokens, cfg.corpus_seed);
    const auto eval_tokens = model.corpus(cfg.eval_tokens, cfg.eval_corpus_seed);

    CalibrateResult res;
    detail::for_each_layer(cfg.model.layers, [&](std::size_t l) {
        const auto train = model.layer_qkv(l, train_tokens, cfg.corpus_seed);
        const auto eval = model.layer_qkv(l, eval_tokens, cfg.eval_corpus_seed);
        io::write_calibration(calibration_file(out_dir, l), CalibrationSet{l, train.queries, train.keys, ""});
        io::write_calibration(eval_file(out_dir, l), CalibrationSet{l, eval.queries, eval.keys, ""});
        return 0;
    });

    nlohmann::json files = nlohmann::json::array();
    for (std::size_t l = 0; l < cfg.model.layers; ++l) {
        res.calibration_files.push_back(calibration_file(out_dir, l));
        res.eval_files.push_back(eval_file(out_dir, l));
        files.push_back({{"layer", l},
                         {"calibration", calibration_file(out_dir, l).filename().string()},
                         {"eval", eval_file(out_dir, l).filename().string()}});
    }
    res.manifest = {
        {"files", files},
        {"model_seed", cfg.model.seed},
        {"pairs_per_layer", cfg.corpus_tokens},
        {"eval_pairs_per_layer", cfg.eval_tokens},
        {"full_dim", cfg.model.full_dim()},
        {"corpus",
         {{"kind", "synthetic motif corpus"},
          {"seed", cfg.corpus_seed},
          {"eval_seed", cfg.eval_corpus_seed},
          {"vocabulary", cfg.model.vocabulary},
          {"motif_count", cfg.model.motif_count},
          {"motif_fraction", cfg.model.motif_fraction}}},
    };
    detail::write_json(out_dir / "manifest.json", res.manifest, cfg);
    return res;
}

// ---------------------------------------------------------------------------------------------
// train

struct TrainLayerResult {
    std::size_t layer = 0;
    ProjectionPair pair;
    TrainReport report;
};

/// Fits one projection pair per layer from the dumps in calib_dir.
inline std::vector<TrainLayerResult> cmd_train(const ExperimentConfig& cfg, const fs::path& calib_dir,
                                               const fs::path& out_dir) {
    cfg.validate();
    auto results = detail::for_each_layer(cfg.model.layers, [&](std::size_t l) {
        const auto calib = io::read_calibration(calibration_file(calib_dir, l));
        if (calib.queries.cols != cfg.esa.full_dim()) {
            throw FormatError(calibration_file(calib_dir, l).string() + ": d_H=" + std::to_string(calib.queries.cols) +
                              " but config wants " + std::to_string(cfg.esa.full_dim()));
        }
        TrainHyper hyper = cfg.train;
        hyper.seed = cfg.train.seed + l;
        auto trained = train_projections(calib, cfg.esa.reduced_dim, hyper);
        trained.pair.layer_index = l;
        io::write_projection(projection_file(out_dir, l), trained.pair);
        return TrainLayerResult{l, std::move(trained.pair), std::move(trained.report)};
    });

    nlohmann::json layers = nlohmann::json::array();
    for (const auto& r : results) {
        layers.push_back({{"layer", r.layer},
                          {"initial_loss", r.report.initial_loss},
                          {"final_loss", r.report.final_loss},
                          {"epoch_losses", r.report.epoch_losses},
                          {"steps", r.report.steps},
                          {"file", projection_file(out_dir, r.layer).filename().string()}});
    }
    detail::write_json(out_dir / "train_report.json",
                       {{"layers", layers}, {"reduced_dim", cfg.esa.reduced_dim}, {"train", to_json(cfg.train)}}, cfg);
    return results;
}

// ---------------------------------------------------------------------------------------------
// eval-recall

enum class RecallMode { learned, pca, identity };

inline const char* to_string(RecallMode m) {
    switch (m) {
        case RecallMode::learned: return "learned";
        case RecallMode::pca: return "pca";
        case RecallMode::identity: return "identity";
    }
    return "?";
}

inline RecallMode recall_mode_from(const std::string& s) {
    if (s == "learned") return RecallMode::learned;
    if (s == "pca") return RecallMode::pca;
    if (s == "identity") return RecallMode::identity;
    throw ConfigError("eval-recall: unknown mode '" + s + "' (expected learned, pca or identity)");
}

struct RecallOptions {
    std::vector<RecallMode> modes = {RecallMode::learned, RecallMode::pca};
    std::optional<std::size_t> k;                      // default: config recall_k
    std::optional<std::pair<std::size_t, std::size_t>> range;  // [begin, end) rows of the eval dump
    std::optional<fs::path> proj_dir;                  // required for learned
};

struct RecallRow {
    std::size_t layer = 0;
    RecallMode mode = RecallMode::learned;
    std::size_t k = 0;
    double recall = 0.0;
};

/// Recall of compressed top-k against full-dimension top-k on the held-out dumps. PCA maps are fit
/// on the calibration dumps.
inline std::vector<RecallRow> cmd_eval_recall(const ExperimentConfig& cfg, const fs::path& calib_dir,
                                              const RecallOptions& opts, const fs::path& out_dir) {
    cfg.validate();
    const std::size_t k = opts.k.value_or(cfg.recall_k);
    for (auto m : opts.modes) {
        if (m == RecallMode::learned && !opts.proj_dir) {
            throw ConfigError("eval-recall: learned mode needs a projection directory");
        }
    }
    auto per_layer = detail::for_each_layer(cfg.model.layers, [&](std::size_t l) {
        auto eval = io::read_calibration(eval_file(calib_dir, l));
        std::size_t begin = 0, end = eval.size();
        if (opts.range) {
            std::tie(begin, end) = *opts.range;
            if (begin >= end || end > eval.size()) {
                throw ConfigError("eval-recall: range " + std::to_string(begin) + ":" + std::to_string(end) +
                                  " outside the " + std::to_string(eval.size()) + "-row eval dump");
            }
        }
        const Matrix q = eval.queries.slice_rows(begin, end);
        const Matrix keys = eval.keys.slice_rows(begin, end);
        if (k == 0 || k > keys.rows) {
            throw ConfigError("eval-recall: k = " + std::to_string(k) + " exceeds the " + std::to_string(keys.rows) +
                              " candidate keys");
        }
        std::vector<RecallRow> rows;
        for (auto mode : opts.modes) {
            ProjectionPair pair;
            if (mode == RecallMode::learned) {
                pair = io::read_projection(projection_file(*opts.proj_dir, l), l);
            } else if (mode == RecallMode::pca) {
                pair = pca_projections(io::read_calibration(calibration_file(calib_dir, l)), cfg.esa.reduced_dim,
                                       cfg.pca_mode)
                           .pair;
            } else {
                pair = identity_projection(keys.cols, l);
            }
            if (pair.full_dim() != keys.cols) {
                throw FormatError(std::string(to_string(mode)) + " projection for layer " + std::to_string(l) +
                                  ": d_H does not match the eval dump");
            }
            rows.push_back(RecallRow{l, mode, k, recall_at_k(q, keys, pair, k).mean});
        }
        return rows;
    });

    std::vector<RecallRow> rows;
    std::string csv = detail::hash_line(cfg) + "layer,mode,k,recall\n";
    for (auto& layer_rows : per_layer) {
        for (auto& r : layer_rows) {
            csv += std::to_string(r.layer) + "," + to_string(r.mode) + "," + std::to_string(r.k) + "," +
                   detail::fmt(r.recall) + "\n";
            rows.push_back(r);
        }
    }
    detail::write_text(out_dir / "recall.csv", csv);
    return rows;
}

// ---------------------------------------------------------------------------------------------
// run

enum class RunMode { esa, oracle, identity_esa, full_dim };

inline const char* to_string(RunMode m) {
    switch (m) {
        case RunMode::esa: return "esa";
        case RunMode::oracle: return "oracle";
        case RunMode::identity_esa: return "identity-esa";
        case RunMode::full_dim: return "full-dim";
    }
    return "?";
}

inline RunMode run_mode_from(const std::string& s) {
    if (s == "esa") return RunMode::esa;
    if (s == "oracle") return RunMode::oracle;
    if (s == "identity-esa") return RunMode::identity_esa;
    if (s == "full-dim") return RunMode::full_dim;
    throw ConfigError("run: unknown mode '" + s + "' (expected esa, oracle, identity-esa or full-dim)");
}

struct RunOptions {
    RunMode mode = RunMode::esa;
    std::optional<std::size_t> stream_len;  // default: config stream_len
    std::size_t decode_steps = 0;           // trailing single-token steps
    std::size_t last_chunk = 0;             // if > 0, one final step of this many rows after the prefill
    bool with_oracle = false;               // also compute the full-attention oracle and the deviation
    std::optional<fs::path> proj_dir;       // default: seeded random projection
};

struct RunStep {
    std::size_t step = 0;
    std::size_t current_len = 0;
    std::size_t middle_len = 0;
    bool scored = false;
    std::size_t k_effective = 0;
    std::size_t migrated = 0;
    std::uint64_t flops = 0;
    std::optional<std::uint64_t> predicted_flops;
    double checksum = 0.0;
    std::optional<double> oracle_deviation;  // mean |esa - oracle| over the step's outputs
    std::vector<std::size_t> selection;
};

struct RunResult {
    std::vector<RunStep> steps;
    nlohmann::json summary;
};

/// Step schedule: prefill chunks of at most cfg.chunk rows, then either one last chunk or decode steps.
inline std::vector<std::size_t> run_schedule(std::size_t stream_len, std::size_t chunk, std::size_t decode_steps,
                                             std::size_t last_chunk) {
    if (decode_steps > 0 && last_chunk > 0) throw ConfigError("run: use either decode steps or a last chunk, not both");
    if (last_chunk > chunk) throw ConfigError("run: last chunk exceeds the configured chunk size");
    const std::size_t tail = decode_steps + last_chunk;
    if (tail > stream_len) throw ConfigError("run: tail steps exceed the stream length");
    std::vector<std::size_t> sizes;
    for (std::size_t done = 0; done < stream_len - tail;) {
        const std::size_t n = std::min(chunk, stream_len - tail - done);
        sizes.push_back(n);
        done += n;
    }
    if (last_chunk > 0) sizes.push_back(last_chunk);
    for (std::size_t i = 0; i < decode_steps; ++i) sizes.push_back(1);
    return sizes;
}

/// Runs one layer of the toy model over a seeded stream and records each step.
inline RunResult cmd_run(const ExperimentConfig& cfg, const RunOptions& opts, const fs::path& out_dir) {
    cfg.validate();
    const std::size_t stream_len = opts.stream_len.value_or(cfg.stream_len);
    if (stream_len == 0) throw ConfigError("run: stream length must be >= 1");
    const auto schedule = run_schedule(stream_len, cfg.esa.chunk, opts.decode_steps, opts.last_chunk);

    EsaConfig ecfg = cfg.esa;
    std::string projection_source;
    ProjectionPair pair;
    if (opts.mode == RunMode::identity_esa) {
        ecfg.reduced_dim = ecfg.full_dim();
        ecfg.scoring = ScoreBasis::compressed;
        pair = identity_projection(ecfg.full_dim(), cfg.run_layer);
        projection_source = "identity";
    } else {
        pair = detail::load_or_random_projection(cfg, opts.proj_dir, cfg.run_layer, projection_source);
        pair.layer_index = cfg.run_layer;
        if (opts.mode == RunMode::full_dim) ecfg.scoring = ScoreBasis::full_dim;
    }
    if (ecfg.scoring == ScoreBasis::compressed) ecfg.head_mode = HeadMode::uniform_sum;

    const ToyModel model(cfg.model);
    const auto qkv = model.layer_qkv(cfg.run_layer, model.corpus(stream_len, cfg.stream_seed), cfg.stream_seed);
    const bool need_oracle = opts.with_oracle || opts.mode == RunMode::oracle;
    const bool predict = ecfg.scoring == ScoreBasis::compressed;

    EsaEngine engine(ecfg, pair);
    RunResult res;
    std::size_t begin = 0;
    double dev_sum = 0.0;
    std::size_t dev_count = 0;
    double worst_flop_dev = 0.0;
    for (std::size_t s = 0; s < schedule.size(); ++s) {
        const std::size_t end = begin + schedule[s];
        QkvChunk chunk{qkv.queries.slice_rows(begin, end), qkv.keys.slice_rows(begin, end),
                       qkv.values.slice_rows(begin, end)};
        std::optional<Matrix> reference;
        if (need_oracle) reference = oracle::full_attention_oracle(engine.cache(), chunk, ecfg);
        const auto trace = engine.prefill(chunk);

        RunStep row;
        row.step = s;
        row.current_len = trace.current_len;
        row.middle_len = trace.middle_len;
        row.scored = trace.scored;
        row.k_effective = trace.selection.k_effective;
        row.migrated = trace.migrated;
        row.flops = trace.flop_count;
        row.selection = trace.selection.indices;
        const Matrix& output = opts.mode == RunMode::oracle ? *reference : trace.output;
        for (float v : output.data) row.checksum += v;
        if (reference) {
            double acc = 0.0;
            for (std::size_t i = 0; i < output.data.size(); ++i) {
                acc += std::abs(static_cast<double>(trace.output.data[i]) - reference->data[i]);
            }
            row.oracle_deviation = acc / static_cast<double>(output.data.size());
            dev_sum += acc;
            dev_count += output.data.size();
        }
        if (predict && trace.scored) {
            const auto m = CostModel::from_config(ecfg, trace.middle_len, trace.current_len);
            row.predicted_flops = esa_flops(m);
            const double rel = std::abs(static_cast<double>(row.flops) - static_cast<double>(*row.predicted_flops)) /
                               static_cast<double>(*row.predicted_flops);
            worst_flop_dev = std::max(worst_flop_dev, rel);
        }
        res.steps.push_back(std::move(row));
        begin = end;
    }

    std::string csv = detail::hash_line(cfg) +
                      "step,l_C,l_M,scored,k_effective,migrated,flops,predicted_flops,checksum,oracle_deviation\n";
    std::string log = detail::hash_line(cfg);
    for (const auto& r : res.steps) {
        csv += std::to_string(r.step) + "," + std::to_string(r.current_len) + "," + std::to_string(r.middle_len) + "," +
               (r.scored ? "1" : "0") + "," + std::to_string(r.k_effective) + "," + std::to_string(r.migrated) + "," +
               std::to_string(r.flops) + "," + (r.predicted_flops ? std::to_string(*r.predicted_flops) : "") + "," +
               detail::fmt(r.checksum, "%.9g") + "," +
               (r.oracle_deviation ? detail::fmt(*r.oracle_deviation, "%.9g") : "") + "\n";
        log += "step " + std::to_string(r.step) + " l_M=" + std::to_string(r.middle_len) + ":";
        for (auto i : r.selection) log += " " + std::to_string(i);
        log += "\n";
    }
    detail::write_text(out_dir / "steps.csv", csv);
    detail::write_text(out_dir / "selections.log", log);

    std::uint64_t measured = 0, predicted = 0;
    for (const auto& r : res.steps) {
        if (r.predicted_flops) {
            measured += r.flops;
            predicted += *r.predicted_flops;
        }
    }
    res.summary = {
        {"mode", to_string(opts.mode)},
        {"layer", cfg.run_layer},
        {"stream_len", stream_len},
        {"steps", res.steps.size()},
        {"projection", projection_source},
        {"final_middle_len", engine.cache().middle_len()},
        {"final_local_len", engine.cache().local_len()},
        {"final_initial_len", engine.cache().initial_len()},
    };
    res.summary["mean_abs_deviation_from_oracle"] =
        dev_count > 0 ? nlohmann::json(dev_sum / static_cast<double>(dev_count)) : nlohmann::json(nullptr);
    if (predicted > 0) {
        res.summary["measured_flops"] = measured;
        res.summary["predicted_flops"] = predicted;
        res.summary["measured_over_predicted"] = static_cast<double>(measured) / static_cast<double>(predicted);
        res.summary["max_step_flop_deviation"] = worst_flop_dev;
    }
    detail::write_json(out_dir / "summary.json", res.summary, cfg);
    return res;
}

// ---------------------------------------------------------------------------------------------
// needle

struct NeedleRow {
    std::size_t epsilon = 0;
    std::size_t k = 0;
    double recall = 0.0;
};

/// Positions spread evenly over the part of the stream that sits in the middle segment at probe time.
inline std::vector<std::size_t> default_needle_positions(const EsaConfig& cfg, std::size_t stream_len, std::size_t n) {
    if (stream_len < cfg.initial_len + cfg.local_len + n) {
        throw ConfigError("needle: stream too short for " + std::to_string(n) + " needles in the middle segment");
    }
    const std::size_t span = stream_len - cfg.local_len - cfg.initial_len;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(cfg.initial_len + (2 * i + 1) * span / (2 * n));
    return out;
}

inline std::vector<NeedleRow> cmd_needle(const ExperimentConfig& cfg, const std::optional<fs::path>& proj_dir,
                                         const fs::path& out_dir) {
    cfg.validate();
    const auto& opt = cfg.needle;
    if (opt.epsilons.empty() || opt.ks.empty()) throw ConfigError("needle: epsilon and k sweeps must be non-empty");
    std::string source;
    auto pair = detail::load_or_random_projection(cfg, proj_dir, cfg.run_layer, source);
    NeedleSetup setup;
    setup.stream_len = opt.stream_len;
    setup.seed = cfg.seed;
    setup.margin = opt.margin;
    setup.planted_positions =
        opt.positions.empty() ? default_needle_positions(cfg.esa, opt.stream_len, opt.n_planted) : opt.positions;
    const auto stream = build_needle_stream(cfg.esa, pair, setup);

    std::vector<NeedleRow> rows;
    std::string csv = detail::hash_line(cfg) + "epsilon,k,recall\n";
    for (std::size_t eps : opt.epsilons) {
        for (std::size_t k : opt.ks) {
            const auto outcome = needle_recall(stream, k, eps);
            rows.push_back(NeedleRow{eps, k, outcome.recall});
            csv += std::to_string(eps) + "," + std::to_string(k) + "," + detail::fmt(outcome.recall) + "\n";
        }
    }
    detail::write_text(out_dir / "needle.csv", csv);
    return rows;
}

// ---------------------------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
    std::size_t middle_len = 1000000;
    std::size_t current_len = 1;
    std::optional<std::size_t> gqa_heads;
    std::optional<fs::path> trace;  // steps.csv from a run
};

struct TraceTotals {
    std::uint64_t measured = 0;
    std::uint64_t predicted = 0;
    std::size_t steps = 0;
};

/// Sums flops over the rows of a steps.csv that carry a prediction.
inline TraceTotals read_trace_totals(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string() + ": cannot open trace");
    std::string line;
    bool header = false;
    std::size_t flops_col = 0, pred_col = 0;
    TraceTotals t;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (!header) {
            const auto f = std::find(cells.begin(), cells.end(), "flops");
            const auto p = std::find(cells.begin(), cells.end(), "predicted_flops");
            if (f == cells.end() || p == cells.end()) throw FormatError(path.string() + ": not a run trace");
            flops_col = static_cast<std::size_t>(f - cells.begin());
            pred_col = static_cast<std::size_t>(p - cells.begin());
            header = true;
            continue;
        }
        if (cells.size() <= std::max(flops_col, pred_col)) throw FormatError(path.string() + ": short trace row");
        if (cells[pred_col].empty()) continue;
        try {
            t.measured += std::stoull(cells[flops_col]);
            t.predicted += std::stoull(cells[pred_col]);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": bad number in trace row");
        }
        ++t.steps;
    }
    if (!header) throw FormatError(path.string() + ": empty trace");
    return t;
}

inline nlohmann::json cmd_analyze(const ExperimentConfig& cfg, const AnalyzeOptions& opts, const fs::path& out_dir) {
    cfg.validate();
    if (opts.current_len == 0) throw ConfigError("analyze: current length must be >= 1");
    const auto m = CostModel::from_config(cfg.esa, opts.middle_len, opts.current_len, opts.gqa_heads);
    nlohmann::json j = {
        {"full_dim", m.full_dim},
        {"heads", m.heads},
        {"reduced_dim", m.reduced_dim},
        {"initial_len", m.initial_len},
        {"middle_len", m.middle_len},
        {"local_len", m.local_len},
        {"current_len", m.current_len},
        {"top_k", m.top_k},
        {"full_attention_flops", full_attention_flops(m)},
        {"projection_flops", projection_flops(m)},
        {"selection_flops", selection_flops(m)},
        {"sparse_attention_flops", sparse_attention_flops(m)},
        {"esa_flops", esa_flops(m)},
        {"reduction_ratio_exact", reduction_ratio_exact(m)},
        {"reduction_ratio_asymptotic", reduction_ratio_asymptotic(m)},
    };
    j["cache_overhead_ratio"] = opts.gqa_heads ? nlohmann::json(cache_overhead_ratio(m)) : nlohmann::json(nullptr);
    nlohmann::json sweep = nlohmann::json::array();
    for (std::size_t lm : {10000ul, 100000ul, 1000000ul, 10000000ul}) {
        auto mm = m;
        mm.middle_len = lm;
        sweep.push_back({{"middle_len", lm}, {"reduction_ratio_exact", reduction_ratio_exact(mm)}});
    }
    j["middle_len_sweep"] = sweep;
    if (opts.trace) {
        const auto t = read_trace_totals(*opts.trace);
        j["trace"] = {{"steps_with_prediction", t.steps}, {"measured_flops", t.measured}, {"predicted_flops", t.predicted}};
        j["trace"]["measured_over_predicted"] =
            t.predicted > 0 ? nlohmann::json(static_cast<double>(t.measured) / static_cast<double>(t.predicted))
                            : nlohmann::json(nullptr);
    }
    detail::write_json(out_dir / "analysis.json", j, cfg);
    return j;
}

}  // namespace esa::harness
