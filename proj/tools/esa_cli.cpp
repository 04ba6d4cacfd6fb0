// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

// esa_cli: calibrate, train, eval-recall, run, needle, analyze.
// Exit codes: 0 success, 2 configuration error, 3 format error, 1 anything else.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif
#include <nlohmann/json.hpp>

#include "esa/config.hpp"
#include "esa/errors.hpp"
#include "esa/harness.hpp"

namespace {

using esa::ExperimentConfig;
namespace fs = std::filesystem;
namespace h = esa::harness;

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    std::string preset;
    std::optional<std::size_t> dprime;
};

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.preset.empty() ? ExperimentConfig{} : ExperimentConfig::preset(c.preset);
    if (!c.config_path.empty()) cfg = esa::load_experiment_config(c.config_path, cfg);
    if (c.seed) cfg.apply_seed(*c.seed);
    if (c.dprime) cfg.esa.reduced_dim = *c.dprime;
    cfg.validate();
    return cfg;
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw esa::ConfigError("--range expects begin:end, got '" + text + "'");
    try {
        return {std::stoull(text.substr(0, colon)), std::stoull(text.substr(colon + 1))};
    } catch (const std::exception&) {
        throw esa::ConfigError("--range expects begin:end, got '" + text + "'");
    }
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Selective attention harness over a seeded toy transformer"};
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    app.add_option("--config", common.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app.add_option("--seed", common.seed, "Seed for model weights, training order and streams");
    app.add_option("--out-dir", common.out_dir, "Output directory")->capture_default_str();
    app.add_option("--preset", common.preset, "Base configuration")->check(CLI::IsMember({"paper", "desk"}));
    app.add_option("--dprime", common.dprime, "Compressed dimension d'");

    auto* calibrate = app.add_subcommand("calibrate", "Write per-layer query/key calibration dumps");
    std::optional<std::size_t> tokens;
    calibrate->add_option("--tokens", tokens, "Calibration pairs per layer");

    auto* train = app.add_subcommand("train", "Fit projection pairs from calibration dumps");
    std::string train_calib;
    train->add_option("--calib-dir", train_calib, "Directory with calibration dumps")->required();

    auto* eval = app.add_subcommand("eval-recall", "Per-layer recall@k of compressed vs full scores");
    std::string eval_calib, eval_proj, eval_range;
    std::vector<std::string> eval_modes;
    std::optional<std::size_t> eval_k;
    eval->add_option("--calib-dir", eval_calib, "Directory with calibration and eval dumps")->required();
    eval->add_option("--proj-dir", eval_proj, "Directory with trained projections");
    eval->add_option("--mode", eval_modes, "learned, pca or identity (repeatable)")->delimiter(',');
    eval->add_option("--k", eval_k, "Top-k size");
    eval->add_option("--range", eval_range, "Rows begin:end of the eval dump");

    auto* run = app.add_subcommand("run", "Stream one layer through the engine and log every step");
    std::string run_mode = "esa", run_proj;
    std::optional<std::size_t> run_len, run_k, run_eps;
    std::size_t decode_steps = 0, last_chunk = 0;
    bool with_oracle = false;
    run->add_option("--mode", run_mode, "esa, oracle, identity-esa or full-dim")->capture_default_str();
    run->add_option("--stream-len", run_len, "Tokens in the stream");
    run->add_option("--decode-steps", decode_steps, "Trailing single-token steps");
    run->add_option("--last-chunk", last_chunk, "Rows in one final step after the prefill");
    run->add_option("--k", run_k, "Selected middle tokens per step");
    run->add_option("--epsilon", run_eps, "Proximity distance");
    run->add_option("--proj-dir", run_proj, "Directory with trained projections");
    run->add_flag("--with-oracle", with_oracle, "Compare every step against full attention");

    auto* needle = app.add_subcommand("needle", "Planted-needle recall over epsilon and k sweeps");
    std::string needle_proj;
    std::vector<std::size_t> needle_eps, needle_k, needle_pos;
    std::optional<std::size_t> n_planted, needle_len;
    needle->add_option("--epsilon", needle_eps, "Epsilon values")->delimiter(',');
    needle->add_option("--k", needle_k, "k values")->delimiter(',');
    needle->add_option("--n-planted", n_planted, "Number of needles");
    needle->add_option("--positions", needle_pos, "Needle stream positions")->delimiter(',');
    needle->add_option("--stream-len", needle_len, "Tokens in the stream");
    needle->add_option("--proj-dir", needle_proj, "Directory with trained projections");

    auto* analyze = app.add_subcommand("analyze", "Cost-model formulas as JSON");
    h::AnalyzeOptions aopts;
    std::string trace;
    std::optional<std::size_t> gqa;
    analyze->add_option("--middle-len", aopts.middle_len, "l_M")->capture_default_str();
    analyze->add_option("--current-len", aopts.current_len, "l_C")->capture_default_str();
    analyze->add_option("--gqa-heads", gqa, "KV head groups H_G");
    analyze->add_option("--trace", trace, "steps.csv from a run")->check(CLI::ExistingFile);
    std::optional<std::size_t> analyze_k;
    analyze->add_option("--k", analyze_k, "Selected middle tokens per step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    ExperimentConfig cfg = resolve(common);
    const fs::path out = common.out_dir;

    if (calibrate->parsed()) {
        if (tokens) cfg.corpus_tokens = *tokens;
        cfg.validate();
        const auto res = h::cmd_calibrate(cfg, out);
        std::printf("wrote %zu layer dumps (%zu pairs each) to %s\n", res.calibration_files.size(), cfg.corpus_tokens,
                    out.string().c_str());
    } else if (train->parsed()) {
        for (const auto& r : h::cmd_train(cfg, train_calib, out)) {
            std::printf("layer %zu loss %.6g -> %.6g\n", r.layer, r.report.initial_loss, r.report.final_loss);
        }
    } else if (eval->parsed()) {
        h::RecallOptions opts;
        if (!eval_modes.empty()) {
            opts.modes.clear();
            for (const auto& m : eval_modes) opts.modes.push_back(h::recall_mode_from(m));
        }
        opts.k = eval_k;
        if (!eval_range.empty()) opts.range = parse_range(eval_range);
        if (!eval_proj.empty()) opts.proj_dir = eval_proj;
        for (const auto& r : h::cmd_eval_recall(cfg, eval_calib, opts, out)) {
            std::printf("layer %zu %s k=%zu recall %.4f\n", r.layer, h::to_string(r.mode), r.k, r.recall);
        }
    } else if (run->parsed()) {
        if (run_k) cfg.esa.top_k = *run_k;
        if (run_eps) cfg.esa.epsilon = *run_eps;
        cfg.validate();
        h::RunOptions opts;
        opts.mode = h::run_mode_from(run_mode);
        opts.stream_len = run_len;
        opts.decode_steps = decode_steps;
        opts.last_chunk = last_chunk;
        opts.with_oracle = with_oracle;
        if (!run_proj.empty()) opts.proj_dir = run_proj;
        const auto res = h::cmd_run(cfg, opts, out);
        std::cout << res.summary.dump(2) << "\n";
    } else if (needle->parsed()) {
        if (!needle_eps.empty()) cfg.needle.epsilons = needle_eps;
        if (!needle_k.empty()) cfg.needle.ks = needle_k;
        if (!needle_pos.empty()) cfg.needle.positions = needle_pos;
        if (n_planted) cfg.needle.n_planted = *n_planted;
        if (needle_len) cfg.needle.stream_len = *needle_len;
        std::optional<fs::path> proj;
        if (!needle_proj.empty()) proj = needle_proj;
        for (const auto& r : h::cmd_needle(cfg, proj, out)) {
            std::printf("epsilon %zu k %zu recall %.4f\n", r.epsilon, r.k, r.recall);
        }
    } else if (analyze->parsed()) {
        if (analyze_k) cfg.esa.top_k = *analyze_k;
        aopts.gqa_heads = gqa;
        if (!trace.empty()) aopts.trace = trace;
        std::cout << h::cmd_analyze(cfg, aopts, out).dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const esa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const esa::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
