// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "esa/compression.hpp"
#include "esa/errors.hpp"
#include "esa/kv_cache.hpp"
#include "esa/selection.hpp"
#include "esa/tensor.hpp"

namespace esa {

struct EsaConfig {
    std::size_t heads = 4;
    std::size_t head_dim = 32;
    std::size_t reduced_dim = 16;     // d'
    std::size_t initial_len = 32;     // l_I
    std::size_t local_len = 256;      // l_L
    std::size_t top_k = 128;          // k
    std::size_t epsilon = 0;          // proximity distance
    std::size_t chunk = 512;          // max prefill rows per step
    std::optional<std::size_t> global_position;  // w; defaults to local_len
    double rope_base = 10000.0;
    HeadMode head_mode = HeadMode::uniform_sum;
    ScoreBasis scoring = ScoreBasis::compressed;

    std::size_t full_dim() const noexcept { return heads * head_dim; }
    std::size_t fixed_position() const noexcept { return global_position.value_or(local_len); }
    RopeParams rope() const { return RopeParams{head_dim, rope_base}; }

    /// d' <= d_H is accepted so that the lossless identity pair (d' = d_H) can drive the engine.
    void validate() const {
        if (heads == 0 || head_dim == 0) throw ConfigError("config: heads and head_dim must be positive");
        if (head_dim % 2 != 0) throw ConfigError("config: head_dim must be even for rotary embedding");
        if (reduced_dim == 0 || reduced_dim > full_dim()) {
            throw ConfigError("config: reduced_dim " + std::to_string(reduced_dim) + " must be in [1, d_H=" +
                              std::to_string(full_dim()) + "]");
        }
        if (chunk == 0) throw ConfigError("config: chunk must be >= 1");
        if (!(rope_base > 1.0)) throw ConfigError("config: rope_base must be > 1");
        if (head_mode == HeadMode::individual_max && scoring == ScoreBasis::compressed) {
            throw ConfigError("config: individual_max head mode requires full_dim scoring");
        }
    }

    /// l_I = 128, k = 2048, l_L = 4096, H = 32, d = 128, d' = 128.
    static EsaConfig paper() {
        EsaConfig c;
        c.heads = 32;
        c.head_dim = 128;
        c.reduced_dim = 128;
        c.initial_len = 128;
        c.local_len = 4096;
        c.top_k = 2048;
        c.chunk = 512;
        return c;
    }

    static EsaConfig desk() { return EsaConfig{}; }
};

/// Query/key/value rows for the current tokens.
struct QkvChunk {
    Matrix queries;
    Matrix keys;
    Matrix values;

    std::size_t rows() const noexcept { return queries.rows; }
};

struct FusedAttentionOutput {
    AttentionBranchOutput fused;      // output plus combined lse
    std::vector<double> local_lse;    // [row * heads + head]
    std::vector<double> global_lse;
};

/**
 * Two-branch attention for the current rows, merged through their log-sum-exp normalizers.
 *
 * Local branch: keys are the local window followed by the current rows, at positions 0..n-1; query i
 * sits at position n - l_C + i and is causally masked. Global branch: keys (initial + selected
 * middle) all sit at position 0 and every query at position w, unmasked. The merged result equals a
 * single softmax over both key sets.
 */
inline FusedAttentionOutput fused_attention(const Matrix& q_current, const GatheredKv& kv, const EsaConfig& cfg,
                                            FlopCounter* counter = nullptr) {
    if (kv.global_keys.rows == 0 && kv.local_keys.rows == 0) {
        throw ConfigError("fused_attention: both branches empty; the local block must include the current rows");
    }
    const RopeParams rope = cfg.rope();
    const std::size_t l_c = q_current.rows;
    const std::size_t n_local = kv.local_keys.rows;
    if (n_local < l_c) {
        throw ShapeError("fused_attention: local block (" + std::to_string(n_local) + " rows) must include the " +
                         std::to_string(l_c) + " current rows");
    }
    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));

    std::vector<std::size_t> positions(l_c);
    Matrix local_q = q_current;
    for (std::size_t i = 0; i < l_c; ++i) positions[i] = n_local - l_c + i;
    rope_rows(local_q, positions, rope);

    Matrix local_k = kv.local_keys;
    positions.resize(n_local);
    for (std::size_t j = 0; j < n_local; ++j) positions[j] = j;
    rope_rows(local_k, positions, rope);

    Matrix global_q = q_current;
    positions.assign(l_c, cfg.fixed_position());
    rope_rows(global_q, positions, rope);

    const auto local = attention_branch(local_q, local_k, kv.local_values, cfg.heads, true, scale, counter);
    const auto global = attention_branch(global_q, kv.global_keys, kv.global_values, cfg.heads, false, scale, counter);

    FusedAttentionOutput out;
    out.local_lse = local.lse;
    out.global_lse = global.lse;
    out.fused.heads = cfg.heads;
    out.fused.output = Matrix(l_c, q_current.cols);
    out.fused.lse.resize(l_c * cfg.heads);
    const std::size_t d = cfg.head_dim;
    for (std::size_t i = 0; i < l_c; ++i) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const double a = local.lse_at(i, h);
            const double b = global.lse_at(i, h);
            const double m = std::max(a, b);
            const double wa = std::isinf(a) ? 0.0 : std::exp(a - m);
            const double wb = std::isinf(b) ? 0.0 : std::exp(b - m);
            const double total = wa + wb;
            const double fa = wa / total;
            const double fb = wb / total;
            out.fused.lse[i * cfg.heads + h] = m + std::log(total);
            const auto lo = local.output.row(i).subspan(h * d, d);
            const auto go = global.output.row(i).subspan(h * d, d);
            auto dst = out.fused.output.row(i).subspan(h * d, d);
            for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<float>(fa * lo[c] + fb * go[c]);
        }
    }
    // 2 exp + 1 add + 2 divide per row and head; 2 multiply + 1 add per output element.
    count_flops(counter, static_cast<std::uint64_t>(l_c) * (5 * cfg.heads + 3 * q_current.cols));
    return out;
}

/**
 * Picks middle tokens for the given query rows. If l_M <= k every middle token is taken and no
 * scoring is done. Otherwise: score (compressed or full-dimension), max-normalize per query row,
 * take the column max, apply the proximity filter, and keep the top k.
 */
inline SelectionResult select_middle(const SegmentedKvCache& cache, const ProjectionPair& pair, const EsaConfig& cfg,
                                     const Matrix& queries, FlopCounter* counter = nullptr, bool* scored = nullptr) {
    const std::size_t l_m = cache.middle_len();
    if (scored != nullptr) *scored = false;
    if (l_m <= cfg.top_k) return select_all(l_m);
    if (cfg.top_k == 0) return SelectionResult{};

    Matrix raw(queries.rows, l_m);
    if (cfg.scoring == ScoreBasis::compressed) {
        const Matrix cq = compress_rows(queries, pair.query, counter);
        const Matrix& ck = cache.middle_compressed();
        for (std::size_t i = 0; i < queries.rows; ++i) {
            for (std::size_t m = 0; m < l_m; ++m) raw(i, m) = approx_score(cq.row(i), ck.row(m));
        }
        count_flops(counter, 2 * static_cast<std::uint64_t>(queries.rows) * l_m * cfg.reduced_dim);
    } else {
        const Matrix& mk = cache.middle_keys();
        for (std::size_t i = 0; i < queries.rows; ++i) {
            for (std::size_t m = 0; m < l_m; ++m) {
                raw(i, m) = cfg.head_mode == HeadMode::uniform_sum ? head_sum_score(queries.row(i), mk.row(m))
                                                                   : head_max_score(queries.row(i), mk.row(m), cfg.heads);
            }
        }
        count_flops(counter, 2 * static_cast<std::uint64_t>(queries.rows) * l_m * cfg.full_dim());
    }
    const auto normalized = normalize_scores(raw, cfg.scoring, cfg.head_mode, counter);
    const auto smoothed = proximity_smooth(normalized, cfg.epsilon);
    if (scored != nullptr) *scored = true;
    return select_top_k(smoothed, cfg.top_k);
}

/// Per-step record of what the engine did.
struct StepTrace {
    SelectionResult selection;
    std::vector<double> local_lse;
    std::vector<double> global_lse;
    Matrix output;
    std::uint64_t flop_count = 0;
    std::size_t current_len = 0;  // l_C
    std::size_t middle_len = 0;   // l_M seen by selection, before this step's append
    bool scored = false;          // false when every middle token was taken without scoring
    std::size_t migrated = 0;
};

/**
 * Single-layer selective attention over a growing stream.
 *
 * Each step selects up to k middle tokens for the current rows, runs the fused two-branch attention
 * and then appends the current rows to the cache. The FLOP counter covers projection, scoring,
 * normalization, both attention branches and the fusion; rotary embedding and max/compare
 * operations are not counted.
 */
class EsaEngine {
public:
    EsaEngine(EsaConfig cfg, ProjectionPair pair) : cfg_(std::move(cfg)), pair_(std::move(pair)) {
        cfg_.validate();
        pair_.validate();
        if (pair_.full_dim() != cfg_.full_dim() || pair_.reduced_dim() != cfg_.reduced_dim) {
            throw DimensionError("engine: projection is " + std::to_string(pair_.reduced_dim()) + "x" +
                                 std::to_string(pair_.full_dim()) + ", config wants " +
                                 std::to_string(cfg_.reduced_dim) + "x" + std::to_string(cfg_.full_dim()));
        }
        cache_ = SegmentedKvCache(cfg_.initial_len, cfg_.local_len, cfg_.full_dim(), cfg_.reduced_dim,
                                  pair_.layer_index);
    }

    StepTrace prefill(const QkvChunk& chunk) {
        if (chunk.rows() > cfg_.chunk) {
            throw ConfigError("prefill: chunk of " + std::to_string(chunk.rows()) + " rows exceeds configured " +
                              std::to_string(cfg_.chunk));
        }
        return step(chunk);
    }

    StepTrace decode_step(std::span<const float> query, std::span<const float> key, std::span<const float> value) {
        const std::size_t w = cfg_.full_dim();
        QkvChunk chunk{Matrix(1, w, std::vector<float>(query.begin(), query.end())),
                       Matrix(1, w, std::vector<float>(key.begin(), key.end())),
                       Matrix(1, w, std::vector<float>(value.begin(), value.end()))};
        return step(chunk);
    }

    /// Selection the engine would make for these query rows against the current middle segment.
    SelectionResult select(const Matrix& queries, FlopCounter* counter = nullptr, bool* scored = nullptr) const {
        return select_middle(cache_, pair_, cfg_, queries, counter, scored);
    }

    const SegmentedKvCache& cache() const noexcept { return cache_; }
    const EsaConfig& config() const noexcept { return cfg_; }
    const ProjectionPair& projection() const noexcept { return pair_; }

private:
    StepTrace step(const QkvChunk& chunk) {
        const std::size_t w = cfg_.full_dim();
        if (chunk.rows() == 0) throw DimensionError("step: empty chunk");
        if (chunk.queries.cols != w || chunk.keys.cols != w || chunk.values.cols != w ||
            chunk.keys.rows != chunk.rows() || chunk.values.rows != chunk.rows()) {
            throw DimensionError("step: chunk rows must be " + std::to_string(w) + " wide with matching counts");
        }
        FlopCounter counter;
        StepTrace trace;
        trace.current_len = chunk.rows();
        trace.middle_len = cache_.middle_len();
        trace.selection = select(chunk.queries, &counter, &trace.scored);

        GatheredKv kv = gather_selected(cache_, trace.selection);
        kv.local_keys.append_rows(chunk.keys);
        kv.local_values.append_rows(chunk.values);
        auto fused = fused_attention(chunk.queries, kv, cfg_, &counter);

        const auto event = cache_.append_chunk(chunk.keys, chunk.values, pair_, &counter);
        trace.migrated = event.moved_count;
        trace.local_lse = std::move(fused.local_lse);
        trace.global_lse = std::move(fused.global_lse);
        trace.output = std::move(fused.fused.output);
        trace.flop_count = counter.count;
        return trace;
    }

    EsaConfig cfg_;
    ProjectionPair pair_;
    SegmentedKvCache cache_;
};

}  // namespace esa
