// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "esa/compression.hpp"
#include "esa/engine.hpp"
#include "esa/errors.hpp"
#include "esa/selection.hpp"
#include "esa/tensor.hpp"

namespace esa {

struct NeedleSetup {
    std::size_t stream_len = 4096;
    std::vector<std::size_t> planted_positions;  // stream positions; must land in the middle segment
    std::uint64_t seed = 0;
    double margin = 1.0;  // required score gap between the weakest needle and the strongest background key
};

/// A stream with planted keys, already pushed through an engine, plus the probe query.
struct NeedleStream {
    EsaConfig config;
    ProjectionPair pair;
    SegmentedKvCache cache;
    Matrix probe;                                 // 1 x d_H
    std::vector<std::size_t> planted_middle;      // middle-segment indices of the needles, ascending
    double observed_margin = 0.0;                 // min needle score - max background score, in the scoring basis
};

struct NeedleOutcome {
    double recall = 0.0;
    SelectionResult selection;
};

namespace detail {

inline float needle_score(const EsaConfig& cfg, const ProjectionPair& pair, std::span<const float> probe,
                          std::span<const float> key) {
    if (cfg.scoring == ScoreBasis::compressed) {
        return approx_score(compress(probe, pair.query), compress(key, pair.key));
    }
    return cfg.head_mode == HeadMode::uniform_sum ? head_sum_score(probe, key) : head_max_score(probe, key, cfg.heads);
}

}  // namespace detail

/**
 * Builds a random stream in which the keys at the planted positions are pushed along the direction
 * that raises their score against a fixed probe query, scaled until every needle beats every
 * background key by `margin`. The stream is run through an engine in prefill chunks; the probe is
 * not yet applied.
 */
inline NeedleStream build_needle_stream(const EsaConfig& cfg, const ProjectionPair& pair, const NeedleSetup& setup) {
    cfg.validate();
    const std::size_t w = cfg.full_dim();
    const std::size_t middle_begin = cfg.initial_len;
    const std::size_t middle_end = setup.stream_len >= cfg.local_len ? setup.stream_len - cfg.local_len : 0;
    std::vector<std::size_t> planted = setup.planted_positions;
    std::sort(planted.begin(), planted.end());
    planted.erase(std::unique(planted.begin(), planted.end()), planted.end());
    for (std::size_t p : planted) {
        if (p < middle_begin || p >= middle_end) {
            throw ConfigError("needle: planted position " + std::to_string(p) + " is not in the middle segment [" +
                              std::to_string(middle_begin) + ", " + std::to_string(middle_end) + ") at probe time");
        }
    }

    Rng rng(setup.seed);
    Matrix queries = random_normal(setup.stream_len, w, rng);
    Matrix keys = random_normal(setup.stream_len, w, rng);
    Matrix values = random_normal(setup.stream_len, w, rng);
    Matrix probe = random_normal(1, w, rng);

    // Direction that increases the score against the probe in the scoring basis.
    std::vector<float> direction(probe.row(0).begin(), probe.row(0).end());
    if (cfg.scoring == ScoreBasis::compressed) {
        const auto u = compress(probe.row(0), pair.query);
        std::fill(direction.begin(), direction.end(), 0.0f);
        for (std::size_t r = 0; r < u.size(); ++r) {
            for (std::size_t c = 0; c < w; ++c) direction[c] += pair.key.weight(r, c) * u[r];
        }
    }

    float background = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < setup.stream_len; ++j) {
        if (!std::binary_search(planted.begin(), planted.end(), j)) {
            background = std::max(background, detail::needle_score(cfg, pair, probe.row(0), keys.row(j)));
        }
    }
    for (std::size_t p : planted) {
        std::vector<float> base(keys.row(p).begin(), keys.row(p).end());
        double alpha = 1.0;
        for (int attempt = 0;; ++attempt) {
            auto row = keys.row(p);
            for (std::size_t c = 0; c < w; ++c) row[c] = static_cast<float>(base[c] + alpha * direction[c]);
            if (detail::needle_score(cfg, pair, probe.row(0), row) >= background + setup.margin) break;
            if (attempt > 60) throw ConfigError("needle: cannot reach the requested margin with this projection");
            alpha *= 2.0;
        }
    }

    EsaEngine engine(cfg, pair);
    for (std::size_t begin = 0; begin < setup.stream_len; begin += cfg.chunk) {
        const std::size_t end = std::min(setup.stream_len, begin + cfg.chunk);
        engine.prefill(QkvChunk{queries.slice_rows(begin, end), keys.slice_rows(begin, end), values.slice_rows(begin, end)});
    }

    NeedleStream out{cfg, pair, engine.cache(), std::move(probe), {}, 0.0};
    const auto& positions = out.cache.middle_positions();
    for (std::size_t p : planted) {
        const auto it = std::lower_bound(positions.begin(), positions.end(), static_cast<std::uint64_t>(p));
        if (it == positions.end() || *it != p) throw ConfigError("needle: planted row missing from middle segment");
        out.planted_middle.push_back(static_cast<std::size_t>(it - positions.begin()));
    }

    // Margin check against what the cache actually holds.
    float weakest = std::numeric_limits<float>::infinity();
    float strongest_other = -std::numeric_limits<float>::infinity();
    for (std::size_t m = 0; m < out.cache.middle_len(); ++m) {
        const float s = cfg.scoring == ScoreBasis::compressed
                            ? approx_score(compress(out.probe.row(0), pair.query), out.cache.middle_compressed().row(m))
                            : detail::needle_score(cfg, pair, out.probe.row(0), out.cache.middle_keys().row(m));
        if (std::binary_search(out.planted_middle.begin(), out.planted_middle.end(), m)) {
            weakest = std::min(weakest, s);
        } else {
            strongest_other = std::max(strongest_other, s);
        }
    }
    out.observed_margin = static_cast<double>(weakest) - static_cast<double>(strongest_other);
    if (!out.planted_middle.empty() && out.observed_margin <= 0.0) {
        throw ConfigError("needle: construction margin violated in the cache");
    }
    return out;
}

/// Fraction of needles selected by the probe query under the given selection settings.
inline NeedleOutcome needle_recall(const NeedleStream& stream, std::size_t top_k, std::size_t epsilon) {
    EsaConfig cfg = stream.config;
    cfg.top_k = top_k;
    cfg.epsilon = epsilon;
    NeedleOutcome out;
    out.selection = select_middle(stream.cache, stream.pair, cfg, stream.probe);
    if (stream.planted_middle.empty()) return out;
    std::size_t hits = 0;
    for (std::size_t m : stream.planted_middle) {
        hits += std::binary_search(out.selection.indices.begin(), out.selection.indices.end(), m) ? 1 : 0;
    }
    out.recall = static_cast<double>(hits) / static_cast<double>(stream.planted_middle.size());
    return out;
}

/// Builds the stream and probes it with the config's own k and epsilon.
inline NeedleOutcome planted_needle_recall(const EsaConfig& cfg, const ProjectionPair& pair, const NeedleSetup& setup) {
    const auto stream = build_needle_stream(cfg, pair, setup);
    return needle_recall(stream, cfg.top_k, cfg.epsilon);
}

}  // namespace esa
