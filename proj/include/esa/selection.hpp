// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <deque>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "esa/errors.hpp"
#include "esa/tensor.hpp"

namespace esa {

enum class ScoreBasis { full_dim, compressed };
enum class HeadMode { uniform_sum, individual_max };

/// One score per middle-segment token.
struct ImportanceScores {
    std::vector<float> values;
    ScoreBasis basis = ScoreBasis::compressed;
    HeadMode head_mode = HeadMode::uniform_sum;

    std::size_t size() const noexcept { return values.size(); }
};

/// Selected middle-token indices in ascending order.
struct SelectionResult {
    std::vector<std::size_t> indices;
    std::size_t k_effective = 0;

    friend bool operator==(const SelectionResult&, const SelectionResult&) = default;
};

/// Sum over heads of per-head dot products, evaluated as one dot product of the concatenated vectors.
inline float head_sum_score(std::span<const float> query_concat, std::span<const float> key_concat) {
    if (query_concat.size() != key_concat.size()) {
        throw DimensionError("head_sum_score: length mismatch " + std::to_string(query_concat.size()) + " vs " +
                             std::to_string(key_concat.size()));
    }
    return dot(query_concat, key_concat);
}

/// Max over heads of per-head dot products ("each head votes").
inline float head_max_score(std::span<const float> query_concat, std::span<const float> key_concat,
                            std::size_t heads) {
    if (heads == 0 || query_concat.size() != key_concat.size() || query_concat.size() % heads != 0) {
        throw DimensionError("head_max_score: head layout mismatch");
    }
    const std::size_t d = query_concat.size() / heads;
    float best = -std::numeric_limits<float>::infinity();
    for (std::size_t h = 0; h < heads; ++h) {
        best = std::max(best, dot(query_concat.subspan(h * d, d), key_concat.subspan(h * d, d)));
    }
    return best;
}

/**
 * Aggregates a raw score matrix (rows = current tokens, cols = middle tokens) into one score per
 * middle token: each row is shifted so its maximum is 0, then the column-wise max is taken. Every
 * output is <= 0 and at least one is exactly 0.
 */
inline ImportanceScores normalize_scores(const Matrix& raw, ScoreBasis basis = ScoreBasis::compressed,
                                         HeadMode mode = HeadMode::uniform_sum, FlopCounter* counter = nullptr) {
    if (raw.rows == 0 || raw.cols == 0) throw DimensionError("normalize_scores: empty score matrix");
    ImportanceScores out;
    out.basis = basis;
    out.head_mode = mode;
    out.values.assign(raw.cols, -std::numeric_limits<float>::infinity());
    for (std::size_t r = 0; r < raw.rows; ++r) {
        const auto row = raw.row(r);
        const float row_max = *std::max_element(row.begin(), row.end());
        for (std::size_t m = 0; m < raw.cols; ++m) {
            out.values[m] = std::max(out.values[m], row[m] - row_max);
        }
    }
    count_flops(counter, static_cast<std::uint64_t>(raw.rows) * raw.cols);
    return out;
}

/// Replaces each score with the max over the window [j - epsilon, j + epsilon], clamped to the segment.
inline ImportanceScores proximity_smooth(const ImportanceScores& scores, std::size_t epsilon) {
    ImportanceScores out = scores;
    const std::size_t n = scores.size();
    if (epsilon == 0 || n == 0) return out;

    // Monotonic deque of candidate indices with decreasing scores.
    std::deque<std::size_t> window;
    std::size_t next = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t hi = std::min(n - 1, j + epsilon);
        for (; next <= hi; ++next) {
            while (!window.empty() && scores.values[window.back()] <= scores.values[next]) window.pop_back();
            window.push_back(next);
        }
        const std::size_t lo = j >= epsilon ? j - epsilon : 0;
        while (window.front() < lo) window.pop_front();
        out.values[j] = scores.values[window.front()];
    }
    return out;
}

/// Indices of the min(k, n) highest scores; ties go to the earlier index. Returned in ascending order.
inline SelectionResult select_top_k(std::span<const float> scores, std::size_t k) {
    SelectionResult out;
    const std::size_t n = scores.size();
    out.k_effective = std::min(k, n);
    out.indices.resize(n);
    std::iota(out.indices.begin(), out.indices.end(), std::size_t{0});
    if (out.k_effective < n) {
        const auto better = [&](std::size_t a, std::size_t b) {
            return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        };
        std::nth_element(out.indices.begin(), out.indices.begin() + static_cast<std::ptrdiff_t>(out.k_effective),
                         out.indices.end(), better);
        out.indices.resize(out.k_effective);
        std::sort(out.indices.begin(), out.indices.end());
    }
    return out;
}

inline SelectionResult select_top_k(const ImportanceScores& scores, std::size_t k) {
    return select_top_k(std::span<const float>(scores.values), k);
}

/// Selection of every index in [0, n).
inline SelectionResult select_all(std::size_t n) {
    SelectionResult out;
    out.indices.resize(n);
    std::iota(out.indices.begin(), out.indices.end(), std::size_t{0});
    out.k_effective = n;
    return out;
}

}  // namespace esa
