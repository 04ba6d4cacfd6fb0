// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "esa/engine.hpp"
#include "esa/errors.hpp"

namespace esa {

/**
 * Symbolic per-step cost of attention for one layer.
 *
 * Counting convention: a multiply-add is 2 FLOPs; exp, add and divide are 1 each. Max and compare
 * operations (row maxima, the column max, the proximity filter) are not counted: they are cheaper
 * than FLOPs and bounded by the scoring term, since 2*l_C*l_M + (1 + 2*eps)*l_M < 2*l_M*l_C*d'.
 */
struct CostModel {
    std::uint64_t full_dim = 0;       // d_H
    std::uint64_t heads = 0;          // H
    std::uint64_t reduced_dim = 0;    // d'
    std::uint64_t initial_len = 0;    // l_I
    std::uint64_t middle_len = 0;     // l_M
    std::uint64_t local_len = 0;      // l_L
    std::uint64_t current_len = 0;    // l_C
    std::uint64_t top_k = 0;          // k
    std::uint64_t epsilon = 0;
    std::uint64_t head_dim = 0;       // d
    std::optional<std::uint64_t> gqa_heads;  // H_G

    std::uint64_t total_len() const noexcept { return initial_len + middle_len + local_len + current_len; }

    static CostModel from_config(const EsaConfig& cfg, std::uint64_t middle_len, std::uint64_t current_len,
                                 std::optional<std::uint64_t> gqa_heads = std::nullopt) {
        CostModel m;
        m.full_dim = cfg.full_dim();
        m.heads = cfg.heads;
        m.reduced_dim = cfg.reduced_dim;
        m.initial_len = cfg.initial_len;
        m.middle_len = middle_len;
        m.local_len = cfg.local_len;
        m.current_len = current_len;
        m.top_k = cfg.top_k;
        m.epsilon = cfg.epsilon;
        m.head_dim = cfg.head_dim;
        m.gqa_heads = gqa_heads;
        return m;
    }
};

/// Which ESA cost components to include.
struct EsaTerms {
    bool projection = true;
    bool selection = true;
    bool attention = true;
};

/// (4 d_H + 3H) l_C (l_I + l_M + l_L + l_C): QK dot 2 d_H, softmax 3H, AV dot 2 d_H per logit.
inline std::uint64_t full_attention_flops(const CostModel& m) {
    return (4 * m.full_dim + 3 * m.heads) * m.current_len * m.total_len();
}

/// Compressing l_C queries and l_C keys: 4 l_C d_H d' + 2 l_C d'.
inline std::uint64_t projection_flops(const CostModel& m) {
    return 4 * m.current_len * m.full_dim * m.reduced_dim + 2 * m.current_len * m.reduced_dim;
}

/// Compressed scoring plus max-normalization: 2 l_M l_C d' + l_M l_C.
inline std::uint64_t selection_flops(const CostModel& m) {
    return 2 * m.middle_len * m.current_len * m.reduced_dim + m.middle_len * m.current_len;
}

/// Attention over I, the k selected tokens, L and C.
inline std::uint64_t sparse_attention_flops(const CostModel& m) {
    return (4 * m.full_dim + 3 * m.heads) * m.current_len *
           (m.initial_len + m.local_len + m.current_len + m.top_k);
}

inline std::uint64_t esa_flops(const CostModel& m, EsaTerms terms = {}) {
    std::uint64_t total = 0;
    if (terms.projection) total += projection_flops(m);
    if (terms.selection) total += selection_flops(m);
    if (terms.attention) total += sparse_attention_flops(m);
    return total;
}

/// Closed-form ratio esa/full with l_C cancelled:
/// (l_I+k+l_L+l_C)/(l_I+l_M+l_L+l_C) + (4 d_H d' + 2d' + 2d' l_M + l_M)/((4 d_H + 3H)(l_I+l_M+l_L+l_C)).
inline double reduction_ratio_exact(const CostModel& m) {
    const double total = static_cast<double>(m.total_len());
    const double d_h = static_cast<double>(m.full_dim);
    const double dp = static_cast<double>(m.reduced_dim);
    const double l_m = static_cast<double>(m.middle_len);
    const double attn = static_cast<double>(m.initial_len + m.top_k + m.local_len + m.current_len) / total;
    const double overhead = (4.0 * d_h * dp + 2.0 * dp + 2.0 * dp * l_m + l_m) /
                            ((4.0 * d_h + 3.0 * static_cast<double>(m.heads)) * total);
    return attn + overhead;
}

/// Limit of the exact ratio as l_M grows: (2d' + 1) / (4 d_H + 3H).
inline double reduction_ratio_asymptotic(const CostModel& m) {
    return (2.0 * static_cast<double>(m.reduced_dim) + 1.0) /
           (4.0 * static_cast<double>(m.full_dim) + 3.0 * static_cast<double>(m.heads));
}

/// Extra memory of the compressed middle keys relative to the full KV cache: d' / (2 d_G), d_G = H_G d.
inline double cache_overhead_ratio(const CostModel& m) {
    if (!m.gqa_heads.has_value()) throw ConfigError("cache_overhead_ratio: GQA head count H_G is required");
    if (m.head_dim == 0 || *m.gqa_heads == 0) throw ConfigError("cache_overhead_ratio: H_G and d must be positive");
    return static_cast<double>(m.reduced_dim) / (2.0 * static_cast<double>(*m.gqa_heads * m.head_dim));
}

}  // namespace esa
