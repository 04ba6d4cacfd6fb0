// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reference attention used to check the engine. Everything here is written independently of the
// kernels in tensor.hpp/engine.hpp: its own rotation, one softmax over the union of both key sets,
// and long double accumulation throughout.

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "esa/engine.hpp"
#include "esa/kv_cache.hpp"
#include "esa/tensor.hpp"

namespace esa::oracle {

namespace detail {

inline std::vector<long double> rotate(std::span<const float> vec, std::size_t head_dim, std::size_t position,
                                       double base) {
    std::vector<long double> out(vec.begin(), vec.end());
    for (std::size_t off = 0; off < vec.size(); off += head_dim) {
        for (std::size_t i = 0; i < head_dim / 2; ++i) {
            const long double theta = static_cast<long double>(position) *
                                      std::pow(static_cast<long double>(base),
                                               -2.0L * static_cast<long double>(i) / static_cast<long double>(head_dim));
            const long double x0 = vec[off + 2 * i];
            const long double x1 = vec[off + 2 * i + 1];
            out[off + 2 * i] = x0 * std::cos(theta) - x1 * std::sin(theta);
            out[off + 2 * i + 1] = x0 * std::sin(theta) + x1 * std::cos(theta);
        }
    }
    return out;
}

}  // namespace detail

/**
 * One softmax per query row and head over [global keys at position 0 seen from position w] and
 * [local keys at 0..n-1 seen from n - l_C + i, causally masked].
 */
inline Matrix monolithic_attention(const Matrix& q_current, const GatheredKv& kv, const EsaConfig& cfg) {
    const std::size_t d = cfg.head_dim;
    const std::size_t l_c = q_current.rows;
    const std::size_t n_local = kv.local_keys.rows;
    const std::size_t n_global = kv.global_keys.rows;
    const long double scale = 1.0L / std::sqrt(static_cast<long double>(d));

    std::vector<std::vector<long double>> gk, lk;
    for (std::size_t j = 0; j < n_global; ++j) gk.push_back(detail::rotate(kv.global_keys.row(j), d, 0, cfg.rope_base));
    for (std::size_t j = 0; j < n_local; ++j) lk.push_back(detail::rotate(kv.local_keys.row(j), d, j, cfg.rope_base));

    Matrix out(l_c, q_current.cols);
    for (std::size_t i = 0; i < l_c; ++i) {
        const auto gq = detail::rotate(q_current.row(i), d, cfg.fixed_position(), cfg.rope_base);
        const auto lq = detail::rotate(q_current.row(i), d, n_local - l_c + i, cfg.rope_base);
        const std::size_t visible = n_local - l_c + i + 1;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            std::vector<long double> logits;
            std::vector<const float*> vals;
            for (std::size_t j = 0; j < n_global; ++j) {
                long double s = 0;
                for (std::size_t c = 0; c < d; ++c) s += gq[h * d + c] * gk[j][h * d + c];
                logits.push_back(s * scale);
                vals.push_back(kv.global_values.row(j).data() + h * d);
            }
            for (std::size_t j = 0; j < visible; ++j) {
                long double s = 0;
                for (std::size_t c = 0; c < d; ++c) s += lq[h * d + c] * lk[j][h * d + c];
                logits.push_back(s * scale);
                vals.push_back(kv.local_values.row(j).data() + h * d);
            }
            long double mx = -std::numeric_limits<long double>::infinity();
            for (long double x : logits) mx = std::max(mx, x);
            long double z = 0;
            for (long double& x : logits) {
                x = std::exp(x - mx);
                z += x;
            }
            for (std::size_t c = 0; c < d; ++c) {
                long double acc = 0;
                for (std::size_t j = 0; j < logits.size(); ++j) acc += logits[j] / z * vals[j][c];
                out(i, h * d + c) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

/// Attention over every cached token (all of I and M in the global set) plus the current rows.
inline Matrix full_attention_oracle(const SegmentedKvCache& cache, const QkvChunk& current, const EsaConfig& cfg) {
    GatheredKv kv;
    kv.global_keys = vstack(cache.initial_keys(), cache.middle_keys());
    kv.global_values = vstack(cache.initial_values(), cache.middle_values());
    kv.local_keys = vstack(cache.local_keys(), current.keys);
    kv.local_values = vstack(cache.local_values(), current.values);
    return monolithic_attention(current.queries, kv, cfg);
}

}  // namespace esa::oracle
