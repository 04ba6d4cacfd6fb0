// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "esa/compression.hpp"
#include "esa/errors.hpp"
#include "esa/selection.hpp"
#include "esa/tensor.hpp"

namespace esa {

struct MigrationEvent {
    std::size_t moved_count = 0;
    std::size_t new_middle_len = 0;
};

/**
 * Per-layer KV storage split into initial (I), middle (M) and local (L) segments.
 *
 * Rows arrive in stream order. The initial segment fills first; after that rows enter the local
 * window, and whatever overflows the window moves oldest-first into the middle segment, where its
 * key is compressed once and cached beside the full-dimension row. Keys are stored without
 * positional rotation. Nothing is ever evicted.
 */
class SegmentedKvCache {
public:
    SegmentedKvCache() = default;
    SegmentedKvCache(std::size_t initial_capacity, std::size_t local_capacity, std::size_t full_dim,
                     std::size_t reduced_dim, std::size_t layer_index = 0)
        : initial_capacity_(initial_capacity),
          local_capacity_(local_capacity),
          full_dim_(full_dim),
          reduced_dim_(reduced_dim),
          layer_index_(layer_index),
          initial_keys_(Matrix::with_cols(full_dim)),
          initial_values_(Matrix::with_cols(full_dim)),
          middle_keys_(Matrix::with_cols(full_dim)),
          middle_values_(Matrix::with_cols(full_dim)),
          middle_compressed_(Matrix::with_cols(reduced_dim)),
          local_keys_(Matrix::with_cols(full_dim)),
          local_values_(Matrix::with_cols(full_dim)) {}

    MigrationEvent append_chunk(const Matrix& keys, const Matrix& values, const ProjectionPair& pair,
                                FlopCounter* counter = nullptr) {
        if (keys.rows == 0) throw DimensionError("append_chunk: empty chunk");
        if (keys.rows != values.rows || keys.cols != full_dim_ || values.cols != full_dim_) {
            throw DimensionError("append_chunk: chunk shape does not match cache width " + std::to_string(full_dim_));
        }
        if (pair.full_dim() != full_dim_ || pair.reduced_dim() != reduced_dim_) {
            throw DimensionError("append_chunk: projection is " + std::to_string(pair.reduced_dim()) + "x" +
                                 std::to_string(pair.full_dim()) + ", cache expects " + std::to_string(reduced_dim_) +
                                 "x" + std::to_string(full_dim_));
        }
        if (pair.layer_index != layer_index_) {
            throw ConfigError("append_chunk: projection layer " + std::to_string(pair.layer_index) +
                              " used with cache layer " + std::to_string(layer_index_));
        }

        for (std::size_t r = 0; r < keys.rows; ++r) {
            const std::uint64_t pos = next_position_++;
            if (initial_keys_.rows < initial_capacity_) {
                initial_keys_.append_row(keys.row(r));
                initial_values_.append_row(values.row(r));
                initial_positions_.push_back(pos);
            } else {
                local_keys_.append_row(keys.row(r));
                local_values_.append_row(values.row(r));
                local_positions_.push_back(pos);
            }
        }

        MigrationEvent event;
        if (local_keys_.rows > local_capacity_) {
            const std::size_t moved = local_keys_.rows - local_capacity_;
            std::vector<float> compressed(reduced_dim_);
            for (std::size_t r = 0; r < moved; ++r) {
                middle_keys_.append_row(local_keys_.row(r));
                middle_values_.append_row(local_values_.row(r));
                compress_into(local_keys_.row(r), pair.key, compressed, counter);
                middle_compressed_.append_row(compressed);
                middle_positions_.push_back(local_positions_[r]);
            }
            local_keys_.erase_front_rows(moved);
            local_values_.erase_front_rows(moved);
            local_positions_.erase(local_positions_.begin(), local_positions_.begin() + static_cast<std::ptrdiff_t>(moved));
            event.moved_count = moved;
        }
        event.new_middle_len = middle_keys_.rows;
        return event;
    }

    std::size_t initial_len() const noexcept { return initial_keys_.rows; }
    std::size_t middle_len() const noexcept { return middle_keys_.rows; }
    std::size_t local_len() const noexcept { return local_keys_.rows; }
    std::size_t total_len() const noexcept { return initial_len() + middle_len() + local_len(); }

    std::size_t initial_capacity() const noexcept { return initial_capacity_; }
    std::size_t local_capacity() const noexcept { return local_capacity_; }
    std::size_t full_dim() const noexcept { return full_dim_; }
    std::size_t reduced_dim() const noexcept { return reduced_dim_; }
    std::size_t layer_index() const noexcept { return layer_index_; }
    std::uint64_t next_position() const noexcept { return next_position_; }

    const Matrix& initial_keys() const noexcept { return initial_keys_; }
    const Matrix& initial_values() const noexcept { return initial_values_; }
    const Matrix& middle_keys() const noexcept { return middle_keys_; }
    const Matrix& middle_values() const noexcept { return middle_values_; }
    const Matrix& middle_compressed() const noexcept { return middle_compressed_; }
    const Matrix& local_keys() const noexcept { return local_keys_; }
    const Matrix& local_values() const noexcept { return local_values_; }

    /// Original stream positions of the rows in each segment.
    const std::vector<std::uint64_t>& initial_positions() const noexcept { return initial_positions_; }
    const std::vector<std::uint64_t>& middle_positions() const noexcept { return middle_positions_; }
    const std::vector<std::uint64_t>& local_positions() const noexcept { return local_positions_; }

    /// Rebuilds a cache from stored segments (snapshot replay). Checks the segment invariants.
    static SegmentedKvCache restore(std::size_t initial_capacity, std::size_t local_capacity, std::size_t layer_index,
                                    Matrix initial_keys, Matrix initial_values, Matrix middle_keys, Matrix middle_values,
                                    Matrix middle_compressed, Matrix local_keys, Matrix local_values,
                                    std::vector<std::uint64_t> initial_positions,
                                    std::vector<std::uint64_t> middle_positions,
                                    std::vector<std::uint64_t> local_positions) {
        SegmentedKvCache c(initial_capacity, local_capacity, initial_keys.cols, middle_compressed.cols, layer_index);
        c.initial_keys_ = std::move(initial_keys);
        c.initial_values_ = std::move(initial_values);
        c.middle_keys_ = std::move(middle_keys);
        c.middle_values_ = std::move(middle_values);
        c.middle_compressed_ = std::move(middle_compressed);
        c.local_keys_ = std::move(local_keys);
        c.local_values_ = std::move(local_values);
        c.initial_positions_ = std::move(initial_positions);
        c.middle_positions_ = std::move(middle_positions);
        c.local_positions_ = std::move(local_positions);
        c.next_position_ = c.local_positions_.empty()
                               ? (c.middle_positions_.empty()
                                      ? (c.initial_positions_.empty() ? 0 : c.initial_positions_.back() + 1)
                                      : c.middle_positions_.back() + 1)
                               : c.local_positions_.back() + 1;
        c.check_invariants();
        return c;
    }

    void check_invariants() const {
        const auto same = [](const Matrix& a, const Matrix& b, std::size_t n) { return a.rows == n && b.rows == n; };
        if (!same(initial_keys_, initial_values_, initial_positions_.size()) ||
            !same(middle_keys_, middle_values_, middle_positions_.size()) ||
            middle_compressed_.rows != middle_positions_.size() ||
            !same(local_keys_, local_values_, local_positions_.size())) {
            throw FormatError("cache: segment row counts disagree");
        }
        if (initial_keys_.rows > initial_capacity_ || local_keys_.rows > local_capacity_) {
            throw FormatError("cache: segment exceeds capacity");
        }
        bool first = true;
        std::uint64_t prev = 0;
        for (const auto* seg : {&initial_positions_, &middle_positions_, &local_positions_}) {
            for (std::uint64_t p : *seg) {
                if (!first && p <= prev) throw FormatError("cache: positions not strictly increasing");
                prev = p;
                first = false;
            }
        }
    }

private:
    std::size_t initial_capacity_ = 0;
    std::size_t local_capacity_ = 0;
    std::size_t full_dim_ = 0;
    std::size_t reduced_dim_ = 0;
    std::size_t layer_index_ = 0;
    std::uint64_t next_position_ = 0;

    Matrix initial_keys_, initial_values_;
    Matrix middle_keys_, middle_values_, middle_compressed_;
    Matrix local_keys_, local_values_;
    std::vector<std::uint64_t> initial_positions_, middle_positions_, local_positions_;
};

/// Keys/values feeding the two attention branches.
struct GatheredKv {
    Matrix global_keys;    // initial rows, then selected middle rows in ascending order
    Matrix global_values;
    Matrix local_keys;     // local window in arrival order
    Matrix local_values;
};

inline GatheredKv gather_selected(const SegmentedKvCache& cache, const SelectionResult& selection) {
    GatheredKv out;
    out.global_keys = cache.initial_keys();
    out.global_values = cache.initial_values();
    for (std::size_t idx : selection.indices) {
        if (idx >= cache.middle_len()) {
            throw IndexError("gather_selected: middle index " + std::to_string(idx) + " >= l_M " +
                             std::to_string(cache.middle_len()));
        }
        out.global_keys.append_row(cache.middle_keys().row(idx));
        out.global_values.append_row(cache.middle_values().row(idx));
    }
    out.local_keys = cache.local_keys();
    out.local_values = cache.local_values();
    return out;
}

struct CacheSizes {
    std::size_t initial_len = 0;
    std::size_t middle_len = 0;
    std::size_t local_len = 0;
    std::uint64_t compressed_bytes = 0;  // cached d' keys of the middle segment
    std::uint64_t kv_bytes = 0;          // full-dimension keys + values over all segments
    std::uint64_t middle_kv_bytes = 0;   // full-dimension keys + values of the middle segment

    double compressed_fraction_of_middle() const {
        return middle_kv_bytes == 0 ? 0.0 : static_cast<double>(compressed_bytes) / static_cast<double>(middle_kv_bytes);
    }
};

inline CacheSizes cache_sizes(const SegmentedKvCache& cache) {
    constexpr std::uint64_t kFloatBytes = 4;
    CacheSizes s;
    s.initial_len = cache.initial_len();
    s.middle_len = cache.middle_len();
    s.local_len = cache.local_len();
    s.compressed_bytes = static_cast<std::uint64_t>(s.middle_len) * cache.reduced_dim() * kFloatBytes;
    s.kv_bytes = static_cast<std::uint64_t>(cache.total_len()) * 2 * cache.full_dim() * kFloatBytes;
    s.middle_kv_bytes = static_cast<std::uint64_t>(s.middle_len) * 2 * cache.full_dim() * kFloatBytes;
    return s;
}

}  // namespace esa
