// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <vector>

#include <gtest/gtest.h>

#include "esa/compression.hpp"
#include "esa/errors.hpp"
#include "esa/io.hpp"
#include "esa/kv_cache.hpp"
#include "test_util.hpp"

namespace esa {
namespace {

using testing::random_matrix;

constexpr std::size_t kDim = 8;
constexpr std::size_t kReduced = 3;

struct Fixture {
    ProjectionPair pair = random_projection(kDim, kReduced, 1);
    SegmentedKvCache cache{4, 6, kDim, kReduced};
};

TEST(KvCache, InitialFillsFirst) {
    Fixture f;
    const auto ev = f.cache.append_chunk(random_matrix(4, kDim, 1), random_matrix(4, kDim, 2), f.pair);
    EXPECT_EQ(ev.moved_count, 0u);
    EXPECT_EQ(f.cache.initial_len(), 4u);
    EXPECT_EQ(f.cache.local_len(), 0u);
    EXPECT_EQ(f.cache.middle_len(), 0u);
}

TEST(KvCache, FullLocalRingMigratesWholeChunk) {
    Fixture f;
    f.cache.append_chunk(random_matrix(10, kDim, 1), random_matrix(10, kDim, 2), f.pair);
    ASSERT_EQ(f.cache.local_len(), 6u);
    const auto ev = f.cache.append_chunk(random_matrix(5, kDim, 3), random_matrix(5, kDim, 4), f.pair);
    EXPECT_EQ(ev.moved_count, 5u);
    EXPECT_EQ(ev.new_middle_len, 5u);
}

TEST(KvCache, SegmentCountsMatchBookkeeping) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t l_i = rng.below(5), l_l = 1 + rng.below(8);
        SegmentedKvCache cache(l_i, l_l, kDim, kReduced);
        const auto pair = random_projection(kDim, kReduced, 2);
        std::size_t total = 0;
        while (total < 10 * l_l) {
            const std::size_t c = 1 + rng.below(2 * l_l);
            cache.append_chunk(random_normal(c, kDim, rng), random_normal(c, kDim, rng), pair);
            total += c;
            const std::size_t ei = std::min(total, l_i);
            const std::size_t el = std::min(total - ei, l_l);
            EXPECT_EQ(cache.initial_len(), ei);
            EXPECT_EQ(cache.local_len(), el);
            EXPECT_EQ(cache.middle_len(), total - ei - el);
            cache.check_invariants();
        }
    }
}

TEST(KvCache, CompressedRowsMatchRecompute) {
    Fixture f;
    f.cache.append_chunk(random_matrix(40, kDim, 1), random_matrix(40, kDim, 2), f.pair);
    ASSERT_EQ(f.cache.middle_len(), 30u);
    for (std::size_t m = 0; m < f.cache.middle_len(); ++m) {
        const auto again = compress(f.cache.middle_keys().row(m), f.pair.key);
        for (std::size_t c = 0; c < kReduced; ++c) EXPECT_NEAR(again[c], f.cache.middle_compressed()(m, c), 1e-6);
    }
}

TEST(KvCache, MigrationIsFifo) {
    Fixture f;
    Rng rng(3);
    for (int i = 0; i < 7; ++i) f.cache.append_chunk(random_normal(5, kDim, rng), random_normal(5, kDim, rng), f.pair);
    const auto& mp = f.cache.middle_positions();
    for (std::size_t i = 0; i < mp.size(); ++i) EXPECT_EQ(mp[i], 4 + i);
    EXPECT_EQ(f.cache.local_positions().front(), 4 + mp.size());
    EXPECT_EQ(f.cache.next_position(), 35u);
}

TEST(KvCache, ShapeAndLayerErrors) {
    Fixture f;
    EXPECT_THROW(f.cache.append_chunk(random_matrix(2, kDim + 1, 1), random_matrix(2, kDim + 1, 2), f.pair),
                 DimensionError);
    EXPECT_THROW(f.cache.append_chunk(random_matrix(2, kDim, 1), random_matrix(2, kDim, 2), random_projection(kDim, 2, 1)),
                 DimensionError);
    auto other_layer = f.pair;
    other_layer.layer_index = 3;
    EXPECT_THROW(f.cache.append_chunk(random_matrix(2, kDim, 1), random_matrix(2, kDim, 2), other_layer), ConfigError);
}

TEST(Gather, SaturatedSelection) {
    Fixture f;
    f.cache.append_chunk(random_matrix(20, kDim, 1), random_matrix(20, kDim, 2), f.pair);
    const auto kv = gather_selected(f.cache, select_all(f.cache.middle_len()));
    EXPECT_EQ(kv.global_keys, vstack(f.cache.initial_keys(), f.cache.middle_keys()));
    EXPECT_EQ(kv.global_values, vstack(f.cache.initial_values(), f.cache.middle_values()));
    EXPECT_EQ(kv.local_keys, f.cache.local_keys());
}

TEST(Gather, EmptyMiddle) {
    Fixture f;
    f.cache.append_chunk(random_matrix(7, kDim, 1), random_matrix(7, kDim, 2), f.pair);
    const auto kv = gather_selected(f.cache, SelectionResult{});
    EXPECT_EQ(kv.global_keys, f.cache.initial_keys());
    EXPECT_EQ(kv.local_values, f.cache.local_values());
}

TEST(Gather, MatchesAppendLogReplay) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Fixture f;
        Matrix log_k = Matrix::with_cols(kDim), log_v = Matrix::with_cols(kDim);
        for (int c = 0; c < 6; ++c) {
            const std::size_t n = 1 + rng.below(9);
            const auto k = random_normal(n, kDim, rng);
            const auto v = random_normal(n, kDim, rng);
            f.cache.append_chunk(k, v, f.pair);
            log_k.append_rows(k);
            log_v.append_rows(v);
        }
        const std::size_t l_m = f.cache.middle_len();
        SelectionResult sel;
        for (std::size_t m = 0; m < l_m; ++m) {
            if (rng.below(2) == 0) sel.indices.push_back(m);
        }
        sel.k_effective = sel.indices.size();
        const auto kv = gather_selected(f.cache, sel);
        // Replay: stream rows 0..3 are initial, 4..4+l_M-1 middle, the rest local.
        ASSERT_EQ(kv.global_keys.rows, f.cache.initial_len() + sel.indices.size());
        for (std::size_t r = 0; r < f.cache.initial_len(); ++r) {
            EXPECT_TRUE(std::equal(kv.global_keys.row(r).begin(), kv.global_keys.row(r).end(), log_k.row(r).begin()));
        }
        for (std::size_t s = 0; s < sel.indices.size(); ++s) {
            const std::size_t stream_row = f.cache.initial_len() + sel.indices[s];
            const auto got = kv.global_values.row(f.cache.initial_len() + s);
            EXPECT_TRUE(std::equal(got.begin(), got.end(), log_v.row(stream_row).begin()));
        }
        const std::size_t local_begin = log_k.rows - f.cache.local_len();
        EXPECT_EQ(kv.local_keys, log_k.slice_rows(local_begin, log_k.rows));
    }
}

TEST(Gather, OutOfRangeIsIndexError) {
    Fixture f;
    f.cache.append_chunk(random_matrix(12, kDim, 1), random_matrix(12, kDim, 2), f.pair);
    SelectionResult sel{{0, f.cache.middle_len()}, 2};
    EXPECT_THROW(gather_selected(f.cache, sel), IndexError);
}

TEST(CacheSizes, EmptyIsZero) {
    Fixture f;
    const auto s = cache_sizes(f.cache);
    EXPECT_EQ(s.initial_len + s.middle_len + s.local_len, 0u);
    EXPECT_EQ(s.compressed_bytes, 0u);
    EXPECT_EQ(s.kv_bytes, 0u);
}

TEST(CacheSizes, SixPointTwoFivePercentOfMiddle) {
    // d_G = 1024, d' = 128: compressed keys are 128 / 2048 of the middle KV bytes.
    SegmentedKvCache cache(0, 0, 1024, 128);
    const auto pair = random_projection(1024, 128, 1);
    Rng rng(1);
    for (int c = 0; c < 4; ++c) cache.append_chunk(random_normal(250, 1024, rng), random_normal(250, 1024, rng), pair);
    ASSERT_EQ(cache.middle_len(), 1000u);
    const auto s = cache_sizes(cache);
    EXPECT_DOUBLE_EQ(s.compressed_fraction_of_middle(), 0.0625);
}

TEST(CacheSizes, ByteArithmetic) {
    Fixture f;
    f.cache.append_chunk(random_matrix(23, kDim, 1), random_matrix(23, kDim, 2), f.pair);
    const auto s = cache_sizes(f.cache);
    EXPECT_EQ(s.kv_bytes, 23u * 2 * kDim * 4);
    EXPECT_EQ(s.compressed_bytes, 13u * kReduced * 4);
    EXPECT_EQ(s.middle_kv_bytes, 13u * 2 * kDim * 4);
}

TEST(Snapshot, RoundTrip) {
    testing::TempDir dir("snap");
    Fixture f;
    f.cache.append_chunk(random_matrix(25, kDim, 1), random_matrix(25, kDim, 2), f.pair);
    io::write_snapshot(dir / "c.snap", f.cache);
    const auto back = io::read_snapshot(dir / "c.snap");
    EXPECT_EQ(back.initial_keys(), f.cache.initial_keys());
    EXPECT_EQ(back.middle_values(), f.cache.middle_values());
    EXPECT_EQ(back.middle_compressed(), f.cache.middle_compressed());
    EXPECT_EQ(back.local_keys(), f.cache.local_keys());
    EXPECT_EQ(back.middle_positions(), f.cache.middle_positions());
    EXPECT_EQ(back.next_position(), f.cache.next_position());
}

TEST(Snapshot, TruncatedIsFormatError) {
    testing::TempDir dir("snap");
    Fixture f;
    f.cache.append_chunk(random_matrix(25, kDim, 1), random_matrix(25, kDim, 2), f.pair);
    io::write_snapshot(dir / "c.snap", f.cache);
    const auto full = testing::read_file(dir / "c.snap");
    std::ofstream(dir / "t.snap", std::ios::binary) << full.substr(0, full.size() - 7);
    EXPECT_THROW(io::read_snapshot(dir / "t.snap"), FormatError);
    std::ofstream(dir / "h.snap", std::ios::binary) << "{not json\n";
    EXPECT_THROW(io::read_snapshot(dir / "h.snap"), FormatError);
}

}  // namespace
}  // namespace esa
