// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "esa/analysis.hpp"
#include "esa/engine.hpp"
#include "esa/errors.hpp"
#include "esa/needle.hpp"
#include "esa/oracle.hpp"
#include "test_util.hpp"

namespace esa {
namespace {

using testing::max_abs_diff;
using testing::random_matrix;

EsaConfig small_config() {
    EsaConfig c;
    c.heads = 2;
    c.head_dim = 8;
    c.reduced_dim = 4;
    c.initial_len = 4;
    c.local_len = 16;
    c.top_k = 8;
    c.chunk = 16;
    return c;
}

QkvChunk random_chunk(std::size_t rows, std::size_t width, Rng& rng) {
    return QkvChunk{random_normal(rows, width, rng), random_normal(rows, width, rng), random_normal(rows, width, rng)};
}

TEST(FusedAttention, TwoElementSoftmax) {
    // Single head, head_dim 2, query zero: both logits 0 regardless of rotation.
    EsaConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 2;
    cfg.reduced_dim = 1;
    GatheredKv kv{Matrix(1, 2, std::vector<float>{1, 1}), Matrix(1, 2, std::vector<float>{4, 8}),
                  Matrix(1, 2, std::vector<float>{3, -1}), Matrix(1, 2, std::vector<float>{2, 0})};
    const auto out = fused_attention(Matrix(1, 2), kv, cfg);
    EXPECT_FLOAT_EQ(out.fused.output(0, 0), 3.0f);
    EXPECT_FLOAT_EQ(out.fused.output(0, 1), 4.0f);
}

TEST(FusedAttention, UnequalLogitsWeightByExp) {
    // head_dim 2, query (a, 0) at position w, global key (1, 0) at 0; local key at 0 seen from 0.
    EsaConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 2;
    cfg.reduced_dim = 1;
    cfg.global_position = 0;
    const Matrix q(1, 2, std::vector<float>{2.0f, 0.0f});
    GatheredKv kv{Matrix(1, 2, std::vector<float>{1, 0}), Matrix(1, 2, std::vector<float>{10, 0}),
                  Matrix(1, 2, std::vector<float>{0, 1}), Matrix(1, 2, std::vector<float>{0, 10})};
    const auto out = fused_attention(q, kv, cfg);
    const double b = 2.0 / std::sqrt(2.0);  // global logit; local logit 0
    const double wg = std::exp(b) / (std::exp(b) + 1.0);
    EXPECT_NEAR(out.fused.output(0, 0), 10.0 * wg, 1e-5);
    EXPECT_NEAR(out.fused.output(0, 1), 10.0 * (1.0 - wg), 1e-5);
}

TEST(FusedAttention, EmptyGlobalEqualsLocalBranch) {
    const auto cfg = small_config();
    Rng rng(2);
    GatheredKv kv{Matrix::with_cols(16), Matrix::with_cols(16), random_normal(10, 16, rng), random_normal(10, 16, rng)};
    const auto q = random_normal(3, 16, rng);
    const auto out = fused_attention(q, kv, cfg);
    Matrix lq = q, lk = kv.local_keys;
    std::vector<std::size_t> qp = {7, 8, 9}, kp(10);
    std::iota(kp.begin(), kp.end(), std::size_t{0});
    rope_rows(lq, qp, cfg.rope());
    rope_rows(lk, kp, cfg.rope());
    const auto local = attention_branch(lq, lk, kv.local_values, 2, true, 1.0f / std::sqrt(8.0f));
    EXPECT_EQ(out.fused.output, local.output);
}

TEST(FusedAttention, MatchesMonolithicOracle) {
    Rng rng(3);
    for (int t = 0; t < 30; ++t) {
        auto cfg = small_config();
        cfg.global_position = rng.below(40);
        const std::size_t l_c = 1 + rng.below(5);
        GatheredKv kv{random_normal(rng.below(12), 16, rng), Matrix(), random_normal(l_c + rng.below(10), 16, rng),
                      Matrix()};
        kv.global_values = random_normal(kv.global_keys.rows, 16, rng);
        kv.local_values = random_normal(kv.local_keys.rows, 16, rng);
        const auto q = random_normal(l_c, 16, rng);
        EXPECT_LT(max_abs_diff(fused_attention(q, kv, cfg).fused.output, oracle::monolithic_attention(q, kv, cfg)), 1e-5);
    }
}

TEST(FusedAttention, BothEmptyIsConfigError) {
    const auto cfg = small_config();
    GatheredKv kv{Matrix::with_cols(16), Matrix::with_cols(16), Matrix::with_cols(16), Matrix::with_cols(16)};
    EXPECT_THROW(fused_attention(Matrix::with_cols(16), kv, cfg), ConfigError);
}

TEST(FusedAttention, SelectedRowOrderDoesNotMatter) {
    const auto cfg = small_config();
    Rng rng(4);
    GatheredKv kv{random_normal(9, 16, rng), random_normal(9, 16, rng), random_normal(6, 16, rng),
                  random_normal(6, 16, rng)};
    const auto q = random_normal(2, 16, rng);
    GatheredKv rev = kv;
    rev.global_keys = Matrix::with_cols(16);
    rev.global_values = Matrix::with_cols(16);
    for (std::size_t j = 9; j-- > 0;) {
        rev.global_keys.append_row(kv.global_keys.row(j));
        rev.global_values.append_row(kv.global_values.row(j));
    }
    EXPECT_LT(max_abs_diff(fused_attention(q, kv, cfg).fused.output, fused_attention(q, rev, cfg).fused.output), 1e-6);
}

TEST(Engine, FirstChunkIsCausalSelfAttention) {
    const auto cfg = small_config();
    EsaEngine engine(cfg, random_projection(16, 4, 1));
    Rng rng(5);
    const auto chunk = random_chunk(6, 16, rng);
    const auto trace = engine.prefill(chunk);
    EXPECT_TRUE(trace.selection.indices.empty());
    GatheredKv kv{Matrix::with_cols(16), Matrix::with_cols(16), chunk.keys, chunk.values};
    EXPECT_LT(max_abs_diff(trace.output, oracle::monolithic_attention(chunk.queries, kv, cfg)), 1e-5);
    EXPECT_GT(trace.flop_count, 0u);
}

TEST(Engine, SaturatedSelectionMatchesFullOracle) {
    auto cfg = small_config();
    cfg.top_k = 12;
    EsaEngine engine(cfg, random_projection(16, 4, 1));
    Rng rng(6);
    for (int i = 0; i < 2; ++i) engine.prefill(random_chunk(16, 16, rng));
    ASSERT_EQ(engine.cache().middle_len(), 12u);  // l_M == k
    const auto chunk = random_chunk(5, 16, rng);
    const auto expected = oracle::full_attention_oracle(engine.cache(), chunk, cfg);
    const auto trace = engine.prefill(chunk);
    EXPECT_FALSE(trace.scored);
    EXPECT_LT(max_abs_diff(trace.output, expected), 1e-5);

    // Decode after the saturated prefill: l_M = 17 > k, so raise k to keep saturation.
    auto cfg2 = cfg;
    cfg2.top_k = 1000;
    EsaEngine wide(cfg2, random_projection(16, 4, 1));
    Rng rng2(6);
    for (int i = 0; i < 3; ++i) wide.prefill(random_chunk(16, 16, rng2));
    const auto q = random_chunk(1, 16, rng2);
    const auto expect_dec = oracle::full_attention_oracle(wide.cache(), q, cfg2);
    EXPECT_LT(max_abs_diff(wide.decode_step(q.queries.row(0), q.keys.row(0), q.values.row(0)).output, expect_dec), 1e-5);
}

TEST(Engine, IdentityProjectionMatchesFullDimSelection) {
    auto cfg = small_config();
    cfg.reduced_dim = 16;
    auto full = cfg;
    full.scoring = ScoreBasis::full_dim;
    EsaEngine a(cfg, identity_projection(16));
    EsaEngine b(full, identity_projection(16));
    Rng rng(7);
    std::size_t scored = 0;
    for (int step = 0; step < 20; ++step) {
        const auto chunk = random_chunk(1 + rng.below(16), 16, rng);
        const auto ta = a.prefill(chunk);
        const auto tb = b.prefill(chunk);
        EXPECT_EQ(ta.selection, tb.selection) << "step " << step;
        scored += ta.scored ? 1 : 0;
    }
    EXPECT_GT(scored, 10u);
}

TEST(Engine, DecodeWithZeroKSeesOnlyInitialLocalAndSelf) {
    auto cfg = small_config();
    cfg.top_k = 0;
    EsaEngine engine(cfg, random_projection(16, 4, 1));
    Rng rng(8);
    for (int i = 0; i < 3; ++i) engine.prefill(random_chunk(16, 16, rng));
    ASSERT_GT(engine.cache().middle_len(), 0u);
    const auto tok = random_chunk(1, 16, rng);
    GatheredKv kv{engine.cache().initial_keys(), engine.cache().initial_values(),
                  vstack(engine.cache().local_keys(), tok.keys), vstack(engine.cache().local_values(), tok.values)};
    const auto expected = oracle::monolithic_attention(tok.queries, kv, cfg);
    const auto trace = engine.decode_step(tok.queries.row(0), tok.keys.row(0), tok.values.row(0));
    EXPECT_TRUE(trace.selection.indices.empty());
    EXPECT_LT(max_abs_diff(trace.output, expected), 1e-5);
}

TEST(Engine, DecodeFlopsTrackCostModel) {
    EsaConfig cfg;  // desk
    EsaEngine engine(cfg, random_projection(cfg.full_dim(), cfg.reduced_dim, 2));
    Rng rng(9);
    for (int i = 0; i < 4; ++i) engine.prefill(random_chunk(512, cfg.full_dim(), rng));
    for (int step = 0; step < 100; ++step) {
        const auto tok = random_chunk(1, cfg.full_dim(), rng);
        const auto trace = engine.decode_step(tok.queries.row(0), tok.keys.row(0), tok.values.row(0));
        ASSERT_TRUE(trace.scored);
        const double predicted = static_cast<double>(esa_flops(CostModel::from_config(cfg, trace.middle_len, 1)));
        EXPECT_NEAR(static_cast<double>(trace.flop_count) / predicted, 1.0, 0.05);
    }
}

TEST(Engine, OutputIgnoresLaterTokens) {
    const auto cfg = small_config();
    Rng rng(10);
    std::vector<QkvChunk> chunks;
    for (int i = 0; i < 6; ++i) chunks.push_back(random_chunk(1 + rng.below(16), 16, rng));
    std::vector<QkvChunk> altered = chunks;
    altered.push_back(random_chunk(9, 16, rng));
    altered[5] = random_chunk(chunks[5].rows(), 16, rng);
    EsaEngine a(cfg, random_projection(16, 4, 3));
    EsaEngine b(cfg, random_projection(16, 4, 3));
    for (int i = 0; i < 5; ++i) {
        const auto ta = a.prefill(chunks[i]);
        const auto tb = b.prefill(altered[i]);
        EXPECT_EQ(ta.output, tb.output);
        EXPECT_EQ(ta.selection, tb.selection);
    }
    // Within a chunk the last row still cannot see anything after it.
    const auto last = a.prefill(chunks[5]);
    EXPECT_TRUE(last.output.all_finite());
}

TEST(Engine, BitIdenticalReplays) {
    const auto cfg = small_config();
    const auto run = [&] {
        EsaEngine e(cfg, random_projection(16, 4, 4));
        Rng rng(11);
        std::vector<StepTrace> traces;
        for (int i = 0; i < 8; ++i) traces.push_back(e.prefill(random_chunk(1 + rng.below(16), 16, rng)));
        return traces;
    };
    const auto a = run();
    const auto b = run();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].selection, b[i].selection);
        EXPECT_EQ(a[i].output, b[i].output);
        EXPECT_EQ(a[i].flop_count, b[i].flop_count);
        EXPECT_EQ(a[i].local_lse, b[i].local_lse);
    }
}

TEST(Engine, ChunkLargerThanConfigured) {
    const auto cfg = small_config();
    EsaEngine e(cfg, random_projection(16, 4, 4));
    Rng rng(1);
    EXPECT_THROW(e.prefill(random_chunk(17, 16, rng)), ConfigError);
}

TEST(Engine, ProjectionShapeMismatch) {
    EXPECT_THROW(EsaEngine(small_config(), random_projection(16, 5, 1)), DimensionError);
}

TEST(Config, Validation) {
    auto c = small_config();
    c.reduced_dim = 17;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.head_mode = HeadMode::individual_max;
    EXPECT_THROW(c.validate(), ConfigError);
    c.scoring = ScoreBasis::full_dim;
    EXPECT_NO_THROW(c.validate());
    const auto p = EsaConfig::paper();
    EXPECT_EQ(p.initial_len, 128u);
    EXPECT_EQ(p.top_k, 2048u);
    EXPECT_EQ(p.local_len, 4096u);
    EXPECT_EQ(p.fixed_position(), 4096u);
}

TEST(Oracle, SingleTokenHistory) {
    const auto cfg = small_config();
    SegmentedKvCache cache(4, 16, 16, 4);
    Rng rng(12);
    const auto tok = random_chunk(1, 16, rng);
    const auto out = oracle::full_attention_oracle(cache, tok, cfg);
    EXPECT_LT(max_abs_diff(out, tok.values), 1e-6);
}

TEST(Needle, DominantNeedlesAreAllSelected) {
    EsaConfig cfg;
    NeedleSetup setup;
    setup.stream_len = 2048;
    setup.planted_positions = {100, 300, 500, 700, 900, 1100, 1300, 1500};
    setup.seed = 3;
    cfg.top_k = 64;
    const auto pair = random_projection(cfg.full_dim(), cfg.reduced_dim, 5);
    const auto out = planted_needle_recall(cfg, pair, setup);
    EXPECT_DOUBLE_EQ(out.recall, 1.0);
    const auto stream = build_needle_stream(cfg, pair, setup);
    EXPECT_GT(stream.observed_margin, 0.0);
    EXPECT_DOUBLE_EQ(needle_recall(stream, 0, 0).recall, 0.0);
}

TEST(Needle, FullDimScoring) {
    EsaConfig cfg;
    cfg.scoring = ScoreBasis::full_dim;
    NeedleSetup setup;
    setup.stream_len = 1024;
    setup.planted_positions = {50, 400, 600};
    cfg.top_k = 8;
    EXPECT_DOUBLE_EQ(planted_needle_recall(cfg, random_projection(128, 16, 1), setup).recall, 1.0);
}

TEST(Needle, SmoothedWindowsFitInK) {
    // Each needle's window holds 2*eps+1 indices whose smoothed score is at least that needle's score.
    EsaConfig cfg;
    NeedleSetup setup;
    setup.stream_len = 2048;
    setup.planted_positions = {200, 600, 1000, 1400};
    setup.seed = 4;
    const auto stream = build_needle_stream(cfg, random_projection(128, 16, 6), setup);
    for (std::size_t eps : {1u, 2u, 5u}) {
        EXPECT_DOUBLE_EQ(needle_recall(stream, 4 * (2 * eps + 1), eps).recall, 1.0) << eps;
    }
}

TEST(Needle, PositionOutsideMiddleIsConfigError) {
    EsaConfig cfg;
    NeedleSetup setup;
    setup.stream_len = 1024;
    setup.planted_positions = {10};
    EXPECT_THROW(build_needle_stream(cfg, random_projection(128, 16, 1), setup), ConfigError);
    setup.planted_positions = {1000};
    EXPECT_THROW(build_needle_stream(cfg, random_projection(128, 16, 1), setup), ConfigError);
}

}  // namespace
}  // namespace esa
