// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "esa/compression.hpp"
#include "esa/errors.hpp"
#include "test_util.hpp"

namespace esa {
namespace {

using testing::random_matrix;

// Exactly rank-r query/key sets: Q = Gq R, K = Gk R.
CalibrationSet low_rank_set(std::size_t n, std::size_t d, std::size_t r, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix basis = random_normal(r, d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    const Matrix gq = random_normal(n, r, rng);
    const Matrix gk = random_normal(n, r, rng);
    CalibrationSet c{0, Matrix(n, d), Matrix(n, d), "low-rank"};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t col = 0; col < d; ++col) {
            double a = 0, b = 0;
            for (std::size_t j = 0; j < r; ++j) {
                a += gq(i, j) * basis(j, col);
                b += gk(i, j) * basis(j, col);
            }
            c.queries(i, col) = static_cast<float>(a);
            c.keys(i, col) = static_cast<float>(b);
        }
    }
    return c;
}

double mean_squared_score_error(const CalibrationSet& c, const ProjectionPair& p, std::size_t rows) {
    double total = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        const auto cq = compress(c.queries.row(i), p.query);
        for (std::size_t j = 0; j < rows; ++j) {
            const double e = approx_score(cq, compress(c.keys.row(j), p.key)) - head_sum_score(c.queries.row(i), c.keys.row(j));
            total += e * e;
        }
    }
    return total / static_cast<double>(rows * rows);
}

TEST(Compress, ZeroMap) {
    const LinearMap zero{Matrix(3, 5), std::vector<float>(3, 0.0f)};
    EXPECT_EQ(compress(random_matrix(1, 5, 1).row(0), zero), std::vector<float>(3, 0.0f));
}

TEST(Compress, IdentityMap) {
    const auto v = random_matrix(1, 6, 2);
    EXPECT_EQ(compress(v.row(0), identity_map(6)), std::vector<float>(v.row(0).begin(), v.row(0).end()));
}

TEST(Compress, MatchesMatvec) {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const LinearMap m{random_normal(7, 20, rng), std::vector<float>(7)};
        LinearMap mb = m;
        for (float& b : mb.bias) b = static_cast<float>(rng.normal());
        const auto x = random_normal(1, 20, rng);
        const auto y = compress(x.row(0), mb);
        for (std::size_t r = 0; r < 7; ++r) {
            double acc = mb.bias[r];
            for (std::size_t c = 0; c < 20; ++c) acc += static_cast<double>(mb.weight(r, c)) * x(0, c);
            EXPECT_NEAR(y[r], acc, 1e-5);
        }
    }
}

TEST(Compress, LengthMismatch) {
    EXPECT_THROW(compress(std::vector<float>(4), identity_map(5)), DimensionError);
    EXPECT_THROW(approx_score(std::vector<float>(3), std::vector<float>(4)), DimensionError);
}

TEST(ApproxScore, IdentityEqualsHeadSumExactly) {
    Rng rng(4);
    const auto pair = identity_projection(64);
    for (int t = 0; t < 100; ++t) {
        const auto q = random_normal(1, 64, rng);
        const auto k = random_normal(1, 64, rng);
        EXPECT_EQ(approx_score(compress(q.row(0), pair.query), compress(k.row(0), pair.key)),
                  head_sum_score(q.row(0), k.row(0)));
    }
}

TEST(ApproxScore, ZeroSide) {
    EXPECT_EQ(approx_score(std::vector<float>(4, 0.0f), random_matrix(1, 4, 1).row(0)), 0.0f);
}

TEST(ApproxScore, MatchesExtendedPrecision) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const auto a = random_normal(1, 16, rng);
        const auto b = random_normal(1, 16, rng);
        long double ref = 0;
        for (std::size_t i = 0; i < 16; ++i) ref += static_cast<long double>(a(0, i)) * b(0, i);
        EXPECT_NEAR(approx_score(a.row(0), b.row(0)), static_cast<double>(ref), 1e-5);
    }
}

TEST(Train, DefaultHyperparameters) {
    const TrainHyper h;
    EXPECT_DOUBLE_EQ(h.learning_rate, 0.0005);
    EXPECT_EQ(h.batch, 128u);
    EXPECT_EQ(h.epochs, 10u);
    EXPECT_DOUBLE_EQ(h.momentum, 0.9);
}

TEST(Train, IdentityInitHasZeroLoss) {
    const auto c = low_rank_set(256, 16, 16, 1);
    TrainHyper h;
    h.identity_init = true;
    h.epochs = 1;
    const auto r = train_projections(c, 16, h);
    EXPECT_EQ(r.report.initial_loss, 0.0);
    EXPECT_EQ(r.report.epoch_losses.front(), 0.0);
}

TEST(Train, RecoversLowRankScores) {
    // Smaller than the acceptance fixture; still an exact rank-d' factorization.
    const auto c = low_rank_set(20000, 64, 8, 2);
    const auto r = train_projections(c, 8, TrainHyper{});
    EXPECT_LT(r.report.final_loss, 1e-2 * r.report.initial_loss);
    std::size_t non_increasing = 0;
    double prev = r.report.initial_loss;
    for (double loss : r.report.epoch_losses) {
        non_increasing += loss <= prev ? 1 : 0;
        prev = loss;
    }
    EXPECT_GE(non_increasing, 8u);
}

TEST(Train, BeatsRandomInitialization) {
    const auto c = low_rank_set(4096, 32, 12, 3);
    TrainHyper h;
    h.seed = 9;
    const auto trained = train_projections(c, 8, h);
    const auto random = random_projection(32, 8, 9);
    EXPECT_LT(mean_squared_score_error(c, trained.pair, 200), mean_squared_score_error(c, random, 200));
}

TEST(Train, BitwiseDeterministic) {
    const auto c = low_rank_set(1024, 32, 8, 4);
    TrainHyper h;
    h.seed = 17;
    h.epochs = 3;
    const auto a = train_projections(c, 8, h);
    const auto b = train_projections(c, 8, h);
    EXPECT_EQ(a.pair, b.pair);
    EXPECT_EQ(a.report.epoch_losses, b.report.epoch_losses);
    h.seed = 18;
    EXPECT_FALSE(train_projections(c, 8, h).pair == a.pair);
}

TEST(Train, BatchLargerThanSetIsConfigError) {
    const auto c = low_rank_set(100, 8, 2, 5);
    EXPECT_THROW(train_projections(c, 2, TrainHyper{}), ConfigError);
}

TEST(Train, DivergenceReportsStep) {
    const auto c = low_rank_set(512, 16, 4, 6);
    TrainHyper h;
    h.learning_rate = 1e6;
    try {
        train_projections(c, 4, h);
        FAIL() << "expected divergence";
    } catch (const TrainingError& e) {
        EXPECT_LT(e.step(), 40u);
    }
}

TEST(Pca, DiagonalCovarianceDirection) {
    // Keys with variances 4 and 1 on the first two axes, zero elsewhere.
    Rng rng(7);
    CalibrationSet c{0, random_normal(2000, 6, rng), Matrix(2000, 6), "diag"};
    for (std::size_t i = 0; i < 2000; ++i) {
        c.keys(i, 0) = static_cast<float>(2.0 * rng.normal());
        c.keys(i, 1) = static_cast<float>(rng.normal());
    }
    const auto r = pca_projections(c, 1);
    EXPECT_NEAR(std::abs(r.pair.key.weight(0, 0)), 1.0, 1e-2);
    for (std::size_t col = 1; col < 6; ++col) EXPECT_NEAR(r.pair.key.weight(0, col), 0.0, 5e-2);
    EXPECT_FALSE(r.key_degenerate);
}

TEST(Pca, FlagsDegenerateCovariance) {
    Rng rng(8);
    CalibrationSet c{0, random_normal(100, 6, rng), Matrix(100, 6), "flat"};
    for (std::size_t i = 0; i < 100; ++i) c.keys(i, 2) = static_cast<float>(rng.normal());
    const auto r = pca_projections(c, 3);
    EXPECT_TRUE(r.key_degenerate);
    EXPECT_FALSE(r.query_degenerate);
    // Padding rows still orthonormal.
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = 0; b < 3; ++b) {
            EXPECT_NEAR(dot(r.pair.key.weight.row(a), r.pair.key.weight.row(b)), a == b ? 1.0 : 0.0, 1e-4);
        }
    }
}

TEST(Pca, RowsOrthonormal) {
    const auto c = CalibrationSet{0, random_matrix(500, 24, 1), random_matrix(500, 24, 2), ""};
    for (auto mode : {PcaMode::per_side, PcaMode::joint}) {
        const auto r = pca_projections(c, 10, mode);
        for (const auto* w : {&r.pair.query.weight, &r.pair.key.weight}) {
            for (std::size_t a = 0; a < 10; ++a) {
                for (std::size_t b = 0; b < 10; ++b) EXPECT_NEAR(dot(w->row(a), w->row(b)), a == b ? 1.0 : 0.0, 1e-4);
            }
        }
    }
}

TEST(Pca, ProjectedDataCentered) {
    Rng rng(9);
    CalibrationSet c{0, random_normal(400, 12, rng), random_normal(400, 12, rng), ""};
    for (float& x : c.keys.data) x += 3.0f;
    const auto r = pca_projections(c, 4);
    const auto proj = compress_rows(c.keys, r.pair.key);
    for (std::size_t col = 0; col < 4; ++col) {
        double mean = 0;
        for (std::size_t i = 0; i < proj.rows; ++i) mean += proj(i, col);
        EXPECT_NEAR(mean / static_cast<double>(proj.rows), 0.0, 1e-5);
    }
}

TEST(Pca, JointFullRankOnCenteredDataPreservesRanking) {
    // Symmetric (x, -x) rows make the sample mean exactly zero; a shared orthonormal basis then keeps
    // every score up to rounding.
    Rng rng(10);
    const auto half_q = random_normal(150, 16, rng);
    const auto half_k = random_normal(150, 16, rng);
    CalibrationSet c{0, half_q, half_k, ""};
    for (std::size_t i = 0; i < 150; ++i) {
        std::vector<float> nq(half_q.row(i).begin(), half_q.row(i).end()), nk(half_k.row(i).begin(), half_k.row(i).end());
        for (auto& x : nq) x = -x;
        for (auto& x : nk) x = -x;
        c.queries.append_row(nq);
        c.keys.append_row(nk);
    }
    const auto r = pca_projections(c, 16, PcaMode::joint);
    EXPECT_DOUBLE_EQ(recall_at_k(c.queries, c.keys, r.pair, 10).mean, 1.0);
}

TEST(Pca, NeedsMoreRowsThanDims) {
    const auto c = CalibrationSet{0, random_matrix(4, 8, 1), random_matrix(4, 8, 2), ""};
    EXPECT_THROW(pca_projections(c, 4), ConfigError);
}

TEST(Recall, IdentityIsPerfect) {
    const auto q = random_matrix(30, 16, 1);
    const auto k = random_matrix(100, 16, 2);
    EXPECT_DOUBLE_EQ(recall_at_k(q, k, identity_projection(16), 10).mean, 1.0);
}

TEST(Recall, SaturatedKIsPerfect) {
    const auto q = random_matrix(30, 16, 1);
    const auto k = random_matrix(50, 16, 2);
    EXPECT_DOUBLE_EQ(recall_at_k(q, k, random_projection(16, 2, 3), 50).mean, 1.0);
}

TEST(Recall, InvariantUnderQueryRescaling) {
    const auto q = random_matrix(40, 16, 4);
    const auto k = random_matrix(200, 16, 5);
    const auto pair = random_projection(16, 4, 6);
    Matrix q4 = q;
    for (float& x : q4.data) x *= 4.0f;
    EXPECT_EQ(recall_at_k(q, k, pair, 20).per_query, recall_at_k(q4, k, pair, 20).per_query);
}

TEST(Recall, KOutOfRangeIsConfigError) {
    const auto q = random_matrix(3, 4, 1);
    const auto k = random_matrix(5, 4, 2);
    EXPECT_THROW(recall_at_k(q, k, identity_projection(4), 6), ConfigError);
    EXPECT_THROW(recall_at_k(q, k, identity_projection(4), 0), ConfigError);
}

}  // namespace
}  // namespace esa
