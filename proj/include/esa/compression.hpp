// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esa/errors.hpp"
#include "esa/selection.hpp"
#include "esa/tensor.hpp"

namespace esa {

/// Affine map y = weight * x + bias with weight of shape out_dim x in_dim.
struct LinearMap {
    Matrix weight;
    std::vector<float> bias;

    std::size_t in_dim() const noexcept { return weight.cols; }
    std::size_t out_dim() const noexcept { return weight.rows; }

    void validate() const {
        if (bias.size() != weight.rows) throw DimensionError("LinearMap: bias length != out_dim");
    }

    friend bool operator==(const LinearMap&, const LinearMap&) = default;
};

/// Per-layer query/key compression maps from d_H down to d'.
struct ProjectionPair {
    std::size_t layer_index = 0;
    LinearMap query;
    LinearMap key;

    std::size_t full_dim() const noexcept { return query.in_dim(); }
    std::size_t reduced_dim() const noexcept { return query.out_dim(); }

    void validate() const {
        query.validate();
        key.validate();
        if (query.in_dim() != key.in_dim() || query.out_dim() != key.out_dim()) {
            throw DimensionError("ProjectionPair: query and key maps differ in shape");
        }
        if (!query.weight.all_finite() || !key.weight.all_finite()) throw DimensionError("ProjectionPair: non-finite weights");
    }

    friend bool operator==(const ProjectionPair&, const ProjectionPair&) = default;
};

inline LinearMap identity_map(std::size_t dim) {
    LinearMap m{Matrix(dim, dim), std::vector<float>(dim, 0.0f)};
    for (std::size_t i = 0; i < dim; ++i) m.weight(i, i) = 1.0f;
    return m;
}

/// Lossless pair with d' = d_H; compressed scores then equal full-dimension scores bit for bit.
inline ProjectionPair identity_projection(std::size_t full_dim, std::size_t layer_index = 0) {
    return ProjectionPair{layer_index, identity_map(full_dim), identity_map(full_dim)};
}

/// Gaussian weights with stddev sqrt(1/d_H) and zero biases.
inline ProjectionPair random_projection(std::size_t full_dim, std::size_t reduced_dim, std::uint64_t seed,
                                        std::size_t layer_index = 0) {
    Rng rng(seed);
    const double stddev = std::sqrt(1.0 / static_cast<double>(full_dim));
    ProjectionPair p;
    p.layer_index = layer_index;
    p.query = LinearMap{random_normal(reduced_dim, full_dim, rng, stddev), std::vector<float>(reduced_dim, 0.0f)};
    p.key = LinearMap{random_normal(reduced_dim, full_dim, rng, stddev), std::vector<float>(reduced_dim, 0.0f)};
    return p;
}

inline void compress_into(std::span<const float> vec, const LinearMap& map, std::span<float> out,
                          FlopCounter* counter = nullptr) {
    if (vec.size() != map.in_dim()) {
        throw DimensionError("compress: vector length " + std::to_string(vec.size()) + " != map input " +
                             std::to_string(map.in_dim()));
    }
    for (std::size_t r = 0; r < map.out_dim(); ++r) out[r] = dot(map.weight.row(r), vec) + map.bias[r];
    count_flops(counter, 2 * static_cast<std::uint64_t>(map.in_dim()) * map.out_dim() + map.out_dim());
}

inline std::vector<float> compress(std::span<const float> vec, const LinearMap& map, FlopCounter* counter = nullptr) {
    std::vector<float> out(map.out_dim());
    compress_into(vec, map, out, counter);
    return out;
}

inline Matrix compress_rows(const Matrix& rows, const LinearMap& map, FlopCounter* counter = nullptr) {
    Matrix out(rows.rows, map.out_dim());
    for (std::size_t i = 0; i < rows.rows; ++i) compress_into(rows.row(i), map, out.row(i), counter);
    return out;
}

/// Importance score from compressed representations: q' . k'.
inline float approx_score(std::span<const float> q_compressed, std::span<const float> k_compressed) {
    if (q_compressed.size() != k_compressed.size()) throw DimensionError("approx_score: length mismatch");
    return dot(q_compressed, k_compressed);
}

/// Query/key rows dumped from one layer for fitting the compression maps.
struct CalibrationSet {
    std::size_t layer_index = 0;
    Matrix queries;
    Matrix keys;
    std::string source;

    std::size_t size() const noexcept { return queries.rows; }

    void validate() const {
        if (queries.rows != keys.rows || queries.cols != keys.cols) {
            throw DimensionError("CalibrationSet: queries and keys must have identical shape");
        }
        if (queries.rows < 2) throw ConfigError("CalibrationSet: need at least 2 rows");
    }
};

struct TrainHyper {
    double learning_rate = 0.0005;
    std::size_t batch = 128;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double momentum = 0.9;
    bool identity_init = false;  // requires d' == d_H
};

struct TrainReport {
    std::vector<double> epoch_losses;  // mean minibatch loss per epoch
    double initial_loss = 0.0;         // evaluation-sample loss before the first update
    double final_loss = 0.0;           // evaluation-sample loss after training
    std::size_t steps = 0;
};

struct TrainResult {
    ProjectionPair pair;
    TrainReport report;
};

namespace detail {

struct AffineD {
    std::size_t out = 0, in = 0;
    std::vector<double> w;  // out x in
    std::vector<double> b;  // out
};

inline void affine_forward(const AffineD& map, const std::vector<double>& x, std::size_t n, std::vector<double>& y) {
    y.assign(n * map.out, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = &x[i * map.in];
        for (std::size_t o = 0; o < map.out; ++o) {
            const double* wo = &map.w[o * map.in];
            double acc = map.b[o];
            for (std::size_t c = 0; c < map.in; ++c) acc += wo[c] * xi[c];
            y[i * map.out + o] = acc;
        }
    }
}

// Mean over the n x m cross product of (f(q).f(k) - q.k)^2. Also returns the residual matrix.
inline double bilinear_loss(const std::vector<double>& q, const std::vector<double>& k, std::size_t n, std::size_t m,
                            std::size_t d_full, const std::vector<double>& qp, const std::vector<double>& kp,
                            std::size_t d_red, std::vector<double>* residual) {
    if (residual != nullptr) residual->assign(n * m, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double truth = 0.0;
            for (std::size_t c = 0; c < d_full; ++c) truth += q[i * d_full + c] * k[j * d_full + c];
            double approx = 0.0;
            for (std::size_t c = 0; c < d_red; ++c) approx += qp[i * d_red + c] * kp[j * d_red + c];
            const double e = approx - truth;
            if (residual != nullptr) (*residual)[i * m + j] = e;
            total += e * e;
        }
    }
    return total / static_cast<double>(n * m);
}

inline std::vector<double> gather_rows(const Matrix& src, std::span<const std::size_t> idx) {
    std::vector<double> out(idx.size() * src.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto row = src.row(idx[i]);
        std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i * src.cols));
    }
    return out;
}

inline LinearMap to_linear_map(const AffineD& a) {
    LinearMap m{Matrix(a.out, a.in), std::vector<float>(a.out)};
    for (std::size_t i = 0; i < a.w.size(); ++i) m.weight.data[i] = static_cast<float>(a.w[i]);
    for (std::size_t i = 0; i < a.out; ++i) m.bias[i] = static_cast<float>(a.b[i]);
    return m;
}

inline double evaluation_loss(const CalibrationSet& calib, const AffineD& mq, const AffineD& mk) {
    const std::size_t n = std::min<std::size_t>(calib.size(), 256);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto q = gather_rows(calib.queries, idx);
    const auto k = gather_rows(calib.keys, idx);
    std::vector<double> qp, kp;
    affine_forward(mq, q, n, qp);
    affine_forward(mk, k, n, kp);
    return bilinear_loss(q, k, n, n, calib.queries.cols, qp, kp, mq.out, nullptr);
}

}  // namespace detail

/**
 * Fits both compression maps jointly by SGD with momentum on the mean squared difference between
 * full and compressed scores. Each step draws one query minibatch and one key minibatch
 * (independent permutations per epoch) and uses their full batch x batch cross product. All
 * arithmetic is double precision with sequential summation, so results are bitwise reproducible
 * for a given seed.
 */
inline TrainResult train_projections(const CalibrationSet& calib, std::size_t reduced_dim, const TrainHyper& hyper) {
    calib.validate();
    const std::size_t n = calib.size();
    const std::size_t d_full = calib.queries.cols;
    if (reduced_dim == 0) throw ConfigError("train_projections: d' must be >= 1");
    if (hyper.batch == 0 || hyper.batch > n) {
        throw ConfigError("train_projections: batch " + std::to_string(hyper.batch) + " exceeds calibration size " +
                          std::to_string(n));
    }
    if (hyper.identity_init && reduced_dim != d_full) throw ConfigError("identity_init requires d' == d_H");

    Rng rng(hyper.seed);
    detail::AffineD mq{reduced_dim, d_full, std::vector<double>(reduced_dim * d_full), std::vector<double>(reduced_dim)};
    detail::AffineD mk = mq;
    if (hyper.identity_init) {
        for (std::size_t i = 0; i < d_full; ++i) mq.w[i * d_full + i] = mk.w[i * d_full + i] = 1.0;
    } else {
        const double stddev = std::sqrt(1.0 / static_cast<double>(d_full));
        for (double& w : mq.w) w = static_cast<float>(rng.normal() * stddev);
        for (double& w : mk.w) w = static_cast<float>(rng.normal() * stddev);
    }

    TrainReport report;
    report.initial_loss = detail::evaluation_loss(calib, mq, mk);

    const std::size_t b = hyper.batch;
    const std::size_t steps_per_epoch = n / b;
    std::vector<double> vel_wq(mq.w.size()), vel_bq(reduced_dim), vel_wk(mk.w.size()), vel_bk(reduced_dim);
    std::vector<std::size_t> perm_q(n), perm_k(n);
    std::vector<double> qp, kp, resid, d_qp(b * reduced_dim), d_kp(b * reduced_dim);
    std::vector<double> g_w(reduced_dim * d_full), g_b(reduced_dim);

    const auto momentum_step = [&](detail::AffineD& map, std::vector<double>& vel_w, std::vector<double>& vel_b,
                                   const std::vector<double>& d_out, const std::vector<double>& x) {
        std::fill(g_w.begin(), g_w.end(), 0.0);
        std::fill(g_b.begin(), g_b.end(), 0.0);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t o = 0; o < reduced_dim; ++o) {
                const double g = d_out[i * reduced_dim + o];
                g_b[o] += g;
                double* gw = &g_w[o * d_full];
                const double* xi = &x[i * d_full];
                for (std::size_t c = 0; c < d_full; ++c) gw[c] += g * xi[c];
            }
        }
        for (std::size_t i = 0; i < map.w.size(); ++i) {
            vel_w[i] = hyper.momentum * vel_w[i] + g_w[i];
            map.w[i] -= hyper.learning_rate * vel_w[i];
        }
        for (std::size_t o = 0; o < reduced_dim; ++o) {
            vel_b[o] = hyper.momentum * vel_b[o] + g_b[o];
            map.b[o] -= hyper.learning_rate * vel_b[o];
        }
    };

    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::iota(perm_q.begin(), perm_q.end(), std::size_t{0});
        std::iota(perm_k.begin(), perm_k.end(), std::size_t{0});
        rng.shuffle(perm_q);
        rng.shuffle(perm_k);
        double epoch_total = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const auto q = detail::gather_rows(calib.queries, std::span(perm_q).subspan(s * b, b));
            const auto k = detail::gather_rows(calib.keys, std::span(perm_k).subspan(s * b, b));
            detail::affine_forward(mq, q, b, qp);
            detail::affine_forward(mk, k, b, kp);
            const double loss = detail::bilinear_loss(q, k, b, b, d_full, qp, kp, reduced_dim, &resid);
            if (!std::isfinite(loss)) {
                throw TrainingError("train_projections: loss diverged at step " + std::to_string(report.steps),
                                    report.steps);
            }
            epoch_total += loss;

            // dL/dS' = 2E / b^2; dL/dQ' = G K'; dL/dK' = G^T Q'.
            const double scale = 2.0 / static_cast<double>(b * b);
            std::fill(d_qp.begin(), d_qp.end(), 0.0);
            std::fill(d_kp.begin(), d_kp.end(), 0.0);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < b; ++j) {
                    const double g = scale * resid[i * b + j];
                    for (std::size_t o = 0; o < reduced_dim; ++o) {
                        d_qp[i * reduced_dim + o] += g * kp[j * reduced_dim + o];
                        d_kp[j * reduced_dim + o] += g * qp[i * reduced_dim + o];
                    }
                }
            }
            momentum_step(mq, vel_wq, vel_bq, d_qp, q);
            momentum_step(mk, vel_wk, vel_bk, d_kp, k);
            ++report.steps;
        }
        report.epoch_losses.push_back(steps_per_epoch > 0 ? epoch_total / static_cast<double>(steps_per_epoch) : 0.0);
    }

    report.final_loss = detail::evaluation_loss(calib, mq, mk);
    if (!std::isfinite(report.final_loss)) throw TrainingError("train_projections: non-finite final loss", report.steps);

    TrainResult result;
    result.pair = ProjectionPair{calib.layer_index, detail::to_linear_map(mq), detail::to_linear_map(mk)};
    result.report = std::move(report);
    return result;
}

enum class PcaMode { per_side, joint };

struct PcaResult {
    ProjectionPair pair;
    bool query_degenerate = false;  // fewer than d' nonzero eigenvalues; rows padded by orthonormal completion
    bool key_degenerate = false;
};

namespace detail {

struct PcaBasis {
    LinearMap map;
    bool degenerate = false;
};

inline PcaBasis pca_basis(const Matrix& data, std::size_t reduced_dim) {
    const std::size_t n = data.rows;
    const std::size_t d = data.cols;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) mean(static_cast<Eigen::Index>(c)) += data(i, c);
    }
    mean /= static_cast<double>(n);
    Eigen::MatrixXd centered(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = data(i, c) - mean(static_cast<Eigen::Index>(c));
        }
    }
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw Error("pca: eigen decomposition failed");
    const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
    const Eigen::MatrixXd& evecs = solver.eigenvectors();

    const double top = std::max(evals(evals.size() - 1), 0.0);
    std::size_t nonzero = 0;
    for (Eigen::Index i = 0; i < evals.size(); ++i) {
        if (evals(i) > 1e-9 * std::max(top, 1e-30)) ++nonzero;
    }

    PcaBasis out;
    out.degenerate = nonzero < reduced_dim;
    out.map.weight = Matrix(reduced_dim, d);
    out.map.bias.assign(reduced_dim, 0.0f);
    for (std::size_t r = 0; r < reduced_dim; ++r) {
        Eigen::VectorXd v = evecs.col(static_cast<Eigen::Index>(d - 1 - r));
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        for (std::size_t c = 0; c < d; ++c) out.map.weight(r, c) = static_cast<float>(v(static_cast<Eigen::Index>(c)));
        out.map.bias[r] = static_cast<float>(-v.dot(mean));
    }
    return out;
}

}  // namespace detail

/**
 * PCA baseline: each side projects onto the top-d' eigenvectors of its own covariance, with the bias
 * carrying the centering shift. PcaMode::joint fits one basis on the stacked queries and keys and
 * uses it for both sides.
 */
inline PcaResult pca_projections(const CalibrationSet& calib, std::size_t reduced_dim,
                                 PcaMode mode = PcaMode::per_side) {
    calib.validate();
    if (reduced_dim == 0 || reduced_dim > calib.queries.cols) throw ConfigError("pca_projections: d' out of range");
    if (calib.size() <= reduced_dim) throw ConfigError("pca_projections: need N > d'");
    PcaResult out;
    out.pair.layer_index = calib.layer_index;
    if (mode == PcaMode::per_side) {
        auto q = detail::pca_basis(calib.queries, reduced_dim);
        auto k = detail::pca_basis(calib.keys, reduced_dim);
        out.pair.query = std::move(q.map);
        out.pair.key = std::move(k.map);
        out.query_degenerate = q.degenerate;
        out.key_degenerate = k.degenerate;
    } else {
        auto joint = detail::pca_basis(vstack(calib.queries, calib.keys), reduced_dim);
        out.pair.query = joint.map;
        out.pair.key = joint.map;
        out.query_degenerate = out.key_degenerate = joint.degenerate;
    }
    return out;
}

struct RecallResult {
    std::vector<double> per_query;
    double mean = 0.0;
};

/// Overlap between top-k keys under full-dimension and compressed scores, averaged over queries.
inline RecallResult recall_at_k(const Matrix& queries, const Matrix& keys, const ProjectionPair& pair, std::size_t k) {
    if (k == 0 || k > keys.rows) {
        throw ConfigError("recall_at_k: k = " + std::to_string(k) + " must be in [1, " + std::to_string(keys.rows) + "]");
    }
    pair.validate();
    const Matrix cq = compress_rows(queries, pair.query);
    const Matrix ck = compress_rows(keys, pair.key);
    RecallResult out;
    out.per_query.reserve(queries.rows);
    std::vector<float> full(keys.rows), approx(keys.rows);
    std::vector<std::size_t> common;
    for (std::size_t i = 0; i < queries.rows; ++i) {
        for (std::size_t j = 0; j < keys.rows; ++j) {
            full[j] = head_sum_score(queries.row(i), keys.row(j));
            approx[j] = approx_score(cq.row(i), ck.row(j));
        }
        const auto truth = select_top_k(std::span<const float>(full), k);
        const auto got = select_top_k(std::span<const float>(approx), k);
        common.clear();
        std::set_intersection(truth.indices.begin(), truth.indices.end(), got.indices.begin(), got.indices.end(),
                              std::back_inserter(common));
        out.per_query.push_back(static_cast<double>(common.size()) / static_cast<double>(k));
    }
    if (!out.per_query.empty()) {
        out.mean = std::accumulate(out.per_query.begin(), out.per_query.end(), 0.0) /
                   static_cast<double>(out.per_query.size());
    }
    return out;
}

}  // namespace esa
