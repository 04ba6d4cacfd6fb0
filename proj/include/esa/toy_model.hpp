// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Seeded stand-in for a transformer: token embeddings with a decaying spectrum, a corpus built from
// repeated motifs and random tokens, and per-layer linear q/k/v maps over a context-mixed hidden
// state. Outputs are raw (no rotary embedding).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "esa/errors.hpp"
#include "esa/tensor.hpp"

namespace esa {

struct ToyModelSpec {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t head_dim = 32;
    std::size_t vocabulary = 4096;
    std::uint64_t seed = 0;

    double spectrum_decay = 3.0;      // embedding axis i has scale exp(-i / decay)
    double qk_gain = 5.0;
    double mean_scale = 0.3;          // per-layer query/key offsets
    std::size_t nuisance_rank = 4;    // query-only directions that keys never see
    double nuisance_scale = 1.5;
    double context_mix = 0.3;         // h_t = (1 - mix) x_t + mix h_{t-1}
    std::size_t motif_count = 64;
    std::size_t motif_min_len = 8;
    std::size_t motif_max_len = 32;
    double motif_fraction = 0.5;

    std::size_t full_dim() const noexcept { return heads * head_dim; }

    void validate() const {
        if (layers == 0 || heads == 0 || head_dim == 0 || vocabulary == 0) {
            throw ConfigError("model: layers, heads, head_dim and vocabulary must be positive");
        }
        if (!(spectrum_decay > 0.0)) throw ConfigError("model: spectrum_decay must be > 0");
        if (nuisance_rank > full_dim()) throw ConfigError("model: nuisance_rank exceeds d_H");
        if (motif_count == 0 || motif_min_len == 0 || motif_min_len > motif_max_len) {
            throw ConfigError("model: motif lengths must satisfy 1 <= min <= max and motif_count >= 1");
        }
        if (motif_fraction < 0.0 || motif_fraction > 1.0) throw ConfigError("model: motif_fraction must be in [0, 1]");
        if (context_mix < 0.0 || context_mix >= 1.0) throw ConfigError("model: context_mix must be in [0, 1)");
    }
};

struct LayerQkv {
    Matrix queries;
    Matrix keys;
    Matrix values;
};

class ToyModel {
public:
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    explicit ToyModel(ToyModelSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        const auto d = static_cast<Eigen::Index>(spec_.full_dim());
        Rng rng(mix_seed(spec_.seed, 0x656d62));
        const Mat rotation = orthonormal(d, d, rng);
        embedding_ = gaussian(static_cast<Eigen::Index>(spec_.vocabulary), d, rng);
        for (Eigen::Index c = 0; c < d; ++c) {
            embedding_.col(c) *= std::exp(-static_cast<double>(c) / spec_.spectrum_decay);
        }
        embedding_ = embedding_ * rotation.transpose();

        Rng motif_rng(mix_seed(spec_.seed, 0x6d6f74));
        const std::size_t span = spec_.motif_max_len - spec_.motif_min_len + 1;
        for (std::size_t m = 0; m < spec_.motif_count; ++m) {
            std::vector<std::uint32_t> motif(spec_.motif_min_len + motif_rng.below(span));
            for (auto& t : motif) t = static_cast<std::uint32_t>(motif_rng.below(spec_.vocabulary));
            motifs_.push_back(std::move(motif));
        }

        const double inv = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t l = 0; l < spec_.layers; ++l) {
            Rng lr(mix_seed(spec_.seed, 0x6c6179 + l));
            Layer layer;
            layer.wq = gaussian(d, d, lr) * (inv * spec_.qk_gain);
            layer.wk = gaussian(d, d, lr) * (inv * spec_.qk_gain);
            layer.wv = gaussian(d, d, lr) * inv;
            layer.mq = gaussian(1, d, lr) * spec_.mean_scale;
            layer.mk = gaussian(1, d, lr) * spec_.mean_scale;
            if (spec_.nuisance_rank > 0) layer.nuisance = orthonormal(d, static_cast<Eigen::Index>(spec_.nuisance_rank), lr);
            layers_.push_back(std::move(layer));
        }
    }

    const ToyModelSpec& spec() const noexcept { return spec_; }

    /// n tokens: with probability motif_fraction a whole motif is emitted, otherwise one random token.
    std::vector<std::uint32_t> corpus(std::size_t n, std::uint64_t corpus_seed) const {
        Rng rng(mix_seed(corpus_seed, 0x636f72));
        std::vector<std::uint32_t> out;
        out.reserve(n + spec_.motif_max_len);
        while (out.size() < n) {
            if (rng.uniform() < spec_.motif_fraction) {
                const auto& motif = motifs_[rng.below(motifs_.size())];
                out.insert(out.end(), motif.begin(), motif.end());
            } else {
                out.push_back(static_cast<std::uint32_t>(rng.below(spec_.vocabulary)));
            }
        }
        out.resize(n);
        return out;
    }

    /// Raw q/k/v rows of one layer. noise_seed drives the query nuisance term.
    LayerQkv layer_qkv(std::size_t layer, const std::vector<std::uint32_t>& tokens, std::uint64_t noise_seed) const {
        if (layer >= layers_.size()) {
            throw ConfigError("model: layer " + std::to_string(layer) + " out of range (" +
                              std::to_string(layers_.size()) + " layers)");
        }
        const auto d = static_cast<Eigen::Index>(spec_.full_dim());
        const auto n = static_cast<Eigen::Index>(tokens.size());
        Mat h(n, d);
        for (Eigen::Index t = 0; t < n; ++t) {
            const auto tok = tokens[static_cast<std::size_t>(t)];
            if (tok >= spec_.vocabulary) throw ConfigError("model: token id out of vocabulary");
            h.row(t) = embedding_.row(tok);
            if (t > 0) h.row(t) = (1.0 - spec_.context_mix) * h.row(t) + spec_.context_mix * h.row(t - 1);
        }
        const Layer& w = layers_[layer];
        Mat q = h * w.wq.transpose();
        Mat k = h * w.wk.transpose();
        const Mat v = h * w.wv.transpose();
        q.rowwise() += w.mq.row(0);
        k.rowwise() += w.mk.row(0);
        if (spec_.nuisance_rank > 0) {
            Rng rng(mix_seed(noise_seed, 0x6e7a00 + layer));
            const Mat z = gaussian(n, static_cast<Eigen::Index>(spec_.nuisance_rank), rng);
            q += spec_.nuisance_scale * (z * w.nuisance.transpose());
            k -= (k * w.nuisance) * w.nuisance.transpose();
        }
        return LayerQkv{to_matrix(q), to_matrix(k), to_matrix(v)};
    }

private:
    struct Layer {
        Mat wq, wk, wv, mq, mk, nuisance;
    };

    static std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static Mat gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
        Mat m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
        }
        return m;
    }

    // rows x cols with orthonormal columns.
    static Mat orthonormal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
        const Mat g = gaussian(rows, cols, rng);
        Eigen::HouseholderQR<Mat> qr(g);
        return qr.householderQ() * Mat::Identity(rows, cols);
    }

    static Matrix to_matrix(const Mat& m) {
        Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(m(r, c));
            }
        }
        return out;
    }

    ToyModelSpec spec_;
    Mat embedding_;
    std::vector<std::vector<std::uint32_t>> motifs_;
    std::vector<Layer> layers_;
};

}  // namespace esa
