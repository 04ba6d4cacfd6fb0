// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "esa/errors.hpp"

namespace esa {

/// Dense row-major matrix of 32-bit floats.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) {
            throw DimensionError("matrix data length " + std::to_string(data.size()) + " != " +
                                 std::to_string(r) + "x" + std::to_string(c));
        }
    }

    /// Empty matrix with a fixed column count, ready for append_row.
    static Matrix with_cols(std::size_t c) { return Matrix(0, c); }

    bool empty() const noexcept { return rows == 0; }

    float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    void append_row(std::span<const float> values) {
        if (values.size() != cols) {
            throw DimensionError("append_row: row length " + std::to_string(values.size()) + " != cols " +
                                 std::to_string(cols));
        }
        data.insert(data.end(), values.begin(), values.end());
        ++rows;
    }

    void append_rows(const Matrix& other) {
        if (other.rows == 0) return;
        if (other.cols != cols) {
            throw DimensionError("append_rows: column mismatch " + std::to_string(other.cols) + " vs " +
                                 std::to_string(cols));
        }
        data.insert(data.end(), other.data.begin(), other.data.end());
        rows += other.rows;
    }

    /// Drops the first n rows, keeping the remainder in order.
    void erase_front_rows(std::size_t n) {
        n = std::min(n, rows);
        data.erase(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n * cols));
        rows -= n;
    }

    Matrix slice_rows(std::size_t begin, std::size_t end) const {
        if (begin > end || end > rows) throw IndexError("slice_rows: bad range");
        return Matrix(end - begin, cols,
                      std::vector<float>(data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                         data.begin() + static_cast<std::ptrdiff_t>(end * cols)));
    }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(), [](float x) { return std::isfinite(x); });
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline Matrix vstack(const Matrix& top, const Matrix& bottom) {
    if (top.rows == 0 && top.cols == 0) return bottom;
    Matrix out = top;
    out.append_rows(bottom);
    return out;
}

/// Seeded generator with outputs defined by this header alone, so streams are identical across
/// standard library implementations (the std distributions are not).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling avoids modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ConfigError("Rng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (float& x : m.data) x = static_cast<float>(rng.normal() * stddev);
    return m;
}

/// Running FLOP tally. Multiply-add counts as 2, exp/divide/subtract as 1; comparisons are free.
struct FlopCounter {
    std::uint64_t count = 0;
    void add(std::uint64_t n) noexcept { count += n; }
};

inline void count_flops(FlopCounter* counter, std::uint64_t n) noexcept {
    if (counter != nullptr) counter->add(n);
}

/// Sequential float dot product. Every score path in the library goes through this one routine so
/// that identical inputs give bit-identical scores.
inline float dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

struct RopeParams {
    std::size_t head_dim = 0;
    double base = 10000.0;

    void validate() const {
        if (head_dim == 0 || head_dim % 2 != 0) {
            throw DimensionError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
        }
        if (!(base > 1.0)) throw ConfigError("rope base must be > 1");
    }
};

/// Rotates pairs (x[2i], x[2i+1]) by position * base^(-2i/head_dim).
inline void apply_rope_inplace(std::span<float> vec, std::size_t position, const RopeParams& params) {
    if (vec.size() % 2 != 0) throw DimensionError("apply_rope: odd vector length " + std::to_string(vec.size()));
    if (vec.size() != params.head_dim) {
        throw DimensionError("apply_rope: vector length " + std::to_string(vec.size()) + " != head_dim " +
                             std::to_string(params.head_dim));
    }
    if (position == 0) return;
    const double dim = static_cast<double>(params.head_dim);
    for (std::size_t i = 0; i < vec.size() / 2; ++i) {
        const double angle = static_cast<double>(position) * std::pow(params.base, -2.0 * static_cast<double>(i) / dim);
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x0 = vec[2 * i];
        const double x1 = vec[2 * i + 1];
        vec[2 * i] = static_cast<float>(x0 * c - x1 * s);
        vec[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
    }
}

inline std::vector<float> apply_rope(std::span<const float> vec, std::size_t position, const RopeParams& params) {
    std::vector<float> out(vec.begin(), vec.end());
    apply_rope_inplace(out, position, params);
    return out;
}

/// Applies RoPE to every head of row r at positions[r]. Rows hold heads concatenated.
inline void rope_rows(Matrix& m, std::span<const std::size_t> positions, const RopeParams& params) {
    params.validate();
    if (positions.size() != m.rows) throw DimensionError("rope_rows: one position per row required");
    if (m.cols % params.head_dim != 0) throw DimensionError("rope_rows: cols not a multiple of head_dim");
    for (std::size_t r = 0; r < m.rows; ++r) {
        auto row = m.row(r);
        for (std::size_t off = 0; off < m.cols; off += params.head_dim) {
            apply_rope_inplace(row.subspan(off, params.head_dim), positions[r], params);
        }
    }
}

struct SoftmaxResult {
    std::vector<float> probabilities;
    double lse = 0.0;
};

namespace detail {

// -inf entries are treated as masked and receive probability 0. All-masked input yields lse = -inf.
inline double softmax_lse_into(std::span<const float> logits, std::span<double> probs) {
    float max_logit = -std::numeric_limits<float>::infinity();
    for (float x : logits) max_logit = std::max(max_logit, x);
    if (max_logit == -std::numeric_limits<float>::infinity()) {
        std::fill(probs.begin(), probs.end(), 0.0);
        return -std::numeric_limits<double>::infinity();
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(static_cast<double>(logits[i]) - static_cast<double>(max_logit));
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
    return static_cast<double>(max_logit) + std::log(sum);
}

}  // namespace detail

/// Max-shifted softmax returning probabilities and log-sum-exp.
inline SoftmaxResult softmax_lse(std::span<const float> logits) {
    if (logits.empty()) throw DimensionError("softmax_lse: empty input");
    std::vector<double> probs(logits.size());
    SoftmaxResult out;
    out.lse = detail::softmax_lse_into(logits, probs);
    out.probabilities.assign(probs.begin(), probs.end());
    return out;
}

/// Attention output for a block of query rows plus the per-row, per-head log-sum-exp normalizer.
struct AttentionBranchOutput {
    Matrix output;
    std::vector<double> lse;  // [row * heads + head]
    std::size_t heads = 0;

    double lse_at(std::size_t row, std::size_t head) const { return lse[row * heads + head]; }
};

/**
 * Multi-head scaled dot-product attention over one key/value block.
 *
 * Rows of queries/keys/values hold `heads` concatenated per-head vectors. With `causal`, queries are
 * aligned to the trailing rows of keys: query i sits at key index (keys.rows - queries.rows + i) and
 * sees keys up to and including that index. Masked logits are set to -inf before the softmax. An
 * empty key block produces zero output with lse = -inf.
 */
inline AttentionBranchOutput attention_branch(const Matrix& queries, const Matrix& keys, const Matrix& values,
                                              std::size_t heads, bool causal, float scale,
                                              FlopCounter* counter = nullptr) {
    if (heads == 0 || queries.cols % heads != 0) throw DimensionError("attention_branch: cols not divisible by heads");
    if (keys.rows > 0 && queries.cols != keys.cols) throw DimensionError("attention_branch: query/key width mismatch");
    if (keys.rows != values.rows) throw DimensionError("attention_branch: key/value row mismatch");
    if (values.rows > 0 && values.cols != queries.cols) throw DimensionError("attention_branch: value width mismatch");
    if (causal && queries.rows > keys.rows) {
        throw ShapeError("attention_branch: causal with " + std::to_string(queries.rows) + " queries > " +
                         std::to_string(keys.rows) + " keys");
    }

    const std::size_t width = queries.cols;
    const std::size_t head_dim = width / heads;
    const std::size_t n_keys = keys.rows;
    const std::size_t offset = n_keys - std::min(n_keys, queries.rows);

    AttentionBranchOutput out;
    out.heads = heads;
    out.output = Matrix(queries.rows, width);
    out.lse.assign(queries.rows * heads, -std::numeric_limits<double>::infinity());
    if (n_keys == 0) return out;

    std::vector<float> scaled(width);
    std::vector<float> logits(n_keys);
    std::vector<double> probs(n_keys);
    std::vector<double> acc(head_dim);
    for (std::size_t i = 0; i < queries.rows; ++i) {
        const auto q = queries.row(i);
        for (std::size_t c = 0; c < width; ++c) scaled[c] = q[c] * scale;
        count_flops(counter, width);
        const std::size_t visible = causal ? offset + i + 1 : n_keys;
        for (std::size_t h = 0; h < heads; ++h) {
            const auto qh = std::span<const float>(scaled).subspan(h * head_dim, head_dim);
            // Dense logits, then -inf masking.
            for (std::size_t j = 0; j < n_keys; ++j) {
                logits[j] = dot(qh, keys.row(j).subspan(h * head_dim, head_dim));
            }
            for (std::size_t j = visible; j < n_keys; ++j) logits[j] = -std::numeric_limits<float>::infinity();
            out.lse[i * heads + h] = detail::softmax_lse_into(logits, probs);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < n_keys; ++j) {
                const auto vh = values.row(j).subspan(h * head_dim, head_dim);
                for (std::size_t c = 0; c < head_dim; ++c) acc[c] += probs[j] * vh[c];
            }
            auto orow = out.output.row(i).subspan(h * head_dim, head_dim);
            for (std::size_t c = 0; c < head_dim; ++c) orow[c] = static_cast<float>(acc[c]);
        }
        // QK (2d) + softmax (3) + AV (2d) per key per head.
        count_flops(counter, static_cast<std::uint64_t>(n_keys) * (4 * width + 3 * heads));
    }
    return out;
}

}  // namespace esa
