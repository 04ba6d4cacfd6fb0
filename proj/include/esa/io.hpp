// Copyright 2026 The ESA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Binary file formats. All integers are little-endian uint32, all floats little-endian IEEE-754
// binary32.
//
//   calibration dump:  "ESACAL1\0" | N | d_H | layer | N*d_H query floats | N*d_H key floats
//   projection file:   "ESAPROJ1" | d' | d_H | w_q (d'*d_H) | b_q (d') | w_k (d'*d_H) | b_k (d')
//   cache snapshot:    one JSON header line (counts, capacities, positions), then the float rows of
//                      initial keys, initial values, middle keys, middle values, middle compressed
//                      keys, local keys, local values

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esa/compression.hpp"
#include "esa/errors.hpp"
#include "esa/kv_cache.hpp"
#include "esa/tensor.hpp"

namespace esa::io {

inline constexpr std::array<char, 8> kCalibrationMagic = {'E', 'S', 'A', 'C', 'A', 'L', '1', '\0'};
inline constexpr std::array<char, 8> kProjectionMagic = {'E', 'S', 'A', 'P', 'R', 'O', 'J', '1'};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_floats(std::ostream& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
    } else {
        for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
}

class Reader {
public:
    Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

    void expect_magic(const std::array<char, 8>& magic) {
        std::array<char, 8> got{};
        bytes(got.data(), got.size());
        if (got != magic) throw FormatError(path_ + ": bad magic, expected " + std::string(magic.data(), 7));
    }

    std::uint32_t u32() {
        unsigned char b[4];
        bytes(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    std::vector<float> floats(std::size_t n) {
        std::vector<float> out(n);
        if constexpr (std::endian::native == std::endian::little) {
            bytes(reinterpret_cast<char*>(out.data()), n * 4);
        } else {
            for (float& f : out) f = std::bit_cast<float>(u32());
        }
        return out;
    }

    Matrix matrix(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, floats(rows * cols)); }

    void expect_end() {
        if (in_.peek() != std::char_traits<char>::eof()) throw FormatError(path_ + ": trailing bytes after payload");
    }

    const std::string& path() const { return path_; }

private:
    void bytes(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_ + ": truncated file");
    }

    std::istream& in_;
    std::string path_;
};

inline std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError(path.string() + ": cannot create directory: " + ec.message());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string() + ": cannot open for reading");
    return in;
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > 0xffffffffu) throw ConfigError(std::string(what) + " does not fit in uint32");
    return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline void write_calibration(const std::filesystem::path& path, const CalibrationSet& calib) {
    calib.validate();
    auto out = detail::open_out(path);
    out.write(kCalibrationMagic.data(), 8);
    detail::put_u32(out, detail::checked_u32(calib.size(), "N"));
    detail::put_u32(out, detail::checked_u32(calib.queries.cols, "d_H"));
    detail::put_u32(out, detail::checked_u32(calib.layer_index, "layer"));
    detail::put_floats(out, calib.queries.data);
    detail::put_floats(out, calib.keys.data);
    if (!out) throw IoError(path.string() + ": write failed");
}

inline CalibrationSet read_calibration(const std::filesystem::path& path) {
    auto in = detail::open_in(path);
    detail::Reader r(in, path.string());
    r.expect_magic(kCalibrationMagic);
    const std::uint32_t n = r.u32();
    const std::uint32_t d = r.u32();
    const std::uint32_t layer = r.u32();
    if (n < 2 || d == 0) throw FormatError(path.string() + ": invalid dims N=" + std::to_string(n) + " d_H=" + std::to_string(d));
    CalibrationSet calib;
    calib.layer_index = layer;
    calib.queries = r.matrix(n, d);
    calib.keys = r.matrix(n, d);
    r.expect_end();
    calib.source = path.string();
    return calib;
}

inline void write_projection(const std::filesystem::path& path, const ProjectionPair& pair) {
    pair.validate();
    auto out = detail::open_out(path);
    out.write(kProjectionMagic.data(), 8);
    detail::put_u32(out, detail::checked_u32(pair.reduced_dim(), "d'"));
    detail::put_u32(out, detail::checked_u32(pair.full_dim(), "d_H"));
    detail::put_floats(out, pair.query.weight.data);
    detail::put_floats(out, pair.query.bias);
    detail::put_floats(out, pair.key.weight.data);
    detail::put_floats(out, pair.key.bias);
    if (!out) throw IoError(path.string() + ": write failed");
}

/// The file does not carry the layer; the caller supplies it (file names encode it).
inline ProjectionPair read_projection(const std::filesystem::path& path, std::size_t layer_index) {
    auto in = detail::open_in(path);
    detail::Reader r(in, path.string());
    r.expect_magic(kProjectionMagic);
    const std::uint32_t dp = r.u32();
    const std::uint32_t d = r.u32();
    if (dp == 0 || d == 0 || dp > d) {
        throw FormatError(path.string() + ": invalid dims d'=" + std::to_string(dp) + " d_H=" + std::to_string(d));
    }
    ProjectionPair pair;
    pair.layer_index = layer_index;
    pair.query.weight = r.matrix(dp, d);
    pair.query.bias = r.floats(dp);
    pair.key.weight = r.matrix(dp, d);
    pair.key.bias = r.floats(dp);
    r.expect_end();
    return pair;
}

inline void write_snapshot(const std::filesystem::path& path, const SegmentedKvCache& cache) {
    nlohmann::json header = {
        {"format", "ESASNAP1"},
        {"layer", cache.layer_index()},
        {"initial_capacity", cache.initial_capacity()},
        {"local_capacity", cache.local_capacity()},
        {"full_dim", cache.full_dim()},
        {"reduced_dim", cache.reduced_dim()},
        {"initial_len", cache.initial_len()},
        {"middle_len", cache.middle_len()},
        {"local_len", cache.local_len()},
        {"initial_positions", cache.initial_positions()},
        {"middle_positions", cache.middle_positions()},
        {"local_positions", cache.local_positions()},
    };
    auto out = detail::open_out(path);
    out << header.dump() << '\n';
    for (const Matrix* m : {&cache.initial_keys(), &cache.initial_values(), &cache.middle_keys(),
                            &cache.middle_values(), &cache.middle_compressed(), &cache.local_keys(),
                            &cache.local_values()}) {
        detail::put_floats(out, m->data);
    }
    if (!out) throw IoError(path.string() + ": write failed");
}

inline SegmentedKvCache read_snapshot(const std::filesystem::path& path) {
    auto in = detail::open_in(path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing snapshot header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(line);
        if (h.at("format") != "ESASNAP1") throw FormatError(path.string() + ": not a cache snapshot");
        detail::Reader r(in, path.string());
        const std::size_t d = h.at("full_dim"), dp = h.at("reduced_dim");
        const std::size_t li = h.at("initial_len"), lm = h.at("middle_len"), ll = h.at("local_len");
        Matrix ik = r.matrix(li, d), iv = r.matrix(li, d);
        Matrix mk = r.matrix(lm, d), mv = r.matrix(lm, d), mc = r.matrix(lm, dp);
        Matrix lk = r.matrix(ll, d), lv = r.matrix(ll, d);
        r.expect_end();
        return SegmentedKvCache::restore(h.at("initial_capacity"), h.at("local_capacity"), h.at("layer"), std::move(ik),
                                         std::move(iv), std::move(mk), std::move(mv), std::move(mc), std::move(lk),
                                         std::move(lv), h.at("initial_positions").get<std::vector<std::uint64_t>>(),
                                         h.at("middle_positions").get<std::vector<std::uint64_t>>(),
                                         h.at("local_positions").get<std::vector<std::uint64_t>>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad snapshot header: " + e.what());
    }
}

}  // namespace esa::io
