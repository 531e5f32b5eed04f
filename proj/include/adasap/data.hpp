#pragma once

// Labelled image sets: a built-in synthetic shapes generator plus IDX and CSV
// readers, seeded shuffling and batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adasap/model.hpp"
#include "adasap/tensor.hpp"

namespace adasap {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Dataset {
    std::size_t channels = 1;
    std::size_t height = 28;
    std::size_t width = 28;
    std::vector<real> images;  // [N, C, H, W], values in [0, 1]
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }
    Shape image_shape() const { return {channels, height, width}; }

    std::span<const real> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }
    std::span<real> image(std::size_t i) { return {images.data() + i * image_size(), image_size()}; }

    Batch batch(std::span<const std::size_t> indices) const {
        if (indices.empty()) throw DataError("empty batch");
        std::vector<real> x;
        x.reserve(indices.size() * image_size());
        std::vector<int> y;
        y.reserve(indices.size());
        for (auto i : indices) {
            const auto img = image(i);
            x.insert(x.end(), img.begin(), img.end());
            y.push_back(labels.at(i));
        }
        return {Tensor({indices.size(), channels, height, width}, std::move(x)), std::move(y)};
    }

    // Contiguous batches in index order; the last one may be short.
    std::vector<Batch> batches(std::size_t batch_size, std::size_t limit = 0) const {
        std::vector<Batch> out;
        const std::size_t n = limit ? std::min(limit * batch_size, size()) : size();
        std::vector<std::size_t> idx;
        for (std::size_t start = 0; start < n; start += batch_size) {
            idx.clear();
            for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
            out.push_back(batch(idx));
        }
        return out;
    }

    void validate() const {
        if (images.size() != size() * image_size()) throw DataError("image buffer does not match label count");
    }
};

// Seeded permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

// Ten classes of noisy grayscale glyphs (disc, ring, square, frame, bars,
// crosses, triangle, dot pair) at random position, size, stroke and contrast.
inline Dataset make_synthetic_shapes(std::size_t count, std::uint64_t seed, std::size_t side = 28,
                                     real noise_std = real(0.08)) {
    Dataset d;
    d.channels = 1;
    d.height = side;
    d.width = side;
    d.images.assign(count * side * side, real(0));
    d.labels.resize(count);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<real> u(0, 1);
    std::normal_distribution<real> nd(0, 1);
    const real S = static_cast<real>(side);
    for (std::size_t n = 0; n < count; ++n) {
        const int cls = static_cast<int>(n % 10);
        d.labels[n] = cls;
        const real cx = S / 2 + (u(rng) - real(0.5)) * S * real(0.3);
        const real cy = S / 2 + (u(rng) - real(0.5)) * S * real(0.3);
        const real r = S * (real(0.16) + real(0.12) * u(rng));
        const real stroke = real(1.0) + real(1.5) * u(rng);
        const real fg = real(0.55) + real(0.45) * u(rng);
        const real bg = real(0.15) * u(rng);
        auto img = d.image(n);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const real px = static_cast<real>(x) + real(0.5) - cx;
                const real py = static_cast<real>(y) + real(0.5) - cy;
                const real dist = std::hypot(px, py);
                const real ax = std::abs(px), ay = std::abs(py);
                bool on = false;
                switch (cls) {
                    case 0: on = dist <= r; break;
                    case 1: on = std::abs(dist - r) <= stroke; break;
                    case 2: on = ax <= r * real(0.85) && ay <= r * real(0.85); break;
                    case 3: on = std::max(ax, ay) <= r * real(0.9) && std::max(ax, ay) >= r * real(0.9) - 2 * stroke; break;
                    case 4: on = ay <= stroke && ax <= r; break;
                    case 5: on = ax <= stroke && ay <= r; break;
                    case 6: on = (ax <= stroke && ay <= r) || (ay <= stroke && ax <= r); break;
                    case 7: on = std::abs(ax - ay) <= stroke * real(1.2) && dist <= r * real(1.1); break;
                    case 8: on = py <= r * real(0.7) && py >= -r * real(0.8) && ax <= (py + r * real(0.8)) * real(0.6); break;
                    case 9: on = std::hypot(ax - r * real(0.6), py) <= r * real(0.35); break;
                    default: break;
                }
                real v = on ? fg : bg;
                v += noise_std * nd(rng);
                img[y * side + x] = std::clamp(v, real(0), real(1));
            }
    }
    return d;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw DataError("truncated IDX header");
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

inline void write_be32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                static_cast<char>(v)};
    os.write(b.data(), 4);
}

}  // namespace detail

// MNIST-style IDX pair: unsigned-byte images [N, H, W] and labels [N].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary), fl(labels_path, std::ios::binary);
    if (!fi) throw DataError("cannot open " + images_path);
    if (!fl) throw DataError("cannot open " + labels_path);
    if (detail::read_be32(fi) != 0x00000803) throw DataError(images_path + ": not an IDX3 unsigned-byte file");
    const auto n = detail::read_be32(fi), h = detail::read_be32(fi), w = detail::read_be32(fi);
    if (detail::read_be32(fl) != 0x00000801) throw DataError(labels_path + ": not an IDX1 unsigned-byte file");
    if (detail::read_be32(fl) != n) throw DataError("image and label counts differ");
    Dataset d;
    d.height = h;
    d.width = w;
    std::vector<unsigned char> px(static_cast<std::size_t>(n) * h * w), lb(n);
    if (!fi.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size())))
        throw DataError(images_path + ": truncated pixel data");
    if (!fl.read(reinterpret_cast<char*>(lb.data()), static_cast<std::streamsize>(lb.size())))
        throw DataError(labels_path + ": truncated label data");
    d.images.resize(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) d.images[i] = static_cast<real>(px[i]) / real(255);
    d.labels.assign(lb.begin(), lb.end());
    return d;
}

inline void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    if (d.channels != 1) throw DataError("IDX export supports single-channel images only");
    std::ofstream fi(images_path, std::ios::binary), fl(labels_path, std::ios::binary);
    if (!fi || !fl) throw DataError("cannot write IDX files");
    detail::write_be32(fi, 0x00000803);
    detail::write_be32(fi, static_cast<std::uint32_t>(d.size()));
    detail::write_be32(fi, static_cast<std::uint32_t>(d.height));
    detail::write_be32(fi, static_cast<std::uint32_t>(d.width));
    for (auto v : d.images) fi.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, real(0), real(1)) * 255))));
    detail::write_be32(fl, 0x00000801);
    detail::write_be32(fl, static_cast<std::uint32_t>(d.size()));
    for (auto y : d.labels) fl.put(static_cast<char>(y));
}

// One example per line: label followed by C*H*W pixel values. Values above 1
// are taken as 0-255 bytes.
inline Dataset load_csv(const std::string& path, std::size_t channels, std::size_t height, std::size_t width) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    Dataset d;
    d.channels = channels;
    d.height = height;
    d.width = width;
    std::string line;
    bool bytes = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ',')) continue;
        int label = 0;
        try {
            label = std::stoi(cell);
        } catch (const std::exception&) {
            if (lineno == 1) continue;  // header row
            throw DataError(path + ":" + std::to_string(lineno) + ": bad label");
        }
        std::size_t count = 0;
        while (std::getline(ss, cell, ',')) {
            const real v = static_cast<real>(std::stod(cell));
            bytes = bytes || v > 1;
            d.images.push_back(v);
            ++count;
        }
        if (count != d.image_size())
            throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(d.image_size()) +
                            " pixels, got " + std::to_string(count));
        d.labels.push_back(label);
    }
    if (bytes)
        for (auto& v : d.images) v /= real(255);
    return d;
}

}  // namespace adasap
