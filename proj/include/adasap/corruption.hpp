#pragma once

// Evaluation-time image corruptions at five severities and the robustness
// ratio R_C = acc_C / acc_val.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasap/data.hpp"
#include "adasap/model.hpp"

namespace adasap {

enum class CorruptionKind { gaussian_noise, impulse_noise, box_blur, brightness, contrast, pixelate };

inline constexpr std::array<CorruptionKind, 6> kAllCorruptions{
    CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise, CorruptionKind::box_blur,
    CorruptionKind::brightness,     CorruptionKind::contrast,      CorruptionKind::pixelate};

inline const char* to_string(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::gaussian_noise: return "gaussian_noise";
        case CorruptionKind::impulse_noise: return "impulse_noise";
        case CorruptionKind::box_blur: return "box_blur";
        case CorruptionKind::brightness: return "brightness";
        case CorruptionKind::contrast: return "contrast";
        case CorruptionKind::pixelate: return "pixelate";
    }
    return "unknown";
}

inline CorruptionKind parse_corruption(const std::string& s) {
    for (auto k : kAllCorruptions)
        if (s == to_string(k)) return k;
    throw std::invalid_argument("unknown corruption kind '" + s + "'");
}

// Severity tables, index = severity - 1.
namespace severity_table {
inline constexpr std::array<double, 5> gaussian_sigma{0.04, 0.08, 0.12, 0.18, 0.26};
inline constexpr std::array<double, 5> impulse_fraction{0.02, 0.05, 0.08, 0.12, 0.17};
inline constexpr std::array<int, 5> blur_kernel{2, 3, 4, 5, 7};
inline constexpr std::array<double, 5> brightness_offset{0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 5> contrast_factor{0.6, 0.45, 0.3, 0.2, 0.1};
inline constexpr std::array<int, 5> pixelate_block{2, 3, 4, 5, 7};
}  // namespace severity_table

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 1;  // 0 is the identity
    std::uint64_t seed = 0;

    void validate() const {
        if (severity < 0 || severity > 5)
            throw std::invalid_argument("corruption severity must lie in 0..5, got " + std::to_string(severity));
    }
};

namespace detail {

// Box mean over a k x k window anchored so that even kernels lean right/down; edges replicate.
inline std::vector<real> box_blur(std::span<const real> img, std::size_t C, std::size_t H, std::size_t W, int k) {
    std::vector<real> out(img.size());
    const int lo = (k - 1) / 2, hi = k - 1 - lo;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                real s = 0;
                for (int dy = -lo; dy <= hi; ++dy)
                    for (int dx = -lo; dx <= hi; ++dx) {
                        const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(H) - 1));
                        const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(W) - 1));
                        s += img[(c * H + yy) * W + xx];
                    }
                out[(c * H + y) * W + x] = s / static_cast<real>(k * k);
            }
    return out;
}

inline std::vector<real> pixelate(std::span<const real> img, std::size_t C, std::size_t H, std::size_t W,
                                  std::size_t b) {
    std::vector<real> out(img.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t by = 0; by < H; by += b)
            for (std::size_t bx = 0; bx < W; bx += b) {
                const std::size_t ey = std::min(H, by + b), ex = std::min(W, bx + b);
                real s = 0;
                for (std::size_t y = by; y < ey; ++y)
                    for (std::size_t x = bx; x < ex; ++x) s += img[(c * H + y) * W + x];
                s /= static_cast<real>((ey - by) * (ex - bx));
                for (std::size_t y = by; y < ey; ++y)
                    for (std::size_t x = bx; x < ex; ++x) out[(c * H + y) * W + x] = s;
            }
    return out;
}

}  // namespace detail

// Corrupts one [C, H, W] image with values in [0, 1]; output is clipped to [0, 1].
inline std::vector<real> corrupt(std::span<const real> image, const Shape& shape, const CorruptionSpec& spec) {
    spec.validate();
    if (shape.size() != 3 || shape_numel(shape) != image.size())
        throw DimensionError("corrupt: expected a [C,H,W] image, got " + shape_string(shape));
    std::vector<real> out(image.begin(), image.end());
    if (spec.severity == 0) return out;
    const auto s = static_cast<std::size_t>(spec.severity - 1);
    const auto C = shape[0], H = shape[1], W = shape[2];
    std::mt19937_64 rng(spec.seed);
    switch (spec.kind) {
        case CorruptionKind::gaussian_noise: {
            std::normal_distribution<real> nd(0, static_cast<real>(severity_table::gaussian_sigma[s]));
            for (auto& v : out) v += nd(rng);
            break;
        }
        case CorruptionKind::impulse_noise: {
            std::uniform_real_distribution<real> u(0, 1);
            const real p = static_cast<real>(severity_table::impulse_fraction[s]);
            for (auto& v : out) {
                const real r = u(rng);
                if (r < p / 2) v = 0;
                else if (r < p) v = 1;
            }
            break;
        }
        case CorruptionKind::box_blur: out = detail::box_blur(image, C, H, W, severity_table::blur_kernel[s]); break;
        case CorruptionKind::brightness:
            for (auto& v : out) v += static_cast<real>(severity_table::brightness_offset[s]);
            break;
        case CorruptionKind::contrast: {
            real m = 0;
            for (auto v : out) m += v;
            m /= static_cast<real>(out.size());
            const real f = static_cast<real>(severity_table::contrast_factor[s]);
            for (auto& v : out) v = (v - m) * f + m;
            break;
        }
        case CorruptionKind::pixelate:
            out = detail::pixelate(image, C, H, W, static_cast<std::size_t>(severity_table::pixelate_block[s]));
            break;
    }
    for (auto& v : out) v = std::clamp(v, real(0), real(1));
    return out;
}

inline Tensor corrupt(const Tensor& image, const CorruptionSpec& spec) {
    return Tensor(image.shape(), corrupt(image.data(), image.shape(), spec));
}

// Per-image seeds are derived from (spec.seed, kind, severity, index).
inline Dataset corrupt_dataset(const Dataset& clean, CorruptionKind kind, int severity, std::uint64_t seed) {
    Dataset out = clean;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(kind), static_cast<std::uint32_t>(severity),
                          static_cast<std::uint32_t>(i)};
        std::array<std::uint32_t, 2> s{};
        seq.generate(s.begin(), s.end());
        const std::uint64_t image_seed = (std::uint64_t{s[0]} << 32) | s[1];
        const auto img = corrupt(clean.image(i), clean.image_shape(), {kind, severity, image_seed});
        std::copy(img.begin(), img.end(), out.image(i).begin());
    }
    return out;
}

struct CellPredictions {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 1;
    std::vector<int> predictions;
};

struct CellResult {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 1;
    std::size_t correct = 0;
    std::size_t total = 0;
    real accuracy = 0;
};

struct RobustnessReport {
    real acc_val = 0;
    std::size_t val_correct = 0;
    std::size_t val_total = 0;
    std::vector<CellResult> cells;
    real acc_c = 0;
    std::optional<real> ratio;  // R_C; absent when acc_val == 0
    bool flagged = false;

    // R_C recomputed from the per-cell table alone.
    std::optional<real> ratio_from_cells() const {
        if (cells.empty() || acc_val == 0) return std::nullopt;
        real s = 0;
        for (const auto& c : cells) s += static_cast<real>(c.correct) / static_cast<real>(c.total);
        return (s / static_cast<real>(cells.size())) / acc_val;
    }

    void write_csv(std::ostream& os) const {
        os.precision(17);
        os << "kind,severity,correct,total,accuracy\n";
        for (const auto& c : cells)
            os << to_string(c.kind) << ',' << c.severity << ',' << c.correct << ',' << c.total << ',' << c.accuracy << '\n';
        os << "summary,0," << val_correct << ',' << val_total << ',' << acc_val << '\n';
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"acc_val", acc_val}, {"acc_c", acc_c}, {"cells", cells.size()}, {"flagged", flagged}};
        j["robustness_ratio"] = ratio ? nlohmann::json(*ratio) : nlohmann::json(nullptr);
        return j;
    }
};

inline std::size_t count_correct(std::span<const int> labels, std::span<const int> predictions) {
    if (labels.size() != predictions.size()) throw DimensionError("prediction count does not match label count");
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) n += labels[i] == predictions[i];
    return n;
}

// acc_val from clean predictions, acc_C as the uniform mean over cells.
inline RobustnessReport summarize_predictions(std::span<const int> labels, std::span<const int> clean_predictions,
                                              const std::vector<CellPredictions>& cells) {
    if (labels.empty()) throw std::invalid_argument("robustness evaluation on an empty set");
    RobustnessReport r;
    r.val_total = labels.size();
    r.val_correct = count_correct(labels, clean_predictions);
    r.acc_val = static_cast<real>(r.val_correct) / static_cast<real>(r.val_total);
    real sum = 0;
    for (const auto& c : cells) {
        CellResult cr{c.kind, c.severity, count_correct(labels, c.predictions), labels.size(), 0};
        cr.accuracy = static_cast<real>(cr.correct) / static_cast<real>(cr.total);
        sum += cr.accuracy;
        r.cells.push_back(cr);
    }
    r.acc_c = cells.empty() ? r.acc_val : sum / static_cast<real>(cells.size());
    if (r.acc_val == 0) r.flagged = true;
    else r.ratio = r.acc_c / r.acc_val;
    return r;
}

inline std::vector<int> predict(const Model& model, const Dataset& set, std::size_t batch_size = 256) {
    std::vector<int> out;
    out.reserve(set.size());
    for (const auto& b : set.batches(batch_size)) {
        const auto p = argmax_rows(model.forward(b.images));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

// `predictor(const Dataset&) -> std::vector<int>` is run on the clean set and
// on every (kind, severity) corruption of it.
template <class Predictor>
    requires std::invocable<Predictor&, const Dataset&>
RobustnessReport evaluate(Predictor&& predictor, const Dataset& clean, const std::vector<CorruptionKind>& kinds,
                          const std::vector<int>& severities, std::uint64_t seed) {
    if (clean.size() == 0) throw std::invalid_argument("robustness evaluation on an empty set");
    const auto clean_pred = predictor(clean);
    std::vector<CellPredictions> cells;
    for (auto k : kinds)
        for (auto s : severities) cells.push_back({k, s, predictor(corrupt_dataset(clean, k, s, seed))});
    return summarize_predictions(clean.labels, clean_pred, cells);
}

inline RobustnessReport evaluate(const Model& model, const Dataset& clean, const std::vector<CorruptionKind>& kinds,
                                 const std::vector<int>& severities, std::uint64_t seed) {
    return evaluate([&model](const Dataset& d) { return predict(model, d); }, clean, kinds, severities, seed);
}

}  // namespace adasap
