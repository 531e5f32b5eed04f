#pragma once

// Neuron saliency criteria and the score -> perturbation-radius mapping.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "adasap/parameters.hpp"

namespace adasap {

enum class Criterion { magnitude_l2, taylor_first_order };

// Names as they appear in config files and metrics output.
inline const char* to_string(Criterion c) { return c == Criterion::magnitude_l2 ? "magnitude_l2" : "taylor"; }

inline Criterion parse_criterion(const std::string& s) {
    if (s == "magnitude_l2" || s == "magnitude") return Criterion::magnitude_l2;
    if (s == "taylor" || s == "taylor_first_order") return Criterion::taylor_first_order;
    throw std::invalid_argument("unknown importance criterion '" + s + "'");
}

struct ImportanceScore {
    std::string partition_id;
    std::size_t ordinal = 0;
    real value = 0;
    Criterion criterion = Criterion::magnitude_l2;
    std::size_t step = 0;
    bool dead = false;
};

struct RhoBounds {
    real rho_min = real(0.01);
    real rho_max = real(2.0);
    std::map<std::string, real> resolved;

    void validate() const {
        if (!(rho_min > 0) || !(rho_max >= rho_min) || !std::isfinite(rho_max))
            throw std::invalid_argument("rho bounds must satisfy 0 < rho_min <= rho_max");
    }

    real at(const std::string& id) const {
        const auto it = resolved.find(id);
        if (it == resolved.end()) throw std::out_of_range("no resolved rho for partition " + id);
        return it->second;
    }
};

// l2 norm of every scalar in the partition.
inline ImportanceScore score_magnitude(const std::vector<Tensor>& params, const ParameterPartition& p,
                                       std::size_t step = 0) {
    ImportanceScore s{p.id, p.ordinal, 0, Criterion::magnitude_l2, step, !p.alive};
    if (!p.alive) return s;
    real sq = 0;
    for (auto v : gather(params, p)) sq += v * v;
    s.value = std::sqrt(sq);
    return s;
}

// (sum_{w in p} g_w w)^2: squared first-order loss change from zeroing the neuron.
inline ImportanceScore score_taylor(const std::vector<Tensor>& params, const ParamBuffers& grads,
                                    const ParameterPartition& p, std::size_t step = 0) {
    ImportanceScore s{p.id, p.ordinal, 0, Criterion::taylor_first_order, step, !p.alive};
    if (!p.alive) return s;
    if (grads.size() != params.size()) throw std::invalid_argument("taylor score needs gradients for every parameter");
    for (const auto& sl : p.slices)
        if (grads[sl.tensor].size() < sl.offset + sl.length)
            throw std::invalid_argument("taylor score: gradients missing for partition " + p.id);
    const auto w = gather(params, p);
    const auto g = gather(grads, p);
    real ip = 0;
    for (std::size_t i = 0; i < w.size(); ++i) ip += g[i] * w[i];
    s.value = ip * ip;
    return s;
}

// Scores for the given partitions. Taylor requires `grads`.
inline std::vector<ImportanceScore> score_partitions(const std::vector<Tensor>& params,
                                                     const std::vector<ParameterPartition>& parts, Criterion c,
                                                     const ParamBuffers* grads, std::size_t step = 0) {
    std::vector<ImportanceScore> out;
    out.reserve(parts.size());
    for (const auto& p : parts) {
        if (c == Criterion::magnitude_l2) {
            out.push_back(score_magnitude(params, p, step));
        } else {
            if (!grads) throw std::invalid_argument("taylor criterion requires gradients");
            out.push_back(score_taylor(params, *grads, p, step));
        }
    }
    return out;
}

// rho_i = rho_max - (s_i - s_min)/(s_max - s_min) (rho_max - rho_min), with
// s_min/s_max taken over the alive scores. Equal scores map to rho_max.
inline RhoBounds resolve_rho(const std::vector<ImportanceScore>& scores, RhoBounds bounds) {
    bounds.validate();
    bounds.resolved.clear();
    real lo = std::numeric_limits<real>::infinity();
    real hi = -std::numeric_limits<real>::infinity();
    for (const auto& s : scores) {
        if (s.dead) continue;
        lo = std::min(lo, s.value);
        hi = std::max(hi, s.value);
    }
    const real span = hi - lo;
    for (const auto& s : scores) {
        if (s.dead) continue;
        real rho = bounds.rho_max;
        if (span > 0) {
            const real t = (s.value - lo) / span;
            rho = std::clamp(bounds.rho_max - t * (bounds.rho_max - bounds.rho_min), bounds.rho_min, bounds.rho_max);
        }
        bounds.resolved[s.partition_id] = rho;
    }
    return bounds;
}

}  // namespace adasap
