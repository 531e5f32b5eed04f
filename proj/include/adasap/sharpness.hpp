#pragma once

// Loss-landscape flatness measurements: the perturbation gap
// max_{|eps| <= rho} L(w + eps) - L(w) and the top Hessian eigenvalue.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "adasap/hvp.hpp"
#include "adasap/parameters.hpp"

namespace adasap {

enum class SharpnessKind { perturbation_gap, top_hessian_eig };
enum class Phase { pre_prune, post_prune, post_finetune };

inline const char* to_string(SharpnessKind k) {
    return k == SharpnessKind::perturbation_gap ? "perturbation_gap" : "top_hessian_eig";
}

inline const char* to_string(Phase p) {
    switch (p) {
        case Phase::pre_prune: return "pre_prune";
        case Phase::post_prune: return "post_prune";
        case Phase::post_finetune: return "post_finetune";
    }
    return "unknown";
}

struct SharpnessReading {
    SharpnessKind kind = SharpnessKind::perturbation_gap;
    real value = 0;
    real rho = 0;
    std::size_t batches_used = 1;
    Phase phase = Phase::pre_prune;
    std::size_t ascent_steps = 0;  // power iterations for the eigenvalue kind
    std::size_t step = 0;
    bool valid = true;
    bool converged = true;
};

struct SharpnessSettings {
    real rho = real(0.05);
    std::size_t ascent_steps = 5;
    std::size_t hessian_iters = 20;
    real hessian_tol = real(1e-3);
    std::uint64_t seed = 0;
    bool hessian = true;  // also run the eigenvalue estimate
};

namespace detail {

inline void zero_dead(ParamBuffers& v, const std::vector<ParameterPartition>& parts) {
    for (const auto& p : parts) {
        if (p.alive) continue;
        for (const auto& s : p.slices) std::fill_n(v[s.tensor].begin() + static_cast<long>(s.offset), s.length, real(0));
    }
}

}  // namespace detail

// Projected normalised-gradient ascent on a global eps, starting from the
// one-step eps = rho g/|g|. Returns the largest loss found minus L(w); eps = 0
// is always a candidate so the gap is never negative. Weights are restored bitwise.
template <Trainable M>
SharpnessReading perturbation_gap(M& model, const Objective& objective, real rho, std::size_t ascent_steps,
                                  std::size_t batches_used = 1) {
    if (!(rho > 0)) throw std::invalid_argument("perturbation_gap: rho must be positive");
    if (ascent_steps < 1) throw std::invalid_argument("perturbation_gap: need at least one ascent step");
    auto& params = model.parameters();
    SharpnessReading r;
    r.kind = SharpnessKind::perturbation_gap;
    r.rho = rho;
    r.ascent_steps = ascent_steps;
    r.batches_used = batches_used;

    const auto saved = snapshot(params);
    real base = 0;
    auto g = gradient(params, objective, &base);
    if (!std::isfinite(base)) {
        r.valid = false;
        zero_grads(params);
        return r;
    }
    real best = base;
    ParamBuffers eps = zeros_like(params);
    auto step_along = [&](const ParamBuffers& dir, real length) {
        const real n = norm(dir);
        if (n == 0) return;
        for (std::size_t i = 0; i < eps.size(); ++i)
            for (std::size_t j = 0; j < eps[i].size(); ++j) eps[i][j] += length * dir[i][j] / n;
        const real en = norm(eps);
        if (en > rho)
            for (auto& b : eps)
                for (auto& x : b) x *= rho / en;
    };
    step_along(g, rho);

    for (std::size_t t = 0; t <= ascent_steps; ++t) {
        restore(params, saved);
        axpy(params, real(1), eps);
        real loss = 0;
        if (t < ascent_steps) g = gradient(params, objective, &loss);
        else loss = objective(false);
        if (!std::isfinite(loss)) {
            r.valid = false;
            break;
        }
        best = std::max(best, loss);
        if (t < ascent_steps) step_along(g, rho);
    }
    restore(params, saved);
    zero_grads(params);
    r.value = best - base;
    return r;
}

// Power iteration on Hessian-vector products; returns the Rayleigh quotient
// once |lambda_t - lambda_{t-1}| < tol |lambda_t| or after `iters` products.
template <Trainable M>
SharpnessReading top_hessian_eigenvalue(M& model, const Objective& objective, std::size_t iters, real tol,
                                        std::uint64_t seed = 0, std::size_t batches_used = 1) {
    if (iters < 1) throw std::invalid_argument("top_hessian_eigenvalue: need at least one iteration");
    auto& params = model.parameters();
    SharpnessReading r;
    r.kind = SharpnessKind::top_hessian_eig;
    r.batches_used = batches_used;
    r.converged = false;

    std::mt19937_64 rng(seed);
    std::normal_distribution<real> nd(0, 1);
    ParamBuffers v = zeros_like(params);
    for (auto& b : v)
        for (auto& x : b) x = nd(rng);
    detail::zero_dead(v, model.partitions());
    real n = norm(v);
    if (n == 0) return r;
    for (auto& b : v)
        for (auto& x : b) x /= n;

    real lambda = 0;
    for (std::size_t t = 0; t < iters; ++t) {
        auto hv = hessian_vector_product(params, objective, v).product;
        detail::zero_dead(hv, model.partitions());
        const real next = inner(v, hv);
        r.ascent_steps = t + 1;
        if (!std::isfinite(next)) {
            r.valid = false;
            break;
        }
        const bool done = t > 0 && std::abs(next - lambda) < tol * std::abs(next);
        lambda = next;
        if (done) {
            r.converged = true;
            break;
        }
        n = norm(hv);
        if (n == 0) {
            r.converged = true;
            break;
        }
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = 0; j < v[i].size(); ++j) v[i][j] = hv[i][j] / n;
    }
    r.value = lambda;
    return r;
}

// Sharpness readings at one phase boundary, on a fixed measurement objective.
template <Trainable M>
std::vector<SharpnessReading> phase_sharpness(M& model, const Objective& measurement, Phase phase, std::size_t step,
                                              const SharpnessSettings& s, std::size_t batches_used) {
    std::vector<SharpnessReading> out{perturbation_gap(model, measurement, s.rho, s.ascent_steps, batches_used)};
    if (s.hessian)
        out.push_back(top_hessian_eigenvalue(model, measurement, s.hessian_iters, s.hessian_tol, s.seed, batches_used));
    for (auto& r : out) {
        r.phase = phase;
        r.step = step;
    }
    return out;
}

}  // namespace adasap
