#pragma once

// Flatness-informed training step with per-neuron perturbation radii.
//
// One code path covers three optimizers, selected by PerturbationConfig:
//   adaptive=false, identity transform   -> SAM (per-neuron normalised)
//   adaptive=false, |w| transform        -> ASAM
//   adaptive=true                        -> adaptive sharpness-aware pruning
// A radius of zero degenerates to plain SGD with momentum.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "adasap/importance.hpp"
#include "adasap/parameters.hpp"

namespace adasap {

enum class Transform { identity, elementwise_abs_weight };
enum class Denominator { transformed_grad_norm, raw_grad_norm };

inline const char* to_string(Transform t) { return t == Transform::identity ? "identity" : "elementwise_abs_weight"; }
inline const char* to_string(Denominator d) {
    return d == Denominator::transformed_grad_norm ? "transformed_grad_norm" : "raw_grad_norm";
}

inline Transform parse_transform(const std::string& s) {
    if (s == "identity") return Transform::identity;
    if (s == "elementwise_abs_weight" || s == "abs") return Transform::elementwise_abs_weight;
    throw std::invalid_argument("unknown transform '" + s + "'");
}

inline Denominator parse_denominator(const std::string& s) {
    if (s == "transformed_grad_norm") return Denominator::transformed_grad_norm;
    if (s == "raw_grad_norm") return Denominator::raw_grad_norm;
    throw std::invalid_argument("unknown epsilon denominator '" + s + "'");
}

struct PerturbationConfig {
    RhoBounds bounds;
    Transform transform = Transform::identity;
    real transform_eta = real(1e-12);
    Denominator denominator = Denominator::transformed_grad_norm;
    bool adaptive = true;
    // Exponential moving average factor for scores across steps; 0 disables.
    real score_smoothing = 0;

    // Uniform radius; rho == 0 turns the step into plain SGD.
    static PerturbationConfig uniform(real rho, Transform t = Transform::identity) {
        PerturbationConfig c;
        c.bounds.rho_min = rho;
        c.bounds.rho_max = rho;
        c.transform = t;
        c.adaptive = false;
        return c;
    }

    static PerturbationConfig adaptive_bounds(real rho_min, real rho_max, Transform t = Transform::identity) {
        PerturbationConfig c;
        c.bounds.rho_min = rho_min;
        c.bounds.rho_max = rho_max;
        c.transform = t;
        c.adaptive = true;
        return c;
    }

    void validate() const {
        if (!adaptive) {
            if (bounds.rho_min != bounds.rho_max)
                throw std::invalid_argument("non-adaptive perturbation requires rho_min == rho_max");
            if (bounds.rho_min < 0) throw std::invalid_argument("rho must be nonnegative");
        } else {
            bounds.validate();
        }
        if (transform_eta < 0) throw std::invalid_argument("transform_eta must be nonnegative");
        if (score_smoothing < 0 || score_smoothing >= 1) throw std::invalid_argument("score_smoothing must lie in [0, 1)");
    }
};

// Linear warmup to `peak`, then cosine annealing to zero at `total_steps`.
// total_steps == 0 means a constant rate.
struct LrSchedule {
    real peak = real(0.1);
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 0;

    static LrSchedule constant(real lr) { return {lr, 0, 0}; }

    real at(std::size_t step) const {
        if (total_steps == 0) return peak;
        if (step < warmup_steps) return peak * static_cast<real>(step + 1) / static_cast<real>(warmup_steps);
        if (step >= total_steps) return 0;
        const real span = static_cast<real>(total_steps - warmup_steps);
        const real t = static_cast<real>(step - warmup_steps) / span;
        return real(0.5) * peak * (real(1) + std::cos(std::numbers::pi_v<real> * t));
    }
};

struct OptimizerState {
    LrSchedule schedule;
    real momentum = real(0.9);
    real weight_decay = 0;
    ParamBuffers momentum_buffers;
    std::size_t step = 0;
    std::map<std::string, real> score_average;

    void ensure_buffers(const std::vector<Tensor>& params) {
        if (momentum_buffers.size() != params.size()) momentum_buffers = zeros_like(params);
    }

    void zero_partition(const ParameterPartition& p) {
        if (momentum_buffers.empty()) return;
        for (const auto& s : p.slices)
            std::fill_n(momentum_buffers[s.tensor].begin() + static_cast<long>(s.offset), s.length, real(0));
        score_average.erase(p.id);
    }
};

struct EpsilonHat {
    std::vector<real> values;
    bool zero_gradient = false;
};

// eps_i = rho_i T^2 g / D with T = I or diag(|w| + eta) and D = |T g| (default) or |g|.
inline EpsilonHat compute_epsilon_hat(std::span<const real> w, std::span<const real> g, real rho,
                                      const PerturbationConfig& cfg) {
    if (w.size() != g.size()) throw DimensionError("compute_epsilon_hat: weight/gradient size mismatch");
    EpsilonHat out;
    out.values.assign(w.size(), real(0));
    real tg_sq = 0, g_sq = 0;
    std::vector<real> t(w.size(), real(1));
    if (cfg.transform == Transform::elementwise_abs_weight)
        for (std::size_t i = 0; i < w.size(); ++i) t[i] = std::abs(w[i]) + cfg.transform_eta;
    for (std::size_t i = 0; i < w.size(); ++i) {
        tg_sq += (t[i] * g[i]) * (t[i] * g[i]);
        g_sq += g[i] * g[i];
    }
    const real denom = std::sqrt(cfg.denominator == Denominator::transformed_grad_norm ? tg_sq : g_sq);
    if (denom == 0 || g_sq == 0) {
        out.zero_gradient = true;
        return out;
    }
    const real k = rho / denom;
    for (std::size_t i = 0; i < w.size(); ++i) out.values[i] = k * t[i] * t[i] * g[i];
    return out;
}

// |T^{-1} eps| for the transform evaluated at w.
inline real transformed_norm(std::span<const real> w, std::span<const real> eps, const PerturbationConfig& cfg) {
    real s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const real t = cfg.transform == Transform::identity ? real(1) : std::abs(w[i]) + cfg.transform_eta;
        s += (eps[i] / t) * (eps[i] / t);
    }
    return std::sqrt(s);
}

struct StepReport {
    std::size_t step = 0;
    real loss = 0;
    real perturbed_loss = 0;
    real mean_rho = 0;
    real max_rho = 0;
    real lr = 0;
    std::size_t zero_gradient_partitions = 0;
    bool diverged = false;
};

// SGD with momentum and decoupled-from-perturbation weight decay:
//   buf = mu buf + (g + wd w);  w -= lr buf
// Dead partitions are skipped entirely.
template <Trainable M>
real sgd_momentum_update(M& model, const ParamBuffers& grads, OptimizerState& opt) {
    auto& params = model.parameters();
    opt.ensure_buffers(params);
    const real lr = opt.schedule.at(opt.step);
    for (const auto& p : model.partitions()) {
        if (!p.alive) continue;
        for (const auto& s : p.slices) {
            auto w = params[s.tensor].mutable_data();
            auto& buf = opt.momentum_buffers[s.tensor];
            const auto& g = grads[s.tensor];
            for (std::size_t i = s.offset; i < s.offset + s.length; ++i) {
                const real d = g[i] + opt.weight_decay * w[i];
                buf[i] = opt.momentum * buf[i] + d;
                w[i] -= lr * buf[i];
            }
        }
    }
    ++opt.step;
    return lr;
}

// Per-partition perturbation for the current weights and gradient. Returns
// the resolved radii (keyed by partition id) through `bounds_out`.
template <Trainable M>
ParamBuffers perturbation_for(M& model, const ParamBuffers& grads, const PerturbationConfig& cfg,
                              OptimizerState& opt, Criterion psi, RhoBounds& bounds_out,
                              std::size_t* zero_gradient_partitions = nullptr) {
    auto& params = model.parameters();
    auto& parts = model.partitions();
    if (cfg.adaptive) {
        auto scores = score_partitions(params, parts, psi, &grads, opt.step);
        if (cfg.score_smoothing > 0) {
            for (auto& s : scores) {
                if (s.dead) continue;
                auto [it, fresh] = opt.score_average.try_emplace(s.partition_id, s.value);
                if (!fresh) it->second = cfg.score_smoothing * it->second + (1 - cfg.score_smoothing) * s.value;
                s.value = it->second;
            }
        }
        bounds_out = resolve_rho(scores, cfg.bounds);
    } else {
        bounds_out = cfg.bounds;
        bounds_out.resolved.clear();
        for (const auto& p : parts)
            if (p.alive) bounds_out.resolved[p.id] = cfg.bounds.rho_max;
    }
    ParamBuffers eps = zeros_like(params);
    std::size_t zero_grad = 0;
    for (const auto& p : parts) {
        if (!p.alive) continue;
        const auto w = gather(params, p);
        const auto g = gather(grads, p);
        const auto e = compute_epsilon_hat(w, g, bounds_out.at(p.id), cfg);
        zero_grad += e.zero_gradient;
        scatter(eps, p, e.values);
    }
    if (zero_gradient_partitions) *zero_gradient_partitions = zero_grad;
    return eps;
}

// Loss at w + eps. Weights are restored bitwise before returning.
template <Trainable M>
real loss_at_perturbation(M& model, const Objective& objective, const ParamBuffers& eps) {
    auto& params = model.parameters();
    require_like(params, eps, "loss_at_perturbation");
    const auto saved = snapshot(params);
    axpy(params, real(1), eps);
    const real loss = objective(false);
    restore(params, saved);
    return loss;
}

// One iteration: gradient and scores at w, radii, per-neuron eps, gradient at
// w + eps, exact restore of w, then a momentum SGD step with that gradient.
template <Trainable M>
StepReport adasap_step(M& model, const Objective& objective, const PerturbationConfig& cfg, OptimizerState& opt,
                       Criterion psi) {
    cfg.validate();
    auto& params = model.parameters();
    StepReport report;
    report.step = opt.step;

    const auto grads = gradient(params, objective, &report.loss);
    if (!std::isfinite(report.loss)) {
        report.diverged = true;
        return report;
    }

    RhoBounds bounds;
    const auto eps = perturbation_for(model, grads, cfg, opt, psi, bounds, &report.zero_gradient_partitions);
    real rho_sum = 0;
    for (const auto& [id, rho] : bounds.resolved) {
        rho_sum += rho;
        report.max_rho = std::max(report.max_rho, rho);
    }
    if (!bounds.resolved.empty()) report.mean_rho = rho_sum / static_cast<real>(bounds.resolved.size());

    // A zero radius evaluates the same point twice; reuse the first pass.
    if (!cfg.adaptive && cfg.bounds.rho_max == 0) {
        zero_grads(params);
        report.perturbed_loss = report.loss;
        report.lr = sgd_momentum_update(model, grads, opt);
        return report;
    }

    const auto saved = snapshot(params);
    axpy(params, real(1), eps);
    const auto perturbed_grads = gradient(params, objective, &report.perturbed_loss);
    restore(params, saved);
    zero_grads(params);
    if (!std::isfinite(report.perturbed_loss)) {
        report.diverged = true;
        return report;
    }
    report.lr = sgd_momentum_update(model, perturbed_grads, opt);
    return report;
}

}  // namespace adasap
