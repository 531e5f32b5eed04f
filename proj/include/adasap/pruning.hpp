#pragma once

// Structured neuron removal on a geometric remaining-count schedule.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasap/importance.hpp"
#include "adasap/model.hpp"
#include "adasap/optimizer.hpp"

namespace adasap {

class PruneError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PruneSchedule {
    real keep_fraction = real(0.5);  // k
    std::size_t total_events = 1;   // R
    std::size_t prune_frequency = 30;
    std::size_t initial_count = 0;  // m
    std::vector<std::size_t> remaining;  // k_r for r = 0..R

    std::size_t removals_at(std::size_t r) const { return remaining.at(r - 1) - remaining.at(r); }
};

// k_r = round(m k^(r/R)), i.e. exp(a log(k m) + (1 - a) log m) with a = r/R,
// clamped below by one channel per layer.
inline PruneSchedule build_schedule(real keep_fraction, std::size_t total_events, std::size_t m,
                                    std::size_t layer_floor = 1, std::size_t prune_frequency = 30) {
    if (!(keep_fraction > 0 && keep_fraction < 1)) throw std::invalid_argument("keep fraction must lie in (0, 1)");
    if (total_events < 1) throw std::invalid_argument("need at least one prune event");
    if (m < 2) throw std::invalid_argument("need at least two prunable partitions");
    if (keep_fraction * static_cast<real>(m) < static_cast<real>(layer_floor))
        throw PruneError("target of " + std::to_string(keep_fraction * static_cast<real>(m)) +
                         " partitions is below the floor of one channel per layer (" + std::to_string(layer_floor) + ")");
    PruneSchedule s;
    s.keep_fraction = keep_fraction;
    s.total_events = total_events;
    s.prune_frequency = prune_frequency;
    s.initial_count = m;
    const real log_m = std::log(static_cast<real>(m));
    const real log_target = std::log(keep_fraction * static_cast<real>(m));
    for (std::size_t r = 0; r <= total_events; ++r) {
        const real a = static_cast<real>(r) / static_cast<real>(total_events);
        auto k = static_cast<std::size_t>(std::llround(std::exp(a * log_target + (1 - a) * log_m)));
        if (r == 0) k = m;
        if (r == total_events) k = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<real>(m)));
        k = std::max(k, layer_floor);
        if (!s.remaining.empty()) k = std::min(k, s.remaining.back());
        s.remaining.push_back(k);
    }
    return s;
}

struct PruneEvent {
    std::size_t step = 0;
    std::size_t round = 0;
    Criterion criterion = Criterion::magnitude_l2;
    std::vector<std::string> removed;
    std::vector<real> scores;
    real sparsity = 0;  // fraction of prunable partitions removed so far

    nlohmann::json to_json() const {
        return {{"step", step},       {"round", round},   {"criterion", to_string(criterion)},
                {"removed", removed}, {"scores", scores}, {"sparsity", sparsity}};
    }
};

inline void append_jsonl(std::ostream& os, const PruneEvent& e) { os << e.to_json().dump() << '\n'; }

// Zeroes the `count` alive prunable partitions with the lowest scores
// (ties: lower ordinal first), skipping any candidate whose removal would
// leave its layer with no alive channel. `scores` is indexed by ordinal.
inline PruneEvent prune_lowest(Model& model, const std::vector<ImportanceScore>& scores, std::size_t count,
                               OptimizerState* opt = nullptr, std::size_t step = 0) {
    auto& parts = model.partitions();
    if (scores.size() != parts.size()) throw PruneError("score table does not match the partition table");
    std::vector<std::size_t> order;
    for (const auto& p : parts)
        if (p.prunable && p.alive) order.push_back(p.ordinal);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a].value != scores[b].value) return scores[a].value < scores[b].value;
        return a < b;
    });
    auto alive = model.alive_per_layer();
    PruneEvent ev;
    ev.step = step;
    ev.criterion = scores.empty() ? Criterion::magnitude_l2 : scores.front().criterion;
    for (auto ord : order) {
        if (ev.removed.size() == count) break;
        auto& p = parts[ord];
        if (alive[p.layer] <= 1) continue;
        --alive[p.layer];
        model.kill(ord);
        if (opt) opt->zero_partition(p);
        ev.removed.push_back(p.id);
        ev.scores.push_back(scores[ord].value);
    }
    if (ev.removed.size() != count)
        throw PruneError("only " + std::to_string(ev.removed.size()) + " of " + std::to_string(count) +
                         " partitions could be removed without emptying a layer");
    ev.sparsity = 1 - static_cast<real>(model.alive_count()) / static_cast<real>(model.prunable_count());
    return ev;
}

// Event r of the schedule: removes k_{r-1} - k_r partitions ranked by phi.
inline PruneEvent prune_step(Model& model, const PruneSchedule& sched, std::size_t r, Criterion phi,
                             const ParamBuffers* grads, OptimizerState* opt = nullptr, std::size_t step = 0) {
    if (r < 1 || r > sched.total_events) throw PruneError("prune round " + std::to_string(r) + " out of range");
    if (model.alive_count() != sched.remaining[r - 1])
        throw PruneError("alive count " + std::to_string(model.alive_count()) + " does not match schedule k_" +
                         std::to_string(r - 1) + " = " + std::to_string(sched.remaining[r - 1]));
    const auto scores = score_partitions(model.parameters(), model.partitions(), phi, grads, step);
    auto ev = prune_lowest(model, scores, sched.removals_at(r), opt, step);
    ev.round = r;
    return ev;
}

struct SparsityReport {
    real alive_fraction = 1;
    real param_fraction = 1;
    std::size_t remaining_params = 0;
    std::size_t dense_params = 0;
};

// Counts the scalars a physically reduced model would keep: each layer keeps
// alive outputs x alive inputs, plus alive biases.
inline SparsityReport sparsity_report(const Model& model) {
    SparsityReport r;
    const auto& layers = model.layers();
    const auto alive = model.alive_per_layer();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        std::size_t per_input = L.kernel * L.kernel;
        std::size_t in_units = L.in;
        if (l > 0) {
            const auto& prev = layers[l - 1];
            in_units = alive[l - 1];
            if (L.kind == LayerKind::dense && prev.kind == LayerKind::conv) per_input = prev.pooled_h * prev.pooled_w;
        }
        r.dense_params += L.out * L.in * L.kernel * L.kernel + L.out;
        r.remaining_params += alive[l] * in_units * per_input + alive[l];
    }
    r.alive_fraction = static_cast<real>(model.alive_count()) / static_cast<real>(model.prunable_count());
    r.param_fraction = static_cast<real>(r.remaining_params) / static_cast<real>(r.dense_params);
    return r;
}

}  // namespace adasap
