#pragma once

// Parameter collections, neuron partitions, and scalar objectives.
//
// Everything that trains, perturbs, scores or prunes works against the
// Trainable concept: a list of parameter tensors plus a partition table that
// groups their scalars into neurons.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "adasap/tensor.hpp"

namespace adasap {

// One value buffer per parameter tensor.
using ParamBuffers = std::vector<std::vector<real>>;

// Evaluates the loss at the current parameter values. When accumulate_grad is
// set it must also add d(loss)/d(param) into each parameter's grad buffer.
using Objective = std::function<real(bool accumulate_grad)>;

struct Slice {
    std::size_t tensor = 0;
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct ParameterPartition {
    std::string id;
    std::size_t ordinal = 0;
    std::size_t layer = 0;
    std::size_t channel = 0;
    std::vector<Slice> slices;
    bool prunable = true;
    bool alive = true;

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& s : slices) n += s.length;
        return n;
    }
};

template <class T>
concept Trainable = requires(T& t) {
    { t.parameters() } -> std::same_as<std::vector<Tensor>&>;
    { t.partitions() } -> std::same_as<std::vector<ParameterPartition>&>;
};

// A bare Trainable for objectives that are not neural networks.
struct ParameterSet {
    std::vector<Tensor> params;
    std::vector<ParameterPartition> parts;

    std::vector<Tensor>& parameters() { return params; }
    std::vector<ParameterPartition>& partitions() { return parts; }
};

inline std::vector<real> gather(const std::vector<Tensor>& params, const ParameterPartition& p) {
    std::vector<real> out;
    out.reserve(p.scalar_count());
    for (const auto& s : p.slices) {
        const auto d = params[s.tensor].data().subspan(s.offset, s.length);
        out.insert(out.end(), d.begin(), d.end());
    }
    return out;
}

inline std::vector<real> gather(const ParamBuffers& buffers, const ParameterPartition& p) {
    std::vector<real> out;
    out.reserve(p.scalar_count());
    for (const auto& s : p.slices) {
        const auto& b = buffers[s.tensor];
        out.insert(out.end(), b.begin() + static_cast<long>(s.offset),
                   b.begin() + static_cast<long>(s.offset + s.length));
    }
    return out;
}

inline void scatter(ParamBuffers& buffers, const ParameterPartition& p, std::span<const real> values) {
    std::size_t k = 0;
    for (const auto& s : p.slices)
        for (std::size_t i = 0; i < s.length; ++i) buffers[s.tensor][s.offset + i] = values[k++];
}

inline ParamBuffers snapshot(const std::vector<Tensor>& params) {
    ParamBuffers out;
    out.reserve(params.size());
    for (const auto& t : params) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

inline void restore(std::vector<Tensor>& params, const ParamBuffers& values) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto d = params[i].mutable_data();
        std::copy(values[i].begin(), values[i].end(), d.begin());
    }
}

inline ParamBuffers zeros_like(const std::vector<Tensor>& params) {
    ParamBuffers out;
    out.reserve(params.size());
    for (const auto& t : params) out.emplace_back(t.numel(), real(0));
    return out;
}

inline void zero_grads(std::vector<Tensor>& params) {
    for (auto& t : params) t.zero_grad();
}

inline ParamBuffers grads_of(const std::vector<Tensor>& params) {
    ParamBuffers out;
    out.reserve(params.size());
    for (const auto& t : params) {
        if (t.has_grad()) out.emplace_back(t.grad().begin(), t.grad().end());
        else out.emplace_back(t.numel(), real(0));
    }
    return out;
}

// Fresh gradient of the objective at the current parameters.
inline ParamBuffers gradient(std::vector<Tensor>& params, const Objective& objective, real* loss = nullptr) {
    zero_grads(params);
    const real l = objective(true);
    if (loss) *loss = l;
    return grads_of(params);
}

inline real squared_norm(const ParamBuffers& v) {
    real s = 0;
    for (const auto& b : v)
        for (auto x : b) s += x * x;
    return s;
}

inline real norm(const ParamBuffers& v) { return std::sqrt(squared_norm(v)); }

inline real inner(const ParamBuffers& a, const ParamBuffers& b) {
    real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) s += a[i][j] * b[i][j];
    return s;
}

inline void require_like(const std::vector<Tensor>& params, const ParamBuffers& v, const char* what) {
    if (v.size() != params.size()) throw DimensionError(std::string(what) + ": tensor count mismatch");
    for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i].size() != params[i].numel())
            throw DimensionError(std::string(what) + ": buffer " + std::to_string(i) + " has " +
                                 std::to_string(v[i].size()) + " values, parameter has " +
                                 std::to_string(params[i].numel()));
}

// params += factor * v
inline void axpy(std::vector<Tensor>& params, real factor, const ParamBuffers& v) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto d = params[i].mutable_data();
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += factor * v[i][j];
    }
}

// Wraps a graph-building loss into an Objective.
inline Objective make_objective(std::function<Tensor()> build_loss) {
    return [build = std::move(build_loss)](bool accumulate_grad) {
        Tensor loss = build();
        if (accumulate_grad && loss.requires_grad()) loss.backward();
        return loss.item();
    };
}

}  // namespace adasap
