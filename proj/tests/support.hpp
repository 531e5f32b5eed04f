#pragma once

// Shared oracles for the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <random>
#include <string>
#include <vector>

#include "adasap/corruption.hpp"
#include "adasap/model.hpp"
#include "adasap/parameters.hpp"
#include "adasap/tensor.hpp"

namespace adasap::testing {

using Rng = std::mt19937_64;

inline std::vector<real> uniform_values(std::size_t n, Rng& rng, real lo = -1, real hi = 1) {
    std::uniform_real_distribution<real> u(lo, hi);
    std::vector<real> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

// Values with |x| in [margin, 1] and random sign, so kinked ops stay off their kinks.
inline std::vector<real> off_kink_values(std::size_t n, Rng& rng, real margin = real(0.05)) {
    std::uniform_real_distribution<real> u(margin, 1);
    std::bernoulli_distribution coin(0.5);
    std::vector<real> v(n);
    for (auto& x : v) x = coin(rng) ? u(rng) : -u(rng);
    return v;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct OpCase {
    std::string name;
    // Draws random inputs (all requiring grad) for one trial.
    std::function<std::vector<Tensor>(Rng&)> inputs;
    // Op under test; its output may have any shape.
    std::function<Tensor(const std::vector<Tensor>&)> apply;
};

// Worst relative error between tape gradients and central differences of
// L = sum(op(inputs) * R) for a fixed random R.
inline real gradcheck_trial(const OpCase& c, Rng& rng, real step = real(1e-5)) {
    auto ins = c.inputs(rng);
    const Tensor probe_out = c.apply(ins);
    const Tensor weights(probe_out.shape(), uniform_values(probe_out.numel(), rng, real(0.5), real(1.5)));
    auto loss_of = [&](const std::vector<Tensor>& xs) { return sum(mul(c.apply(xs), weights)); };

    for (auto& t : ins) t.zero_grad();
    loss_of(ins).backward();

    real worst = 0;
    for (std::size_t k = 0; k < ins.size(); ++k) {
        const auto analytic = std::vector<real>(ins[k].grad().begin(), ins[k].grad().end());
        std::vector<real> numeric(ins[k].numel());
        for (std::size_t i = 0; i < ins[k].numel(); ++i) {
            auto shifted = [&](real delta) {
                std::vector<Tensor> xs;
                for (const auto& t : ins) xs.push_back(t.detach());
                xs[k].mutable_data()[i] += delta;
                return loss_of(xs).item();
            };
            numeric[i] = (shifted(step) - shifted(-step)) / (2 * step);
        }
        real diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
            na += analytic[i] * analytic[i];
            nn += numeric[i] * numeric[i];
        }
        const real scale = std::max({std::sqrt(na), std::sqrt(nn), real(1e-3)});
        worst = std::max(worst, std::sqrt(diff) / scale);
    }
    return worst;
}

inline Tensor leaf(Shape s, std::vector<real> v) { return Tensor(std::move(s), std::move(v), true); }

inline std::vector<OpCase> differentiable_ops() {
    std::vector<OpCase> ops;
    auto same2 = [](std::function<Tensor(const Tensor&, const Tensor&)> f) {
        return [f](const std::vector<Tensor>& x) { return f(x[0], x[1]); };
    };
    auto pair_of_shape = [](Rng& r) {
        const std::size_t a = pick(r, 1, 4), b = pick(r, 1, 5);
        return std::vector<Tensor>{leaf({a, b}, uniform_values(a * b, r)), leaf({a, b}, uniform_values(a * b, r))};
    };
    auto one = [](std::function<std::vector<real>(std::size_t, Rng&)> gen) {
        return [gen](Rng& r) {
            const std::size_t a = pick(r, 1, 4), b = pick(r, 1, 5);
            return std::vector<Tensor>{leaf({a, b}, gen(a * b, r))};
        };
    };
    auto plain = [](std::size_t n, Rng& r) { return uniform_values(n, r); };
    auto kinkless = [](std::size_t n, Rng& r) { return off_kink_values(n, r); };
    auto positive = [](std::size_t n, Rng& r) { return uniform_values(n, r, real(0.2), real(2)); };

    ops.push_back({"add", pair_of_shape, same2([](auto& a, auto& b) { return add(a, b); })});
    ops.push_back({"sub", pair_of_shape, same2([](auto& a, auto& b) { return sub(a, b); })});
    ops.push_back({"mul", pair_of_shape, same2([](auto& a, auto& b) { return mul(a, b); })});
    ops.push_back({"dot", pair_of_shape, same2([](auto& a, auto& b) { return dot(a, b); })});
    ops.push_back({"scale", one(plain), [](const auto& x) { return scale(x[0], real(-1.7)); }});
    ops.push_back({"relu", one(kinkless), [](const auto& x) { return relu(x[0]); }});
    ops.push_back({"abs", one(kinkless), [](const auto& x) { return abs(x[0]); }});
    ops.push_back({"sqrt", one(positive), [](const auto& x) { return sqrt(x[0]); }});
    ops.push_back({"square", one(plain), [](const auto& x) { return square(x[0]); }});
    ops.push_back({"sum", one(plain), [](const auto& x) { return sum(x[0]); }});
    ops.push_back({"mean", one(plain), [](const auto& x) { return mean(x[0]); }});
    ops.push_back({"l2_norm", one(plain), [](const auto& x) { return l2_norm(x[0]); }});
    ops.push_back({"l1_norm", one(kinkless), [](const auto& x) { return l1_norm(x[0]); }});
    ops.push_back({"reshape", one(plain), [](const auto& x) { return reshape(x[0], {x[0].numel()}); }});
    ops.push_back({"flatten",
                   [](Rng& r) {
                       const std::size_t n = pick(r, 1, 3), c = pick(r, 1, 3), h = pick(r, 1, 3);
                       return std::vector<Tensor>{leaf({n, c, h}, uniform_values(n * c * h, r))};
                   },
                   [](const auto& x) { return flatten(x[0]); }});
    ops.push_back({"matmul",
                   [](Rng& r) {
                       const std::size_t m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
                       return std::vector<Tensor>{leaf({m, k}, uniform_values(m * k, r)),
                                                  leaf({k, n}, uniform_values(k * n, r))};
                   },
                   [](const auto& x) { return matmul(x[0], x[1]); }});
    ops.push_back({"linear",
                   [](Rng& r) {
                       const std::size_t b = pick(r, 1, 4), i = pick(r, 1, 5), o = pick(r, 1, 4);
                       return std::vector<Tensor>{leaf({b, i}, uniform_values(b * i, r)),
                                                  leaf({o, i}, uniform_values(o * i, r)), leaf({o}, uniform_values(o, r))};
                   },
                   [](const auto& x) { return linear(x[0], x[1], x[2]); }});
    for (std::size_t pad : {0, 1}) {
        ops.push_back({"conv2d_pad" + std::to_string(pad),
                       [](Rng& r) {
                           const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 2), o = pick(r, 1, 3), k = pick(r, 1, 3);
                           const std::size_t h = pick(r, k, 5), w = pick(r, k, 5);
                           return std::vector<Tensor>{leaf({n, c, h, w}, uniform_values(n * c * h * w, r)),
                                                      leaf({o, c, k, k}, uniform_values(o * c * k * k, r)),
                                                      leaf({o}, uniform_values(o, r))};
                       },
                       [pad](const auto& x) { return conv2d(x[0], x[1], x[2], pad); }});
    }
    ops.push_back({"max_pool2d",
                   [](Rng& r) {
                       const std::size_t n = pick(r, 1, 2), c = pick(r, 1, 3), h = pick(r, 2, 6), w = pick(r, 2, 6);
                       return std::vector<Tensor>{leaf({n, c, h, w}, uniform_values(n * c * h * w, r))};
                   },
                   [](const auto& x) { return max_pool2d(x[0], 2); }});
    auto channel_pair = [](Rng& r) {
        const std::size_t n = pick(r, 1, 3), c = pick(r, 1, 4), s = pick(r, 1, 4);
        return std::vector<Tensor>{leaf({n, c, s}, uniform_values(n * c * s, r)), leaf({c}, uniform_values(c, r))};
    };
    ops.push_back({"add_channel_bias", channel_pair, same2([](auto& a, auto& b) { return add_channel_bias(a, b); })});
    ops.push_back({"mul_channel", channel_pair, same2([](auto& a, auto& b) { return mul_channel(a, b); })});
    ops.push_back({"softmax_cross_entropy",
                   [](Rng& r) {
                       const std::size_t n = pick(r, 1, 4), k = pick(r, 2, 5);
                       return std::vector<Tensor>{leaf({n, k}, uniform_values(n * k, r, -3, 3))};
                   },
                   [](const auto& x) {
                       std::vector<int> labels(x[0].size(0));
                       for (std::size_t i = 0; i < labels.size(); ++i)
                           labels[i] = static_cast<int>((i * 7 + 3) % x[0].size(1));
                       return softmax_cross_entropy(x[0], labels);
                   }});
    return ops;
}

// L(w) = 0.5 w^T A w + b^T w over a single partition holding w.
struct Quadratic {
    ParameterSet set;
    Objective objective;
};

inline Quadratic make_quadratic(std::vector<real> matrix, std::vector<real> w0, std::vector<real> linear = {}) {
    const std::size_t n = w0.size();
    if (linear.empty()) linear.assign(n, 0);
    Quadratic q;
    q.set.params.push_back(Tensor({n}, std::move(w0), true));
    q.set.parts.push_back({"w", 0, 0, 0, {{0, 0, n}}, true, true});
    const Tensor w = q.set.params[0];
    const Tensor A({n, n}, std::move(matrix));
    const Tensor b({n}, std::move(linear));
    q.objective = make_objective([w, A, b, n] {
        const Tensor aw = reshape(matmul(A, reshape(w, {n, 1})), {n});
        return add(scale(dot(w, aw), real(0.5)), dot(b, w));
    });
    return q;
}

// Random symmetric positive semi-definite matrix B^T B, row-major.
inline std::vector<real> random_psd(std::size_t n, Rng& rng) {
    const auto B = uniform_values(n * n, rng);
    std::vector<real> A(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < n; ++k) A[i * n + j] += B[k * n + i] * B[k * n + j];
    return A;
}

// Stored predictions: one label row, one clean row, then one row per
// (kind, severity) cell, each a string with one digit per image.
struct PredictionFixture {
    std::vector<int> labels;
    std::vector<int> clean;
    std::vector<CellPredictions> cells;
};

inline PredictionFixture load_prediction_fixture(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open fixture " + path);
    auto digits = [](const std::string& s) {
        std::vector<int> v;
        for (char c : s) v.push_back(c - '0');
        return v;
    };
    PredictionFixture f;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag, a, b;
        ls >> tag >> a;
        if (tag == "labels") {
            f.labels = digits(a);
            continue;
        }
        ls >> b;
        if (tag == "clean") f.clean = digits(b);
        else f.cells.push_back({parse_corruption(tag), std::stoi(a), digits(b)});
    }
    return f;
}

// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("adasap_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Reference optimizers written directly against the model's autodiff
// gradients, for equivalence checks of the library's training step.

inline void model_gradient(Model& m, const Batch& b) {
    for (auto& t : m.parameters()) t.zero_grad();
    softmax_cross_entropy(m.forward(b.images), b.labels).backward();
}

// buf = mu buf + (g + wd w); w -= lr buf, with g taken from the grad buffers
// and w from `at` (the unperturbed weights).
inline void reference_momentum_update(Model& m, const ParamBuffers& at, real lr, real mu, real wd, ParamBuffers& buf) {
    auto& P = m.parameters();
    if (buf.empty())
        for (const auto& t : P) buf.emplace_back(t.numel(), real(0));
    for (std::size_t k = 0; k < P.size(); ++k)
        for (std::size_t i = 0; i < P[k].numel(); ++i) {
            buf[k][i] = mu * buf[k][i] + (P[k].grad()[i] + wd * at[k][i]);
            P[k].mutable_data()[i] = at[k][i] - lr * buf[k][i];
        }
}

inline void reference_sgd_step(Model& m, const Batch& b, real lr, real mu, real wd, ParamBuffers& buf) {
    ParamBuffers w;
    for (const auto& t : m.parameters()) w.emplace_back(t.data().begin(), t.data().end());
    model_gradient(m, b);
    reference_momentum_update(m, w, lr, mu, wd, buf);
}

// SAM with one radius per partition: eps_p = rho g_p / |g_p|, gradient at w + eps.
inline void reference_sam_step(Model& m, const Batch& b, real rho, real lr, real mu, real wd, ParamBuffers& buf) {
    auto& P = m.parameters();
    ParamBuffers w, eps;
    for (const auto& t : P) {
        w.emplace_back(t.data().begin(), t.data().end());
        eps.emplace_back(t.numel(), real(0));
    }
    model_gradient(m, b);
    for (const auto& p : m.partitions()) {
        real sq = 0;
        for (const auto& s : p.slices)
            for (std::size_t i = s.offset; i < s.offset + s.length; ++i) sq += P[s.tensor].grad()[i] * P[s.tensor].grad()[i];
        if (sq == 0) continue;
        const real n = std::sqrt(sq);
        for (const auto& s : p.slices)
            for (std::size_t i = s.offset; i < s.offset + s.length; ++i) eps[s.tensor][i] = rho * P[s.tensor].grad()[i] / n;
    }
    for (std::size_t k = 0; k < P.size(); ++k)
        for (std::size_t i = 0; i < w[k].size(); ++i) P[k].mutable_data()[i] = w[k][i] + eps[k][i];
    model_gradient(m, b);
    reference_momentum_update(m, w, lr, mu, wd, buf);
}

}  // namespace adasap::testing
