#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Operations whose inputs
// require gradients record a TapeNode on their output; Tensor::backward()
// walks the reachable nodes once each in reverse topological order and
// accumulates d(loss)/d(input) into every requires_grad tensor it reaches.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace adasap {

#ifdef ADASAP_FLOAT32
using real = float;
inline constexpr const char* kRealDtype = "f32";
#else
using real = double;
inline constexpr const char* kRealDtype = "f64";
#endif

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorImpl;

struct TapeNode {
    using BackwardFn =
        std::function<void(const TensorImpl& out, std::span<const std::shared_ptr<TensorImpl>> inputs)>;

    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
    std::shared_ptr<TapeNode> node;

    bool has_grad() const { return grad.size() == data.size() && !data.empty(); }
    std::vector<real>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), real(0));
        return grad;
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<real> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        for (auto extent : shape)
            if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
        if (shape_numel(shape) != data.size())
            throw DimensionError("shape " + shape_string(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
    }
    static Tensor full(Shape shape, real value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<real>(n, value), requires_grad);
    }
    static Tensor scalar(real value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }
    static Tensor vector(std::vector<real> values, bool requires_grad = false) {
        const auto n = values.size();
        return Tensor({n}, std::move(values), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const real> data() const { return impl_->data; }
    // Leaf storage is writable so optimizers can update parameters in place.
    std::span<real> mutable_data() { return impl_->data; }
    real item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
        return impl_->data[0];
    }
    real operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }
    bool is_leaf() const { return impl_->node == nullptr; }
    std::string op() const { return impl_->node ? impl_->node->op : std::string("leaf"); }

    bool has_grad() const { return impl_->has_grad(); }
    std::span<const real> grad() const { return impl_->grad; }
    std::span<real> mutable_grad() { return impl_->ensure_grad(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
    }

    // Detached copy: same values, no tape, no grad.
    Tensor detach() const { return Tensor(shape(), impl_->data, false); }

    void backward() const;

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

inline void Tensor::backward() const {
    if (!defined()) throw std::logic_error("backward() on undefined tensor");
    if (numel() != 1) throw DimensionError("backward() requires a scalar loss, got shape " + shape_string(shape()));
    if (!impl_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> visited;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto* tape = node->node.get();
        if (tape && next < tape->inputs.size()) {
            auto* child = tape->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (auto* t : order) {
        if (t->node) t->grad.assign(t->data.size(), real(0));
        else t->ensure_grad();
    }
    impl_->grad[0] += real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const auto* t = *it;
        if (t->node) t->node->backward(*t, t->node->inputs);
    }
}

namespace detail {

inline Tensor make_result(std::string op, Shape shape, std::vector<real> data, std::vector<Tensor> inputs,
                          TapeNode::BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    const bool needs_tape =
        std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (needs_tape) {
        auto node = std::make_shared<TapeNode>();
        node->op = std::move(op);
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.impl());
        node->backward = std::move(backward);
        out.impl()->node = std::move(node);
        out.set_requires_grad(true);
    }
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.dim() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_string(t.shape()));
}

template <class F>
Tensor unary(const char* op, const Tensor& a, F&& value, std::function<real(real x, real y)> deriv) {
    std::vector<real> out(a.numel());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(in[i]);
    return make_result(op, a.shape(), std::move(out), {a},
                       [deriv = std::move(deriv)](const TensorImpl& o, std::span<const std::shared_ptr<TensorImpl>> ins) {
                           auto& x = *ins[0];
                           if (!x.requires_grad) return;
                           auto& gx = x.ensure_grad();
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * deriv(x.data[i], o.data[i]);
                       });
}

// Broadcast helpers for per-channel vectors over [N, C, ...] tensors.
inline std::pair<std::size_t, std::size_t> channel_layout(const Tensor& x, std::size_t channels, const char* op) {
    if (x.dim() < 2 || x.size(1) != channels)
        throw DimensionError(std::string(op) + ": channel vector of length " + std::to_string(channels) +
                             " does not match " + shape_string(x.shape()));
    return {x.size(0), x.numel() / (x.size(0) * channels)};
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](const auto& o, auto ins) {
        for (const auto& in : ins) {
            if (!in->requires_grad) continue;
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](const auto& o, auto ins) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!ins[k]->requires_grad) continue;
            const real sign = k == 0 ? real(1) : real(-1);
            auto& g = ins[k]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * o.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](const auto& o, auto ins) {
        auto& x = *ins[0];
        auto& y = *ins[1];
        if (x.requires_grad) {
            auto& g = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y.data[i];
        }
        if (y.requires_grad) {
            auto& g = y.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * x.data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, real factor) {
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    return detail::make_result("scale", a.shape(), std::move(out), {a}, [factor](const auto& o, auto ins) {
        if (!ins[0]->requires_grad) return;
        auto& g = ins[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
    });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary("relu", a, [](real x) { return x > 0 ? x : real(0); },
                         [](real x, real) { return x > 0 ? real(1) : real(0); });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary("abs", a, [](real x) { return std::abs(x); },
                         [](real x, real) { return x > 0 ? real(1) : (x < 0 ? real(-1) : real(0)); });
}

// Piecewise constant, so its derivative is zero almost everywhere.
inline Tensor sign(const Tensor& a) {
    return detail::unary("sign", a, [](real x) { return x > 0 ? real(1) : (x < 0 ? real(-1) : real(0)); },
                         [](real, real) { return real(0); });
}

inline Tensor sqrt(const Tensor& a) {
    for (auto v : a.data())
        if (v < 0) throw std::domain_error("sqrt of negative value");
    return detail::unary("sqrt", a, [](real x) { return std::sqrt(x); },
                         [](real, real y) { return y > 0 ? real(0.5) / y : std::numeric_limits<real>::infinity(); });
}

inline Tensor square(const Tensor& a) {
    return detail::unary("square", a, [](real x) { return x * x; }, [](real x, real) { return real(2) * x; });
}

// ---- reductions -----------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    real s = 0;
    for (auto v : a.data()) s += v;
    return detail::make_result("sum", {1}, {s}, {a}, [](const auto& o, auto ins) {
        if (!ins[0]->requires_grad) return;
        auto& g = ins[0]->ensure_grad();
        for (auto& v : g) v += o.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), real(1) / static_cast<real>(a.numel()));
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// Euclidean norm over all elements. The subgradient at zero is taken as zero.
inline Tensor l2_norm(const Tensor& a) {
    real s = 0;
    for (auto v : a.data()) s += v * v;
    return detail::make_result("l2_norm", {1}, {std::sqrt(s)}, {a}, [](const auto& o, auto ins) {
        auto& x = *ins[0];
        if (!x.requires_grad || o.data[0] == 0) return;
        auto& g = x.ensure_grad();
        const real k = o.grad[0] / o.data[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * x.data[i];
    });
}

// Sum of absolute values.
inline Tensor l1_norm(const Tensor& a) { return sum(abs(a)); }

// ---- shape ----------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
    std::vector<real> out(a.data().begin(), a.data().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](const auto& o, auto ins) {
        if (!ins[0]->requires_grad) return;
        auto& g = ins[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

// [N, ...] -> [N, prod(...)]
inline Tensor flatten(const Tensor& a) {
    if (a.dim() < 1) throw DimensionError("flatten: rank-0 tensor");
    return reshape(a, {a.size(0), a.numel() / a.size(0)});
}

// ---- linear algebra -------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const auto m = a.size(0), k = a.size(1), n = b.size(1);
    if (b.size(0) != k)
        throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    std::vector<real> out(m * n, real(0));
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const real av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
        }
    return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](const auto& o, auto ins) {
        auto& x = *ins[0];
        auto& y = *ins[1];
        const auto& G = o.grad;
        if (x.requires_grad) {
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    real s = 0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * y.data[p * n + j];
                    gx[i * k + p] += s;
                }
        }
        if (y.requires_grad) {
            auto& gy = y.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const real xv = x.data[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gy[p * n + j] += xv * G[i * n + j];
                }
        }
    });
}

// y = x W^T + b with x: [N, in], W: [out, in], b: [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(weight, 2, "linear");
    detail::require_rank(bias, 1, "linear");
    const auto batch = x.size(0), in = x.size(1), out_f = weight.size(0);
    if (weight.size(1) != in || bias.size(0) != out_f)
        throw DimensionError("linear: incompatible shapes x" + shape_string(x.shape()) + " W" +
                             shape_string(weight.shape()) + " b" + shape_string(bias.shape()));
    std::vector<real> out(batch * out_f);
    const auto X = x.data();
    const auto W = weight.data();
    const auto B = bias.data();
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < out_f; ++o) {
            real s = 0;
            const real* xr = X.data() + n * in;
            const real* wr = W.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
            out[n * out_f + o] = s + B[o];
        }
    return detail::make_result(
        "linear", {batch, out_f}, std::move(out), {x, weight, bias}, [batch, in, out_f](const auto& o, auto ins) {
            auto& xi = *ins[0];
            auto& wi = *ins[1];
            auto& bi = *ins[2];
            const auto& G = o.grad;
            if (xi.requires_grad) {
                auto& gx = xi.ensure_grad();
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t f = 0; f < out_f; ++f) {
                        const real gv = G[n * out_f + f];
                        if (gv == 0) continue;
                        const real* wr = wi.data.data() + f * in;
                        real* gr = gx.data() + n * in;
                        for (std::size_t i = 0; i < in; ++i) gr[i] += gv * wr[i];
                    }
            }
            if (wi.requires_grad) {
                auto& gw = wi.ensure_grad();
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t f = 0; f < out_f; ++f) {
                        const real gv = G[n * out_f + f];
                        if (gv == 0) continue;
                        const real* xr = xi.data.data() + n * in;
                        real* gr = gw.data() + f * in;
                        for (std::size_t i = 0; i < in; ++i) gr[i] += gv * xr[i];
                    }
            }
            if (bi.requires_grad) {
                auto& gb = bi.ensure_grad();
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t f = 0; f < out_f; ++f) gb[f] += G[n * out_f + f];
            }
        });
}

namespace detail {

// Plane of input values seen by kernel tap (ky, kx) at every output position;
// zero where the tap falls in the padding.
inline void gather_tap(const real* in, std::size_t H, std::size_t W, long p, std::size_t ky, std::size_t kx,
                       std::size_t OH, std::size_t OW, real* plane) {
    for (std::size_t y = 0; y < OH; ++y) {
        const long iy = static_cast<long>(y + ky) - p;
        real* row = plane + y * OW;
        if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(row, row + OW, real(0));
            continue;
        }
        const real* irow = in + iy * static_cast<long>(W);
        for (std::size_t x = 0; x < OW; ++x) {
            const long ix = static_cast<long>(x + kx) - p;
            row[x] = (ix >= 0 && ix < static_cast<long>(W)) ? irow[ix] : real(0);
        }
    }
}

// Adjoint of gather_tap: adds the plane back onto the input positions it read.
inline void scatter_tap(const real* plane, std::size_t H, std::size_t W, long p, std::size_t ky, std::size_t kx,
                        std::size_t OH, std::size_t OW, real* in) {
    for (std::size_t y = 0; y < OH; ++y) {
        const long iy = static_cast<long>(y + ky) - p;
        if (iy < 0 || iy >= static_cast<long>(H)) continue;
        real* irow = in + iy * static_cast<long>(W);
        const real* row = plane + y * OW;
        for (std::size_t x = 0; x < OW; ++x) {
            const long ix = static_cast<long>(x + kx) - p;
            if (ix >= 0 && ix < static_cast<long>(W)) irow[ix] += row[x];
        }
    }
}

}  // namespace detail

// Direct stride-1 2-D convolution with symmetric zero padding.
// x: [N, C, H, W], weight: [O, C, K, K], bias: [O] -> [N, O, H + 2p - K + 1, W + 2p - K + 1].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d");
    detail::require_rank(bias, 1, "conv2d");
    const auto N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const auto O = weight.size(0), K = weight.size(2);
    if (weight.size(1) != C || weight.size(3) != K || bias.size(0) != O)
        throw DimensionError("conv2d: incompatible shapes x" + shape_string(x.shape()) + " w" +
                             shape_string(weight.shape()) + " b" + shape_string(bias.shape()));
    if (H + 2 * padding < K || W + 2 * padding < K) throw DimensionError("conv2d: kernel larger than padded input");
    const auto OH = H + 2 * padding - K + 1, OW = W + 2 * padding - K + 1;
    const auto P = OH * OW, taps = C * K * K;
    const long p = static_cast<long>(padding);

    std::vector<real> out(N * O * P);
    std::vector<real> cols(taps * P);
    const auto X = x.data();
    const auto Wt = weight.data();
    const auto B = bias.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx)
                    detail::gather_tap(X.data() + (n * C + c) * H * W, H, W, p, ky, kx, OH, OW,
                                       cols.data() + ((c * K + ky) * K + kx) * P);
        for (std::size_t o = 0; o < O; ++o) {
            real* op = out.data() + (n * O + o) * P;
            std::fill(op, op + P, B[o]);
            const real* wrow = Wt.data() + o * taps;
            for (std::size_t t = 0; t < taps; ++t) {
                const real wv = wrow[t];
                const real* col = cols.data() + t * P;
                for (std::size_t i = 0; i < P; ++i) op[i] += wv * col[i];
            }
        }
    }

    return detail::make_result(
        "conv2d", {N, O, OH, OW}, std::move(out), {x, weight, bias},
        [=](const auto& o_impl, auto ins) {
            auto& xi = *ins[0];
            auto& wi = *ins[1];
            auto& bi = *ins[2];
            const auto& G = o_impl.grad;
            real* gx = xi.requires_grad ? xi.ensure_grad().data() : nullptr;
            real* gw = wi.requires_grad ? wi.ensure_grad().data() : nullptr;
            real* gb = bi.requires_grad ? bi.ensure_grad().data() : nullptr;
            std::vector<real> cols(gw ? taps * P : 0);
            std::vector<real> gcol(gx ? P : 0);
            for (std::size_t n = 0; n < N; ++n) {
                const real* gn = G.data() + n * O * P;
                if (gb)
                    for (std::size_t o = 0; o < O; ++o) {
                        real s = 0;
                        for (std::size_t i = 0; i < P; ++i) s += gn[o * P + i];
                        gb[o] += s;
                    }
                if (gw) {
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx)
                                detail::gather_tap(xi.data.data() + (n * C + c) * H * W, H, W, p, ky, kx, OH, OW,
                                                   cols.data() + ((c * K + ky) * K + kx) * P);
                    for (std::size_t o = 0; o < O; ++o)
                        for (std::size_t t = 0; t < taps; ++t) {
                            const real* col = cols.data() + t * P;
                            const real* go = gn + o * P;
                            real s = 0;
                            for (std::size_t i = 0; i < P; ++i) s += go[i] * col[i];
                            gw[o * taps + t] += s;
                        }
                }
                if (gx)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const std::size_t t = (c * K + ky) * K + kx;
                                std::fill(gcol.begin(), gcol.end(), real(0));
                                for (std::size_t o = 0; o < O; ++o) {
                                    const real wv = wi.data[o * taps + t];
                                    const real* go = gn + o * P;
                                    for (std::size_t i = 0; i < P; ++i) gcol[i] += wv * go[i];
                                }
                                detail::scatter_tap(gcol.data(), H, W, p, ky, kx, OH, OW, gx + (n * C + c) * H * W);
                            }
            }
        });
}

// Non-overlapping max pooling with window == stride == k. Trailing rows/cols
// that do not fill a window are dropped. Ties resolve to the first maximum.
inline Tensor max_pool2d(const Tensor& x, std::size_t k) {
    detail::require_rank(x, 4, "max_pool2d");
    if (k == 0) throw DimensionError("max_pool2d: window must be positive");
    const auto N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const auto OH = H / k, OW = W / k;
    if (OH == 0 || OW == 0) throw DimensionError("max_pool2d: window larger than input");
    std::vector<real> out(N * C * OH * OW);
    std::vector<std::size_t> argmax(out.size());
    const auto X = x.data();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                std::size_t best = nc * H * W + (oy * k) * W + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t idx = nc * H * W + (oy * k + dy) * W + ox * k + dx;
                        if (X[idx] > X[best]) best = idx;
                    }
                const std::size_t o = (nc * OH + oy) * OW + ox;
                out[o] = X[best];
                argmax[o] = best;
            }
    return detail::make_result("max_pool2d", {N, C, OH, OW}, std::move(out), {x},
                               [argmax = std::move(argmax)](const auto& o, auto ins) {
                                   if (!ins[0]->requires_grad) return;
                                   auto& g = ins[0]->ensure_grad();
                                   for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                               });
}

// ---- per-channel broadcast ------------------------------------------------

// x: [N, C, ...], bias: [C]
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(bias, 1, "add_channel_bias");
    const auto C = bias.size(0);
    const auto [N, inner] = detail::channel_layout(x, C, "add_channel_bias");
    std::vector<real> out(x.data().begin(), x.data().end());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) out[(n * C + c) * inner + i] += bias[c];
    return detail::make_result("add_channel_bias", x.shape(), std::move(out), {x, bias},
                               [N, C, inner](const auto& o, auto ins) {
                                   if (ins[0]->requires_grad) {
                                       auto& g = ins[0]->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                   }
                                   if (ins[1]->requires_grad) {
                                       auto& g = ins[1]->ensure_grad();
                                       for (std::size_t n = 0; n < N; ++n)
                                           for (std::size_t c = 0; c < C; ++c)
                                               for (std::size_t i = 0; i < inner; ++i)
                                                   g[c] += o.grad[(n * C + c) * inner + i];
                                   }
                               });
}

// x: [N, C, ...] scaled per channel by factors: [C]
inline Tensor mul_channel(const Tensor& x, const Tensor& factors) {
    detail::require_rank(factors, 1, "mul_channel");
    const auto C = factors.size(0);
    const auto [N, inner] = detail::channel_layout(x, C, "mul_channel");
    std::vector<real> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const auto idx = (n * C + c) * inner + i;
                out[idx] = x[idx] * factors[c];
            }
    return detail::make_result("mul_channel", x.shape(), std::move(out), {x, factors},
                               [N, C, inner](const auto& o, auto ins) {
                                   auto& xi = *ins[0];
                                   auto& fi = *ins[1];
                                   for (std::size_t n = 0; n < N; ++n)
                                       for (std::size_t c = 0; c < C; ++c)
                                           for (std::size_t i = 0; i < inner; ++i) {
                                               const auto idx = (n * C + c) * inner + i;
                                               if (xi.requires_grad) xi.ensure_grad()[idx] += o.grad[idx] * fi.data[c];
                                               if (fi.requires_grad) fi.ensure_grad()[c] += o.grad[idx] * xi.data[idx];
                                           }
                               });
}

// ---- loss -----------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const auto N = logits.size(0), K = logits.size(1);
    if (labels.size() != N)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(N) + " rows");
    std::vector<real> probs(N * K);
    real total = 0;
    const auto Z = logits.data();
    std::vector<int> y(labels.begin(), labels.end());
    for (std::size_t n = 0; n < N; ++n) {
        if (y[n] < 0 || static_cast<std::size_t>(y[n]) >= K)
            throw DimensionError("softmax_cross_entropy: label " + std::to_string(y[n]) + " out of range");
        const real* z = Z.data() + n * K;
        const real zmax = *std::max_element(z, z + K);
        real se = 0;
        for (std::size_t k = 0; k < K; ++k) {
            probs[n * K + k] = std::exp(z[k] - zmax);
            se += probs[n * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) probs[n * K + k] /= se;
        total += std::log(se) + zmax - z[y[n]];
    }
    return detail::make_result("softmax_cross_entropy", {1}, {total / static_cast<real>(N)}, {logits},
                               [probs = std::move(probs), y = std::move(y), N, K](const auto& o, auto ins) {
                                   if (!ins[0]->requires_grad) return;
                                   auto& g = ins[0]->ensure_grad();
                                   const real s = o.grad[0] / static_cast<real>(N);
                                   for (std::size_t n = 0; n < N; ++n)
                                       for (std::size_t k = 0; k < K; ++k) {
                                           const real t = static_cast<std::size_t>(y[n]) == k ? real(1) : real(0);
                                           g[n * K + k] += s * (probs[n * K + k] - t);
                                       }
                               });
}

// Row-wise argmax of [N, K] logits.
inline std::vector<int> argmax_rows(const Tensor& logits) {
    detail::require_rank(logits, 2, "argmax_rows");
    const auto N = logits.size(0), K = logits.size(1);
    std::vector<int> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        const auto row = logits.data().subspan(n * K, K);
        out[n] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

}  // namespace adasap
