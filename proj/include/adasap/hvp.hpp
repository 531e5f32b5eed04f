#pragma once

#include <cmath>
#include <string>

#include "adasap/parameters.hpp"

namespace adasap {

enum class HvpMode { central_difference };

inline const char* to_string(HvpMode mode) {
    switch (mode) {
        case HvpMode::central_difference: return "central_difference";
    }
    return "unknown";
}

struct HvpResult {
    ParamBuffers product;
    HvpMode mode = HvpMode::central_difference;
    real step = 0;  // finite-difference step h applied along v
};

// Hessian-vector product by central differences of reverse-mode gradients:
//   Hv ~= (grad L(w + h v) - grad L(w - h v)) / 2h,  h = 1e-3 (1 + |w| / |v|).
// Exact (up to rounding) when L is quadratic. Parameters are restored bitwise.
inline HvpResult hessian_vector_product(std::vector<Tensor>& params, const Objective& objective,
                                        const ParamBuffers& v) {
    require_like(params, v, "hessian_vector_product");
    HvpResult result;
    const real vnorm = norm(v);
    if (vnorm == 0) {
        result.product = zeros_like(params);
        return result;
    }
    const auto saved = snapshot(params);
    const real wnorm = norm(saved);
    const real h = real(1e-3) * (real(1) + wnorm / vnorm);
    result.step = h;

    axpy(params, h, v);
    const auto g_plus = gradient(params, objective);
    restore(params, saved);
    axpy(params, -h, v);
    const auto g_minus = gradient(params, objective);
    restore(params, saved);
    zero_grads(params);

    result.product = zeros_like(params);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < result.product[i].size(); ++j)
            result.product[i][j] = (g_plus[i][j] - g_minus[i][j]) / (2 * h);
    return result;
}

}  // namespace adasap
