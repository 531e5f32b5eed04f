#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "adasap/hvp.hpp"
#include "adasap/sharpness.hpp"
#include "support.hpp"

using namespace adasap;
using adasap::testing::Rng;
using adasap::testing::make_quadratic;

namespace {

// max over |e| <= rho of L(w + e) - L(w) by dense grid search, L = 0.5 a w^2 + b w
real grid_gap_1d(real a, real b, real w, real rho) {
    const auto L = [&](real x) { return real(0.5) * a * x * x + b * x; };
    real best = 0;
    const int n = 200'000;
    for (int i = 0; i <= n; ++i) best = std::max(best, L(w - rho + 2 * rho * i / n) - L(w));
    return best;
}

real eigen_top(const std::vector<real>& A, std::size_t n) {
    Eigen::MatrixXd M(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) M(static_cast<long>(i), static_cast<long>(j)) = static_cast<double>(A[i * n + j]);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    return es.eigenvalues().maxCoeff();
}

}  // namespace

TEST(Hvp, ExactOnQuadratics) {
    Rng rng(1);
    for (std::size_t n : {1u, 3u, 6u}) {
        const auto A = adasap::testing::random_psd(n, rng);
        auto q = make_quadratic(A, adasap::testing::uniform_values(n, rng));
        const auto v = adasap::testing::uniform_values(n, rng);
        const auto hv = hessian_vector_product(q.set.params, q.objective, {v}).product[0];
        for (std::size_t i = 0; i < n; ++i) {
            real expect = 0;
            for (std::size_t j = 0; j < n; ++j) expect += A[i * n + j] * v[j];
            EXPECT_NEAR(hv[i], expect, 1e-8);
        }
    }
}

TEST(Hvp, ZeroDirectionGivesZero) {
    auto q = make_quadratic({2}, {1});
    EXPECT_EQ(hessian_vector_product(q.set.params, q.objective, {{0}}).product[0][0], 0);
}

TEST(Hvp, RestoresParameters) {
    auto q = make_quadratic({2, 1, 1, 3}, {0.1, 0.7});
    const auto before = snapshot(q.set.params);
    hessian_vector_product(q.set.params, q.objective, {{0.3, -0.2}});
    EXPECT_EQ(snapshot(q.set.params), before);
}

TEST(PerturbationGap, OneDimensionalQuadraticReference) {
    auto q = make_quadratic({1}, {1});
    const auto r = perturbation_gap(q.set, q.objective, 0.1, 5);
    EXPECT_NEAR(r.value, 0.105, 1e-12);
    EXPECT_NEAR(r.value, grid_gap_1d(1, 0, 1, 0.1), 1e-6);
}

TEST(PerturbationGap, MatchesGridSearchOnRandomOneDimensionalCases) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const auto p = adasap::testing::uniform_values(4, rng, -2, 2);
        const real a = std::abs(p[0]) + real(0.1), rho = std::abs(p[3]) / 4 + real(0.01);
        auto q = make_quadratic({a}, {p[1]}, {p[2]});
        EXPECT_NEAR(perturbation_gap(q.set, q.objective, rho, 5).value, grid_gap_1d(a, p[2], p[1], rho), 1e-6);
    }
}

TEST(PerturbationGap, NonNegativeAndRestoresWeights) {
    // at the minimum of a convex quadratic the gradient is zero, so eps stays 0
    auto q = make_quadratic({2, 0, 0, 1}, {0, 0});
    const auto r = perturbation_gap(q.set, q.objective, 0.1, 3);
    EXPECT_GE(r.value, 0);
    EXPECT_EQ(snapshot(q.set.params), (ParamBuffers{{0, 0}}));
}

TEST(PerturbationGap, RejectsBadArguments) {
    auto q = make_quadratic({1}, {1});
    EXPECT_THROW(perturbation_gap(q.set, q.objective, 0, 5), std::invalid_argument);
    EXPECT_THROW(perturbation_gap(q.set, q.objective, 0.1, 0), std::invalid_argument);
}

TEST(PowerIteration, MatchesDenseEigensolver) {
    Rng rng(3);
    for (int t = 0; t < 30; ++t) {
        const std::size_t n = adasap::testing::pick(rng, 1, 8);
        const auto A = adasap::testing::random_psd(n, rng);
        auto q = make_quadratic(A, adasap::testing::uniform_values(n, rng));
        const auto r = top_hessian_eigenvalue(q.set, q.objective, 5000, 1e-12, static_cast<std::uint64_t>(t));
        const real ref = eigen_top(A, n);
        EXPECT_NEAR(r.value, ref, 1e-3 * std::abs(ref)) << "n=" << n;
    }
}

TEST(PowerIteration, DiagonalHessian) {
    auto q = make_quadratic({3, 0, 0, 0, 1, 0, 0, 0, 0.5}, {1, 1, 1});
    const auto r = top_hessian_eigenvalue(q.set, q.objective, 500, 1e-12, 4);
    EXPECT_NEAR(r.value, 3, 1e-6);
    EXPECT_TRUE(r.converged);
}

TEST(PowerIteration, DeadPartitionsAreExcluded) {
    ParameterSet s;
    s.params.push_back(Tensor({2}, {1, 1}, true));
    s.parts.push_back({"a", 0, 0, 0, {{0, 0, 1}}, true, true});
    s.parts.push_back({"b", 1, 0, 1, {{0, 1, 1}}, true, false});
    const Tensor w = s.params[0];
    const Tensor c = Tensor::vector({1, 5});
    const auto obj = make_objective([w, c] { return scale(sum(mul(c, square(w))), 0.5); });
    EXPECT_NEAR(top_hessian_eigenvalue(s, obj, 200, 1e-12, 1).value, 1, 1e-6);
}

TEST(PhaseSharpness, HessianReadingIsOptional) {
    auto q = make_quadratic({2}, {1});
    SharpnessSettings s;
    s.hessian = false;
    const auto rs = phase_sharpness(q.set, q.objective, Phase::post_prune, 7, s, 1);
    ASSERT_EQ(rs.size(), 1u);
    EXPECT_EQ(rs[0].phase, Phase::post_prune);
    EXPECT_EQ(rs[0].step, 7u);
    s.hessian = true;
    EXPECT_EQ(phase_sharpness(q.set, q.objective, Phase::pre_prune, 0, s, 1).size(), 2u);
}
