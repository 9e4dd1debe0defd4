#include "test_support.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

using namespace mdpde;
using boost::math::quadrature::gauss_kronrod;

namespace {

double normal_density(const Vector& x, const Matrix& V) {
    const Eigen::LLT<Matrix> llt(V);
    const Matrix L = llt.matrixL();
    const double logdet = 2.0 * L.diagonal().array().log().sum();
    const double q = x.dot(llt.solve(x));
    return std::exp(-0.5 * (static_cast<double>(x.size()) * std::log(2.0 * M_PI) + logdet + q));
}

double quadrature_integral(const Matrix& V, double alpha) {
    const double a = 1.0 + alpha;
    if (V.rows() == 1) {
        const double half = 12.0 * std::sqrt(V(0, 0));
        auto f = [&](double x) { return std::pow(normal_density(Vector::Constant(1, x), V), a); };
        return gauss_kronrod<double, 61>::integrate(f, -half, half, 15, 1e-14);
    }
    const double hx = 12.0 * std::sqrt(V(0, 0));
    const double hy = 12.0 * std::sqrt(V(1, 1));
    auto outer = [&](double x) {
        auto inner = [&](double y) { return std::pow(normal_density((Vector(2) << x, y).finished(), V), a); };
        return gauss_kronrod<double, 61>::integrate(inner, -hy, hy, 15, 1e-14);
    };
    return gauss_kronrod<double, 61>::integrate(outer, -hx, hx, 15, 1e-13);
}

} // namespace

TEST(Objective, LogLikelihoodOfStandardNormalAtZero) {
    const auto design = mdpde::testing::iid_design({0.0});
    const auto e = eval_objective(design, ThetaParams{Vector::Zero(1), Vector::Ones(1)}, DpdConfig{0.0});
    EXPECT_NEAR(e.value, 0.5 * std::log(2.0 * M_PI), 1e-15);
}

TEST(Objective, RejectsNegativeAlpha) {
    const auto design = mdpde::testing::iid_design({0.0});
    EXPECT_THROW(eval_objective(design, ThetaParams{Vector::Zero(1), Vector::Ones(1)}, DpdConfig{-0.1}),
                 InvalidArgument);
}

TEST(Objective, AnalyticGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> n_dist(3, 10), r_dist(0, 2), k_dist(1, 3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, n_dist(rng), 1, 6, k_dist(rng), r_dist(rng));
        for (double alpha : {0.0, 0.1, 0.5, 1.0}) {
            const Vector g = eval_objective(prob.design, prob.theta, DpdConfig{alpha}).gradient();
            const Vector fd = mdpde::testing::fd_gradient(prob.design, prob.theta, alpha);
            const double scale = std::max(1.0, g.lpNorm<Eigen::Infinity>());
            EXPECT_LE((g - fd).lpNorm<Eigen::Infinity>(), 1e-5 * scale) << "trial " << trial << " alpha " << alpha;
        }
    }
}

TEST(IntegralDensityPower, MatchesQuadrature) {
    std::mt19937_64 rng(22);
    for (double alpha : {0.05, 0.3, 1.0}) {
        for (int dim : {1, 2}) {
            const Matrix V = dim == 1 ? Matrix::Constant(1, 1, 0.7) : mdpde::testing::random_spd(rng, 2, 0.4, 2.0);
            const double logdet = std::log(V.determinant());
            const double closed = integral_density_power(dim, alpha, logdet);
            const double numeric = quadrature_integral(V, alpha);
            EXPECT_NEAR(closed, numeric, 1e-8 * closed) << "dim " << dim << " alpha " << alpha;
        }
    }
}

TEST(Weights, AllOneAtAlphaZero) {
    std::mt19937_64 rng(23);
    const auto prob = mdpde::testing::random_problem(rng, 6, 1, 4, 2, 1);
    EXPECT_TRUE(eval_weights(prob.design, prob.theta, DpdConfig{0.0}).isOnes());
}

TEST(Weights, ExponentialInMahalanobisResidual) {
    const auto design = mdpde::testing::iid_design({0.0, 2.0});
    const Vector w = eval_weights(design, ThetaParams{Vector::Zero(1), Vector::Ones(1)}, DpdConfig{0.5});
    EXPECT_DOUBLE_EQ(w[0], 1.0);
    EXPECT_NEAR(w[1], std::exp(-1.0), 1e-15);
    const Vector w2 = eval_objective(design, ThetaParams{Vector::Zero(1), Vector::Ones(1)}, DpdConfig{0.5}).per_group_weights;
    EXPECT_NEAR((w - w2).norm(), 0.0, 1e-15);
}

TEST(Weights, WithinUnitIntervalAndDecreasingInResidual) {
    std::mt19937_64 rng(24);
    for (int trial = 0; trial < 10; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 8, 1, 5, 2, 1);
        const auto covs = assemble_covariances(prob.design, prob.theta);
        const Vector w = eval_weights(prob.design, prob.theta, covs, DpdConfig{0.4});
        for (std::size_t i = 0; i < prob.design.num_groups(); ++i) {
            EXPECT_GT(w[static_cast<Eigen::Index>(i)], 0.0);
            EXPECT_LE(w[static_cast<Eigen::Index>(i)], 1.0);
            for (std::size_t j = 0; j < prob.design.num_groups(); ++j) {
                const double qi = mahalanobis_residual(prob.design.group(i), prob.theta.beta, covs.chol(i));
                const double qj = mahalanobis_residual(prob.design.group(j), prob.theta.beta, covs.chol(j));
                if (qi < qj) {
                    EXPECT_GE(w[static_cast<Eigen::Index>(i)], w[static_cast<Eigen::Index>(j)]);
                }
            }
        }
    }
}

// The expected estimating equation vanishes at the truth: the sample gradient
// averaged over many data sets is zero within Monte Carlo error.
TEST(Objective, EstimatingEquationUnbiasedAtTruth) {
    std::mt19937_64 rng(25);
    const ThetaParams truth = mdpde::testing::longitudinal_truth();
    const int reps = 2000;
    const auto np = static_cast<Eigen::Index>(2 + 3);
    for (double alpha : {0.1, 0.5}) {
        Vector sum = Vector::Zero(np), sumsq = Vector::Zero(np);
        for (int rep = 0; rep < reps; ++rep) {
            LongitudinalSpec spec;
            spec.n = 5;
            const auto design = generate_longitudinal(spec, rng);
            const Vector g = eval_objective(design, truth, DpdConfig{alpha}).gradient();
            sum += g;
            sumsq += g.cwiseProduct(g);
        }
        const Vector mean = sum / reps;
        const Vector var = sumsq / reps - mean.cwiseProduct(mean);
        for (Eigen::Index j = 0; j < np; ++j)
            EXPECT_LE(std::abs(mean[j]), 3.0 * std::sqrt(var[j] / reps)) << "alpha " << alpha << " component " << j;
    }
}

TEST(Objective, OutlierGetsNegligibleWeightAtFit) {
    std::mt19937_64 rng(26);
    std::normal_distribution<double> gauss;
    std::vector<double> y(40);
    for (auto& v : y) v = gauss(rng);
    y[7] = 50.0;
    const auto design = mdpde::testing::iid_design(y);
    const FitResult f = fit(design, DpdConfig{0.3});
    ASSERT_TRUE(f.converged);
    EXPECT_LT(f.weights[7], 1e-20);
    EXPECT_LT(std::abs(f.theta_hat.beta[0]), 0.6);
}

TEST(Objective, SmallAlphaApproachesMaximumLikelihood) {
    const auto design = mdpde::testing::longitudinal_example(27, 30, 6);
    const FitResult ml = fit(design, DpdConfig{0.0});
    const FitResult near = fit(design, DpdConfig{1e-4});
    ASSERT_TRUE(ml.converged);
    ASSERT_TRUE(near.converged);
    EXPECT_LE((ml.theta_hat.packed() - near.theta_hat.packed()).lpNorm<Eigen::Infinity>(), 1e-3);
}
