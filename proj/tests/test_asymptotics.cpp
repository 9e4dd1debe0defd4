#include "test_support.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include <algorithm>

using namespace mdpde;
using boost::math::quadrature::gauss_kronrod;

namespace {

ThetaParams example_truth() { return mdpde::testing::longitudinal_truth(); }

// Fisher information per group, from explicit inverses.
Matrix fisher_information(const GroupedDesign& design, const ThetaParams& theta) {
    const auto k = static_cast<Eigen::Index>(design.k());
    const auto m = static_cast<Eigen::Index>(design.r() + 1);
    Matrix I = Matrix::Zero(k + m, k + m);
    for (const auto& g : design.groups()) {
        const auto ni = static_cast<Eigen::Index>(g.size());
        std::vector<Matrix> U{Matrix::Identity(ni, ni)};
        for (const auto& z : g.Z) U.push_back(z * z.transpose());
        Matrix V = Matrix::Zero(ni, ni);
        for (Eigen::Index j = 0; j < m; ++j) V += theta.sigma2[j] * U[static_cast<std::size_t>(j)];
        const Matrix Vi = V.inverse();
        I.topLeftCorner(k, k) += g.X.transpose() * Vi * g.X;
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b < m; ++b)
                I(k + a, k + b) += 0.5 * (Vi * U[static_cast<std::size_t>(a)] * Vi * U[static_cast<std::size_t>(b)]).trace();
    }
    return I / static_cast<double>(design.num_groups());
}

double rel_diff(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

} // namespace

TEST(AsymptoticInfo, MleCovarianceIsInverseFisherInformation) {
    std::mt19937_64 rng(51);
    for (int trial = 0; trial < 8; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 7, 1, 5, 2, trial % 3);
        const auto info = asymptotic_info(prob.design, prob.theta, DpdConfig{0.0});
        const Matrix I = fisher_information(prob.design, prob.theta);
        EXPECT_LE(rel_diff(info.psi_n, I), 1e-12);
        EXPECT_LE(rel_diff(info.omega_n, I), 1e-12);
        const Matrix expect = I.inverse() / static_cast<double>(prob.design.num_groups());
        EXPECT_LE(rel_diff(info.avar, expect), 1e-10);
    }
}

TEST(AsymptoticInfo, BalancedBetaBlockIsScaledGlsCovariance) {
    const auto design = mdpde::testing::longitudinal_example(52);
    const ThetaParams theta = example_truth();
    const Matrix V = assemble_covariances(design, theta).V(0);
    const Matrix Vi = V.inverse();
    Matrix S = Matrix::Zero(2, 2);
    for (const auto& g : design.groups()) S += g.X.transpose() * Vi * g.X;
    const double p = 10.0;
    for (double alpha : {0.1, 0.3, 0.6}) {
        const double upsilon = std::pow(1.0 + alpha, p + 2.0) / std::pow(1.0 + 2.0 * alpha, p / 2.0 + 1.0);
        const Matrix expect = upsilon * S.inverse();
        const auto info = asymptotic_info(design, theta, DpdConfig{alpha});
        EXPECT_LE(rel_diff(info.avar.topLeftCorner(2, 2), expect), 1e-8) << alpha;
    }
}

// n_i = 1, r = 0: Psi = int u u^T f^{1+alpha}, Omega = int u u^T f^{1+2 alpha} - xi xi^T.
TEST(AsymptoticInfo, UnivariateMatricesMatchQuadrature) {
    const double mu = 0.7, s2 = 1.8;
    const auto design = mdpde::testing::iid_design({0.0, 1.0, -1.0});
    const ThetaParams theta{Vector::Constant(1, mu), Vector::Constant(1, s2)};
    for (double alpha : {0.0, 0.1, 0.5, 1.0}) {
        const auto info = asymptotic_info(design, theta, DpdConfig{alpha});
        const double half = 14.0 * std::sqrt(s2);
        auto dens = [&](double x) { return std::exp(-0.5 * (x - mu) * (x - mu) / s2) / std::sqrt(2.0 * M_PI * s2); };
        auto score = [&](double x, int j) {
            return j == 0 ? (x - mu) / s2 : (x - mu) * (x - mu) / (2.0 * s2 * s2) - 0.5 / s2;
        };
        auto integrate = [&](auto f) { return gauss_kronrod<double, 61>::integrate(f, mu - half, mu + half, 15, 1e-14); };
        Matrix psi(2, 2), omega(2, 2);
        Vector xi(2);
        for (int a = 0; a < 2; ++a) {
            xi[a] = integrate([&](double x) { return score(x, a) * std::pow(dens(x), 1.0 + alpha); });
            for (int b = 0; b < 2; ++b) {
                psi(a, b) = integrate([&](double x) { return score(x, a) * score(x, b) * std::pow(dens(x), 1.0 + alpha); });
                omega(a, b) =
                    integrate([&](double x) { return score(x, a) * score(x, b) * std::pow(dens(x), 1.0 + 2.0 * alpha); });
            }
        }
        omega -= xi * xi.transpose();
        EXPECT_LE(rel_diff(info.psi_n, psi), 1e-9) << alpha;
        EXPECT_LE(rel_diff(info.omega_n, omega), 1e-9) << alpha;
    }
}

// Per-group gradients of H_n have covariance (1+alpha)^2 Omega_i and expected
// Jacobian (1+alpha) Psi_i; checked by Monte Carlo on an unbalanced design.
TEST(AsymptoticInfo, MatricesMatchMonteCarloMomentsOfEstimatingFunction) {
    std::mt19937_64 rng(53);
    const auto prob = mdpde::testing::random_problem(rng, 3, 2, 4, 2, 1);
    const double alpha = 0.3;
    const auto info = asymptotic_info(prob.design, prob.theta, DpdConfig{alpha});
    const auto d = static_cast<Eigen::Index>(prob.design.num_params());
    const auto covs = assemble_covariances(prob.design, prob.theta);
    std::normal_distribution<double> gauss;
    const int draws = 20000;
    Matrix cov_sum = Matrix::Zero(d, d), jac_sum = Matrix::Zero(d, d);
    Vector mean_sum = Vector::Zero(d);
    for (int rep = 0; rep < draws; ++rep) {
        for (std::size_t i = 0; i < prob.design.num_groups(); ++i) {
            GroupBlock g = prob.design.group(i);
            Vector e(static_cast<Eigen::Index>(g.size()));
            for (auto& v : e) v = gauss(rng);
            g.y = g.X * prob.theta.beta + covs.chol(i) * e;
            const GroupedDesign one({g});
            const Vector grad = eval_objective(one, prob.theta, DpdConfig{alpha}).gradient();
            mean_sum += grad;
            cov_sum += grad * grad.transpose();
            if (rep < 2000) {
                Matrix J(d, d);
                for (Eigen::Index c = 0; c < d; ++c) {
                    Vector xp = prob.theta.packed(), xm = xp;
                    const double h = 1e-5;
                    xp[c] += h;
                    xm[c] -= h;
                    J.col(c) = (eval_objective(one, ThetaParams::unpack(xp, prob.design.k()), DpdConfig{alpha}).gradient() -
                                eval_objective(one, ThetaParams::unpack(xm, prob.design.k()), DpdConfig{alpha}).gradient()) /
                               (2.0 * h);
                }
                jac_sum += J;
            }
        }
    }
    const double groups = static_cast<double>(prob.design.num_groups());
    const Matrix cov = cov_sum / (draws * groups);
    const Matrix jac = jac_sum / (2000 * groups);
    EXPECT_LE(rel_diff(cov / ((1.0 + alpha) * (1.0 + alpha)), info.omega_n), 0.05);
    EXPECT_LE(rel_diff(jac / (1.0 + alpha), info.psi_n), 0.05);
    EXPECT_LE((mean_sum / (draws * groups)).norm(), 0.05 * std::sqrt(cov.trace()));
}

TEST(AsymptoticInfo, OffDiagonalBlocksAreExactlyZero) {
    std::mt19937_64 rng(54);
    const auto prob = mdpde::testing::random_problem(rng, 6, 1, 5, 2, 2);
    const auto info = asymptotic_info(prob.design, prob.theta, DpdConfig{0.4});
    const auto k = static_cast<Eigen::Index>(prob.design.k());
    const auto m = static_cast<Eigen::Index>(prob.design.r() + 1);
    EXPECT_TRUE((info.psi_n.topRightCorner(k, m).array() == 0.0).all());
    EXPECT_TRUE((info.omega_n.bottomLeftCorner(m, k).array() == 0.0).all());
}

TEST(AsymptoticInfo, OmegaSymmetricPositiveSemidefinite) {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 5, 1, 6, 2, trial % 3);
        const double alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto info = asymptotic_info(prob.design, prob.theta, DpdConfig{alpha});
        EXPECT_TRUE(info.omega_n.isApprox(info.omega_n.transpose(), 1e-14));
        Eigen::SelfAdjointEigenSolver<Matrix> es(info.omega_n);
        EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12 * es.eigenvalues().maxCoeff());
        Eigen::SelfAdjointEigenSolver<Matrix> ea(info.avar);
        EXPECT_GT(ea.eigenvalues().minCoeff(), 0.0);
    }
}

TEST(AsymptoticInfo, BoundaryComponentsGetNaNStandardErrors) {
    const auto design = mdpde::testing::longitudinal_example(56, 30, 6);
    ThetaParams theta = example_truth();
    theta.sigma2[1] = 0.0;
    const auto info = asymptotic_info(design, theta, DpdConfig{0.2});
    EXPECT_TRUE(info.boundary);
    EXPECT_FALSE(info.interior[3]);
    EXPECT_TRUE(std::isnan(info.se[3]));
    for (Eigen::Index j : {0, 1, 2, 4}) EXPECT_TRUE(std::isfinite(info.se[j])) << j;
}

TEST(AsymptoticInfo, SingularFixedEffectsThrow) {
    std::vector<GroupBlock> groups;
    for (int i = 0; i < 6; ++i) groups.push_back(GroupBlock{Vector::Constant(3, i), Matrix::Ones(3, 2), {}});
    const GroupedDesign design(groups);
    const ThetaParams theta{Vector::Zero(2), Vector::Ones(1)};
    EXPECT_THROW(asymptotic_info(design, theta, DpdConfig{0.1}), SingularPsi);
}

TEST(AreCurve, HundredAtZeroAndClosedFormForBeta) {
    const auto design = mdpde::testing::longitudinal_example(57);
    const ThetaParams theta = example_truth();
    const std::vector<double> alphas{0.0, 0.1, 0.3, 0.6};
    const auto are = are_curve(design, theta, alphas, 1);
    EXPECT_DOUBLE_EQ(are[0], 100.0);
    for (std::size_t j = 1; j < alphas.size(); ++j) {
        const double a = alphas[j];
        EXPECT_NEAR(are[j], 100.0 * std::pow(1.0 + 2.0 * a, 6.0) / std::pow(1.0 + a, 12.0), 1e-8);
    }
    EXPECT_NEAR(are[3], 40.2806, 5e-5);
}

TEST(AreCurve, VarianceComponentEfficiencyDecreases) {
    const auto design = mdpde::testing::longitudinal_example(58);
    std::vector<double> alphas;
    for (int j = 0; j <= 20; ++j) alphas.push_back(0.05 * j);
    for (std::size_t p = 2; p < 5; ++p) {
        const auto are = are_curve(design, example_truth(), alphas, p);
        for (std::size_t j = 1; j < are.size(); ++j) EXPECT_LT(are[j], are[j - 1]) << p << " " << alphas[j];
    }
    EXPECT_THROW(are_curve(design, example_truth(), alphas, 5), InvalidArgument);
}

TEST(WaldTests, ZeroEstimateHasUnitPValue) {
    FitResult f;
    f.theta_hat = ThetaParams{(Vector(2) << 0.0, 1.959963984540054).finished(), Vector::Ones(1)};
    AsymptoticInfo info;
    info.se = Vector::Ones(3);
    const auto rows = wald_tests(f, info);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].name, "beta0");
    EXPECT_DOUBLE_EQ(rows[0].p, 1.0);
    EXPECT_NEAR(rows[1].p, 0.05, 1e-12);
    EXPECT_EQ(rows[2].name, "sigma2_0");
    EXPECT_FALSE(rows[2].boundary_invalid);
}

TEST(WaldTests, BoundaryVarianceFlagged) {
    FitResult f;
    f.theta_hat = ThetaParams{Vector::Ones(1), (Vector(2) << 1.0, 0.0).finished()};
    AsymptoticInfo info;
    info.se = Vector::Ones(3);
    const auto rows = wald_tests(f, info);
    EXPECT_FALSE(rows[1].boundary_invalid);
    EXPECT_TRUE(rows[2].boundary_invalid);
}

TEST(WaldTests, PValuesUniformUnderNull) {
    std::mt19937_64 rng(59);
    LongitudinalSpec spec;
    spec.n = 40;
    spec.beta[1] = 0.0;
    const double alpha = 1.0 / 13.0;
    std::vector<double> pvals;
    for (int rep = 0; rep < 300; ++rep) {
        const auto design = generate_longitudinal(spec, rng);
        const FitResult f = fit(design, DpdConfig{alpha});
        const auto info = asymptotic_info(design, f.theta_hat, DpdConfig{alpha});
        pvals.push_back(wald_tests(f, info)[1].p);
    }
    std::sort(pvals.begin(), pvals.end());
    double ks = 0.0;
    const double N = static_cast<double>(pvals.size());
    for (std::size_t i = 0; i < pvals.size(); ++i)
        ks = std::max({ks, (i + 1) / N - pvals[i], pvals[i] - i / N});
    EXPECT_LT(ks, 1.36 / std::sqrt(N));  // 5% critical value
}

TEST(StandardizedError, ZeroAtTruthAndScalesWithRootN) {
    const auto design = mdpde::testing::longitudinal_example(60, 16, 6);
    const ThetaParams theta = example_truth();
    const auto info = asymptotic_info(design, theta, DpdConfig{0.2});
    EXPECT_NEAR(standardized_error(info, theta, theta).norm(), 0.0, 1e-15);
    ThetaParams moved = theta;
    moved.beta[0] += 0.1;
    const Vector z = standardized_error(info, moved, theta);
    // beta block: Omega11^{-1/2} Psi11 * sqrt(n) * 0.1 e_0
    const Matrix o = info.omega_n.topLeftCorner(2, 2);
    Eigen::SelfAdjointEigenSolver<Matrix> es(o);
    const Matrix oi = es.operatorInverseSqrt();
    const Vector expect = oi * info.psi_n.topLeftCorner(2, 2) * (Vector(2) << 0.1, 0.0).finished() * 4.0;
    EXPECT_LE((z.head(2) - expect).norm(), 1e-10);
}
