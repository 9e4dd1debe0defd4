#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace mdpde;

namespace {

SolverConfig tight() {
    SolverConfig s;
    s.max_iter = 2000;
    s.tol_theta = 1e-12;
    s.tol_obj = 1e-15;
    return s;
}

} // namespace

TEST(Fit, NoRandomFactorsMatchesOlsAndMlVariance) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 12, 1, 4, 3, 0);
        Matrix X;
        Vector y;
        detail::stack_fixed(prob.design, X, y);
        const Vector beta = (X.transpose() * X).inverse() * X.transpose() * y;
        const double s2 = (y - X * beta).squaredNorm() / static_cast<double>(y.size());
        const FitResult f = fit(prob.design, DpdConfig{0.0});
        ASSERT_TRUE(f.converged);
        EXPECT_LE((f.theta_hat.beta - beta).lpNorm<Eigen::Infinity>(), 1e-7);
        EXPECT_NEAR(f.theta_hat.sigma2[0], s2, 1e-7);
    }
}

TEST(Fit, MaximumLikelihoodMatchesProfiledOracle) {
    std::mt19937_64 rng(32);
    const ThetaParams truth{(Vector(2) << 1.0, -0.5).finished(), (Vector(2) << 0.5, 1.0).finished()};
    for (int trial = 0; trial < 4; ++trial) {
        const auto design = mdpde::testing::random_intercept_data(rng, 30, 5, truth);
        const ThetaParams oracle = mdpde::testing::ml_one_factor_oracle(design);
        const FitResult f = fit(design, DpdConfig{0.0}, tight());
        ASSERT_TRUE(f.converged);
        EXPECT_LE((f.theta_hat.packed() - oracle.packed()).lpNorm<Eigen::Infinity>(), 1e-6) << "trial " << trial;
    }
}

TEST(Fit, AgreesWithBalancedFixedPoint) {
    const auto design = mdpde::testing::longitudinal_example(33, 50, 10);
    for (double alpha : {0.2, 0.3}) {
        const FitResult a = fit(design, DpdConfig{alpha}, tight());
        const FitResult b = fit_balanced_fixed_point(design, DpdConfig{alpha}, tight());
        ASSERT_TRUE(a.converged);
        ASSERT_TRUE(b.converged);
        EXPECT_LE((a.theta_hat.packed() - b.theta_hat.packed()).lpNorm<Eigen::Infinity>(), 1e-6) << alpha;
    }
}

TEST(BalancedBetaUpdate, EqualsGlsAtAlphaZero) {
    const auto design = mdpde::testing::longitudinal_example(34, 8, 6);
    const ThetaParams theta = mdpde::testing::longitudinal_truth();
    const Vector step = balanced_beta_update(design, theta, DpdConfig{0.0});
    const Matrix Vinv = assemble_covariances(design, theta).V(0).inverse();
    Matrix A = Matrix::Zero(2, 2);
    Vector b = Vector::Zero(2);
    for (const auto& g : design.groups()) {
        A += g.X.transpose() * Vinv * g.X;
        b += g.X.transpose() * Vinv * g.y;
    }
    EXPECT_LE((step - A.inverse() * b).norm(), 1e-12);
}

TEST(BalancedBetaUpdate, IsFixedPointAtFit) {
    const auto design = mdpde::testing::longitudinal_example(35, 40, 10);
    const FitResult f = fit(design, DpdConfig{0.25}, tight());
    ASSERT_TRUE(f.converged);
    const Vector step = balanced_beta_update(design, f.theta_hat, DpdConfig{0.25});
    EXPECT_LE((step - f.theta_hat.beta).lpNorm<Eigen::Infinity>(), 1e-7);
}

TEST(BalancedBetaUpdate, RejectsUnbalancedDesign) {
    std::mt19937_64 rng(36);
    const auto prob = mdpde::testing::random_problem(rng, 6, 2, 5, 2, 1);
    ASSERT_FALSE(prob.design.is_balanced());
    EXPECT_THROW(balanced_beta_update(prob.design, prob.theta, DpdConfig{0.1}), NotBalanced);
    EXPECT_THROW(fit_balanced_fixed_point(prob.design, DpdConfig{0.1}), NotBalanced);
}

TEST(Fit, StationaryAtSolution) {
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 6; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 25, 3, 6, 2, 1);
        for (double alpha : {0.0, 0.2, 0.5}) {
            FitResult f;
            try {
                f = fit(prob.design, DpdConfig{alpha});
            } catch (const DidNotConverge&) {
                ADD_FAILURE() << "trial " << trial << " alpha " << alpha;
                continue;
            }
            EXPECT_LE(f.grad_norm, 1e-6 * std::max(1.0, std::abs(f.objective)));
            // interior components have zero derivative
            const Vector fd = mdpde::testing::fd_gradient(prob.design, f.theta_hat, alpha);
            const Vector x = f.theta_hat.packed();
            for (Eigen::Index j = 0; j < x.size(); ++j)
                if (j < static_cast<Eigen::Index>(prob.design.k()) || x[j] > 1e-6) {
                    EXPECT_LE(std::abs(fd[j]), 1e-5);
                }
        }
    }
}

TEST(Fit, TranslationEquivariant) {
    const auto design = mdpde::testing::longitudinal_example(38, 40, 6);
    const Vector shift = (Vector(2) << 3.0, -1.5).finished();
    auto groups = design.groups();
    for (auto& g : groups) g.y += g.X * shift;
    const GroupedDesign moved(groups);
    for (double alpha : {0.0, 0.3}) {
        const FitResult a = fit(design, DpdConfig{alpha}, tight());
        const FitResult b = fit(moved, DpdConfig{alpha}, tight());
        EXPECT_LE((b.theta_hat.beta - a.theta_hat.beta - shift).lpNorm<Eigen::Infinity>(), 1e-6);
        EXPECT_LE((b.theta_hat.sigma2 - a.theta_hat.sigma2).lpNorm<Eigen::Infinity>(), 1e-6);
    }
}

TEST(Fit, ScaleEquivariantOnBalancedDesign) {
    const auto design = mdpde::testing::longitudinal_example(39, 40, 6);
    const double c = 3.0;
    auto groups = design.groups();
    for (auto& g : groups) g.y *= c;
    const GroupedDesign scaled(groups);
    for (double alpha : {0.0, 0.3}) {
        const FitResult a = fit(design, DpdConfig{alpha}, tight());
        const FitResult b = fit(scaled, DpdConfig{alpha}, tight());
        EXPECT_LE((b.theta_hat.beta - c * a.theta_hat.beta).lpNorm<Eigen::Infinity>(), 1e-5);
        EXPECT_LE((b.theta_hat.sigma2 - c * c * a.theta_hat.sigma2).lpNorm<Eigen::Infinity>(), 1e-5);
    }
}

TEST(Fit, BestStartIsReturned) {
    std::mt19937_64 rng(40);
    for (int trial = 0; trial < 5; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 20, 2, 6, 2, 2);
        SolverConfig s;
        s.restarts = 4;
        const FitResult f = fit(prob.design, DpdConfig{0.4}, s);
        ASSERT_EQ(f.start_objectives.size(), 6u);  // default, trimmed, 4 perturbed
        for (std::size_t j = 0; j < f.start_objectives.size(); ++j)
            if (f.start_converged[j]) {
                EXPECT_LE(f.objective, f.start_objectives[j] + 1e-12 * std::abs(f.objective));
            }
    }
}

TEST(Fit, MoreRestartsNeverWorse) {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 5; ++trial) {
        const auto prob = mdpde::testing::random_problem(rng, 20, 2, 6, 2, 1);
        SolverConfig few, many;
        few.restarts = 1;
        many.restarts = 5;
        const FitResult a = fit(prob.design, DpdConfig{0.5}, few);
        const FitResult b = fit(prob.design, DpdConfig{0.5}, many);
        EXPECT_LE(b.objective, a.objective + 1e-12 * std::abs(a.objective));
    }
}

TEST(Fit, DidNotConvergeCarriesBestPoint) {
    const auto design = mdpde::testing::longitudinal_example(42, 30, 6);
    SolverConfig s;
    s.max_iter = 1;
    s.restarts = 0;
    s.trimmed_start = false;
    try {
        fit(design, DpdConfig{0.3}, s);
        FAIL() << "expected DidNotConverge";
    } catch (const DidNotConverge& e) {
        EXPECT_FALSE(e.best().converged);
        EXPECT_EQ(e.best().theta_hat.dim(), 5u);
        EXPECT_TRUE(std::isfinite(e.best().objective));
    }
}

TEST(Fit, UserStartIsUsed) {
    const auto design = mdpde::testing::longitudinal_example(43, 30, 6);
    const FitResult first = fit(design, DpdConfig{0.2}, tight());
    SolverConfig s = tight();
    s.restarts = 0;
    const FitResult again = fit(design, DpdConfig{0.2}, s, first.theta_hat);
    EXPECT_LE(again.iterations, 2);
    EXPECT_LE((again.theta_hat.packed() - first.theta_hat.packed()).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(SolverConfig, Validation) {
    SolverConfig s;
    s.max_iter = 0;
    EXPECT_THROW(s.validate(), InvalidArgument);
    s = {};
    s.tol_theta = 0.0;
    EXPECT_THROW(s.validate(), InvalidArgument);
    s = {};
    s.restarts = -1;
    EXPECT_THROW(s.validate(), InvalidArgument);
    s = {};
    s.alpha_path = {0.1, 0.2};
    EXPECT_THROW(s.validate(), InvalidArgument);
    s.alpha_path = {0.0, 0.2, 0.2};
    EXPECT_THROW(s.validate(), InvalidArgument);
    s.alpha_path = {0.0, 0.1, 0.2};
    EXPECT_NO_THROW(s.validate());
}

TEST(AlphaPath, SingleZeroIsTheMle) {
    const auto design = mdpde::testing::longitudinal_example(44, 30, 6);
    const auto path = fit_alpha_path(design, {0.0});
    ASSERT_EQ(path.size(), 1u);
    const FitResult ml = fit(design, DpdConfig{0.0});
    EXPECT_LE((path[0].theta_hat.packed() - ml.theta_hat.packed()).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(AlphaPath, ContinuousOnEvenGrid) {
    const auto design = mdpde::testing::longitudinal_example(45, 50, 10);
    std::vector<double> grid;
    for (int j = 0; j <= 20; ++j) grid.push_back(0.025 * j);
    const auto path = fit_alpha_path(design, grid);
    ASSERT_EQ(path.size(), grid.size());
    for (std::size_t j = 0; j < path.size(); ++j) {
        ASSERT_TRUE(path[j].converged) << grid[j];
        EXPECT_EQ(path[j].alpha, grid[j]);
    }
    // away from alpha = 0 consecutive solutions differ by a small amount
    for (std::size_t j = 2; j < path.size(); ++j)
        EXPECT_LE((path[j].theta_hat.packed() - path[j - 1].theta_hat.packed()).lpNorm<Eigen::Infinity>(), 0.05)
            << grid[j];
    // warm starts do not change the solution
    const FitResult cold = fit(design, DpdConfig{0.5});
    EXPECT_LE((cold.theta_hat.packed() - path.back().theta_hat.packed()).lpNorm<Eigen::Infinity>(), 1e-5);
}

TEST(AlphaPath, RejectsBadGrid) {
    const auto design = mdpde::testing::longitudinal_example(46, 10, 4);
    EXPECT_THROW(fit_alpha_path(design, {0.2, 0.1}), InvalidArgument);
    EXPECT_THROW(fit_alpha_path(design, {}), InvalidArgument);
}

TEST(Fit, CleanDataEstimatesCentredOnTruth) {
    std::mt19937_64 rng(47);
    const ThetaParams truth = mdpde::testing::longitudinal_truth();
    const int reps = 150;
    Vector sum = Vector::Zero(2), sumsq = Vector::Zero(2);
    LongitudinalSpec spec;
    spec.n = 20;
    for (int rep = 0; rep < reps; ++rep) {
        const auto design = generate_longitudinal(spec, rng);
        const Vector b = fit(design, DpdConfig{0.3}).theta_hat.beta - truth.beta;
        sum += b;
        sumsq += b.cwiseProduct(b);
    }
    const Vector mean = sum / reps;
    const Vector var = sumsq / reps - mean.cwiseProduct(mean);
    for (Eigen::Index j = 0; j < 2; ++j) EXPECT_LE(std::abs(mean[j]), 3.0 * std::sqrt(var[j] / reps)) << j;
}

TEST(Fit, RankDeficientFixedEffectsRejected) {
    std::vector<GroupBlock> groups;
    for (int i = 0; i < 5; ++i) groups.push_back(GroupBlock{Vector::Constant(2, i), Matrix::Ones(2, 2), {}});
    EXPECT_THROW(fit(GroupedDesign(groups), DpdConfig{0.1}), InvalidArgument);
}

// Outliers shifted along the all-ones direction look mild under the inflated
// covariance of a contaminated start; the trimmed start must still find them.
TEST(Fit, TrimmedStartIgnoresShiftedOutliers) {
    CrossedDesignSpec spec;
    for (std::uint64_t seed : {301, 302, 303}) {
        std::mt19937_64 rng(seed);
        const SimulatedData clean = generate_crossed(spec, rng);
        const GroupedDesign data = contaminate_casewise(clean.design, ContaminationSpec{0.1, 10.0, Leverage::lev1, 0.005},
                                                        clean.sigma0, spec.beta0, rng);
        const auto start = trimmed_initial(data);
        ASSERT_TRUE(start);
        EXPECT_LT(std::abs(start->beta[0]), 0.3) << seed;
        EXPECT_LT(start->sigma2[0], 0.5) << seed;
        const FitResult f = fit(data, DpdConfig{0.3});
        EXPECT_TRUE(f.converged);
        EXPECT_LT((f.theta_hat.beta - spec.beta0).lpNorm<Eigen::Infinity>(), 0.2) << seed;
        EXPECT_LT(f.iterations, 200) << seed;
    }
}
