#pragma once

#include "mdpde/detail/projected_bfgs.hpp"
#include "mdpde/divergence.hpp"
#include "mdpde/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mdpde {

inline constexpr double kSigma0Floor = 1e-10;
inline constexpr double kInitVarianceFloor = 1e-4;

struct SolverConfig {
    int max_iter = 500;
    double tol_theta = 1e-8;
    double tol_obj = 1e-10;
    std::vector<double> alpha_path;  // optional continuation grid, strictly increasing from 0
    int restarts = 3;
    std::uint64_t seed = 0x5eed'd0d0'cafeull;  // restart perturbations
    bool trimmed_start = true;                 // extra candidate start from a trimmed subset
    bool keep_trace = false;

    void validate() const {
        if (max_iter < 1) throw InvalidArgument("max_iter must be positive");
        if (!(tol_theta > 0.0) || !(tol_obj > 0.0)) throw InvalidArgument("tolerances must be positive");
        if (restarts < 0) throw InvalidArgument("restarts must be non-negative");
        if (!alpha_path.empty()) {
            if (alpha_path.front() != 0.0) throw InvalidArgument("alpha path must start at 0");
            for (std::size_t i = 1; i < alpha_path.size(); ++i)
                if (!(alpha_path[i] > alpha_path[i - 1])) throw InvalidArgument("alpha path must be strictly increasing");
        }
    }
};

struct FitResult {
    ThetaParams theta_hat;
    double alpha = 0.0;
    double objective = std::numeric_limits<double>::infinity();
    bool converged = false;
    int iterations = 0;
    double grad_norm = std::numeric_limits<double>::infinity();
    Vector weights;
    std::vector<detail::TraceEntry> trace;
    // objective reached from each start (NaN when that start failed); fit() only
    std::vector<double> start_objectives;
    std::vector<bool> start_converged;
};

/// Raised when no start reached the gradient tolerance; carries the best point found.
class DidNotConverge : public Error {
public:
    explicit DidNotConverge(FitResult best)
        : Error("minimizer did not converge (alpha=" + std::to_string(best.alpha) +
                ", projected gradient=" + std::to_string(best.grad_norm) + ")"),
          best_(std::move(best)) {}

    const FitResult& best() const noexcept { return best_; }

private:
    FitResult best_;
};

namespace detail {

inline Vector lower_bounds(const GroupedDesign& design) {
    Vector lb(static_cast<Eigen::Index>(design.num_params()));
    const auto k = static_cast<Eigen::Index>(design.k());
    lb.head(k).setConstant(-std::numeric_limits<double>::infinity());
    lb[k] = kSigma0Floor;
    lb.tail(static_cast<Eigen::Index>(design.r())).setZero();
    return lb;
}

inline void stack_fixed(const GroupedDesign& design, Matrix& X, Vector& y) {
    const auto N = static_cast<Eigen::Index>(design.total_obs());
    X.resize(N, static_cast<Eigen::Index>(design.k()));
    y.resize(N);
    Eigen::Index row = 0;
    for (const auto& g : design.groups()) {
        const auto ni = static_cast<Eigen::Index>(g.size());
        X.middleRows(row, ni) = g.X;
        y.segment(row, ni) = g.y;
        row += ni;
    }
}

} // namespace detail

/// Ordinary least squares on the stacked fixed-effect design.
inline Vector ols_beta(const GroupedDesign& design) {
    Matrix X;
    Vector y;
    detail::stack_fixed(design, X, y);
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    if (qr.rank() < X.cols()) throw InvalidArgument("stacked fixed-effect matrix is not of full column rank");
    return qr.solve(y);
}

/// OLS for beta and moment estimates for the variance components: sigma0^2 from
/// the pooled within-group residual variance, sigma_j^2 from the excess of the
/// per-level mean square over sigma0^2, floored at 1e-4.
inline ThetaParams default_initial(const GroupedDesign& design) {
    ThetaParams theta;
    theta.beta = ols_beta(design);
    const auto r = design.r();
    theta.sigma2 = Vector::Zero(static_cast<Eigen::Index>(r + 1));

    double within = 0.0, rss = 0.0;
    std::size_t dof = 0;
    std::vector<Vector> resid;
    resid.reserve(design.num_groups());
    for (const auto& g : design.groups()) {
        Vector e = g.y - g.X * theta.beta;
        rss += e.squaredNorm();
        if (g.size() > 1) {
            within += (e.array() - e.mean()).square().sum();
            dof += g.size() - 1;
        }
        resid.push_back(std::move(e));
    }
    const double s0 = dof > 0 ? within / static_cast<double>(dof) : rss / static_cast<double>(design.total_obs());
    theta.sigma2[0] = std::max(s0, 1e-8);

    for (std::size_t j = 1; j <= r; ++j) {
        double ms = 0.0, norm2 = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < design.num_groups(); ++i) {
            const auto& z = design.group(i).Z[j - 1];
            for (Eigen::Index c = 0; c < z.cols(); ++c) {
                const double zz = z.col(c).squaredNorm();
                if (zz <= 0.0) continue;
                const double proj = z.col(c).dot(resid[i]);
                ms += proj * proj / zz;
                norm2 += zz;
                ++count;
            }
        }
        double s = kInitVarianceFloor;
        if (count > 0) s = std::max((ms / static_cast<double>(count) - theta.sigma2[0]) / (norm2 / static_cast<double>(count)), kInitVarianceFloor);
        theta.sigma2[static_cast<Eigen::Index>(j)] = s;
    }
    return theta;
}

/// Start computed on the half of the groups with the smallest mean squared
/// residual (concentration steps on OLS fits of the retained half), followed by
/// the default moment start on that half. Euclidean residuals are used because a
/// contaminated covariance estimate can hide outliers shifted along directions of
/// large random-effect variance. Returns nullopt when a subset fit is not identifiable.
inline std::optional<ThetaParams> trimmed_initial(const GroupedDesign& design, int steps = 10) {
    const auto n = design.num_groups();
    const std::size_t h = n / 2 + 1;
    if (h >= n || h < 2) return std::nullopt;
    try {
        Vector beta = ols_beta(design);
        std::vector<std::size_t> keep;
        for (int step = 0; step < steps; ++step) {
            std::vector<std::pair<double, std::size_t>> score(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& g = design.group(i);
                score[i] = {(g.y - g.X * beta).squaredNorm() / static_cast<double>(g.size()), i};
            }
            std::partial_sort(score.begin(), score.begin() + static_cast<std::ptrdiff_t>(h), score.end());
            std::vector<std::size_t> next(h);
            for (std::size_t a = 0; a < h; ++a) next[a] = score[a].second;
            std::sort(next.begin(), next.end());
            if (next == keep) break;
            keep = std::move(next);
            std::vector<GroupBlock> sub;
            sub.reserve(h);
            for (auto i : keep) sub.push_back(design.group(i));
            beta = ols_beta(GroupedDesign(std::move(sub)));
        }
        std::vector<GroupBlock> sub;
        sub.reserve(h);
        for (auto i : keep) sub.push_back(design.group(i));
        return default_initial(GroupedDesign(std::move(sub)));
    } catch (const Error&) {
        return std::nullopt;
    }
}

namespace detail {

inline detail::BoxMinimizerOptions box_options(const SolverConfig& solver) {
    detail::BoxMinimizerOptions opt;
    opt.max_iter = solver.max_iter;
    opt.tol_step = solver.tol_theta;
    opt.tol_obj = solver.tol_obj;
    opt.keep_trace = solver.keep_trace;
    return opt;
}

inline FitResult run_from(const GroupedDesign& design, const DpdConfig& cfg, const SolverConfig& solver,
                          const ThetaParams& start) {
    const auto k = design.k();
    auto fg = [&](const Vector& x) {
        const ThetaParams th = ThetaParams::unpack(x, k);
        const ObjectiveEval ev = eval_objective(design, th, cfg);
        return ValueGrad{ev.value, ev.gradient()};
    };
    const Vector lb = lower_bounds(design);
    BoxMinimizerResult res = minimize_box(fg, start.packed(), lb, box_options(solver));

    FitResult out;
    out.theta_hat = ThetaParams::unpack(res.x, k);
    out.alpha = cfg.alpha;
    out.objective = res.f;
    out.converged = res.converged;
    out.iterations = res.iterations;
    out.grad_norm = res.pg_norm;
    out.weights = eval_weights(design, out.theta_hat, cfg);
    out.trace = std::move(res.trace);
    return out;
}

inline ThetaParams perturb(const ThetaParams& base, const Vector& beta_scale, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> factor(0.5, 2.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    ThetaParams t = base;
    for (Eigen::Index j = 0; j < t.beta.size(); ++j) t.beta[j] += 0.1 * std::abs(beta_scale[j]) * gauss(rng);
    for (Eigen::Index j = 0; j < t.sigma2.size(); ++j) {
        const double s = std::max(t.sigma2[j], kInitVarianceFloor);
        t.sigma2[j] = s * factor(rng);
    }
    return t;
}

/// Lower objective wins; a converged candidate beats an unconverged one.
inline bool better(const FitResult& cand, const FitResult& best) {
    if (cand.converged != best.converged) return cand.converged;
    const double slack = 1e-12 * std::max(1.0, std::abs(best.objective));
    return cand.objective < best.objective - slack;
}

} // namespace detail

/// Minimum density power divergence fit. Runs the minimizer from the given (or
/// default) start, from a trimmed-subset start, and from `restarts` perturbed
/// copies of the start; returns the lowest objective among converged runs.
inline FitResult fit(const GroupedDesign& design, const DpdConfig& cfg, const SolverConfig& solver = {},
                     std::optional<ThetaParams> init = std::nullopt) {
    cfg.validate();
    solver.validate();
    const bool user_start = init.has_value();
    ThetaParams start = user_start ? *init : default_initial(design);
    design.check_theta(start);
    start.sigma2 = start.sigma2.cwiseMax(0.0);
    start.sigma2[0] = std::max(start.sigma2[0], kSigma0Floor);

    std::vector<ThetaParams> starts{start};
    if (!user_start && solver.trimmed_start)
        if (auto t = trimmed_initial(design)) starts.push_back(*t);
    const Vector& beta_scale = start.beta;
    std::mt19937_64 rng(solver.seed);
    for (int k = 0; k < solver.restarts; ++k) starts.push_back(detail::perturb(start, beta_scale, rng));

    std::optional<FitResult> best;
    std::vector<double> objectives;
    std::vector<bool> converged;
    for (const auto& s : starts) {
        FitResult cand;
        try {
            cand = detail::run_from(design, cfg, solver, s);
        } catch (const Error&) {
            objectives.push_back(std::numeric_limits<double>::quiet_NaN());
            converged.push_back(false);
            continue;
        }
        objectives.push_back(cand.objective);
        converged.push_back(cand.converged);
        if (!best || detail::better(cand, *best)) best = std::move(cand);
    }
    if (!best) throw NotPositiveDefinite(0);
    best->start_objectives = std::move(objectives);
    best->start_converged = std::move(converged);
    if (!best->converged) throw DidNotConverge(std::move(*best));
    return std::move(*best);
}

/// One weighted generalized least-squares step for beta at the current theta:
/// (sum w_i X_i^T V^{-1} X_i)^{-1} sum w_i X_i^T V^{-1} y_i.
inline Vector balanced_beta_update(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg) {
    if (!design.is_balanced()) throw NotBalanced();
    const auto k = static_cast<Eigen::Index>(design.k());
    const CovarianceSet covs = assemble_covariances(design, theta);
    const Vector w = eval_weights(design, theta, covs, cfg);
    const auto& b = covs.block(0);
    Matrix lhs = Matrix::Zero(k, k);
    Vector rhs = Vector::Zero(k);
    for (std::size_t i = 0; i < design.num_groups(); ++i) {
        const auto& g = design.group(i);
        const Matrix vx = b.V_inv * g.X;
        const double wi = w[static_cast<Eigen::Index>(i)];
        lhs.noalias() += wi * g.X.transpose() * vx;
        rhs.noalias() += wi * vx.transpose() * g.y;
    }
    Eigen::LDLT<Matrix> ldlt(lhs);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) throw InvalidArgument("weighted normal equations are singular");
    return ldlt.solve(rhs);
}

/// Balanced designs only: alternates the weighted least-squares fixed point for
/// beta with a minimization of H_n over the variance components at fixed beta.
inline FitResult fit_balanced_fixed_point(const GroupedDesign& design, const DpdConfig& cfg,
                                          const SolverConfig& solver = {},
                                          std::optional<ThetaParams> init = std::nullopt) {
    cfg.validate();
    solver.validate();
    if (!design.is_balanced()) throw NotBalanced();

    ThetaParams theta = init ? *init : default_initial(design);
    design.check_theta(theta);
    theta.sigma2 = theta.sigma2.cwiseMax(0.0);
    theta.sigma2[0] = std::max(theta.sigma2[0], kSigma0Floor);

    const auto r = static_cast<Eigen::Index>(design.r());
    const Vector lb_sigma = detail::lower_bounds(design).tail(r + 1);
    auto opt = detail::box_options(solver);
    opt.keep_trace = false;

    FitResult out;
    out.alpha = cfg.alpha;
    double prev_obj = std::numeric_limits<double>::infinity();
    for (int it = 0; it < solver.max_iter; ++it) {
        const Vector beta_new = balanced_beta_update(design, theta, cfg);

        const ThetaParams held{beta_new, theta.sigma2};
        auto fg = [&](const Vector& s2) {
            const ObjectiveEval ev = eval_objective(design, ThetaParams{beta_new, s2}, cfg);
            return detail::ValueGrad{ev.value, ev.grad_sigma2};
        };
        const detail::BoxMinimizerResult sub = detail::minimize_box(fg, held.sigma2, lb_sigma, opt);

        ThetaParams next{beta_new, sub.x};
        const Vector step = next.packed() - theta.packed();
        const double rel = (step.array().abs() / theta.packed().array().abs().max(1.0)).maxCoeff();
        theta = std::move(next);
        out.iterations = it + 1;
        if (solver.keep_trace) out.trace.push_back({sub.f, rel});
        const double df = std::abs(prev_obj - sub.f);
        prev_obj = sub.f;
        if (rel < solver.tol_theta && df < solver.tol_obj * std::max(1.0, std::abs(sub.f))) break;
    }

    const ObjectiveEval ev = eval_objective(design, theta, cfg);
    out.theta_hat = theta;
    out.objective = ev.value;
    out.grad_norm = detail::projected_gradient(theta.packed(), ev.gradient(), detail::lower_bounds(design))
                        .lpNorm<Eigen::Infinity>();
    out.converged = out.grad_norm <= 1e-6 * std::max(1.0, std::abs(out.objective));
    out.weights = ev.per_group_weights;
    if (!out.converged) throw DidNotConverge(std::move(out));
    return out;
}

/// Fits along an increasing alpha grid starting at 0, each fit warm-started
/// from the previous solution. Failed entries are kept (converged = false).
inline std::vector<FitResult> fit_alpha_path(const GroupedDesign& design, const std::vector<double>& alphas,
                                             const SolverConfig& solver = {}) {
    SolverConfig check = solver;
    check.alpha_path = alphas;
    check.validate();
    if (alphas.empty()) throw InvalidArgument("alpha grid is empty");

    std::vector<FitResult> path;
    path.reserve(alphas.size());
    std::optional<ThetaParams> warm;
    for (double a : alphas) {
        FitResult res;
        try {
            res = fit(design, DpdConfig{a}, solver, warm);
        } catch (const DidNotConverge& e) {
            res = e.best();
        } catch (const Error&) {
            res.alpha = a;
            res.converged = false;
        }
        if (res.converged || res.theta_hat.dim() > 0) warm = res.theta_hat;
        path.push_back(std::move(res));
    }
    return path;
}

} // namespace mdpde
