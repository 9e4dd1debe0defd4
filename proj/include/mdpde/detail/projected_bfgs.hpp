#pragma once

#include "mdpde/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

namespace mdpde::detail {

struct BoxMinimizerOptions {
    int max_iter = 500;
    double tol_step = 1e-8;   // relative step
    double tol_obj = 1e-10;   // objective change, relative to max(1, |f|)
    double grad_tol = 1e-6;   // projected gradient, relative to max(1, |f|)
    double armijo = 1e-4;
    double shrink = 0.5;
    int max_backtracks = 60;
    int max_expansions = 30;
    bool polish = true;       // finite-difference Newton steps at the end
    bool keep_trace = false;
};

struct TraceEntry {
    double objective;
    double step;
};

struct BoxMinimizerResult {
    Eigen::VectorXd x;
    double f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd g;
    int iterations = 0;
    double pg_norm = std::numeric_limits<double>::infinity();
    bool converged = false;
    std::vector<TraceEntry> trace;
};

struct ValueGrad {
    double f;
    Eigen::VectorXd g;
};

inline Eigen::VectorXd project(Eigen::VectorXd x, const Eigen::VectorXd& lower) {
    return x.cwiseMax(lower);
}

/// Gradient with components removed that point out of the box at active bounds.
inline Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                                          const Eigen::VectorXd& lower) {
    Eigen::VectorXd pg = g;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (x[i] <= lower[i] && g[i] > 0.0) pg[i] = 0.0;
    return pg;
}

/// Evaluates fg at x and maps any numerical failure (non-PD covariance,
/// overflow) to std::nullopt so line searches can back off.
template <typename F>
std::optional<ValueGrad> try_eval(F& fg, const Eigen::VectorXd& x) {
    try {
        ValueGrad vg = fg(x);
        if (!std::isfinite(vg.f) || !vg.g.allFinite()) return std::nullopt;
        return vg;
    } catch (const Error&) {
        return std::nullopt;
    }
}

/// Newton steps on the free coordinates with a central-difference Hessian of the
/// analytic gradient. Only accepted while the projected gradient shrinks.
template <typename F>
void newton_polish(F& fg, BoxMinimizerResult& res, const Eigen::VectorXd& lower, int max_steps = 8) {
    const auto d = res.x.size();
    for (int step = 0; step < max_steps; ++step) {
        std::vector<Eigen::Index> free;
        for (Eigen::Index i = 0; i < d; ++i)
            if (!(res.x[i] <= lower[i] && res.g[i] > 0.0)) free.push_back(i);
        if (free.empty()) return;
        const auto m = static_cast<Eigen::Index>(free.size());
        Eigen::MatrixXd hess(m, m);
        for (Eigen::Index a = 0; a < m; ++a) {
            const auto i = free[static_cast<std::size_t>(a)];
            const double h = 1e-5 * std::max(1.0, std::abs(res.x[i]));
            Eigen::VectorXd xp = res.x, xm = res.x;
            xp[i] += h;
            double denom = 2.0 * h;
            if (res.x[i] - h >= lower[i]) {
                xm[i] -= h;
            } else {
                denom = h;
            }
            auto gp = try_eval(fg, xp);
            auto gm = try_eval(fg, xm);
            if (!gp || !gm) return;
            for (Eigen::Index b = 0; b < m; ++b)
                hess(b, a) = (gp->g[free[static_cast<std::size_t>(b)]] - gm->g[free[static_cast<std::size_t>(b)]]) / denom;
        }
        hess = 0.5 * (hess + hess.transpose()).eval();
        Eigen::LLT<Eigen::MatrixXd> llt(hess);
        if (llt.info() != Eigen::Success) return;
        Eigen::VectorXd gf(m);
        for (Eigen::Index a = 0; a < m; ++a) gf[a] = res.g[free[static_cast<std::size_t>(a)]];
        const Eigen::VectorXd delta = llt.solve(-gf);
        Eigen::VectorXd xn = res.x;
        for (Eigen::Index a = 0; a < m; ++a) xn[free[static_cast<std::size_t>(a)]] += delta[a];
        xn = project(xn, lower);
        auto vg = try_eval(fg, xn);
        if (!vg) return;
        const double pg = projected_gradient(xn, vg->g, lower).template lpNorm<Eigen::Infinity>();
        const double slack = 1e-12 * std::max(1.0, std::abs(res.f));
        if (!(pg < res.pg_norm) || vg->f > res.f + slack) return;
        const double moved = (xn - res.x).lpNorm<Eigen::Infinity>();
        res.x = std::move(xn);
        res.f = vg->f;
        res.g = std::move(vg->g);
        res.pg_norm = pg;
        if (moved <= 1e-15 * std::max(1.0, res.x.lpNorm<Eigen::Infinity>())) return;
    }
}

/// Projected BFGS with backtracking (Armijo) line search for min f(x)
/// subject to x >= lower. Coordinates with lower = -inf are unconstrained.
template <typename F>
BoxMinimizerResult minimize_box(F&& fg, Eigen::VectorXd x0, const Eigen::VectorXd& lower,
                                const BoxMinimizerOptions& opt) {
    BoxMinimizerResult res;
    const auto d = x0.size();
    res.x = project(std::move(x0), lower);
    {
        ValueGrad first = fg(res.x);
        if (!std::isfinite(first.f) || !first.g.allFinite()) throw Error("objective is not finite at the starting point");
        res.f = first.f;
        res.g = std::move(first.g);
    }

    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(d, d);
    bool scaled = false;

    for (int it = 0; it < opt.max_iter; ++it) {
        const Eigen::VectorXd pg = projected_gradient(res.x, res.g, lower);
        res.pg_norm = pg.lpNorm<Eigen::Infinity>();
        if (res.pg_norm <= 1e-13 * std::max(1.0, std::abs(res.f))) {
            break;
        }

        std::vector<Eigen::Index> free;
        for (Eigen::Index i = 0; i < d; ++i)
            if (!(res.x[i] <= lower[i] && res.g[i] > 0.0)) free.push_back(i);

        auto direction = [&](const Eigen::MatrixXd& Hm) {
            Eigen::VectorXd dir = Eigen::VectorXd::Zero(d);
            for (auto a : free) {
                double acc = 0.0;
                for (auto b : free) acc -= Hm(a, b) * res.g[b];
                dir[a] = acc;
            }
            return dir;
        };
        Eigen::VectorXd dir = direction(H);
        if (!(res.g.dot(dir) < 0.0)) {
            H.setIdentity();
            scaled = false;
            dir = direction(H);
        }

        double t = 1.0;
        std::optional<ValueGrad> next;
        Eigen::VectorXd xn;
        for (int bt = 0; bt < opt.max_backtracks; ++bt) {
            xn = project(res.x + t * dir, lower);
            next = try_eval(fg, xn);
            if (next && next->f <= res.f + opt.armijo * res.g.dot(xn - res.x)) break;
            next.reset();
            t *= opt.shrink;
        }
        if (!next) {
            if (!H.isIdentity()) {
                H.setIdentity();
                scaled = false;
                continue;
            }
            break;  // stalled
        }

        // Full step taken into a region of negative curvature: keep doubling while
        // the objective still drops, otherwise flat regions are crossed at a crawl.
        if (t == 1.0 && (xn - res.x).dot(next->g - res.g) <= 0.0) {
            for (int ex = 0; ex < opt.max_expansions; ++ex) {
                const Eigen::VectorXd xe = project(res.x + 2.0 * t * dir, lower);
                auto ve = try_eval(fg, xe);
                if (!ve || !(ve->f < next->f)) break;
                t *= 2.0;
                xn = xe;
                next = std::move(ve);
            }
        }

        const Eigen::VectorXd s = xn - res.x;
        const Eigen::VectorXd y = next->g - res.g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
            if (!scaled) {
                H = Eigen::MatrixXd::Identity(d, d) * (sy / y.squaredNorm());
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Eigen::VectorXd Hy = H * y;
            H += (rho * rho * y.dot(Hy) + rho) * s * s.transpose() - rho * (Hy * s.transpose() + s * Hy.transpose());
        }

        const double df = std::abs(res.f - next->f);
        const double rel_step = (s.array().abs() / res.x.array().abs().max(1.0)).maxCoeff();
        res.x = std::move(xn);
        res.f = next->f;
        res.g = std::move(next->g);
        res.iterations = it + 1;
        if (opt.keep_trace) res.trace.push_back({res.f, t});
        if (rel_step < opt.tol_step && df < opt.tol_obj * std::max(1.0, std::abs(res.f))) {
            break;
        }
    }

    res.pg_norm = projected_gradient(res.x, res.g, lower).lpNorm<Eigen::Infinity>();
    if (opt.polish) newton_polish(fg, res, lower);
    // Stalled or step-converged runs still have to meet the gradient test.
    res.converged = res.pg_norm <= opt.grad_tol * std::max(1.0, std::abs(res.f));
    return res;
}

} // namespace mdpde::detail
