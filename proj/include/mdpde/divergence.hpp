#pragma once

#include "mdpde/model.hpp"

#include <cmath>
#include <string>

namespace mdpde {

/// Tuning parameter of the density power divergence. alpha = 0 selects the
/// negative log-likelihood.
struct DpdConfig {
    double alpha = 0.0;

    void validate() const {
        if (!(alpha >= 0.0) || !std::isfinite(alpha))
            throw InvalidArgument("alpha must be a finite non-negative number, got " + std::to_string(alpha));
    }
};

/// H_n(theta), its gradient and the per-group downweighting factors.
struct ObjectiveEval {
    double value = 0.0;
    Vector grad_beta;
    Vector grad_sigma2;
    Vector per_group_weights;  // w_i = exp(-(alpha/2) q_i)

    Vector gradient() const {
        Vector g(grad_beta.size() + grad_sigma2.size());
        g << grad_beta, grad_sigma2;
        return g;
    }
};

/// Closed form of the integral of f^{1+alpha} for an n_i-variate normal density
/// with covariance V: (2 pi)^{-n_i alpha/2} |V|^{-alpha/2} (1+alpha)^{-n_i/2}.
inline double integral_density_power(double ni, double alpha, double logdet) {
    return std::exp(-0.5 * ni * alpha * kLog2Pi - 0.5 * alpha * logdet - 0.5 * ni * std::log1p(alpha));
}

namespace detail {

/// s^T U_j s with s = V^{-1}(y - X beta), evaluated through Z_j.
inline double quad_u(const GroupBlock& g, const Vector& s, std::size_t j) {
    if (j == 0) return s.squaredNorm();
    return (g.Z[j - 1].transpose() * s).squaredNorm();
}

} // namespace detail

/// Objective and analytic gradient with a precomputed covariance set.
/// The per-group sum is accumulated in group order so results are reproducible.
inline ObjectiveEval eval_objective(const GroupedDesign& design, const ThetaParams& theta, const CovarianceSet& covs,
                                    const DpdConfig& cfg) {
    cfg.validate();
    design.check_theta(theta);
    const double a = cfg.alpha;
    const auto k = static_cast<Eigen::Index>(design.k());
    const auto r = design.r();
    const auto n = design.num_groups();

    ObjectiveEval out;
    out.grad_beta = Vector::Zero(k);
    out.grad_sigma2 = Vector::Zero(static_cast<Eigen::Index>(r + 1));
    out.per_group_weights = Vector::Ones(static_cast<Eigen::Index>(n));

    for (std::size_t i = 0; i < n; ++i) {
        const auto& g = design.group(i);
        const auto& b = covs.block(i);
        const auto ni = static_cast<double>(g.size());
        const Vector resid = g.y - g.X * theta.beta;
        const Vector s = b.solve(resid);
        const double q = resid.dot(s);
        const Vector xs = g.X.transpose() * s;

        if (a == 0.0) {
            out.value += 0.5 * (ni * kLog2Pi + b.logdet + q);
            out.grad_beta -= xs;
            for (std::size_t j = 0; j <= r; ++j) {
                const auto jj = static_cast<Eigen::Index>(j);
                out.grad_sigma2[jj] += 0.5 * (b.trace_vinv_u[jj] - detail::quad_u(g, s, j));
            }
            continue;
        }

        const double log_eta = -0.5 * ni * a * kLog2Pi - 0.5 * a * b.logdet;
        const double model_term = integral_density_power(ni, a, b.logdet);
        const double data_term = std::exp(log_eta - 0.5 * a * q);
        out.value += model_term - (1.0 + 1.0 / a) * data_term;
        out.grad_beta -= (1.0 + a) * data_term * xs;
        for (std::size_t j = 0; j <= r; ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            const double tr = b.trace_vinv_u[jj];
            out.grad_sigma2[jj] += -0.5 * a * tr * model_term + 0.5 * (1.0 + a) * data_term * (tr - detail::quad_u(g, s, j));
        }
        out.per_group_weights[static_cast<Eigen::Index>(i)] = std::exp(-0.5 * a * q);
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    out.value *= inv_n;
    out.grad_beta *= inv_n;
    out.grad_sigma2 *= inv_n;
    return out;
}

inline ObjectiveEval eval_objective(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg) {
    return eval_objective(design, theta, assemble_covariances(design, theta), cfg);
}

inline Vector eval_weights(const GroupedDesign& design, const ThetaParams& theta, const CovarianceSet& covs,
                           const DpdConfig& cfg) {
    cfg.validate();
    design.check_theta(theta);
    Vector w = Vector::Ones(static_cast<Eigen::Index>(design.num_groups()));
    if (cfg.alpha == 0.0) return w;
    for (std::size_t i = 0; i < design.num_groups(); ++i) {
        const double q = mahalanobis_residual(design.group(i), theta.beta, covs.chol(i));
        w[static_cast<Eigen::Index>(i)] = std::exp(-0.5 * cfg.alpha * q);
    }
    return w;
}

inline Vector eval_weights(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg) {
    return eval_weights(design, theta, assemble_covariances(design, theta), cfg);
}

} // namespace mdpde
