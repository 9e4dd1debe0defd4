#pragma once

#include "mdpde/asymptotics.hpp"
#include "mdpde/divergence.hpp"
#include "mdpde/model.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mdpde {

/// A sensitivity value that may be infinite (alpha = 0). Kept as a flag so
/// reports can print "inf" instead of leaking a floating-point infinity.
struct Sensitivity {
    double value = 0.0;
    bool infinite = false;

    static Sensitivity unbounded() { return {0.0, true}; }
    std::string str() const;
};

inline std::string Sensitivity::str() const {
    if (infinite) return "inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

struct SensitivityReport {
    double alpha = 0.0;
    Sensitivity ges;
    Sensitivity sss;
    std::size_t direction = 0;
    // balanced designs only
    std::optional<double> alpha_star;
    std::optional<double> alpha_bar;
    std::optional<Sensitivity> ges_balanced;
    std::optional<Sensitivity> sss_balanced;
};

/// Everything the influence functions need that does not depend on t.
class InfluenceContext {
public:
    InfluenceContext(const GroupedDesign& design, ThetaParams theta, const DpdConfig& cfg)
        : design_(&design), theta_(std::move(theta)), alpha_(cfg.alpha),
          covs_(assemble_covariances(design, theta_)) {
        cfg.validate();
        const auto k = static_cast<Eigen::Index>(design.k());
        const auto m = static_cast<Eigen::Index>(design.r() + 1);
        const double a = alpha_;
        xp_ = Matrix::Zero(k, k);
        xs_ = Matrix::Zero(k, k);
        Matrix N = Matrix::Zero(m, m);
        std::vector<Matrix> traces(design.num_patterns());
        for (std::size_t p = 0; p < design.num_patterns(); ++p)
            traces[p] = detail::trace_products(covs_.pattern_block(p), design.pattern_U(p));
        for (std::size_t i = 0; i < design.num_groups(); ++i) {
            const auto& g = design.group(i);
            const auto& b = covs_.block(i);
            const double ni = static_cast<double>(g.size());
            const double le = detail::log_eta(ni, a, b.logdet);
            const Matrix xvx = g.X.transpose() * b.V_inv * g.X;
            xp_ += std::exp(le) * std::pow(1.0 + a, -(0.5 * ni + 1.0)) * xvx;
            xs_ += std::exp(2.0 * le) * std::pow(1.0 + a, -(0.5 * ni + 1.0)) * xvx;
            const Vector& t = b.trace_vinv_u;
            N += 0.25 * std::exp(le) * std::pow(1.0 + a, -(0.5 * ni + 2.0)) *
                 (a * a * t * t.transpose() + 2.0 * traces[design.pattern_of(i)]);
        }
        xp_ldlt_.compute(xp_);
        n_ldlt_.compute(0.5 * (N + N.transpose()));
        if (xp_ldlt_.info() != Eigen::Success || !(xp_ldlt_.vectorD().array() > 0.0).all())
            throw SingularPsi("X'^T X' is singular");
        if (n_ldlt_.info() != Eigen::Success || !(n_ldlt_.vectorD().array() > 0.0).all())
            throw SingularPsi("variance-component normalizer is singular");
    }

    const GroupedDesign& design() const noexcept { return *design_; }
    const ThetaParams& theta() const noexcept { return theta_; }
    double alpha() const noexcept { return alpha_; }
    const CovarianceSet& covs() const noexcept { return covs_; }
    /// sum_i eta_i X_i^T V_i^{-1} X_i / (1+alpha)^{n_i/2+1}
    const Matrix& x_prime_gram() const noexcept { return xp_; }
    /// sum_i eta_i^2 X_i^T V_i^{-1} X_i / (1+alpha)^{n_i/2+1}
    const Matrix& x_star_gram() const noexcept { return xs_; }

    void check_point(std::size_t i0, const Vector& t) const {
        if (i0 >= design_->num_groups()) throw InvalidArgument("direction " + std::to_string(i0) + " out of range");
        if (static_cast<std::size_t>(t.size()) != design_->group(i0).size())
            throw DimensionMismatch("contamination point has wrong length for group " + std::to_string(i0));
    }

    /// X_i^T V_i^{-1} (t - X_i beta) f_i(t)^alpha
    Vector beta_numerator(std::size_t i, const Vector& t) const {
        const auto& g = design_->group(i);
        const auto& b = covs_.block(i);
        const Vector s = b.solve(t - g.X * theta_.beta);
        return g.X.transpose() * s * density_power(i, t, s);
    }

    /// tau_i: (1/2) f^alpha [Tr(V^{-1}U_j) - r^T V^{-1} U_j V^{-1} r] - eta alpha Tr(V^{-1}U_j) / (2 (1+alpha)^{n_i/2+1})
    Vector tau(std::size_t i, const Vector& t) const {
        const auto& g = design_->group(i);
        const auto& b = covs_.block(i);
        const Vector s = b.solve(t - g.X * theta_.beta);
        const double fa = density_power(i, t, s);
        const double ni = static_cast<double>(g.size());
        const double eta = std::exp(detail::log_eta(ni, alpha_, b.logdet));
        const double corr = eta * alpha_ * std::pow(1.0 + alpha_, -(0.5 * ni + 1.0)) * 0.5;
        Vector out(b.trace_vinv_u.size());
        for (Eigen::Index j = 0; j < out.size(); ++j) {
            const double tr = b.trace_vinv_u[j];
            out[j] = 0.5 * fa * (tr - detail::quad_u(g, s, static_cast<std::size_t>(j))) - corr * tr;
        }
        return out;
    }

    Vector solve_beta(const Vector& numerator) const { return xp_ldlt_.solve(numerator); }
    Vector solve_sigma(const Vector& tau_sum) const { return -n_ldlt_.solve(tau_sum); }

private:
    /// f_i(t; theta)^alpha = eta_i exp(-alpha q / 2); s = V^{-1}(t - X beta)
    double density_power(std::size_t i, const Vector& t, const Vector& s) const {
        if (alpha_ == 0.0) return 1.0;
        const auto& g = design_->group(i);
        const auto& b = covs_.block(i);
        const double q = (t - g.X * theta_.beta).dot(s);
        return std::exp(detail::log_eta(static_cast<double>(g.size()), alpha_, b.logdet) - 0.5 * alpha_ * q);
    }

    const GroupedDesign* design_;
    ThetaParams theta_;
    double alpha_;
    CovarianceSet covs_;
    Matrix xp_, xs_;
    Eigen::LDLT<Matrix> xp_ldlt_;
    Eigen::LDLT<Matrix> n_ldlt_;
};

/// Influence function of the beta functional for contamination of group i0 at t.
inline Vector influence_beta(const InfluenceContext& ctx, std::size_t i0, const Vector& t) {
    ctx.check_point(i0, t);
    return ctx.solve_beta(ctx.beta_numerator(i0, t));
}

inline Vector influence_beta(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg,
                             std::size_t i0, const Vector& t) {
    return influence_beta(InfluenceContext(design, theta, cfg), i0, t);
}

/// Influence function of the variance-component functional, direction i0.
inline Vector influence_sigma(const InfluenceContext& ctx, std::size_t i0, const Vector& t) {
    ctx.check_point(i0, t);
    return ctx.solve_sigma(ctx.tau(i0, t));
}

inline Vector influence_sigma(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg,
                              std::size_t i0, const Vector& t) {
    return influence_sigma(InfluenceContext(design, theta, cfg), i0, t);
}

struct InfluencePair {
    Vector beta_if;
    Vector sigma_if;
};

/// Simultaneous contamination of every group, group i at t_list[i].
inline InfluencePair influence_all(const InfluenceContext& ctx, const std::vector<Vector>& t_list) {
    const auto& design = ctx.design();
    if (t_list.size() != design.num_groups()) throw DimensionMismatch("need one contamination point per group");
    Vector num = Vector::Zero(static_cast<Eigen::Index>(design.k()));
    Vector tau = Vector::Zero(static_cast<Eigen::Index>(design.r() + 1));
    for (std::size_t i = 0; i < t_list.size(); ++i) {
        ctx.check_point(i, t_list[i]);
        num += ctx.beta_numerator(i, t_list[i]);
        tau += ctx.tau(i, t_list[i]);
    }
    return {ctx.solve_beta(num), ctx.solve_sigma(tau)};
}

inline InfluencePair influence_all(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg,
                                   const std::vector<Vector>& t_list) {
    return influence_all(InfluenceContext(design, theta, cfg), t_list);
}

/// Rows of an influence-function scan over constant contamination vectors t*1.
struct InfluenceGridRow {
    double t = 0.0;
    Vector beta_if;
    Vector sigma_if;
};

/// Every group contaminated at t*1 (all-direction influence) for each t.
inline std::vector<InfluenceGridRow> influence_grid_all(const InfluenceContext& ctx, const std::vector<double>& ts) {
    std::vector<InfluenceGridRow> rows;
    rows.reserve(ts.size());
    const auto& design = ctx.design();
    for (double t : ts) {
        std::vector<Vector> pts;
        pts.reserve(design.num_groups());
        for (const auto& g : design.groups()) pts.push_back(Vector::Constant(static_cast<Eigen::Index>(g.size()), t));
        auto p = influence_all(ctx, pts);
        rows.push_back({t, std::move(p.beta_if), std::move(p.sigma_if)});
    }
    return rows;
}

/// Only group i0 contaminated at t*1.
inline std::vector<InfluenceGridRow> influence_grid_direction(const InfluenceContext& ctx, std::size_t i0,
                                                              const std::vector<double>& ts) {
    std::vector<InfluenceGridRow> rows;
    rows.reserve(ts.size());
    if (i0 >= ctx.design().num_groups()) throw InvalidArgument("direction out of range");
    const auto ni = static_cast<Eigen::Index>(ctx.design().group(i0).size());
    for (double t : ts) {
        const Vector pt = Vector::Constant(ni, t);
        rows.push_back({t, influence_beta(ctx, i0, pt), influence_sigma(ctx, i0, pt)});
    }
    return rows;
}

/// t from -10 to 10 in steps of 0.1.
inline std::vector<double> default_if_grid() {
    std::vector<double> ts;
    for (int i = -100; i <= 100; ++i) ts.push_back(0.1 * i);
    return ts;
}

namespace detail {

/// Largest eigenvalue of B^{-1} M for symmetric positive definite B and
/// symmetric positive semidefinite M.
inline double lambda_max_generalized(const Matrix& B, const Matrix& M) {
    Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(M, B);
    if (es.info() != Eigen::Success) throw SingularPsi("generalized eigenproblem failed");
    return std::max(es.eigenvalues().maxCoeff(), 0.0);
}

inline double lambda_max_sym(const Matrix& A) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (A + A.transpose()), Eigen::EigenvaluesOnly);
    return std::max(es.eigenvalues().maxCoeff(), 0.0);
}

} // namespace detail

/// alpha-dependent factor of the balanced gross-error sensitivity; minimized at 1/(p+1).
inline double ges_alpha_factor(double alpha, double p) { return std::pow(1.0 + alpha, 0.5 * p + 1.0) / std::sqrt(alpha); }

/// alpha-dependent factor of the balanced self-standardized sensitivity; minimized at 2/p.
inline double sss_alpha_factor(double alpha, double p) { return std::pow(1.0 + alpha, 0.25 * (p + 2.0)) / std::sqrt(alpha); }

/// Gross-error and self-standardized sensitivities of the beta functional for
/// contamination in direction i0. Balanced designs also get the closed forms,
/// which must agree with the general expressions.
inline SensitivityReport sensitivities(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg,
                                       std::size_t i0) {
    cfg.validate();
    design.check_theta(theta);
    if (i0 >= design.num_groups()) throw InvalidArgument("direction " + std::to_string(i0) + " out of range");
    SensitivityReport rep;
    rep.alpha = cfg.alpha;
    rep.direction = i0;
    const bool balanced = design.is_balanced();
    const double p = static_cast<double>(design.group(i0).size());
    if (balanced) {
        rep.alpha_star = 1.0 / (p + 1.0);
        rep.alpha_bar = 2.0 / p;
    }
    if (cfg.alpha == 0.0) {
        rep.ges = rep.sss = Sensitivity::unbounded();
        if (balanced) rep.ges_balanced = rep.sss_balanced = Sensitivity::unbounded();
        return rep;
    }

    const double a = cfg.alpha;
    const InfluenceContext ctx(design, theta, cfg);
    const auto& g = design.group(i0);
    const auto& b = ctx.covs().block(i0);
    const Matrix M = g.X.transpose() * b.V_inv * g.X;
    const double eta = std::exp(detail::log_eta(p, a, b.logdet));
    const double denom = std::sqrt(a) * std::exp(0.5);
    const double n = static_cast<double>(design.num_groups());

    // (X'^T X')^{-1} M (X'^T X')^{-1} has the eigenvalues of (X'^T X')^{-2} M.
    const Matrix xp_inv = ctx.x_prime_gram().ldlt().solve(Matrix::Identity(M.rows(), M.cols()));
    rep.ges = {eta * std::sqrt(detail::lambda_max_sym(xp_inv * M * xp_inv)) / denom, false};
    rep.sss = {eta * std::sqrt(detail::lambda_max_generalized(ctx.x_star_gram(), M)) / (n * denom), false};

    if (balanced) {
        Matrix S = Matrix::Zero(M.rows(), M.cols());
        for (const auto& gi : design.groups()) S += gi.X.transpose() * b.V_inv * gi.X;
        const Matrix s_inv = S.ldlt().solve(Matrix::Identity(S.rows(), S.cols()));
        const double ges_c = ges_alpha_factor(a, p) * std::sqrt(detail::lambda_max_sym(s_inv * M * s_inv)) * std::exp(-0.5);
        const double sss_c = sss_alpha_factor(a, p) / n * std::sqrt(detail::lambda_max_generalized(S, M)) * std::exp(-0.5);
        rep.ges_balanced = Sensitivity{ges_c, false};
        rep.sss_balanced = Sensitivity{sss_c, false};
        auto close = [](double x, double y) { return std::abs(x - y) <= 1e-10 * std::max(std::abs(x), std::abs(y)); };
        if (!close(ges_c, rep.ges.value) || !close(sss_c, rep.sss.value))
            throw Error("balanced closed-form sensitivities disagree with the general expressions");
    }
    return rep;
}

} // namespace mdpde
