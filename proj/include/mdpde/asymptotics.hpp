#pragma once

#include "mdpde/divergence.hpp"
#include "mdpde/estimator.hpp"
#include "mdpde/model.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace mdpde {

/// Sandwich matrices at theta. Matrices are indexed like ThetaParams::packed().
/// When some variance components sit at 0 only the interior coordinates enter
/// avar; the others get NaN standard errors and `boundary` is set.
struct AsymptoticInfo {
    Matrix psi_n;
    Matrix omega_n;
    Matrix avar;
    Vector se;
    Matrix x_prime_gram;  // sum_i eta_i X_i^T V_i^{-1} X_i / (1+alpha)^{n_i/2+1}
    Matrix x_star_gram;   // sum_i eta_i^2 X_i^T V_i^{-1} X_i / (1+2 alpha)^{n_i/2+1}
    std::vector<bool> interior;
    bool boundary = false;
    std::size_t n = 0;
};

namespace detail {

/// log of (2 pi)^{-n_i alpha/2} |V_i|^{-alpha/2}
inline double log_eta(double ni, double alpha, double logdet) {
    return -0.5 * ni * alpha * kLog2Pi - 0.5 * alpha * logdet;
}

/// Tr(V^{-1} U_j V^{-1} U_k) for all j, k of one covariance block.
inline Matrix trace_products(const CovarianceBlock& b, const std::vector<Matrix>& U) {
    const auto m = static_cast<Eigen::Index>(U.size());
    std::vector<Matrix> A;
    A.reserve(U.size());
    for (const auto& u : U) A.push_back(b.V_inv * u);
    Matrix T(m, m);
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index k = j; k < m; ++k) {
            const double v = A[static_cast<std::size_t>(j)].cwiseProduct(A[static_cast<std::size_t>(k)].transpose()).sum();
            T(j, k) = v;
            T(k, j) = v;
        }
    return T;
}

/// Symmetric inverse square root with eigenvalues floored at 1e-12.
inline Matrix inverse_sqrt_psd(const Matrix& M) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (M + M.transpose()));
    const Vector ev = es.eigenvalues().cwiseMax(1e-12);
    return es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

} // namespace detail

/// Psi_n, Omega_n and the asymptotic covariance Psi_n^{-1} Omega_n Psi_n^{-1} / n.
inline AsymptoticInfo asymptotic_info(const GroupedDesign& design, const ThetaParams& theta, const DpdConfig& cfg) {
    cfg.validate();
    design.check_theta(theta);
    const double a = cfg.alpha;
    const auto k = static_cast<Eigen::Index>(design.k());
    const auto m = static_cast<Eigen::Index>(design.r() + 1);
    const auto d = k + m;
    const auto n = design.num_groups();
    const CovarianceSet covs = assemble_covariances(design, theta);

    // Per-pattern trace products, reused by every group of the pattern.
    std::vector<Matrix> traces(design.num_patterns());
    for (std::size_t p = 0; p < design.num_patterns(); ++p)
        traces[p] = detail::trace_products(covs.pattern_block(p), design.pattern_U(p));

    AsymptoticInfo info;
    info.n = n;
    info.psi_n = Matrix::Zero(d, d);
    info.omega_n = Matrix::Zero(d, d);
    info.x_prime_gram = Matrix::Zero(k, k);
    info.x_star_gram = Matrix::Zero(k, k);

    for (std::size_t i = 0; i < n; ++i) {
        const auto& g = design.group(i);
        const auto& b = covs.block(i);
        const double ni = static_cast<double>(g.size());
        const double le = detail::log_eta(ni, a, b.logdet);
        const double eta = std::exp(le);
        const double eta2 = std::exp(2.0 * le);
        const Matrix xvx = g.X.transpose() * b.V_inv * g.X;
        const Matrix& T = traces[design.pattern_of(i)];
        const Vector& t = b.trace_vinv_u;
        const Matrix tt = t * t.transpose();

        const Matrix p11 = eta * std::pow(1.0 + a, -(0.5 * ni + 1.0)) * xvx;
        const Matrix o11 = eta2 * std::pow(1.0 + 2.0 * a, -(0.5 * ni + 1.0)) * xvx;
        info.x_prime_gram += p11;
        info.x_star_gram += o11;
        info.psi_n.topLeftCorner(k, k) += p11;
        info.omega_n.topLeftCorner(k, k) += o11;

        info.psi_n.bottomRightCorner(m, m) +=
            0.25 * eta * std::pow(1.0 + a, -(0.5 * ni + 2.0)) * (a * a * tt + 2.0 * T);
        info.omega_n.bottomRightCorner(m, m) +=
            0.25 * eta2 *
            (std::pow(1.0 + 2.0 * a, -(0.5 * ni + 2.0)) * (4.0 * a * a * tt + 2.0 * T) -
             std::pow(1.0 + a, -(ni + 2.0)) * a * a * tt);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    info.psi_n *= inv_n;
    info.omega_n *= inv_n;
    info.psi_n = 0.5 * (info.psi_n + info.psi_n.transpose()).eval();
    info.omega_n = 0.5 * (info.omega_n + info.omega_n.transpose()).eval();

    info.interior.assign(static_cast<std::size_t>(d), true);
    for (Eigen::Index j = 1; j < m; ++j)
        if (theta.sigma2[j] <= 0.0) {
            info.interior[static_cast<std::size_t>(k + j)] = false;
            info.boundary = true;
        }
    std::vector<Eigen::Index> idx;
    for (Eigen::Index c = 0; c < d; ++c)
        if (info.interior[static_cast<std::size_t>(c)]) idx.push_back(c);
    const auto di = static_cast<Eigen::Index>(idx.size());
    Matrix psi_s(di, di), omega_s(di, di);
    for (Eigen::Index r = 0; r < di; ++r)
        for (Eigen::Index c = 0; c < di; ++c) {
            psi_s(r, c) = info.psi_n(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
            omega_s(r, c) = info.omega_n(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
        }

    Eigen::LLT<Matrix> llt(psi_s);
    if (llt.info() != Eigen::Success) throw SingularPsi("Psi_n is not positive definite at theta");
    Eigen::JacobiSVD<Matrix> svd(psi_s);
    const Vector sv = svd.singularValues();
    if (sv.size() > 0 && !(sv[sv.size() - 1] > 1e-14 * sv[0])) throw SingularPsi("Psi_n is numerically singular");
    const Matrix psi_inv = llt.solve(Matrix::Identity(di, di));
    Matrix avar_s = psi_inv * omega_s * psi_inv * inv_n;
    avar_s = 0.5 * (avar_s + avar_s.transpose()).eval();

    const double nan = std::numeric_limits<double>::quiet_NaN();
    info.avar = Matrix::Constant(d, d, nan);
    info.se = Vector::Constant(d, nan);
    for (Eigen::Index r = 0; r < di; ++r) {
        for (Eigen::Index c = 0; c < di; ++c) info.avar(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]) = avar_s(r, c);
        info.se[idx[static_cast<std::size_t>(r)]] = std::sqrt(std::max(avar_s(r, r), 0.0));
    }
    return info;
}

/// Omega_n^{-1/2} Psi_n sqrt(n) (theta_hat - theta) on the interior coordinates;
/// asymptotically standard normal.
inline Vector standardized_error(const AsymptoticInfo& info, const ThetaParams& theta_hat, const ThetaParams& theta) {
    const Vector diff = theta_hat.packed() - theta.packed();
    std::vector<Eigen::Index> idx;
    for (Eigen::Index c = 0; c < diff.size(); ++c)
        if (info.interior[static_cast<std::size_t>(c)]) idx.push_back(c);
    const auto di = static_cast<Eigen::Index>(idx.size());
    Matrix psi(di, di), omega(di, di);
    Vector dv(di);
    for (Eigen::Index r = 0; r < di; ++r) {
        dv[r] = diff[idx[static_cast<std::size_t>(r)]];
        for (Eigen::Index c = 0; c < di; ++c) {
            psi(r, c) = info.psi_n(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
            omega(r, c) = info.omega_n(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
        }
    }
    return detail::inverse_sqrt_psd(omega) * psi * dv * std::sqrt(static_cast<double>(info.n));
}

/// 100 * avar_0[j,j] / avar_alpha[j,j] for each alpha, all evaluated at theta.
inline std::vector<double> are_curve(const GroupedDesign& design, const ThetaParams& theta,
                                     const std::vector<double>& alphas, std::size_t param_index) {
    if (param_index >= design.num_params()) throw InvalidArgument("parameter index out of range");
    const auto j = static_cast<Eigen::Index>(param_index);
    const double base = asymptotic_info(design, theta, DpdConfig{0.0}).avar(j, j);
    std::vector<double> out;
    out.reserve(alphas.size());
    for (double a : alphas) {
        if (a == 0.0) {
            out.push_back(100.0);
            continue;
        }
        out.push_back(100.0 * base / asymptotic_info(design, theta, DpdConfig{a}).avar(j, j));
    }
    return out;
}

struct WaldRow {
    std::string name;
    double estimate = 0.0;
    double se = 0.0;
    double z = 0.0;
    double p = 1.0;
    bool boundary_invalid = false;  // variance component estimated at 0
};

inline std::vector<std::string> parameter_names(std::size_t k, std::size_t r) {
    std::vector<std::string> names;
    for (std::size_t j = 0; j < k; ++j) names.push_back("beta" + std::to_string(j));
    for (std::size_t j = 0; j <= r; ++j) names.push_back("sigma2_" + std::to_string(j));
    return names;
}

/// Two-sided normal tests of each coordinate being zero.
inline std::vector<WaldRow> wald_tests(const FitResult& fit, const AsymptoticInfo& info) {
    const Vector est = fit.theta_hat.packed();
    if (est.size() != info.se.size()) throw DimensionMismatch("fit and asymptotic info have different dimensions");
    const auto k = static_cast<std::size_t>(fit.theta_hat.beta.size());
    const auto names = parameter_names(k, static_cast<std::size_t>(fit.theta_hat.sigma2.size()) - 1);
    std::vector<WaldRow> rows;
    rows.reserve(static_cast<std::size_t>(est.size()));
    for (Eigen::Index c = 0; c < est.size(); ++c) {
        WaldRow row;
        row.name = names[static_cast<std::size_t>(c)];
        row.estimate = est[c];
        row.se = info.se[c];
        row.boundary_invalid = static_cast<std::size_t>(c) > k && est[c] <= 0.0;
        if (row.estimate == 0.0) {
            row.z = 0.0;
            row.p = 1.0;
        } else {
            row.z = row.estimate / row.se;
            row.p = std::erfc(std::abs(row.z) / std::sqrt(2.0));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace mdpde
