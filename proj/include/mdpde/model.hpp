#pragma once

#include "mdpde/errors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mdpde {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// One group of the linear mixed model: y_i = X_i beta + sum_j Z_ij u_ij + e_i.
struct GroupBlock {
    Vector y;
    Matrix X;               // n_i x k
    std::vector<Matrix> Z;  // r matrices, Z_j is n_i x q_j

    std::size_t size() const noexcept { return static_cast<std::size_t>(y.size()); }
};

/// Fixed effects and variance components. sigma2[0] is the error variance,
/// sigma2[j] (j >= 1) the variance of the j-th random factor.
struct ThetaParams {
    Vector beta;
    Vector sigma2;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(beta.size() + sigma2.size()); }

    Vector packed() const {
        Vector v(beta.size() + sigma2.size());
        v << beta, sigma2;
        return v;
    }

    static ThetaParams unpack(const Vector& v, std::size_t k) {
        const auto kk = static_cast<Eigen::Index>(k);
        return ThetaParams{v.head(kk), v.tail(v.size() - kk)};
    }
};

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t hash_random_design(const GroupBlock& g) {
    std::uint64_t h = 14695981039346656037ull;
    const auto n = static_cast<std::uint64_t>(g.size());
    h = fnv1a(h, &n, sizeof n);
    for (const auto& z : g.Z) {
        const std::int64_t dims[2] = {z.rows(), z.cols()};
        h = fnv1a(h, dims, sizeof dims);
        h = fnv1a(h, z.data(), sizeof(double) * static_cast<std::size_t>(z.size()));
    }
    return h;
}

inline bool same_random_design(const GroupBlock& a, const GroupBlock& b) {
    if (a.size() != b.size() || a.Z.size() != b.Z.size()) return false;
    for (std::size_t j = 0; j < a.Z.size(); ++j) {
        if (a.Z[j].rows() != b.Z[j].rows() || a.Z[j].cols() != b.Z[j].cols()) return false;
        if (a.Z[j] != b.Z[j]) return false;
    }
    return true;
}

/// Groups sharing an identical random-effect design share one set of U matrices
/// (and, at evaluation time, one covariance factorization).
struct RandomStructure {
    std::vector<std::size_t> pattern_of;         // group -> pattern
    std::vector<std::size_t> first_group;        // pattern -> representative group
    std::vector<std::vector<Matrix>> U;          // pattern -> U_0 = I, U_j = Z_j Z_j^T
};

} // namespace detail

/// Grouped data consumed by every fit. Immutable after construction; the
/// derivative matrices U_ij are computed once here.
class GroupedDesign {
public:
    explicit GroupedDesign(std::vector<GroupBlock> groups) : groups_(std::move(groups)) {
        if (groups_.empty()) throw InvalidArgument("design needs at least one group");
        k_ = static_cast<std::size_t>(groups_.front().X.cols());
        r_ = groups_.front().Z.size();
        for (std::size_t i = 0; i < groups_.size(); ++i) {
            const auto& g = groups_[i];
            const auto ni = static_cast<Eigen::Index>(g.size());
            if (ni < 1) throw InvalidArgument("group " + std::to_string(i) + " is empty");
            if (static_cast<std::size_t>(g.X.cols()) != k_ || g.X.rows() != ni)
                throw DimensionMismatch("fixed-effect matrix of group " + std::to_string(i) + " has wrong shape");
            if (g.Z.size() != r_)
                throw DimensionMismatch("group " + std::to_string(i) + " has a different number of random factors");
            for (const auto& z : g.Z)
                if (z.rows() != ni)
                    throw DimensionMismatch("random-effect matrix of group " + std::to_string(i) + " has wrong row count");
            total_obs_ += g.size();
        }
        structure_ = build_structure();
    }

    std::size_t num_groups() const noexcept { return groups_.size(); }
    std::size_t k() const noexcept { return k_; }
    std::size_t r() const noexcept { return r_; }
    std::size_t total_obs() const noexcept { return total_obs_; }
    std::size_t num_params() const noexcept { return k_ + r_ + 1; }

    const GroupBlock& group(std::size_t i) const { return groups_.at(i); }
    const std::vector<GroupBlock>& groups() const noexcept { return groups_; }

    std::size_t num_patterns() const noexcept { return structure_->U.size(); }
    std::size_t pattern_of(std::size_t i) const { return structure_->pattern_of.at(i); }
    std::size_t representative(std::size_t pattern) const { return structure_->first_group.at(pattern); }

    /// U_i0 = I, U_ij = Z_ij Z_ij^T for the pattern of group i.
    const std::vector<Matrix>& U(std::size_t i) const { return structure_->U[pattern_of(i)]; }
    const std::vector<Matrix>& pattern_U(std::size_t pattern) const { return structure_->U.at(pattern); }

    /// All groups have the same size and literally identical random-effect matrices.
    bool is_balanced() const noexcept { return num_patterns() == 1; }

    /// Common group size when balanced, 0 otherwise.
    std::size_t common_size() const noexcept { return is_balanced() ? groups_.front().size() : 0; }

    void check_theta(const ThetaParams& theta) const {
        if (static_cast<std::size_t>(theta.beta.size()) != k_ || static_cast<std::size_t>(theta.sigma2.size()) != r_ + 1)
            throw DimensionMismatch("parameter dimensions do not match the design (k=" + std::to_string(k_) +
                                    ", r=" + std::to_string(r_) + ")");
    }

    std::shared_ptr<const detail::RandomStructure> structure() const noexcept { return structure_; }

private:
    std::shared_ptr<const detail::RandomStructure> build_structure() const {
        auto s = std::make_shared<detail::RandomStructure>();
        s->pattern_of.resize(groups_.size());
        std::unordered_multimap<std::uint64_t, std::size_t> seen;  // hash -> pattern
        for (std::size_t i = 0; i < groups_.size(); ++i) {
            const auto h = detail::hash_random_design(groups_[i]);
            std::size_t found = s->U.size();
            auto range = seen.equal_range(h);
            for (auto it = range.first; it != range.second; ++it) {
                if (detail::same_random_design(groups_[s->first_group[it->second]], groups_[i])) {
                    found = it->second;
                    break;
                }
            }
            if (found == s->U.size()) {
                const auto& g = groups_[i];
                const auto ni = static_cast<Eigen::Index>(g.size());
                std::vector<Matrix> u;
                u.reserve(r_ + 1);
                u.push_back(Matrix::Identity(ni, ni));
                for (const auto& z : g.Z) u.push_back(z * z.transpose());
                s->U.push_back(std::move(u));
                s->first_group.push_back(i);
                seen.emplace(h, found);
            }
            s->pattern_of[i] = found;
        }
        return s;
    }

    std::vector<GroupBlock> groups_;
    std::size_t k_ = 0;
    std::size_t r_ = 0;
    std::size_t total_obs_ = 0;
    std::shared_ptr<const detail::RandomStructure> structure_;
};

/// Factorized covariance of one random-effect pattern.
struct CovarianceBlock {
    Matrix V;
    Matrix chol;          // lower triangular, chol * chol^T = V
    Matrix V_inv;
    double logdet = 0.0;
    Vector trace_vinv_u;  // Tr(V^{-1} U_j), j = 0..r

    /// V^{-1} rhs through the Cholesky factor.
    template <typename Derived>
    Vector solve(const Eigen::MatrixBase<Derived>& rhs) const {
        Vector z = chol.triangularView<Eigen::Lower>().solve(rhs);
        chol.transpose().triangularView<Eigen::Upper>().solveInPlace(z);
        return z;
    }
};

/// V_i = sigma0^2 (I + sum_j gamma_j U_ij) for every group, with factors.
/// Groups with identical random-effect design share one block.
class CovarianceSet {
public:
    CovarianceSet(std::vector<CovarianceBlock> blocks, std::shared_ptr<const detail::RandomStructure> structure,
                  Vector gamma)
        : blocks_(std::move(blocks)), structure_(std::move(structure)), gamma_(std::move(gamma)) {}

    const CovarianceBlock& block(std::size_t i) const { return blocks_[structure_->pattern_of.at(i)]; }
    const Matrix& V(std::size_t i) const { return block(i).V; }
    const Matrix& chol(std::size_t i) const { return block(i).chol; }
    double logdet(std::size_t i) const { return block(i).logdet; }
    const std::vector<Matrix>& U(std::size_t i) const { return structure_->U[structure_->pattern_of.at(i)]; }
    const Vector& gamma() const noexcept { return gamma_; }

    std::size_t num_groups() const noexcept { return structure_->pattern_of.size(); }
    std::size_t num_blocks() const noexcept { return blocks_.size(); }
    const CovarianceBlock& pattern_block(std::size_t p) const { return blocks_.at(p); }

private:
    std::vector<CovarianceBlock> blocks_;
    std::shared_ptr<const detail::RandomStructure> structure_;
    Vector gamma_;
};

inline CovarianceSet assemble_covariances(const GroupedDesign& design, const ThetaParams& theta) {
    design.check_theta(theta);
    const auto r = design.r();
    std::vector<CovarianceBlock> blocks;
    blocks.reserve(design.num_patterns());
    for (std::size_t p = 0; p < design.num_patterns(); ++p) {
        const auto& U = design.pattern_U(p);
        const auto ni = U.front().rows();
        CovarianceBlock b;
        b.V = theta.sigma2[0] * U[0];
        for (std::size_t j = 1; j <= r; ++j) b.V.noalias() += theta.sigma2[static_cast<Eigen::Index>(j)] * U[j];
        Eigen::LLT<Matrix> llt(b.V);
        if (llt.info() != Eigen::Success) throw NotPositiveDefinite(design.representative(p));
        b.chol = llt.matrixL();
        const Vector d = b.chol.diagonal();
        if (!(d.array() > 0.0).all() || !d.allFinite()) throw NotPositiveDefinite(design.representative(p));
        b.logdet = 2.0 * d.array().log().sum();
        b.V_inv = llt.solve(Matrix::Identity(ni, ni));
        b.V_inv = 0.5 * (b.V_inv + b.V_inv.transpose()).eval();
        b.trace_vinv_u.resize(static_cast<Eigen::Index>(r + 1));
        for (std::size_t j = 0; j <= r; ++j)
            b.trace_vinv_u[static_cast<Eigen::Index>(j)] = b.V_inv.cwiseProduct(U[j]).sum();
        blocks.push_back(std::move(b));
    }
    Vector gamma(static_cast<Eigen::Index>(r));
    for (std::size_t j = 1; j <= r; ++j)
        gamma[static_cast<Eigen::Index>(j - 1)] = theta.sigma2[static_cast<Eigen::Index>(j)] / theta.sigma2[0];
    return CovarianceSet(std::move(blocks), design.structure(), std::move(gamma));
}

/// (y - X beta)^T V^{-1} (y - X beta) through a triangular solve against the
/// lower Cholesky factor of V.
inline double mahalanobis_residual(const GroupBlock& block, const Vector& beta, const Matrix& chol) {
    if (block.X.cols() != beta.size() || chol.rows() != block.y.size() || chol.cols() != block.y.size())
        throw DimensionMismatch("mahalanobis_residual: inconsistent dimensions");
    const Vector resid = block.y - block.X * beta;
    const Vector z = chol.triangularView<Eigen::Lower>().solve(resid);
    return z.squaredNorm();
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2 pi)

} // namespace mdpde
