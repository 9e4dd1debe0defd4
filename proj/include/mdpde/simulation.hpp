#pragma once

#include "mdpde/divergence.hpp"
#include "mdpde/estimator.hpp"
#include "mdpde/model.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace mdpde {

/// Two-way cross classification with interaction: levels F x G x H inside each
/// group, observations in lexicographic order (h within g within f).
struct CrossedDesignSpec {
    int F = 2;
    int G = 2;
    int H = 3;
    int k = 6;
    Vector beta0 = (Vector(6) << 0.0, 2.0, 2.0, 2.0, 2.0, 2.0).finished();
    double sigma_a2 = 1.0 / 16.0;
    double sigma_b2 = 1.0 / 16.0;
    double sigma_c2 = 1.0 / 8.0;
    double sigma_e2 = 1.0 / 4.0;
    int n = 100;

    int p() const noexcept { return F * G * H; }

    /// (sigma_e^2, sigma_a^2, sigma_b^2, sigma_c^2) in ThetaParams order.
    Vector sigma2() const { return (Vector(4) << sigma_e2, sigma_a2, sigma_b2, sigma_c2).finished(); }
    ThetaParams truth() const { return ThetaParams{beta0, sigma2()}; }

    void validate() const {
        if (F < 1 || G < 1 || H < 1) throw InvalidArgument("level counts must be positive");
        if (k < 1) throw InvalidArgument("k must be positive");
        if (beta0.size() != k) throw DimensionMismatch("beta0 must have k entries");
        if (n < 1) throw InvalidArgument("n must be positive");
        if (!(sigma_e2 > 0.0) || sigma_a2 < 0.0 || sigma_b2 < 0.0 || sigma_c2 < 0.0)
            throw InvalidArgument("variances must be non-negative with sigma_e2 > 0");
    }
};

/// Random-effect design matrices of one group: Z_a = I_F (x) 1_G (x) 1_H,
/// Z_b = 1_F (x) I_G (x) 1_H, Z_c = I_F (x) I_G (x) 1_H.
inline std::vector<Matrix> crossed_random_design(int F, int G, int H) {
    const int p = F * G * H;
    Matrix za = Matrix::Zero(p, F), zb = Matrix::Zero(p, G), zc = Matrix::Zero(p, F * G);
    for (int f = 0; f < F; ++f)
        for (int g = 0; g < G; ++g)
            for (int h = 0; h < H; ++h) {
                const int row = (f * G + g) * H + h;
                za(row, f) = 1.0;
                zb(row, g) = 1.0;
                zc(row, f * G + g) = 1.0;
            }
    return {za, zb, zc};
}

/// Sigma = sigma_e^2 I + sigma_a^2 V1 + sigma_b^2 V2 + sigma_c^2 V3 for sigma2 in ThetaParams order.
inline Matrix crossed_sigma(int F, int G, int H, const Vector& sigma2) {
    if (sigma2.size() != 4) throw DimensionMismatch("crossed design has four variance components");
    const auto Z = crossed_random_design(F, G, H);
    const int p = F * G * H;
    Matrix S = sigma2[0] * Matrix::Identity(p, p);
    for (int j = 0; j < 3; ++j) S.noalias() += sigma2[j + 1] * Z[static_cast<std::size_t>(j)] * Z[static_cast<std::size_t>(j)].transpose();
    return S;
}

inline Matrix crossed_sigma(const CrossedDesignSpec& spec, const Vector& sigma2) {
    return crossed_sigma(spec.F, spec.G, spec.H, sigma2);
}

struct SimulatedData {
    GroupedDesign design;
    Matrix sigma0;
};

/// Draws one data set: covariates (1, N(0,1), ...), random effects a, b, c and errors.
template <typename Rng>
SimulatedData generate_crossed(const CrossedDesignSpec& spec, Rng& rng) {
    spec.validate();
    const int p = spec.p();
    const auto Z = crossed_random_design(spec.F, spec.G, spec.H);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double sa = std::sqrt(spec.sigma_a2), sb = std::sqrt(spec.sigma_b2), sc = std::sqrt(spec.sigma_c2),
                 se = std::sqrt(spec.sigma_e2);
    std::vector<GroupBlock> groups;
    groups.reserve(static_cast<std::size_t>(spec.n));
    for (int i = 0; i < spec.n; ++i) {
        GroupBlock g;
        g.X.resize(p, spec.k);
        for (int r = 0; r < p; ++r) {
            g.X(r, 0) = 1.0;
            for (int c = 1; c < spec.k; ++c) g.X(r, c) = gauss(rng);
        }
        Vector a(spec.F), b(spec.G), c(spec.F * spec.G), e(p);
        for (auto& v : a) v = sa * gauss(rng);
        for (auto& v : b) v = sb * gauss(rng);
        for (auto& v : c) v = sc * gauss(rng);
        for (auto& v : e) v = se * gauss(rng);
        g.y = g.X * spec.beta0 + Z[0] * a + Z[1] * b + Z[2] * c + e;
        g.Z = Z;
        groups.push_back(std::move(g));
    }
    return {GroupedDesign(std::move(groups)), crossed_sigma(spec, spec.sigma2())};
}

/// Longitudinal example with random intercept and a two-level random factor:
/// y_i = b0 + b1 x_i + u_i1 1 + Z_i2 u_i2 + e_i, x_i standard normal.
struct LongitudinalSpec {
    int n = 50;
    int p = 10;
    Vector beta = (Vector(2) << 1.0, 2.0).finished();
    Vector sigma2 = (Vector(3) << 0.25, 0.25, 0.5).finished();  // sigma0^2, sigma1^2, sigma2^2
};

/// Z_1 = 1_p; Z_2 puts the first ceil(p/2) measurements on level 1 and the rest on level 2.
inline std::vector<Matrix> longitudinal_random_design(int p) {
    Matrix z1 = Matrix::Ones(p, 1);
    Matrix z2 = Matrix::Zero(p, 2);
    for (int r = 0; r < p; ++r) z2(r, r < (p + 1) / 2 ? 0 : 1) = 1.0;
    return {z1, z2};
}

template <typename Rng>
GroupedDesign generate_longitudinal(const LongitudinalSpec& spec, Rng& rng) {
    if (spec.n < 1 || spec.p < 1 || spec.beta.size() != 2 || spec.sigma2.size() != 3)
        throw InvalidArgument("invalid longitudinal specification");
    const auto Z = longitudinal_random_design(spec.p);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<GroupBlock> groups;
    groups.reserve(static_cast<std::size_t>(spec.n));
    for (int i = 0; i < spec.n; ++i) {
        GroupBlock g;
        g.X.resize(spec.p, 2);
        for (int r = 0; r < spec.p; ++r) {
            g.X(r, 0) = 1.0;
            g.X(r, 1) = gauss(rng);
        }
        Vector e(spec.p), u2(2);
        for (auto& v : e) v = std::sqrt(spec.sigma2[0]) * gauss(rng);
        const double u1 = std::sqrt(spec.sigma2[1]) * gauss(rng);
        for (auto& v : u2) v = std::sqrt(spec.sigma2[2]) * gauss(rng);
        g.y = g.X * spec.beta + Vector::Constant(spec.p, u1) + Z[1] * u2 + e;
        g.Z = Z;
        groups.push_back(std::move(g));
    }
    return GroupedDesign(std::move(groups));
}

enum class Leverage { lev1, lev20 };

inline double leverage_value(Leverage l) { return l == Leverage::lev1 ? 1.0 : 20.0; }
inline std::string to_string(Leverage l) { return l == Leverage::lev1 ? "lev1" : "lev20"; }
inline Leverage parse_leverage(const std::string& s) {
    if (s == "lev1") return Leverage::lev1;
    if (s == "lev20") return Leverage::lev20;
    throw InvalidArgument("unknown leverage '" + s + "' (expected lev1 or lev20)");
}

struct ContaminationSpec {
    double epsilon = 0.0;
    double omega0 = 0.0;
    Leverage leverage = Leverage::lev1;
    double covariate_sd = 0.005;

    void validate() const {
        if (!(epsilon >= 0.0 && epsilon < 0.5)) throw InvalidArgument("epsilon must lie in [0, 0.5)");
        if (!(covariate_sd >= 0.0)) throw InvalidArgument("covariate_sd must be non-negative");
        if (!std::isfinite(omega0)) throw InvalidArgument("omega0 must be finite");
    }
};

/// Replaces round(n * epsilon) whole groups, chosen after a seeded shuffle, by
/// outliers: covariates (1, N(phi0, sd^2), ...) and y ~ N(x0 beta0 + omega0 1, Sigma0).
template <typename Rng>
GroupedDesign contaminate_casewise(const GroupedDesign& design, const ContaminationSpec& spec, const Matrix& sigma0,
                                   const Vector& beta0, Rng& rng) {
    spec.validate();
    const auto n = design.num_groups();
    const auto count = static_cast<std::size_t>(std::lround(static_cast<double>(n) * spec.epsilon));
    if (count == 0) return design;
    if (static_cast<std::size_t>(beta0.size()) != design.k()) throw DimensionMismatch("beta0 does not match k");
    Eigen::LLT<Matrix> llt(sigma0);
    if (llt.info() != Eigen::Success) throw SingularSigma0();
    const Matrix L = llt.matrixL();

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(order[i], order[pick(rng)]);
    }
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));

    std::normal_distribution<double> gauss(0.0, 1.0);
    const double phi0 = leverage_value(spec.leverage);
    std::vector<GroupBlock> groups = design.groups();
    for (std::size_t a = 0; a < count; ++a) {
        auto& g = groups[order[a]];
        const auto ni = static_cast<Eigen::Index>(g.size());
        if (ni != sigma0.rows()) throw DimensionMismatch("group size does not match Sigma0");
        for (Eigen::Index r = 0; r < ni; ++r) {
            g.X(r, 0) = 1.0;
            for (Eigen::Index c = 1; c < g.X.cols(); ++c) g.X(r, c) = phi0 + spec.covariate_sd * gauss(rng);
        }
        Vector z(ni);
        for (auto& v : z) v = gauss(rng);
        g.y = g.X * beta0 + Vector::Constant(ni, spec.omega0) + L * z;
    }
    return GroupedDesign(std::move(groups));
}

/// Unit eigenvector of the smallest eigenvalue, first nonzero entry positive.
inline Vector smallest_eigenvector(const Matrix& cov) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (cov + cov.transpose()));
    if (es.info() != Eigen::Success) throw InvalidArgument("eigen decomposition failed");
    Vector v = es.eigenvectors().col(0);
    for (Eigen::Index j = 0; j < v.size(); ++j) {
        if (std::abs(v[j]) > 1e-12) {
            if (v[j] < 0.0) v = -v;
            break;
        }
    }
    return v;
}

struct CellwiseResult {
    GroupedDesign design;
    std::vector<std::pair<std::size_t, std::size_t>> cells;  // (group, coordinate) in replacement order
};

/// Replaces m distinct cells y_i[j], chosen uniformly without replacement, by
/// draws from N(k_mult v_j, 0.1^2) with v the smallest-eigenvalue eigenvector
/// of mle_cov. Cells are drawn one at a time, so the first m' < m replacements
/// of a run with m are the replacements of a run with m'.
template <typename Rng>
CellwiseResult contaminate_cellwise(const GroupedDesign& design, std::size_t m, double k_mult, const Matrix& mle_cov,
                                    Rng& rng) {
    const auto p = static_cast<std::size_t>(mle_cov.rows());
    if (mle_cov.cols() != mle_cov.rows()) throw DimensionMismatch("mle_cov must be square");
    for (const auto& g : design.groups())
        if (g.size() != p) throw DimensionMismatch("every group must have as many observations as mle_cov has rows");
    const std::size_t cells_total = design.num_groups() * p;
    if (m > cells_total) throw InvalidArgument("more cells requested than available");
    if (m == 0) return {design, {}};

    const Vector v = smallest_eigenvector(mle_cov);
    std::vector<GroupBlock> groups = design.groups();
    std::vector<std::size_t> idx(cells_total);
    for (std::size_t c = 0; c < cells_total; ++c) idx[c] = c;
    std::normal_distribution<double> gauss(0.0, 1.0);
    CellwiseResult out{design, {}};
    out.cells.reserve(m);
    for (std::size_t s = 0; s < m; ++s) {
        std::uniform_int_distribution<std::size_t> pick(s, cells_total - 1);
        std::swap(idx[s], idx[pick(rng)]);
        const std::size_t i = idx[s] / p, j = idx[s] % p;
        groups[i].y[static_cast<Eigen::Index>(j)] = k_mult * v[static_cast<Eigen::Index>(j)] + 0.1 * gauss(rng);
        out.cells.emplace_back(i, j);
    }
    out.design = GroupedDesign(std::move(groups));
    return out;
}

/// trace(Sigma0^{-1}) via Cholesky.
inline double trace_inverse(const Matrix& sigma0) {
    Eigen::LLT<Matrix> llt(sigma0);
    if (llt.info() != Eigen::Success) throw SingularSigma0();
    const Matrix Linv = llt.matrixL().solve(Matrix::Identity(sigma0.rows(), sigma0.cols()));
    return Linv.squaredNorm();
}

/// Mean of (b - beta0)^T A (b - beta0) with A = trace(Sigma0^{-1}) I_k.
inline double msmd(const std::vector<Vector>& beta_hats, const Vector& beta0, const Matrix& sigma0) {
    if (beta_hats.empty()) throw InvalidArgument("msmd needs at least one estimate");
    const double tr = trace_inverse(sigma0);
    double acc = 0.0;
    for (const auto& b : beta_hats) {
        if (b.size() != beta0.size()) throw DimensionMismatch("estimate and beta0 differ in length");
        acc += tr * (b - beta0).squaredNorm();
    }
    return acc / static_cast<double>(beta_hats.size());
}

/// trace(S1 S0^{-1}) - log det(S1 S0^{-1}) - p, through Cholesky factors.
inline double kld(const Matrix& sigma1, const Matrix& sigma0) {
    if (sigma1.rows() != sigma0.rows() || sigma1.cols() != sigma0.cols()) throw DimensionMismatch("kld: shapes differ");
    Eigen::LLT<Matrix> l0(sigma0);
    if (l0.info() != Eigen::Success) throw SingularSigma0();
    Eigen::LLT<Matrix> l1(sigma1);
    if (l1.info() != Eigen::Success) throw SingularEstimate();
    const Matrix L0 = l0.matrixL(), L1 = l1.matrixL();
    const double ld0 = 2.0 * L0.diagonal().array().log().sum();
    const double ld1 = 2.0 * L1.diagonal().array().log().sum();
    if (!std::isfinite(ld1)) throw SingularEstimate();
    const Matrix W = L0.triangularView<Eigen::Lower>().solve(L1);  // L0^{-1} L1
    return W.squaredNorm() - (ld1 - ld0) - static_cast<double>(sigma0.rows());
}

struct KldSummary {
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    std::size_t singular = 0;
};

/// Mean KLD over estimated variance-component vectors of the crossed design.
/// Estimates whose covariance is singular are counted, not averaged.
inline KldSummary mkld(const std::vector<Vector>& sigma_hats, const Matrix& sigma0, const CrossedDesignSpec& spec) {
    KldSummary out;
    double acc = 0.0;
    for (const auto& s : sigma_hats) {
        try {
            acc += kld(crossed_sigma(spec, s), sigma0);
            ++out.used;
        } catch (const SingularEstimate&) {
            ++out.singular;
        }
    }
    if (out.used > 0) out.mean = acc / static_cast<double>(out.used);
    return out;
}

struct StudySetting {
    double epsilon = 0.0;
    double omega0 = 0.0;
    std::optional<Leverage> leverage;  // absent for the clean setting
};

struct StudyConfig {
    CrossedDesignSpec design;
    std::vector<double> epsilons{0.0};
    std::vector<double> omega0{0.0};
    std::vector<Leverage> leverages{Leverage::lev1, Leverage::lev20};
    double covariate_sd = 0.005;
    std::vector<double> alphas;  // alpha = 0 is always added
    SolverConfig solver;
    int reps = 100;
    std::uint64_t base_seed = 1;
    int threads = 1;

    /// The clean setting (if epsilon 0 is listed) followed by every
    /// (epsilon > 0, leverage, omega0) combination.
    std::vector<StudySetting> settings() const {
        std::vector<StudySetting> out;
        for (double e : epsilons) {
            if (e == 0.0) {
                out.push_back({0.0, 0.0, std::nullopt});
                continue;
            }
            for (auto l : leverages)
                for (double w : omega0) out.push_back({e, w, l});
        }
        return out;
    }

    std::vector<double> alpha_grid() const {
        std::vector<double> a = alphas;
        a.push_back(0.0);
        std::sort(a.begin(), a.end());
        a.erase(std::unique(a.begin(), a.end()), a.end());
        return a;
    }

    void validate() const {
        design.validate();
        solver.validate();
        if (reps < 1) throw InvalidArgument("reps must be at least 1");
        if (epsilons.empty()) throw InvalidArgument("epsilon list is empty");
        for (double e : epsilons) ContaminationSpec{e, 0.0, Leverage::lev1, covariate_sd}.validate();
        for (double a : alphas) DpdConfig{a}.validate();
        bool contaminated = false;
        for (double e : epsilons) contaminated |= e > 0.0;
        if (contaminated && (omega0.empty() || leverages.empty()))
            throw InvalidArgument("contaminated settings need omega0 values and leverages");
    }
};

struct McRow {
    StudySetting setting;
    double alpha = 0.0;
    double msmd = 0.0;
    double mkld = 0.0;
    double msmd_efficiency = 1.0;  // MSMD(0) / MSMD(alpha)
    double mkld_efficiency = 1.0;
    std::size_t fit_failures = 0;
    std::size_t singular = 0;
};

struct McReport {
    std::vector<McRow> rows;  // settings major, alpha minor
    int replications = 0;
    std::uint64_t seed = 0;
    std::vector<double> alphas;
};

inline std::string estimator_name(double alpha) {
    if (alpha == 0.0) return "MLE";
    char buf[64];
    std::snprintf(buf, sizeof buf, "MDPDE(%.6g)", alpha);
    return buf;
}

namespace detail {

struct RepEstimates {
    // [setting][alpha]
    std::vector<std::vector<Vector>> beta;
    std::vector<std::vector<Vector>> sigma2;
    std::vector<std::vector<bool>> failed;  // did not reach the gradient tolerance
    std::vector<std::vector<bool>> missing;  // no estimate at all
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                      static_cast<std::uint32_t>(b >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline RepEstimates run_replication(const StudyConfig& cfg, const std::vector<StudySetting>& settings,
                                    const std::vector<double>& alphas, std::uint64_t rep_seed) {
    std::mt19937_64 rng(rep_seed);
    const SimulatedData clean = generate_crossed(cfg.design, rng);
    RepEstimates est;
    const auto S = settings.size(), A = alphas.size();
    est.beta.assign(S, std::vector<Vector>(A));
    est.sigma2.assign(S, std::vector<Vector>(A));
    est.failed.assign(S, std::vector<bool>(A, false));
    est.missing.assign(S, std::vector<bool>(A, false));
    SolverConfig solver = cfg.solver;
    solver.seed = mix_seed(cfg.solver.seed, rep_seed);
    for (std::size_t s = 0; s < S; ++s) {
        const auto& st = settings[s];
        std::mt19937_64 crng(mix_seed(rep_seed, s + 1));
        const GroupedDesign data =
            st.epsilon == 0.0
                ? clean.design
                : contaminate_casewise(clean.design, ContaminationSpec{st.epsilon, st.omega0, *st.leverage, cfg.covariate_sd},
                                       clean.sigma0, cfg.design.beta0, crng);
        for (std::size_t a = 0; a < A; ++a) {
            try {
                const FitResult r = fit(data, DpdConfig{alphas[a]}, solver);
                est.beta[s][a] = r.theta_hat.beta;
                est.sigma2[s][a] = r.theta_hat.sigma2;
            } catch (const DidNotConverge& e) {
                est.beta[s][a] = e.best().theta_hat.beta;
                est.sigma2[s][a] = e.best().theta_hat.sigma2;
                est.failed[s][a] = true;
            } catch (const Error&) {
                est.failed[s][a] = true;
                est.missing[s][a] = true;
            }
        }
    }
    return est;
}

} // namespace detail

/// Monte Carlo study. Replication r uses seed base_seed + r for the clean data;
/// every setting of a replication contaminates the same clean data set.
/// Results are merged by replication index, so the thread count never changes them.
inline McReport run_study(const StudyConfig& cfg) {
    cfg.validate();
    const auto settings = cfg.settings();
    const auto alphas = cfg.alpha_grid();
    const auto reps = static_cast<std::size_t>(cfg.reps);

    std::vector<detail::RepEstimates> results(reps);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t r = next.fetch_add(1); r < reps; r = next.fetch_add(1))
            results[r] = detail::run_replication(cfg, settings, alphas, cfg.base_seed + r);
    };
    const int threads = std::max(1, std::min<int>(cfg.threads, cfg.reps));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    const Matrix sigma0 = crossed_sigma(cfg.design, cfg.design.sigma2());
    McReport rep;
    rep.replications = cfg.reps;
    rep.seed = cfg.base_seed;
    rep.alphas = alphas;
    for (std::size_t s = 0; s < settings.size(); ++s) {
        const std::size_t first = rep.rows.size();
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            std::vector<Vector> betas, sigmas;
            McRow row;
            row.setting = settings[s];
            row.alpha = alphas[a];
            for (std::size_t r = 0; r < reps; ++r) {
                if (results[r].failed[s][a]) ++row.fit_failures;
                if (results[r].missing[s][a]) continue;
                betas.push_back(results[r].beta[s][a]);
                sigmas.push_back(results[r].sigma2[s][a]);
            }
            if (betas.empty()) {
                row.msmd = row.mkld = std::numeric_limits<double>::quiet_NaN();
            } else {
                row.msmd = msmd(betas, cfg.design.beta0, sigma0);
                const KldSummary k = mkld(sigmas, sigma0, cfg.design);
                row.mkld = k.mean;
                row.singular = k.singular;
            }
            rep.rows.push_back(std::move(row));
        }
        // alpha = 0 is the first grid entry
        const McRow& base = rep.rows[first];
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            auto& row = rep.rows[first + a];
            row.msmd_efficiency = base.msmd / row.msmd;
            row.mkld_efficiency = base.mkld / row.mkld;
        }
    }
    return rep;
}

} // namespace mdpde
