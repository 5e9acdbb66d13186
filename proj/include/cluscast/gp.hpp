#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "cluscast/errors.hpp"
#include "cluscast/math_util.hpp"
#include "cluscast/time_series.hpp"

namespace cluscast::gp {

/// Exponentiated-quadratic covariance k(s,t) = v * exp(-(s-t)^2 / (2 l^2)).
struct Kernel {
    double variance = 1.0;     // v > 0
    double lengthscale = 1.0;  // l > 0

    double operator()(double s, double t) const {
        const double d = s - t;
        return variance * std::exp(-d * d / (2.0 * lengthscale * lengthscale));
    }
};

/// Gaussian over the values of a process at the points of a grid.
struct GaussianState {
    TimeGrid grid;
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;

    static GaussianState zero(const TimeGrid& g) {
        const auto n = static_cast<Eigen::Index>(g.size());
        return {g, Eigen::VectorXd::Zero(n), Eigen::MatrixXd::Zero(n, n)};
    }
};

inline Eigen::MatrixXd kernel_matrix(const Kernel& k, const Eigen::VectorXd& a,
                                     const Eigen::VectorXd& b) {
    Eigen::MatrixXd m(a.size(), b.size());
    for (Eigen::Index i = 0; i < a.size(); ++i)
        for (Eigen::Index j = 0; j < b.size(); ++j) m(i, j) = k(a[i], b[j]);
    return m;
}

inline Eigen::MatrixXd kernel_matrix(const Kernel& k, const TimeGrid& ga, const TimeGrid& gb) {
    return kernel_matrix(k, ga.as_real(), gb.as_real());
}

namespace detail {

/// Cholesky with jitter escalation: starts at 1e-6*v, grows x10 up to 1e-2*v.
/// Returns the factorization and the jitter actually applied.
struct JitteredLlt {
    Eigen::LLT<Eigen::MatrixXd> llt;
    double jitter = 0.0;
};

inline JitteredLlt cholesky_with_jitter(const Eigen::MatrixXd& m, double variance_scale,
                                        bool try_without_jitter = false) {
    const auto n = m.rows();
    if (try_without_jitter || variance_scale <= 0.0) {
        Eigen::LLT<Eigen::MatrixXd> llt(m);
        if (llt.info() == Eigen::Success) return {std::move(llt), 0.0};
        if (variance_scale <= 0.0)
            throw NotPositiveDefinite("cholesky_with_jitter: zero-variance matrix not PD");
    }
    double jitter = 1e-6 * variance_scale;
    for (; jitter <= 1e-2 * variance_scale * (1.0 + 1e-12); jitter *= 10.0) {
        Eigen::MatrixXd jittered = m + jitter * Eigen::MatrixXd::Identity(n, n);
        Eigen::LLT<Eigen::MatrixXd> llt(jittered);
        if (llt.info() == Eigen::Success) return {std::move(llt), jitter};
    }
    throw NotPositiveDefinite("cholesky_with_jitter: factorization failed at jitter 1e-2*v");
}

inline double log_det_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

/// log N(y | 0, K + noise_var*I + 1e-6*v*I), Cholesky based.
inline double log_marginal(const Kernel& kernel, double noise_var, const TimeGrid& grid,
                           const Eigen::VectorXd& y) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    if (y.size() != n) throw DimensionMismatch("log_marginal: y length != grid length");
    Eigen::MatrixXd cov = kernel_matrix(kernel, grid, grid);
    cov.diagonal().array() += noise_var;
    auto fac = detail::cholesky_with_jitter(cov, kernel.variance);
    const Eigen::VectorXd alpha = fac.llt.solve(y);
    return -0.5 * (y.dot(alpha) + detail::log_det_from_llt(fac.llt) +
                   static_cast<double>(n) * kLog2Pi);
}

struct LogMarginalGrad {
    double value = 0.0;
    Eigen::Vector3d grad;  // d/d(log v), d/d(log l), d/d(log noise_var)
};

/// Value and gradient of log_marginal in (log v, log l, log noise_var).
/// The jitter term 1e-6*v follows v, so the gradient matches finite
/// differences of log_marginal itself.
inline LogMarginalGrad log_marginal_with_grad(const Kernel& kernel, double noise_var,
                                              const TimeGrid& grid, const Eigen::VectorXd& y) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    if (y.size() != n) throw DimensionMismatch("log_marginal_with_grad: y length != grid length");
    const Eigen::VectorXd x = grid.as_real();

    Eigen::MatrixXd base = kernel_matrix(kernel, grid, grid);  // v * correlation
    Eigen::MatrixXd cov = base;
    cov.diagonal().array() += noise_var;
    auto fac = detail::cholesky_with_jitter(cov, kernel.variance);

    const Eigen::VectorXd alpha = fac.llt.solve(y);
    LogMarginalGrad out;
    out.value = -0.5 * (y.dot(alpha) + detail::log_det_from_llt(fac.llt) +
                        static_cast<double>(n) * kLog2Pi);

    // d logL / dK = 0.5 (alpha alpha^T - K^-1); contract with each dK/dtheta.
    const Eigen::MatrixXd inv = fac.llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd outer = alpha * alpha.transpose();

    Eigen::MatrixXd d_logv = base;
    d_logv.diagonal().array() += fac.jitter;  // jitter scales with v
    Eigen::MatrixXd d_logl(n, n);
    const double l2 = kernel.lengthscale * kernel.lengthscale;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            const double d = x[i] - x[j];
            d_logl(i, j) = base(i, j) * d * d / l2;
        }

    auto contract = [&](const Eigen::MatrixXd& dk) {
        return 0.5 * ((outer.array() - inv.array()) * dk.array()).sum();
    };
    out.grad[0] = contract(d_logv);
    out.grad[1] = contract(d_logl);
    out.grad[2] = 0.5 * noise_var * (outer.diagonal().sum() - inv.diagonal().sum());
    return out;
}

/// Posterior of the latent process g on target_grid, where g has prior mean
/// prior.mean and prior covariance prior.covariance + kernel over prior.grid,
/// and observations y = g(obs) + N(0, obs_noise_var I) are made at obs_grid.
/// Both obs_grid and target_grid must be subsets of prior.grid. With no
/// observations the prior predictive is returned unchanged.
inline GaussianState condition(const GaussianState& prior, const TimeGrid& obs_grid,
                               const Eigen::VectorXd& obs_values, double obs_noise_var,
                               const TimeGrid& target_grid, const Kernel& kernel) {
    const auto& domain = prior.grid.points();
    auto index_of = [&](int p) {
        auto it = std::lower_bound(domain.begin(), domain.end(), p);
        if (it == domain.end() || *it != p)
            throw Error("gp::condition: grid point " + std::to_string(p) +
                        " not in prior domain");
        return static_cast<Eigen::Index>(it - domain.begin());
    };

    std::vector<Eigen::Index> obs_idx, tgt_idx;
    for (int p : obs_grid.points()) obs_idx.push_back(index_of(p));
    for (int p : target_grid.points()) tgt_idx.push_back(index_of(p));
    const auto no = static_cast<Eigen::Index>(obs_idx.size());
    const auto nt = static_cast<Eigen::Index>(tgt_idx.size());
    if (obs_values.size() != no)
        throw DimensionMismatch("gp::condition: observation count mismatch");

    const Eigen::MatrixXd kfull = kernel_matrix(kernel, prior.grid, prior.grid);

    auto sub = [&](const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& ri,
                   const std::vector<Eigen::Index>& ci) {
        Eigen::MatrixXd s(static_cast<Eigen::Index>(ri.size()),
                          static_cast<Eigen::Index>(ci.size()));
        for (std::size_t i = 0; i < ri.size(); ++i)
            for (std::size_t j = 0; j < ci.size(); ++j) s(static_cast<Eigen::Index>(i),
                                                          static_cast<Eigen::Index>(j)) =
                m(ri[i], ci[j]);
        return s;
    };

    const Eigen::MatrixXd cov_tt = sub(prior.covariance, tgt_idx, tgt_idx) + sub(kfull, tgt_idx, tgt_idx);
    Eigen::VectorXd mean_t(nt);
    for (Eigen::Index i = 0; i < nt; ++i) mean_t[i] = prior.mean[tgt_idx[static_cast<std::size_t>(i)]];

    if (no == 0) return {target_grid, mean_t, cov_tt};

    Eigen::MatrixXd cov_oo = sub(prior.covariance, obs_idx, obs_idx) + sub(kfull, obs_idx, obs_idx);
    cov_oo.diagonal().array() += obs_noise_var;
    const Eigen::MatrixXd cov_to = sub(prior.covariance, tgt_idx, obs_idx) + sub(kfull, tgt_idx, obs_idx);

    Eigen::VectorXd mean_o(no);
    for (Eigen::Index i = 0; i < no; ++i) mean_o[i] = prior.mean[obs_idx[static_cast<std::size_t>(i)]];

    auto fac = detail::cholesky_with_jitter(cov_oo, kernel.variance, /*try_without_jitter=*/true);
    const Eigen::VectorXd alpha = fac.llt.solve(obs_values - mean_o);
    const Eigen::MatrixXd gain = fac.llt.solve(cov_to.transpose());  // cov_oo^-1 cov_ot

    GaussianState post;
    post.grid = target_grid;
    post.mean = mean_t + cov_to * alpha;
    post.covariance = cov_tt - cov_to * gain;
    post.covariance = 0.5 * (post.covariance + post.covariance.transpose().eval());
    return post;
}

}  // namespace cluscast::gp
