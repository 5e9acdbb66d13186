#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cluscast/cluster_types.hpp"
#include "cluscast/errors.hpp"
#include "cluscast/forecast_result.hpp"
#include "cluscast/gp.hpp"
#include "cluscast/json_io.hpp"
#include "cluscast/kmeans.hpp"
#include "cluscast/math_util.hpp"
#include "cluscast/time_series.hpp"

namespace cluscast::magmaclust {

struct VemConfig {
    int max_iters = 50;
    double tol = 1e-4;       // relative ELBO improvement threshold
    int mstep_steps = 30;    // gradient-ascent steps per hyperparameter block
    std::uint64_t seed = 0;  // drives the k-means initialization
    /// Optional M x K responsibility override (rows on the simplex). Empty ->
    /// one-hot k-means assignment on the (mean-filled) series vectors.
    Eigen::MatrixXd init_responsibilities;
};

struct VemReport {
    std::vector<double> elbo_trace;
    int n_iters = 0;
    bool converged = false;
    double wall_clock_seconds = 0.0;
    std::vector<std::string> warnings;
};

/// Mixture of Gaussian processes with one mean process per cluster, a shared
/// individual-deviation kernel, and i.i.d. observation noise:
/// X_i = mu_k + f_i + eps, cluster k drawn from `mixing`.
struct MagmaClustModel {
    int n_clusters = 0;
    std::vector<gp::Kernel> mean_kernels;            // one per cluster mean process
    gp::Kernel indiv_kernel;                         // shared across individuals
    double noise_var = 0.0;
    Eigen::VectorXd mixing;                          // pi, length K
    std::vector<gp::GaussianState> mean_posteriors;  // hyper-posterior of each mu_k
    Eigen::MatrixXd memberships;                     // tau, M x K, rows on simplex
    TimeGrid train_grid = TimeGrid::range(0, 1);
    std::vector<std::string> individual_ids;

    /// Type invariants (simplex rows, simplex mixing, symmetric PSD posteriors).
    void check() const {
        if (static_cast<int>(mean_kernels.size()) != n_clusters ||
            static_cast<int>(mean_posteriors.size()) != n_clusters)
            throw Error("MagmaClustModel: per-cluster field count != K");
        if (!is_simplex(mixing)) throw Error("MagmaClustModel: mixing not on simplex");
        for (Eigen::Index i = 0; i < memberships.rows(); ++i)
            if (!is_simplex(memberships.row(i).transpose()))
                throw Error("MagmaClustModel: membership row not on simplex");
        for (const auto& post : mean_posteriors) {
            const auto& cov = post.covariance;
            if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10)
                throw Error("MagmaClustModel: posterior covariance not symmetric");
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov,
                                                               Eigen::EigenvaluesOnly);
            if (eig.eigenvalues().minCoeff() < -1e-8)
                throw NotPositiveDefinite("MagmaClustModel: posterior covariance not PSD");
        }
    }
};

namespace detail {

/// One individual's observations as positions within the training grid.
struct Observed {
    std::vector<Eigen::Index> idx;
    Eigen::VectorXd x;  // real-valued time coordinates
    Eigen::VectorXd y;
};

inline std::vector<Observed> extract_observed(const TimeSeriesSet& data) {
    const Eigen::VectorXd grid_real = data.grid.as_real();
    std::vector<Observed> obs(static_cast<std::size_t>(data.n_individuals()));
    for (int i = 0; i < data.n_individuals(); ++i) {
        auto& o = obs[static_cast<std::size_t>(i)];
        for (int s = 0; s < data.n_time(); ++s)
            if (data.mask[static_cast<std::size_t>(i)](0, s)) o.idx.push_back(s);
        if (o.idx.empty())
            throw EmptyIndividual("vem_fit: individual " + std::to_string(i) +
                                  " has no observed points");
        const auto n = static_cast<Eigen::Index>(o.idx.size());
        o.x.resize(n);
        o.y.resize(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            o.x[j] = grid_real[o.idx[static_cast<std::size_t>(j)]];
            o.y[j] = data.values[static_cast<std::size_t>(i)](0, o.idx[static_cast<std::size_t>(j)]);
        }
    }
    return obs;
}

template <typename Mat>
inline Eigen::MatrixXd select_square(const Mat& m, const std::vector<Eigen::Index>& idx) {
    const auto n = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd s(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
            s(a, b) = m(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
    return s;
}

inline Eigen::VectorXd select_vector(const Eigen::VectorXd& v,
                                     const std::vector<Eigen::Index>& idx) {
    Eigen::VectorXd s(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t a = 0; a < idx.size(); ++a) s[static_cast<Eigen::Index>(a)] = v[idx[a]];
    return s;
}

/// Cached factorization pieces of Psi_i = C0(O_i) + sigma^2 I (+ jitter).
struct PsiFactor {
    Eigen::MatrixXd inv;
    Eigen::VectorXd inv_y;
    double logdet = 0.0;
    double jitter = 0.0;
    Eigen::MatrixXd base;  // unjittered C0(O_i), reused by gradients
};

inline PsiFactor psi_factor(const gp::Kernel& indiv_kernel, double noise_var,
                            const Observed& o) {
    PsiFactor f;
    f.base = gp::kernel_matrix(indiv_kernel, o.x, o.x);
    Eigen::MatrixXd psi = f.base;
    psi.diagonal().array() += noise_var;
    auto fac = gp::detail::cholesky_with_jitter(psi, indiv_kernel.variance);
    const auto n = psi.rows();
    f.inv = fac.llt.solve(Eigen::MatrixXd::Identity(n, n));
    f.inv_y = fac.llt.solve(o.y);
    f.logdet = gp::detail::log_det_from_llt(fac.llt);
    f.jitter = fac.jitter;
    return f;
}

/// Maximizes fn by steepest ascent with an adaptive step size; only
/// non-decreasing proposals are accepted, preserving EM monotonicity.
/// fn(theta, want_grad) returns {value, gradient-or-empty}.
template <typename ValueGrad>
inline Eigen::VectorXd ascend(Eigen::VectorXd theta, int steps, ValueGrad&& fn) {
    double eta = 0.1;
    auto current = fn(theta, true);
    for (int s = 0; s < steps; ++s) {
        const Eigen::VectorXd proposal = theta + eta * current.second;
        const double value = fn(proposal, false).first;
        if (std::isfinite(value) && value >= current.first) {
            theta = proposal;
            current = fn(theta, true);
            eta *= 1.3;
        } else {
            eta *= 0.5;
        }
    }
    return theta;
}

/// E-step responsibilities need, per (individual, cluster):
/// L_ik = log N(y_i | m_k(O_i), Psi_i) - 0.5 tr(Psi_i^-1 S_k(O_i)).
inline double cluster_loglik(const PsiFactor& psi, const Observed& o,
                             const Eigen::VectorXd& m_k, const Eigen::MatrixXd& s_k) {
    const auto n = o.y.size();
    const Eigen::VectorXd r = o.y - select_vector(m_k, o.idx);
    const double quad = r.dot(psi.inv * r);
    const double trace = (psi.inv.array() * select_square(s_k, o.idx).array()).sum();
    return -0.5 * (static_cast<double>(n) * kLog2Pi + psi.logdet + quad) - 0.5 * trace;
}

struct MeanKernelFactor {
    Eigen::MatrixXd inv;   // C_k^-1 (jittered)
    double logdet = 0.0;
    double jitter = 0.0;
    Eigen::MatrixXd base;  // unjittered kernel matrix
};

inline MeanKernelFactor mean_kernel_factor(const gp::Kernel& kernel,
                                           const Eigen::VectorXd& grid_real) {
    MeanKernelFactor f;
    f.base = gp::kernel_matrix(kernel, grid_real, grid_real);
    auto fac = gp::detail::cholesky_with_jitter(f.base, kernel.variance);
    const auto n = f.base.rows();
    f.inv = fac.llt.solve(Eigen::MatrixXd::Identity(n, n));
    f.logdet = gp::detail::log_det_from_llt(fac.llt);
    f.jitter = fac.jitter;
    return f;
}

inline double log_det_spd(const Eigen::MatrixXd& m) {
    const double scale = std::max(m.diagonal().mean(), 1e-12);
    auto fac = gp::detail::cholesky_with_jitter(m, scale, /*try_without_jitter=*/true);
    return gp::detail::log_det_from_llt(fac.llt);
}

}  // namespace detail

inline std::pair<MagmaClustModel, VemReport> vem_fit(const TimeSeriesSet& data, int n_clusters,
                                                     const VemConfig& config = {}) {
    const auto t_start = std::chrono::steady_clock::now();
    const int m_count = data.n_individuals();
    if (m_count == 0) throw EmptyInput("vem_fit: no individuals");
    if (data.n_dims != 1)
        throw UnsupportedMultivariate("vem_fit handles univariate data only (got d = " +
                                      std::to_string(data.n_dims) + ")");
    if (n_clusters < 1) throw Error("vem_fit: K must be >= 1");
    const int k = n_clusters;
    const auto n = static_cast<Eigen::Index>(data.grid.size());
    const Eigen::VectorXd grid_real = data.grid.as_real();
    const auto obs = detail::extract_observed(data);

    VemReport report;

    // --- Initial responsibilities: provided, or one-hot k-means labels.
    Eigen::MatrixXd tau;
    if (config.init_responsibilities.size() != 0) {
        tau = config.init_responsibilities;
        if (tau.rows() != m_count || tau.cols() != k)
            throw Error("vem_fit: init_responsibilities must be M x K");
        for (Eigen::Index i = 0; i < tau.rows(); ++i)
            if (!is_simplex(tau.row(i).transpose()))
                throw Error("vem_fit: init_responsibilities row off the simplex");
    } else {
        Eigen::MatrixXd points(n, m_count);  // series vectors, mean-filled
        for (int i = 0; i < m_count; ++i) {
            const auto& o = obs[static_cast<std::size_t>(i)];
            points.col(i).setConstant(o.y.mean());
            for (std::size_t j = 0; j < o.idx.size(); ++j)
                points(o.idx[j], i) = o.y[static_cast<Eigen::Index>(j)];
        }
        const auto km = kmeans(points, k, config.seed);
        tau = Eigen::MatrixXd::Zero(m_count, k);
        for (int i = 0; i < m_count; ++i) tau(i, km.labels[static_cast<std::size_t>(i)]) = 1.0;
    }

    // --- Hyperparameter initialization from pooled data statistics.
    double pooled_sum = 0.0, pooled_sq = 0.0;
    Eigen::Index pooled_n = 0;
    for (const auto& o : obs) {
        pooled_sum += o.y.sum();
        pooled_sq += o.y.squaredNorm();
        pooled_n += o.y.size();
    }
    const double pooled_mean = pooled_sum / static_cast<double>(pooled_n);
    const double pooled_var = std::max(
        pooled_sq / static_cast<double>(pooled_n) - pooled_mean * pooled_mean, 1e-6);
    const double span = grid_real[n - 1] - grid_real[0];

    std::vector<gp::Kernel> mean_kernels(
        static_cast<std::size_t>(k), gp::Kernel{pooled_var, std::max(1.0, span / 4.0)});
    gp::Kernel indiv_kernel{0.3 * pooled_var, std::max(1.0, span / 6.0)};
    double noise_var = 0.1 * pooled_var;
    Eigen::VectorXd pi = tau.colwise().mean().transpose();

    std::vector<Eigen::VectorXd> mean_m(static_cast<std::size_t>(k), Eigen::VectorXd::Zero(n));
    std::vector<Eigen::MatrixXd> mean_s(static_cast<std::size_t>(k),
                                        Eigen::MatrixXd::Zero(n, n));

    auto safe_log = [](double p) { return std::log(std::max(p, 1e-300)); };

    // Full variational bound at the current (tau, pi, m, S, hyperparameters).
    auto full_elbo = [&](const std::vector<detail::PsiFactor>& psi) {
        double elbo = 0.0;
        for (int c = 0; c < k; ++c) {
            const auto fac = detail::mean_kernel_factor(mean_kernels[static_cast<std::size_t>(c)], grid_real);
            const auto& m_c = mean_m[static_cast<std::size_t>(c)];
            const auto& s_c = mean_s[static_cast<std::size_t>(c)];
            elbo += -0.5 * (fac.logdet + m_c.dot(fac.inv * m_c) + (fac.inv * s_c).trace());
            elbo += 0.5 * detail::log_det_spd(s_c) + 0.5 * static_cast<double>(n);
        }
        for (int i = 0; i < m_count; ++i) {
            const auto& o = obs[static_cast<std::size_t>(i)];
            for (int c = 0; c < k; ++c) {
                const double t_ic = tau(i, c);
                if (t_ic <= 0.0) continue;
                const double l_ic = detail::cluster_loglik(
                    psi[static_cast<std::size_t>(i)], o, mean_m[static_cast<std::size_t>(c)],
                    mean_s[static_cast<std::size_t>(c)]);
                elbo += t_ic * (safe_log(pi[c]) + l_ic - std::log(t_ic));
            }
        }
        return elbo;
    };

    // Hyper-posterior update for one cluster given current responsibilities.
    auto update_mean_posterior = [&](int c, const std::vector<detail::PsiFactor>& psi) {
        const auto fac = detail::mean_kernel_factor(mean_kernels[static_cast<std::size_t>(c)], grid_real);
        Eigen::MatrixXd precision = fac.inv;
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < m_count; ++i) {
            const double t_ic = tau(i, c);
            if (t_ic <= 0.0) continue;
            const auto& o = obs[static_cast<std::size_t>(i)];
            const auto& f = psi[static_cast<std::size_t>(i)];
            for (std::size_t a = 0; a < o.idx.size(); ++a) {
                for (std::size_t b = 0; b < o.idx.size(); ++b)
                    precision(o.idx[a], o.idx[b]) +=
                        t_ic * f.inv(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
                rhs[o.idx[a]] += t_ic * f.inv_y[static_cast<Eigen::Index>(a)];
            }
        }
        const double prec_scale = std::max(precision.diagonal().mean(), 1e-12);
        auto prec_fac = gp::detail::cholesky_with_jitter(precision, prec_scale,
                                                         /*try_without_jitter=*/true);
        Eigen::MatrixXd s = prec_fac.llt.solve(Eigen::MatrixXd::Identity(n, n));
        mean_s[static_cast<std::size_t>(c)] = 0.5 * (s + s.transpose().eval());
        mean_m[static_cast<std::size_t>(c)] = prec_fac.llt.solve(rhs);
    };

    double prev_elbo = -std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < config.max_iters; ++iter) {
        // Psi factorizations for the current individual-kernel parameters.
        std::vector<detail::PsiFactor> psi;
        psi.reserve(static_cast<std::size_t>(m_count));
        for (const auto& o : obs) psi.push_back(detail::psi_factor(indiv_kernel, noise_var, o));

        // E-step (mean processes).
        for (int c = 0; c < k; ++c) update_mean_posterior(c, psi);

        // E-step (responsibilities).
        Eigen::MatrixXd loglik(m_count, k);
        for (int i = 0; i < m_count; ++i)
            for (int c = 0; c < k; ++c)
                loglik(i, c) = detail::cluster_loglik(psi[static_cast<std::size_t>(i)],
                                                      obs[static_cast<std::size_t>(i)],
                                                      mean_m[static_cast<std::size_t>(c)],
                                                      mean_s[static_cast<std::size_t>(c)]);
        for (int i = 0; i < m_count; ++i) {
            Eigen::VectorXd logits(k);
            for (int c = 0; c < k; ++c) logits[c] = safe_log(pi[c]) + loglik(i, c);
            tau.row(i) = softmax(logits).transpose();
        }

        // Degenerate clusters: re-seed from the worst-explained individual.
        for (int c = 0; c < k; ++c) {
            if (tau.col(c).sum() >= 1e-8) continue;
            int worst = 0;
            double worst_best = std::numeric_limits<double>::infinity();
            for (int i = 0; i < m_count; ++i) {
                const double best = loglik.row(i).maxCoeff();
                if (best < worst_best) {
                    worst_best = best;
                    worst = i;
                }
            }
            tau.row(worst).setZero();
            tau(worst, c) = 1.0;
            update_mean_posterior(c, psi);
            char buf[128];
            std::snprintf(buf, sizeof buf,
                          "iteration %d: degenerate cluster %d (no responsibility mass); "
                          "re-seeded from individual %d",
                          iter + 1, c + 1, worst);
            report.warnings.emplace_back(buf);
        }

        // M-step: mixing proportions.
        pi = tau.colwise().mean().transpose();

        // M-step: mean-process kernels, cluster by cluster.
        for (int c = 0; c < k; ++c) {
            const auto& m_c = mean_m[static_cast<std::size_t>(c)];
            const auto& s_c = mean_s[static_cast<std::size_t>(c)];
            auto objective = [&](const Eigen::VectorXd& theta, bool want_grad)
                -> std::pair<double, Eigen::VectorXd> {
                const gp::Kernel ker{std::exp(theta[0]), std::exp(theta[1])};
                try {
                    const auto fac = detail::mean_kernel_factor(ker, grid_real);
                    const Eigen::VectorXd alpha = fac.inv * m_c;
                    const Eigen::MatrixXd inv_s = fac.inv * s_c;
                    const double value =
                        -0.5 * (fac.logdet + m_c.dot(alpha) + inv_s.trace());
                    if (!want_grad) return {value, {}};
                    const Eigen::MatrixXd w =
                        alpha * alpha.transpose() + inv_s * fac.inv - fac.inv;
                    Eigen::MatrixXd d_logv = fac.base;
                    d_logv.diagonal().array() += fac.jitter;
                    Eigen::MatrixXd d_logl(n, n);
                    const double l2 = ker.lengthscale * ker.lengthscale;
                    for (Eigen::Index a = 0; a < n; ++a)
                        for (Eigen::Index b = 0; b < n; ++b) {
                            const double diff = grid_real[a] - grid_real[b];
                            d_logl(a, b) = fac.base(a, b) * diff * diff / l2;
                        }
                    Eigen::VectorXd grad(2);
                    grad[0] = 0.5 * (w.array() * d_logv.array()).sum();
                    grad[1] = 0.5 * (w.array() * d_logl.array()).sum();
                    return {value, grad};
                } catch (const NotPositiveDefinite&) {
                    return {-std::numeric_limits<double>::infinity(), Eigen::VectorXd::Zero(2)};
                }
            };
            auto& ker = mean_kernels[static_cast<std::size_t>(c)];
            Eigen::VectorXd theta(2);
            theta << std::log(ker.variance), std::log(ker.lengthscale);
            theta = detail::ascend(theta, config.mstep_steps, objective);
            ker = gp::Kernel{std::exp(theta[0]), std::exp(theta[1])};
        }

        // M-step: shared individual kernel and noise. T_i pools the current
        // responsibilities, residuals, and mean-posterior uncertainty.
        {
            std::vector<Eigen::MatrixXd> t_mats;
            t_mats.reserve(static_cast<std::size_t>(m_count));
            for (int i = 0; i < m_count; ++i) {
                const auto& o = obs[static_cast<std::size_t>(i)];
                const auto ni = o.y.size();
                Eigen::MatrixXd t_i = Eigen::MatrixXd::Zero(ni, ni);
                for (int c = 0; c < k; ++c) {
                    const double t_ic = tau(i, c);
                    if (t_ic <= 0.0) continue;
                    const Eigen::VectorXd r =
                        o.y - detail::select_vector(mean_m[static_cast<std::size_t>(c)], o.idx);
                    t_i += t_ic * (r * r.transpose() +
                                   detail::select_square(mean_s[static_cast<std::size_t>(c)], o.idx));
                }
                t_mats.push_back(std::move(t_i));
            }
            auto objective = [&](const Eigen::VectorXd& theta, bool want_grad)
                -> std::pair<double, Eigen::VectorXd> {
                const gp::Kernel ker{std::exp(theta[0]), std::exp(theta[1])};
                const double s2 = std::exp(theta[2]);
                try {
                    double value = 0.0;
                    Eigen::VectorXd grad = Eigen::VectorXd::Zero(3);
                    for (int i = 0; i < m_count; ++i) {
                        const auto& o = obs[static_cast<std::size_t>(i)];
                        const auto f = detail::psi_factor(ker, s2, o);
                        const Eigen::MatrixXd inv_t = f.inv * t_mats[static_cast<std::size_t>(i)];
                        value += -0.5 * f.logdet - 0.5 * inv_t.trace();
                        if (!want_grad) continue;
                        const Eigen::MatrixXd w = inv_t * f.inv - f.inv;
                        Eigen::MatrixXd d_logv = f.base;
                        d_logv.diagonal().array() += f.jitter;
                        const double l2 = ker.lengthscale * ker.lengthscale;
                        const auto ni = o.y.size();
                        Eigen::MatrixXd d_logl(ni, ni);
                        for (Eigen::Index a = 0; a < ni; ++a)
                            for (Eigen::Index b = 0; b < ni; ++b) {
                                const double diff = o.x[a] - o.x[b];
                                d_logl(a, b) = f.base(a, b) * diff * diff / l2;
                            }
                        grad[0] += 0.5 * (w.array() * d_logv.array()).sum();
                        grad[1] += 0.5 * (w.array() * d_logl.array()).sum();
                        grad[2] += 0.5 * s2 * w.trace();
                    }
                    if (!want_grad) return {value, {}};
                    return {value, grad};
                } catch (const NotPositiveDefinite&) {
                    return {-std::numeric_limits<double>::infinity(), Eigen::VectorXd::Zero(3)};
                }
            };
            Eigen::VectorXd theta(3);
            theta << std::log(indiv_kernel.variance), std::log(indiv_kernel.lengthscale),
                std::log(noise_var);
            theta = detail::ascend(theta, config.mstep_steps, objective);
            indiv_kernel = gp::Kernel{std::exp(theta[0]), std::exp(theta[1])};
            noise_var = std::exp(theta[2]);
        }

        // Bound value at the end of the sweep (fresh Psi for the new kernels).
        std::vector<detail::PsiFactor> psi_new;
        psi_new.reserve(static_cast<std::size_t>(m_count));
        for (const auto& o : obs) psi_new.push_back(detail::psi_factor(indiv_kernel, noise_var, o));
        const double elbo = full_elbo(psi_new);
        report.elbo_trace.push_back(elbo);
        report.n_iters = iter + 1;
        if (iter > 0 && std::abs(elbo - prev_elbo) < config.tol * std::max(1.0, std::abs(prev_elbo))) {
            report.converged = true;
            prev_elbo = elbo;
            break;
        }
        prev_elbo = elbo;
    }

    MagmaClustModel model;
    model.n_clusters = k;
    model.mean_kernels = mean_kernels;
    model.indiv_kernel = indiv_kernel;
    model.noise_var = noise_var;
    model.mixing = pi;
    model.memberships = tau;
    model.train_grid = data.grid;
    model.individual_ids = data.individual_ids;
    model.mean_posteriors.reserve(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c)
        model.mean_posteriors.push_back(
            gp::GaussianState{data.grid, mean_m[static_cast<std::size_t>(c)],
                              mean_s[static_cast<std::size_t>(c)]});

    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(model), std::move(report)};
}

namespace detail {

/// Extends a cluster's hyper-posterior from the training grid to `domain`
/// (mean A m, covariance C_dd - A C_gd + A S A^T with A = C_dg C_gg^-1).
/// Pure index selection when every point of `domain` lies on the train grid.
inline gp::GaussianState extend_posterior(const gp::GaussianState& post,
                                          const gp::Kernel& kernel, const TimeGrid& domain) {
    const auto& train_pts = post.grid.points();
    std::vector<Eigen::Index> sel;
    bool subset = true;
    for (int p : domain.points()) {
        auto it = std::lower_bound(train_pts.begin(), train_pts.end(), p);
        if (it == train_pts.end() || *it != p) {
            subset = false;
            break;
        }
        sel.push_back(static_cast<Eigen::Index>(it - train_pts.begin()));
    }
    if (subset) {
        gp::GaussianState out;
        out.grid = domain;
        out.mean = select_vector(post.mean, sel);
        out.covariance = select_square(post.covariance, sel);
        return out;
    }
    const Eigen::VectorXd xg = post.grid.as_real();
    const Eigen::VectorXd xd = domain.as_real();
    const Eigen::MatrixXd c_gg = gp::kernel_matrix(kernel, xg, xg);
    const Eigen::MatrixXd c_dg = gp::kernel_matrix(kernel, xd, xg);
    const Eigen::MatrixXd c_dd = gp::kernel_matrix(kernel, xd, xd);
    auto fac = gp::detail::cholesky_with_jitter(c_gg, kernel.variance);
    const Eigen::MatrixXd a = fac.llt.solve(c_dg.transpose()).transpose();  // C_dg C_gg^-1
    gp::GaussianState out;
    out.grid = domain;
    out.mean = a * post.mean;
    out.covariance = c_dd - a * c_dg.transpose() + a * post.covariance * a.transpose();
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose().eval());
    return out;
}

inline TimeGrid union_grid(const TimeGrid& a, const TimeGrid& b) {
    std::vector<int> pts;
    if (!a.empty()) pts.insert(pts.end(), a.points().begin(), a.points().end());
    pts.insert(pts.end(), b.points().begin(), b.points().end());
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    return TimeGrid(std::move(pts));
}

}  // namespace detail

/// Forecast for one (possibly new) individual: per cluster, condition the sum
/// process mu_k + f + eps on the history, then mix with the individual's
/// posterior membership. The 95% band follows the most probable cluster.
inline ForecastResult predict(const MagmaClustModel& model, const TimeGrid& history_grid,
                              const Eigen::VectorXd& history_values,
                              const TimeGrid& target_grid) {
    const int k = model.n_clusters;
    const auto n_hist = static_cast<Eigen::Index>(history_grid.size());
    if (history_values.size() != n_hist)
        throw DimensionMismatch("predict: history grid/value length mismatch");
    const auto horizon = static_cast<Eigen::Index>(target_grid.size());
    const TimeGrid domain = detail::union_grid(history_grid, target_grid);

    // Membership of this individual given its history.
    Eigen::VectorXd log_w(k);
    if (n_hist > 0) {
        const Eigen::VectorXd xh = history_grid.as_real();
        Eigen::MatrixXd psi_h = gp::kernel_matrix(model.indiv_kernel, xh, xh);
        psi_h.diagonal().array() += model.noise_var;
        for (int c = 0; c < k; ++c) {
            const auto state = detail::extend_posterior(
                model.mean_posteriors[static_cast<std::size_t>(c)],
                model.mean_kernels[static_cast<std::size_t>(c)], history_grid);
            Eigen::MatrixXd cov = psi_h + state.covariance;
            auto fac = gp::detail::cholesky_with_jitter(cov, model.indiv_kernel.variance +
                                                                 model.mean_kernels[static_cast<std::size_t>(c)].variance);
            const Eigen::VectorXd r = history_values - state.mean;
            const double quad = r.dot(fac.llt.solve(r));
            log_w[c] = std::log(std::max(model.mixing[c], 1e-300)) -
                       0.5 * (static_cast<double>(n_hist) * kLog2Pi +
                              gp::detail::log_det_from_llt(fac.llt) + quad);
        }
    } else {
        for (int c = 0; c < k; ++c) log_w[c] = std::log(std::max(model.mixing[c], 1e-300));
    }
    const Eigen::VectorXd weights = softmax(log_w);

    // Per-cluster predictive Gaussians on the target grid.
    Eigen::MatrixXd means(k, horizon), vars(k, horizon);
    for (int c = 0; c < k; ++c) {
        const auto prior = detail::extend_posterior(
            model.mean_posteriors[static_cast<std::size_t>(c)],
            model.mean_kernels[static_cast<std::size_t>(c)], domain);
        const auto post = gp::condition(prior, history_grid, history_values, model.noise_var,
                                        target_grid, model.indiv_kernel);
        means.row(c) = post.mean.transpose();
        vars.row(c) =
            (post.covariance.diagonal().array() + model.noise_var).max(0.0).matrix().transpose();
    }

    ForecastResult out;
    out.target_grid = target_grid;
    out.mean.resize(1, horizon);
    out.variance.resize(1, horizon);
    out.lower95.resize(1, horizon);
    out.upper95.resize(1, horizon);
    int top = 0;
    weights.maxCoeff(&top);  // Eigen returns the first (lowest-index) maximum
    for (Eigen::Index s = 0; s < horizon; ++s) {
        const double mix_mean = weights.dot(means.col(s));
        const double mix_second =
            weights.dot((vars.col(s).array() + means.col(s).array().square()).matrix());
        out.mean(0, s) = mix_mean;
        out.variance(0, s) = std::max(mix_second - mix_mean * mix_mean, 0.0);
        const double sd_top = std::sqrt(vars(top, s));
        out.lower95(0, s) = means(top, s) - 1.96 * sd_top;
        out.upper95(0, s) = means(top, s) + 1.96 * sd_top;
    }
    out.cluster_probs = weights.replicate(1, horizon);
    out.history_cluster_probs = weights.replicate(1, std::max<Eigen::Index>(n_hist, 0));
    return out;
}

/// Hard label (1-based) and membership row of a training individual.
inline std::pair<int, Eigen::VectorXd> assign_cluster(const MagmaClustModel& model,
                                                      int individual_index) {
    if (individual_index < 0 || individual_index >= model.memberships.rows())
        throw IndexOutOfRange("assign_cluster: individual index " +
                              std::to_string(individual_index));
    const Eigen::VectorXd row = model.memberships.row(individual_index).transpose();
    int best = 0;
    row.maxCoeff(&best);  // first maximum wins ties
    return {best + 1, row};
}

inline PartitionLabels hard_labels(const MagmaClustModel& model) {
    PartitionLabels labels(static_cast<std::size_t>(model.memberships.rows()));
    for (Eigen::Index i = 0; i < model.memberships.rows(); ++i)
        labels[static_cast<std::size_t>(i)] = assign_cluster(model, static_cast<int>(i)).first;
    return labels;
}

inline void save(const MagmaClustModel& model, const std::string& path) {
    using nlohmann::json;
    json j;
    j["model"] = "magmaclust";
    j["k"] = model.n_clusters;
    j["noise_var"] = model.noise_var;
    j["mixing"] = json_io::from_vector(model.mixing);
    j["indiv_kernel"] = {{"variance", model.indiv_kernel.variance},
                         {"lengthscale", model.indiv_kernel.lengthscale}};
    json kernels = json::array();
    for (const auto& ker : model.mean_kernels)
        kernels.push_back({{"variance", ker.variance}, {"lengthscale", ker.lengthscale}});
    j["mean_kernels"] = std::move(kernels);
    j["train_grid"] = model.train_grid.points();
    json posts = json::array();
    for (const auto& post : model.mean_posteriors)
        posts.push_back({{"mean", json_io::from_vector(post.mean)},
                         {"covariance", json_io::from_matrix(post.covariance)}});
    j["mean_posteriors"] = std::move(posts);
    j["memberships"] = json_io::from_matrix(model.memberships);
    j["individual_ids"] = model.individual_ids;
    json_io::save_file(path, j);
}

inline MagmaClustModel load(const std::string& path) {
    const auto j = json_io::load_file(path);
    if (j.value("model", "") != std::string("magmaclust"))
        throw Error("load: '" + path + "' is not a magmaclust model file");
    MagmaClustModel model;
    model.n_clusters = j.at("k").get<int>();
    model.noise_var = j.at("noise_var").get<double>();
    model.mixing = json_io::to_vector(j.at("mixing"));
    model.indiv_kernel = gp::Kernel{j.at("indiv_kernel").at("variance").get<double>(),
                                    j.at("indiv_kernel").at("lengthscale").get<double>()};
    for (const auto& ker : j.at("mean_kernels"))
        model.mean_kernels.push_back(
            gp::Kernel{ker.at("variance").get<double>(), ker.at("lengthscale").get<double>()});
    model.train_grid = TimeGrid(j.at("train_grid").get<std::vector<int>>());
    for (const auto& post : j.at("mean_posteriors"))
        model.mean_posteriors.push_back(gp::GaussianState{
            model.train_grid, json_io::to_vector(post.at("mean")),
            json_io::to_matrix(post.at("covariance"))});
    model.memberships = json_io::to_matrix(j.at("memberships"));
    model.individual_ids = j.at("individual_ids").get<std::vector<std::string>>();
    model.check();
    return model;
}

}  // namespace cluscast::magmaclust
