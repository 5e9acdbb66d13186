#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cluscast/cluster_types.hpp"
#include "cluscast/errors.hpp"
#include "cluscast/gp.hpp"
#include "cluscast/math_util.hpp"
#include "cluscast/time_series.hpp"

namespace cluscast::synth {

/// Mixture-of-GPs generator: K mean curves drawn from the mean-kernel GP,
/// individuals assigned a cluster from `mixing`, plus an individual GP draw
/// and i.i.d. observation noise. Univariate (d = 1).
struct MagmaSynthSpec {
    int n_individuals = 60;
    int n_clusters = 2;
    int n_time = 12;
    gp::Kernel mean_kernel{4.0, 3.0};
    gp::Kernel indiv_kernel{0.25, 1.5};
    double noise_var = 0.04;
    Eigen::VectorXd mixing;  // empty -> uniform
    std::uint64_t seed = 1;

    void check() const {
        if (n_individuals <= 0 || n_clusters <= 0 || n_time <= 0)
            throw Error("MagmaSynthSpec: counts must be positive");
        if (mean_kernel.variance < 0.0 || indiv_kernel.variance < 0.0 || noise_var < 0.0)
            throw Error("MagmaSynthSpec: variances must be >= 0");
        if (mixing.size() != 0 &&
            (mixing.size() != n_clusters || !is_simplex(mixing)))
            throw Error("MagmaSynthSpec: mixing must be a simplex of length K");
    }
};

/// Dynamic-mixture generator: per-timestep component labels follow a sticky
/// Markov chain (stay probability rho, off-diagonal uniform), the emission
/// label is drawn from the gamma-blended probabilities, and observations are
/// Gaussian around the component means.
struct Dgm2SynthSpec {
    int n_individuals = 200;
    int n_clusters = 3;
    int n_time = 12;
    int n_dims = 1;
    Eigen::MatrixXd component_means;  // d x K; empty -> spaced 4 emission sds apart
    double emission_var = 1.0;
    double stickiness = 0.9;  // rho in [0,1]
    double gamma = 0.2;
    Eigen::VectorXd base_probs;  // p(mu); empty -> uniform
    std::uint64_t seed = 1;

    Eigen::MatrixXd resolved_means() const {
        if (component_means.size() != 0) return component_means;
        // Constant-in-d means centred on 0, spaced 4 emission sds apart.
        Eigen::MatrixXd mu(n_dims, n_clusters);
        const double sep = 4.0 * std::sqrt(emission_var);
        for (int k = 0; k < n_clusters; ++k)
            mu.col(k).setConstant(sep * (k - 0.5 * (n_clusters - 1)));
        return mu;
    }

    Eigen::VectorXd resolved_base() const {
        return base_probs.size() != 0 ? base_probs
                                      : uniform_simplex(n_clusters);
    }

    void check() const {
        if (n_individuals <= 0 || n_clusters <= 0 || n_time <= 0 || n_dims <= 0)
            throw Error("Dgm2SynthSpec: counts must be positive");
        if (emission_var < 0.0) throw Error("Dgm2SynthSpec: emission_var must be >= 0");
        if (stickiness < 0.0 || stickiness > 1.0)
            throw Error("Dgm2SynthSpec: stickiness must lie in [0,1]");
        if (gamma < 0.0 || gamma > 1.0) throw InvalidGamma("Dgm2SynthSpec: gamma outside [0,1]");
        if (component_means.size() != 0 && (component_means.rows() != n_dims ||
                                            component_means.cols() != n_clusters))
            throw Error("Dgm2SynthSpec: component_means must be d x K");
        if (base_probs.size() != 0 &&
            (base_probs.size() != n_clusters || !is_simplex(base_probs)))
            throw Error("Dgm2SynthSpec: base_probs must be a simplex of length K");
    }
};

namespace detail {

inline std::string individual_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "ind%04d", i + 1);
    return buf;
}

/// Draw from GP(0, kernel) on `grid`. Always consumes exactly grid.size()
/// normals so degenerate variances do not shift the RNG stream.
inline Eigen::VectorXd sample_gp(const gp::Kernel& kernel, const TimeGrid& grid,
                                 std::mt19937_64& rng) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    const Eigen::VectorXd eps = standard_normal_vector(n, rng);
    if (kernel.variance == 0.0) return Eigen::VectorXd::Zero(n);
    const Eigen::MatrixXd cov = gp::kernel_matrix(kernel, grid, grid);
    auto fac = gp::detail::cholesky_with_jitter(cov, kernel.variance);
    return fac.llt.matrixL() * eps;
}

/// Row `from` (0-based) of the sticky transition matrix rho*I + (1-rho)/(K-1).
inline Eigen::VectorXd sticky_row(int from, int k, double rho) {
    if (k == 1) return Eigen::VectorXd::Ones(1);
    Eigen::VectorXd row = Eigen::VectorXd::Constant(k, (1.0 - rho) / (k - 1));
    row[from] = rho;
    return row;
}

}  // namespace detail

inline std::pair<TimeSeriesSet, PartitionLabels> generate_magma_data(const MagmaSynthSpec& spec) {
    spec.check();
    const int m = spec.n_individuals, k = spec.n_clusters, t = spec.n_time;
    const TimeGrid grid = TimeGrid::range(0, t);
    const Eigen::VectorXd mixing =
        spec.mixing.size() != 0 ? spec.mixing : uniform_simplex(k);

    std::mt19937_64 rng(spec.seed);

    std::vector<Eigen::VectorXd> mean_curves;
    mean_curves.reserve(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) mean_curves.push_back(detail::sample_gp(spec.mean_kernel, grid, rng));

    TimeSeriesSet data = TimeSeriesSet::zeros(m, 1, grid);
    data.dim_names = {"x0"};
    PartitionLabels labels(static_cast<std::size_t>(m));
    const double noise_sd = std::sqrt(spec.noise_var);

    for (int i = 0; i < m; ++i) {
        data.individual_ids[static_cast<std::size_t>(i)] = detail::individual_id(i);
        const int c = sample_categorical(mixing, rng);
        labels[static_cast<std::size_t>(i)] = c + 1;
        const Eigen::VectorXd indiv = detail::sample_gp(spec.indiv_kernel, grid, rng);
        const Eigen::VectorXd noise = noise_sd * standard_normal_vector(t, rng);
        data.values[static_cast<std::size_t>(i)].row(0) =
            (mean_curves[static_cast<std::size_t>(c)] + indiv + noise).transpose();
    }
    return {std::move(data), std::move(labels)};
}

inline std::pair<TimeSeriesSet, std::vector<ClusterTrajectory>> generate_dgm2_data(
    const Dgm2SynthSpec& spec) {
    spec.check();
    const int m = spec.n_individuals, k = spec.n_clusters, t = spec.n_time, d = spec.n_dims;
    const TimeGrid grid = TimeGrid::range(0, t);
    const Eigen::MatrixXd mu = spec.resolved_means();
    const Eigen::VectorXd base = spec.resolved_base();
    const double emission_sd = std::sqrt(spec.emission_var);

    std::mt19937_64 rng(spec.seed);

    TimeSeriesSet data = TimeSeriesSet::zeros(m, d, grid);
    for (int j = 0; j < d; ++j) data.dim_names[static_cast<std::size_t>(j)] = "x" + std::to_string(j);
    std::vector<ClusterTrajectory> trajectories(static_cast<std::size_t>(m));

    for (int i = 0; i < m; ++i) {
        data.individual_ids[static_cast<std::size_t>(i)] = detail::individual_id(i);
        auto& traj = trajectories[static_cast<std::size_t>(i)];
        traj.labels.resize(static_cast<std::size_t>(t));
        traj.probs.resize(static_cast<std::size_t>(t));

        int z = 0;
        for (int s = 0; s < t; ++s) {
            // Blended emission probabilities psi_t; at t=1 the chain has no
            // history, so the transition part is the uniform start law.
            const Eigen::VectorXd trans =
                s == 0 ? uniform_simplex(k) : detail::sticky_row(z, k, spec.stickiness);
            const Eigen::VectorXd psi =
                (1.0 - spec.gamma) * trans + spec.gamma * base;

            int z_tilde;
            if (s == 0) {
                // The first emission label and chain state coincide: there is
                // no earlier state for them to disagree about.
                z = sample_categorical(psi, rng);
                z_tilde = z;
            } else {
                z = sample_categorical(trans, rng);
                z_tilde = sample_categorical(psi, rng);
            }

            traj.labels[static_cast<std::size_t>(s)] = z_tilde + 1;
            traj.probs[static_cast<std::size_t>(s)] = psi;

            const Eigen::VectorXd eps = standard_normal_vector(d, rng);
            data.values[static_cast<std::size_t>(i)].col(s) = mu.col(z_tilde) + emission_sd * eps;
        }
    }
    return {std::move(data), std::move(trajectories)};
}

/// Concatenate the dimensions of two sets over the same individuals and grid
/// (used to assemble multivariate data from independently generated parts).
inline TimeSeriesSet merge_dims(const TimeSeriesSet& a, const TimeSeriesSet& b) {
    if (!(a.grid == b.grid) || a.n_individuals() != b.n_individuals())
        throw DimensionMismatch("merge_dims: individual count or grid mismatch");
    TimeSeriesSet out = TimeSeriesSet::zeros(a.n_individuals(), a.n_dims + b.n_dims, a.grid);
    out.individual_ids = a.individual_ids;
    for (int j = 0; j < a.n_dims; ++j) out.dim_names[static_cast<std::size_t>(j)] = a.dim_names[static_cast<std::size_t>(j)];
    for (int j = 0; j < b.n_dims; ++j) {
        std::string name = b.dim_names[static_cast<std::size_t>(j)];
        for (const auto& existing : a.dim_names)
            if (existing == name) name += "_b";
        out.dim_names[static_cast<std::size_t>(a.n_dims + j)] = name;
    }
    for (int i = 0; i < a.n_individuals(); ++i) {
        out.values[static_cast<std::size_t>(i)].topRows(a.n_dims) = a.values[static_cast<std::size_t>(i)];
        out.values[static_cast<std::size_t>(i)].bottomRows(b.n_dims) = b.values[static_cast<std::size_t>(i)];
        out.mask[static_cast<std::size_t>(i)].topRows(a.n_dims) = a.mask[static_cast<std::size_t>(i)];
        out.mask[static_cast<std::size_t>(i)].bottomRows(b.n_dims) = b.mask[static_cast<std::size_t>(i)];
    }
    return out;
}

}  // namespace cluscast::synth
