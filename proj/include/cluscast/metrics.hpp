#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "cluscast/cluster_types.hpp"
#include "cluscast/errors.hpp"

namespace cluscast {

enum class NaivePredictorKind { LastValue, Mean, Median };

/// Constant-forecast baselines: last observation, mean, or median of the
/// history, repeated over the horizon. Even-length median is the midpoint of
/// the central pair.
inline Eigen::VectorXd naive_predict(NaivePredictorKind kind, const Eigen::VectorXd& history,
                                     int horizon) {
    if (history.size() == 0) throw EmptyHistory("naive_predict: empty history");
    double level = 0.0;
    switch (kind) {
        case NaivePredictorKind::LastValue:
            level = history[history.size() - 1];
            break;
        case NaivePredictorKind::Mean:
            level = history.mean();
            break;
        case NaivePredictorKind::Median: {
            std::vector<double> v(history.data(), history.data() + history.size());
            std::sort(v.begin(), v.end());
            const std::size_t n = v.size();
            level = (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
            break;
        }
    }
    return Eigen::VectorXd::Constant(horizon, level);
}

inline double rmse(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
    if (pred.size() == 0) throw EmptyInput("rmse: empty input");
    if (pred.size() != truth.size()) throw LengthMismatch("rmse: length mismatch");
    return std::sqrt((pred - truth).squaredNorm() / static_cast<double>(pred.size()));
}

inline double mae(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
    if (pred.size() == 0) throw EmptyInput("mae: empty input");
    if (pred.size() != truth.size()) throw LengthMismatch("mae: length mismatch");
    return (pred - truth).cwiseAbs().mean();
}

/// Adjusted Rand index by the standard contingency pair-counting formula.
/// When the adjustment denominator is zero (both partitions trivial, so they
/// agree on every pair) the index is defined as 1.0.
inline double ari(const PartitionLabels& a, const PartitionLabels& b) {
    if (a.size() != b.size()) throw LengthMismatch("ari: partitions differ in length");
    if (a.size() < 2) throw EmptyInput("ari: need at least 2 items");

    std::map<std::pair<int, int>, long long> contingency;
    std::map<int, long long> count_a, count_b;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++contingency[{a[i], b[i]}];
        ++count_a[a[i]];
        ++count_b[b[i]];
    }
    auto comb2 = [](long long n) { return 0.5 * static_cast<double>(n) * static_cast<double>(n - 1); };

    double sum_ij = 0.0;
    for (const auto& [key, n] : contingency) sum_ij += comb2(n);
    double sum_a = 0.0, sum_b = 0.0;
    for (const auto& [key, n] : count_a) sum_a += comb2(n);
    for (const auto& [key, n] : count_b) sum_b += comb2(n);

    const double total = comb2(static_cast<long long>(a.size()));
    const double expected = sum_a * sum_b / total;
    const double denom = 0.5 * (sum_a + sum_b) - expected;
    if (denom == 0.0) return 1.0;
    return (sum_ij - expected) / denom;
}

/// Labels of every individual at timestep position t (0-based).
inline PartitionLabels per_timestep_partition(const std::vector<ClusterTrajectory>& trajectories,
                                              int t) {
    PartitionLabels labels;
    labels.reserve(trajectories.size());
    for (const auto& traj : trajectories) {
        if (t < 0 || static_cast<std::size_t>(t) >= traj.labels.size())
            throw TimeOutOfRange("per_timestep_partition: t=" + std::to_string(t));
        labels.push_back(traj.labels[static_cast<std::size_t>(t)]);
    }
    return labels;
}

}  // namespace cluscast
