#pragma once

#include <Eigen/Dense>
#include <vector>

namespace cluscast {

/// One integer cluster label per item. Labels are 1-based everywhere in this
/// library; any non-negative labeling is accepted by the metrics.
using PartitionLabels = std::vector<int>;

/// Per-timestep hard labels plus the probability vector they were taken from.
struct ClusterTrajectory {
    std::vector<int> labels;              // 1-based, one per timestep
    std::vector<Eigen::VectorXd> probs;   // simplex vector per timestep

    std::size_t size() const { return labels.size(); }
};

}  // namespace cluscast
