#pragma once

#include <Eigen/Dense>

#include "cluscast/time_series.hpp"

namespace cluscast {

/// Prediction over a horizon grid, shared by every forecasting model.
/// Matrices are d x L (dims by horizon length); cluster blocks are K x L.
struct ForecastResult {
    TimeGrid target_grid = TimeGrid::range(0, 1);
    Eigen::MatrixXd mean;
    Eigen::MatrixXd variance;
    Eigen::MatrixXd lower95;
    Eigen::MatrixXd upper95;
    /// Cluster membership used at each forecast step (columns on the simplex).
    Eigen::MatrixXd cluster_probs;
    /// Membership over the history steps (K x T_h), when the model tracks it.
    Eigen::MatrixXd history_cluster_probs;

    int horizon() const { return static_cast<int>(mean.cols()); }
    int n_dims() const { return static_cast<int>(mean.rows()); }
};

}  // namespace cluscast
