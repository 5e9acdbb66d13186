#pragma once

#include <Eigen/Dense>
#include <limits>
#include <random>
#include <vector>

#include "cluscast/errors.hpp"

namespace cluscast {

struct KMeansResult {
    Eigen::MatrixXd centers;     // d x k
    std::vector<int> labels;     // 0-based, one per column of the input
    double inertia = 0.0;        // sum of squared distances to assigned center
};

/// Seeded k-means++ initialization followed by Lloyd iterations. Points are
/// the columns of `points` (d x n). Deterministic for a fixed seed. An empty
/// cluster is re-seeded with the point farthest from its assigned center.
inline KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed,
                           int max_iters = 100) {
    const Eigen::Index n = points.cols(), d = points.rows();
    if (n == 0) throw EmptyInput("kmeans: no points");
    if (k <= 0 || k > n) throw Error("kmeans: k must be in [1, n]");

    std::mt19937_64 rng(seed);
    Eigen::MatrixXd centers(d, k);

    // k-means++ seeding.
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    centers.col(0) = points.col(first(rng));
    Eigen::VectorXd dist2 = (points.colwise() - centers.col(0)).colwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = dist2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng), acc = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);  // all points coincide with chosen centers
        }
        centers.col(c) = points.col(pick);
        dist2 = dist2.cwiseMin(
            (points.colwise() - centers.col(c)).colwise().squaredNorm().transpose());
    }

    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    double inertia = std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < max_iters; ++iter) {
        // Assignment step.
        double new_inertia = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = (points.col(i) - centers.col(0)).squaredNorm();
            for (int c = 1; c < k; ++c) {
                const double dc = (points.col(i) - centers.col(c)).squaredNorm();
                if (dc < best_d) {
                    best_d = dc;
                    best = c;
                }
            }
            labels[static_cast<std::size_t>(i)] = best;
            new_inertia += best_d;
        }

        // Update step.
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(d, k);
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.col(labels[static_cast<std::size_t>(i)]) += points.col(i);
            ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centers.col(c) = sums.col(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            } else {
                // Re-seed from the point farthest from its current center.
                Eigen::Index far = 0;
                double far_d = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double dc =
                        (points.col(i) - centers.col(labels[static_cast<std::size_t>(i)])).squaredNorm();
                    if (dc > far_d) {
                        far_d = dc;
                        far = i;
                    }
                }
                centers.col(c) = points.col(far);
            }
        }

        if (new_inertia >= inertia * (1.0 - 1e-12)) {
            inertia = std::min(inertia, new_inertia);
            break;
        }
        inertia = new_inertia;
    }

    return {std::move(centers), std::move(labels), inertia};
}

}  // namespace cluscast
