#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <random>
#include <set>

#include "cluscast/kmeans.hpp"

namespace cluscast {
namespace {

// Three well-separated 2-d blobs, 30 points each.
Eigen::MatrixXd blobs(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.2);
    const double cx[3] = {0.0, 10.0, -10.0};
    const double cy[3] = {0.0, 10.0, 5.0};
    Eigen::MatrixXd pts(2, 90);
    for (int b = 0; b < 3; ++b) {
        for (int i = 0; i < 30; ++i) {
            pts(0, 30 * b + i) = cx[b] + gauss(rng);
            pts(1, 30 * b + i) = cy[b] + gauss(rng);
        }
    }
    return pts;
}

TEST(KMeans, RecoversSeparatedBlobs) {
    const Eigen::MatrixXd pts = blobs(7);
    const auto res = kmeans(pts, 3, 42);

    // All points from the same blob get the same label, and the three blobs
    // get three distinct labels.
    std::set<int> blob_labels;
    for (int b = 0; b < 3; ++b) {
        const int lab = res.labels[static_cast<std::size_t>(30 * b)];
        blob_labels.insert(lab);
        for (int i = 1; i < 30; ++i) {
            EXPECT_EQ(res.labels[static_cast<std::size_t>(30 * b + i)], lab);
        }
    }
    EXPECT_EQ(blob_labels.size(), 3u);

    // Each recovered center sits on top of one blob center.
    for (int b = 0; b < 3; ++b) {
        const int lab = res.labels[static_cast<std::size_t>(30 * b)];
        Eigen::Vector2d truth;
        truth << (b == 0 ? 0.0 : b == 1 ? 10.0 : -10.0),
            (b == 0 ? 0.0 : b == 1 ? 10.0 : 5.0);
        EXPECT_LT((res.centers.col(lab) - truth).norm(), 0.5);
    }
}

TEST(KMeans, DeterministicForFixedSeed) {
    const Eigen::MatrixXd pts = blobs(3);
    const auto a = kmeans(pts, 3, 99);
    const auto b = kmeans(pts, 3, 99);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ((a.centers - b.centers).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(a.inertia, b.inertia);
}

TEST(KMeans, SingleClusterCenterIsMean) {
    Eigen::MatrixXd pts(1, 4);
    pts << 1.0, 2.0, 3.0, 10.0;
    const auto res = kmeans(pts, 1, 0);
    EXPECT_NEAR(res.centers(0, 0), 4.0, 1e-12);
    const double expected_inertia = 9.0 + 4.0 + 1.0 + 36.0;
    EXPECT_NEAR(res.inertia, expected_inertia, 1e-9);
}

TEST(KMeans, CoincidentPointsStayFinite) {
    Eigen::MatrixXd pts = Eigen::MatrixXd::Constant(2, 6, 3.0);
    const auto res = kmeans(pts, 2, 5);
    EXPECT_EQ(res.labels.size(), 6u);
    EXPECT_TRUE(res.centers.allFinite());
    EXPECT_NEAR(res.inertia, 0.0, 1e-12);
}

TEST(KMeans, RejectsBadArguments) {
    Eigen::MatrixXd pts(2, 3);
    pts.setZero();
    EXPECT_THROW(kmeans(Eigen::MatrixXd(2, 0), 1, 0), EmptyInput);
    EXPECT_THROW(kmeans(pts, 0, 0), Error);
    EXPECT_THROW(kmeans(pts, 4, 0), Error);
}

}  // namespace
}  // namespace cluscast
