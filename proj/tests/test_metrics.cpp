#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <random>
#include <vector>

#include "cluscast/cluster_types.hpp"
#include "cluscast/metrics.hpp"

namespace cluscast {
namespace {

Eigen::VectorXd vec(std::initializer_list<double> xs) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

TEST(NaivePredict, LastValueRepeatsFinalObservation) {
    const auto pred = naive_predict(NaivePredictorKind::LastValue, vec({1, 5, 2}), 4);
    ASSERT_EQ(pred.size(), 4);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(pred[i], 2.0);
}

TEST(NaivePredict, MeanAndMedian) {
    const auto mean_pred = naive_predict(NaivePredictorKind::Mean, vec({1, 2, 6}), 2);
    EXPECT_NEAR(mean_pred[0], 3.0, 1e-15);
    EXPECT_NEAR(mean_pred[1], 3.0, 1e-15);

    const auto odd = naive_predict(NaivePredictorKind::Median, vec({9, 1, 4}), 1);
    EXPECT_EQ(odd[0], 4.0);

    // Even-length history: median is the midpoint of the two central values.
    const auto even = naive_predict(NaivePredictorKind::Median, vec({1, 9, 3, 7}), 1);
    EXPECT_NEAR(even[0], 5.0, 1e-15);
}

TEST(NaivePredict, RejectsEmptyHistory) {
    EXPECT_THROW(naive_predict(NaivePredictorKind::Mean, Eigen::VectorXd(), 3),
                 EmptyHistory);
}

TEST(PointErrors, HandComputedValues) {
    const auto truth = vec({1, 2, 3});
    const auto pred = vec({2, 2, 5});
    // Squared errors 1, 0, 4 -> RMSE sqrt(5/3); absolute errors 1, 0, 2 -> MAE 1.
    EXPECT_NEAR(rmse(pred, truth), std::sqrt(5.0 / 3.0), 1e-12);
    EXPECT_NEAR(mae(pred, truth), 1.0, 1e-12);
}

TEST(PointErrors, RmseDominatesMae) {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> gauss(0.0, 2.0);
    for (int trial = 0; trial < 30; ++trial) {
        Eigen::VectorXd a(10), b(10);
        for (int i = 0; i < 10; ++i) {
            a[i] = gauss(rng);
            b[i] = gauss(rng);
        }
        EXPECT_GE(rmse(a, b) + 1e-12, mae(a, b));
    }
}

TEST(PointErrors, RejectsBadShapes) {
    EXPECT_THROW(rmse(Eigen::VectorXd(), Eigen::VectorXd()), EmptyInput);
    EXPECT_THROW(mae(vec({1}), vec({1, 2})), LengthMismatch);
}

TEST(Ari, PerfectAgreementIsOne) {
    const std::vector<int> a{1, 1, 2, 2, 3};
    EXPECT_NEAR(ari(a, a), 1.0, 1e-12);
}

TEST(Ari, LabelPermutationInvariant) {
    const std::vector<int> a{1, 1, 2, 2, 3, 3};
    const std::vector<int> b{3, 3, 1, 1, 2, 2};
    EXPECT_NEAR(ari(a, b), 1.0, 1e-12);
}

TEST(Ari, FrozenHandComputedValues) {
    // Contingency table worked out by hand: pair counts give exactly 0.
    EXPECT_NEAR(ari({1, 1, 2, 2}, {1, 1, 1, 2}), 0.0, 1e-12);
    // Maximally crossed 2x2 case: exactly -1/2.
    EXPECT_NEAR(ari({1, 1, 2, 2}, {1, 2, 1, 2}), -0.5, 1e-12);
}

TEST(Ari, BothTrivialPartitionsAgree) {
    // Both sides put everything in one cluster: expected == max index, the
    // degenerate denominator is defined to give perfect agreement.
    EXPECT_NEAR(ari({1, 1, 1}, {2, 2, 2}), 1.0, 1e-12);
}

TEST(Ari, RejectsBadInput) {
    EXPECT_THROW(ari({1}, {1, 2}), LengthMismatch);
    EXPECT_THROW(ari({1}, {1}), EmptyInput);
}

TEST(PerTimestepPartition, ExtractsColumn) {
    ClusterTrajectory t1;
    t1.labels = {1, 2, 1};
    ClusterTrajectory t2;
    t2.labels = {2, 2, 1};
    const auto at0 = per_timestep_partition({t1, t2}, 0);
    const auto at1 = per_timestep_partition({t1, t2}, 1);
    EXPECT_EQ(at0, (std::vector<int>{1, 2}));
    EXPECT_EQ(at1, (std::vector<int>{2, 2}));
    EXPECT_THROW(per_timestep_partition({t1, t2}, 3), TimeOutOfRange);
}

}  // namespace
}  // namespace cluscast
