#include <gtest/gtest.h>

#include <cmath>

#include "cluscast/time_series.hpp"

namespace cluscast {
namespace {

TimeSeriesSet two_individuals() {
    TimeSeriesSet s = TimeSeriesSet::zeros(2, 1, TimeGrid::range(0, 4));
    s.values[0] << 1.0, 2.0, 3.0, 4.0;
    s.values[1] << 5.0, 6.0, 7.0, 8.0;
    return s;
}

TEST(TimeGrid, RejectsEmptyAndUnsorted) {
    EXPECT_THROW(TimeGrid(std::vector<int>{}), Error);
    EXPECT_THROW(TimeGrid({3, 2}), Error);
    EXPECT_THROW(TimeGrid({1, 1}), Error);
    EXPECT_TRUE(TimeGrid().empty());
}

TEST(TimeGrid, RangeAndAsReal) {
    const TimeGrid g = TimeGrid::range(2, 3);
    EXPECT_EQ(g.points(), (std::vector<int>{2, 3, 4}));
    EXPECT_EQ(g.as_real()[2], 4.0);
    EXPECT_EQ(g.size(), 3u);
}

TEST(ValidateRecord, BoundsPerDimensionKind) {
    EXPECT_TRUE(validate_record(DimKind::Bmi, 22.5));
    EXPECT_FALSE(validate_record(DimKind::Bmi, 9.9));
    EXPECT_FALSE(validate_record(DimKind::Bmi, 70.0));
    EXPECT_TRUE(validate_record(DimKind::SleepDurationMinutes, 480.0));
    EXPECT_FALSE(validate_record(DimKind::SleepDurationMinutes, 30.0));
    EXPECT_FALSE(validate_record(DimKind::SleepDurationMinutes, 2000.0));
}

TEST(Standardizer, MatchesHandComputedMoments) {
    const TimeSeriesSet s = two_individuals();
    const auto p = fit_standardizer(s);
    // Values 1..8: mean 4.5, unbiased variance 6.
    EXPECT_NEAR(p.mean[0], 4.5, 1e-12);
    EXPECT_NEAR(p.stddev[0], std::sqrt(6.0), 1e-12);
}

TEST(Standardizer, RoundTripAndZeroMeanUnitVar) {
    const TimeSeriesSet s = two_individuals();
    const auto p = fit_standardizer(s);
    const TimeSeriesSet z = standardize(s, p);
    double sum = 0.0, ss = 0.0;
    for (const auto& v : z.values) {
        sum += v.sum();
        ss += v.array().square().sum();
    }
    EXPECT_NEAR(sum / 8.0, 0.0, 1e-12);
    EXPECT_NEAR(ss / 7.0, 1.0, 1e-12);

    const TimeSeriesSet back = destandardize(z, p);
    for (int i = 0; i < 2; ++i)
        EXPECT_LT((back.values[static_cast<std::size_t>(i)] -
                   s.values[static_cast<std::size_t>(i)]).cwiseAbs().maxCoeff(),
                  1e-12);
}

TEST(Standardizer, ErrorsOnDegenerateDimensions) {
    TimeSeriesSet s = TimeSeriesSet::zeros(2, 1, TimeGrid::range(0, 3));
    s.values[0].setConstant(7.0);
    s.values[1].setConstant(7.0);
    EXPECT_THROW(fit_standardizer(s), ZeroVariance);

    TimeSeriesSet hidden = TimeSeriesSet::zeros(1, 1, TimeGrid::range(0, 3));
    hidden.mask[0].setConstant(false);
    EXPECT_THROW(fit_standardizer(hidden), EmptyDimension);
}

TEST(Standardizer, IgnoresMaskedEntries) {
    TimeSeriesSet s = two_individuals();
    s.values[1](0, 3) = 1e9;  // masked out below, must not affect the fit
    s.mask[1](0, 3) = false;
    const auto p = fit_standardizer(s);
    // Remaining values 1,2,3,4,5,6,7: mean 4, unbiased sd sqrt(28/6).
    EXPECT_NEAR(p.mean[0], 4.0, 1e-12);
    EXPECT_NEAR(p.stddev[0], std::sqrt(28.0 / 6.0), 1e-12);
}

TEST(Split, HistoryHorizonGridsAndValues) {
    const TimeSeriesSet s = two_individuals();
    const auto [hist, hori] = split_history_horizon(s, SplitSpec{3, 1});
    EXPECT_EQ(hist.grid.points(), (std::vector<int>{0, 1, 2}));
    EXPECT_EQ(hori.grid.points(), (std::vector<int>{3}));
    EXPECT_EQ(hist.values[0](0, 2), 3.0);
    EXPECT_EQ(hori.values[1](0, 0), 8.0);
}

TEST(Split, RejectsOversizedSplit) {
    const TimeSeriesSet s = two_individuals();
    EXPECT_THROW(split_history_horizon(s, SplitSpec{4, 1}), SplitTooLong);
    EXPECT_THROW(split_history_horizon(s, SplitSpec{0, 2}), SplitTooLong);
}

TEST(TimeSeriesSet, SelectIndividualsAndDims) {
    TimeSeriesSet s = TimeSeriesSet::zeros(3, 2, TimeGrid::range(0, 2));
    s.individual_ids = {"a", "b", "c"};
    s.dim_names = {"x0", "x1"};
    s.values[1](1, 1) = 42.0;

    const TimeSeriesSet one = s.select_individuals({1});
    EXPECT_EQ(one.n_individuals(), 1);
    EXPECT_EQ(one.individual_ids[0], "b");
    EXPECT_EQ(one.values[0](1, 1), 42.0);
    EXPECT_THROW(s.select_individuals({3}), IndexOutOfRange);

    const TimeSeriesSet dim = s.select_dim(1);
    EXPECT_EQ(dim.n_dims, 1);
    EXPECT_EQ(dim.dim_names[0], "x1");
    EXPECT_EQ(dim.values[1](0, 1), 42.0);
    EXPECT_THROW(s.select_dim(2), IndexOutOfRange);
}

TEST(TimeSeriesSet, CheckCatchesShapeAndNonFinite) {
    TimeSeriesSet s = two_individuals();
    s.check();
    s.values[0](0, 0) = std::nan("");
    EXPECT_THROW(s.check(), Error);
    s.values[0](0, 0) = 1.0;
    s.mask[0].resize(1, 3);
    EXPECT_THROW(s.check(), Error);
}

}  // namespace
}  // namespace cluscast
