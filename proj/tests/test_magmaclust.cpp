#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "cluscast/magmaclust.hpp"
#include "cluscast/metrics.hpp"
#include "cluscast/synth.hpp"

namespace cluscast::magmaclust {
namespace {

// Two well-separated clusters of smooth curves; used by several tests.
std::pair<TimeSeriesSet, PartitionLabels> two_cluster_data(std::uint64_t seed) {
    synth::MagmaSynthSpec spec;
    spec.n_individuals = 40;
    spec.n_clusters = 2;
    spec.n_time = 10;
    spec.mean_kernel = {25.0, 4.0};
    spec.indiv_kernel = {0.25, 1.5};
    spec.noise_var = 0.04;
    spec.seed = seed;
    return synth::generate_magma_data(spec);
}

// Empirical gap between the two cluster mean curves, in units of the
// within-cluster spread; generators draw the curves, so check separation.
double cluster_gap(const TimeSeriesSet& data, const PartitionLabels& labels) {
    Eigen::VectorXd mean[2] = {Eigen::VectorXd::Zero(data.n_time()),
                               Eigen::VectorXd::Zero(data.n_time())};
    int count[2] = {0, 0};
    for (int i = 0; i < data.n_individuals(); ++i) {
        const int c = labels[static_cast<std::size_t>(i)] - 1;
        mean[c] += data.values[static_cast<std::size_t>(i)].row(0).transpose();
        ++count[c];
    }
    if (count[0] == 0 || count[1] == 0) return 0.0;
    mean[0] /= count[0];
    mean[1] /= count[1];
    return (mean[0] - mean[1]).cwiseAbs().maxCoeff();
}

TEST(VemFit, SingleClusterMembershipsAreOne) {
    const auto [data, labels] = two_cluster_data(2);
    (void)labels;
    VemConfig config;
    config.max_iters = 10;
    const auto [model, report] = vem_fit(data, 1, config);
    model.check();
    EXPECT_EQ(model.n_clusters, 1);
    for (Eigen::Index i = 0; i < model.memberships.rows(); ++i)
        EXPECT_NEAR(model.memberships(i, 0), 1.0, 1e-12);
    EXPECT_NEAR(model.mixing[0], 1.0, 1e-12);
    EXPECT_FALSE(report.elbo_trace.empty());
}

TEST(VemFit, ElboIsNonDecreasing) {
    const auto [data, labels] = two_cluster_data(4);
    (void)labels;
    VemConfig config;
    config.max_iters = 15;
    config.tol = 0.0;  // force all iterations
    const auto [model, report] = vem_fit(data, 2, config);
    (void)model;
    ASSERT_GE(report.elbo_trace.size(), 2u);
    for (std::size_t i = 1; i < report.elbo_trace.size(); ++i) {
        EXPECT_GE(report.elbo_trace[i], report.elbo_trace[i - 1] - 1e-6)
            << "iteration " << i;
    }
}

TEST(VemFit, RecoversWellSeparatedClusters) {
    std::uint64_t seed = 2;
    TimeSeriesSet data = TimeSeriesSet::zeros(1, 1, TimeGrid::range(0, 1));
    PartitionLabels truth;
    // GP-drawn mean curves can land close together; pick a seed where they
    // are far apart relative to the within-cluster noise.
    for (; seed < 30; ++seed) {
        auto [d, l] = two_cluster_data(seed);
        if (cluster_gap(d, l) > 4.0) {
            data = std::move(d);
            truth = std::move(l);
            break;
        }
    }
    ASSERT_FALSE(truth.empty()) << "no sufficiently separated draw found";

    VemConfig config;
    config.max_iters = 30;
    config.seed = 11;
    const auto [model, report] = vem_fit(data, 2, config);
    (void)report;
    EXPECT_GE(ari(hard_labels(model), truth), 0.9);
}

TEST(VemFit, DeterministicForFixedSeed) {
    const auto [data, labels] = two_cluster_data(6);
    (void)labels;
    VemConfig config;
    config.max_iters = 5;
    config.seed = 3;
    const auto [ma, ra] = vem_fit(data, 2, config);
    const auto [mb, rb] = vem_fit(data, 2, config);
    ASSERT_EQ(ra.elbo_trace.size(), rb.elbo_trace.size());
    for (std::size_t i = 0; i < ra.elbo_trace.size(); ++i)
        EXPECT_EQ(ra.elbo_trace[i], rb.elbo_trace[i]);
    EXPECT_EQ((ma.memberships - mb.memberships).cwiseAbs().maxCoeff(), 0.0);
}

TEST(VemFit, LabelPermutationEquivariant) {
    const auto [data, labels] = two_cluster_data(8);
    (void)labels;
    const int m = data.n_individuals();

    // Hand the fit an explicit responsibility init and its column swap; the
    // fits must agree up to the same swap.
    Eigen::MatrixXd init(m, 2);
    std::mt19937_64 rng(19);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    for (int i = 0; i < m; ++i) {
        init(i, 0) = u(rng);
        init(i, 1) = 1.0 - init(i, 0);
    }
    Eigen::MatrixXd swapped(m, 2);
    swapped.col(0) = init.col(1);
    swapped.col(1) = init.col(0);

    VemConfig config;
    config.max_iters = 8;
    config.init_responsibilities = init;
    const auto [ma, ra] = vem_fit(data, 2, config);
    config.init_responsibilities = swapped;
    const auto [mb, rb] = vem_fit(data, 2, config);

    EXPECT_NEAR(ra.elbo_trace.back(), rb.elbo_trace.back(), 1e-7);
    Eigen::MatrixXd unswapped(m, 2);
    unswapped.col(0) = mb.memberships.col(1);
    unswapped.col(1) = mb.memberships.col(0);
    EXPECT_LT((ma.memberships - unswapped).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_NEAR(ma.mixing[0], mb.mixing[1], 1e-7);
}

TEST(VemFit, ReseedsDegenerateCluster) {
    const auto [data, labels] = two_cluster_data(10);
    (void)labels;
    const int m = data.n_individuals();

    // Start a 3-cluster fit with zero mass on the third column; the fit must
    // rescue it rather than divide by zero.
    Eigen::MatrixXd init = Eigen::MatrixXd::Zero(m, 3);
    for (int i = 0; i < m; ++i) init(i, i % 2) = 1.0;

    VemConfig config;
    config.max_iters = 6;
    config.init_responsibilities = init;
    const auto [model, report] = vem_fit(data, 3, config);
    model.check();
    bool warned = false;
    for (const auto& w : report.warnings)
        if (w.find("degenerate") != std::string::npos) warned = true;
    EXPECT_TRUE(warned);
    for (Eigen::Index i = 0; i < model.memberships.rows(); ++i)
        EXPECT_NEAR(model.memberships.row(i).sum(), 1.0, 1e-9);
}

TEST(VemFit, HandlesMissingEntries) {
    auto [data, labels] = two_cluster_data(12);
    (void)labels;
    // Punch holes in a third of the entries.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& mask : data.mask)
        for (int s = 0; s < data.n_time(); ++s)
            if (u(rng) < 0.33) mask(0, s) = 0;

    VemConfig config;
    config.max_iters = 8;
    const auto [model, report] = vem_fit(data, 2, config);
    model.check();
    for (std::size_t i = 1; i < report.elbo_trace.size(); ++i)
        EXPECT_GE(report.elbo_trace[i], report.elbo_trace[i - 1] - 1e-6);
}

TEST(VemFit, RejectsBadInput) {
    const auto [data, labels] = two_cluster_data(2);
    (void)labels;
    TimeSeriesSet multi = TimeSeriesSet::zeros(3, 2, TimeGrid::range(0, 4));
    EXPECT_THROW(vem_fit(multi, 2), UnsupportedMultivariate);
    TimeSeriesSet empty;
    EXPECT_THROW(vem_fit(empty, 1), EmptyInput);
    EXPECT_THROW(vem_fit(data, 0), Error);
}

TEST(Predict, EmptyHistoryFallsBackToMixing) {
    const auto [data, labels] = two_cluster_data(2);
    (void)labels;
    VemConfig config;
    config.max_iters = 5;
    const auto [model, report] = vem_fit(data, 2, config);
    (void)report;

    const auto fc = predict(model, TimeGrid(), Eigen::VectorXd(), TimeGrid({0, 3}));
    EXPECT_EQ(fc.horizon(), 2);
    EXPECT_EQ(fc.n_dims(), 1);
    ASSERT_EQ(fc.cluster_probs.rows(), 2);
    for (int s = 0; s < 2; ++s) {
        EXPECT_NEAR(fc.cluster_probs(0, s), model.mixing[0], 1e-12);
        EXPECT_NEAR(fc.cluster_probs(1, s), model.mixing[1], 1e-12);
    }
    EXPECT_TRUE((fc.variance.array() > 0.0).all());
    EXPECT_TRUE((fc.upper95.array() >= fc.lower95.array()).all());
}

TEST(Predict, NearNoiselessHistoryIsInterpolated) {
    // K = 1 and a almost-noise-free process: predicting at an observed time
    // reproduces the observation.
    synth::MagmaSynthSpec spec;
    spec.n_individuals = 15;
    spec.n_clusters = 1;
    spec.n_time = 8;
    spec.indiv_kernel = {0.5, 2.0};
    spec.noise_var = 1e-8;
    spec.seed = 7;
    const auto [data, labels] = synth::generate_magma_data(spec);
    (void)labels;

    VemConfig config;
    config.max_iters = 10;
    const auto [model, report] = vem_fit(data, 1, config);
    (void)report;

    const Eigen::VectorXd series = data.values[0].row(0).transpose();
    const TimeGrid hist({0, 1, 2, 3, 4, 5});
    const auto fc = predict(model, hist, series.head(6), TimeGrid({2, 5}));
    EXPECT_NEAR(fc.mean(0, 0), series[2], 0.05);
    EXPECT_NEAR(fc.mean(0, 1), series[5], 0.05);
}

TEST(Predict, WeightsFavourTheMatchingCluster) {
    std::uint64_t seed = 2;
    TimeSeriesSet data = TimeSeriesSet::zeros(1, 1, TimeGrid::range(0, 1));
    PartitionLabels truth;
    for (; seed < 30; ++seed) {
        auto [d, l] = two_cluster_data(seed);
        if (cluster_gap(d, l) > 4.0) {
            data = std::move(d);
            truth = std::move(l);
            break;
        }
    }
    ASSERT_FALSE(truth.empty());

    VemConfig config;
    config.max_iters = 20;
    const auto [model, report] = vem_fit(data, 2, config);
    (void)report;
    const auto fitted = hard_labels(model);

    // A held-out-style history taken from a training individual should put
    // most of the posterior weight on that individual's fitted cluster.
    int agree = 0;
    for (int i = 0; i < data.n_individuals(); ++i) {
        const Eigen::VectorXd series = data.values[static_cast<std::size_t>(i)].row(0).transpose();
        const auto fc = predict(model, TimeGrid({0, 1, 2, 3}), series.head(4), TimeGrid({8}));
        int best = 0;
        fc.cluster_probs.col(0).maxCoeff(&best);
        if (best + 1 == fitted[static_cast<std::size_t>(i)]) ++agree;
    }
    EXPECT_GE(agree, data.n_individuals() * 4 / 5);
}

TEST(Predict, RejectsMismatchedHistory) {
    const auto [data, labels] = two_cluster_data(2);
    (void)labels;
    VemConfig config;
    config.max_iters = 3;
    const auto [model, report] = vem_fit(data, 2, config);
    (void)report;
    Eigen::VectorXd y(2);
    y << 0.0, 1.0;
    EXPECT_THROW(predict(model, TimeGrid({0, 1, 2}), y, TimeGrid({5})), DimensionMismatch);
}

TEST(AssignCluster, LabelsAreOneBasedAndBounded) {
    const auto [data, labels] = two_cluster_data(2);
    (void)labels;
    VemConfig config;
    config.max_iters = 5;
    const auto [model, report] = vem_fit(data, 2, config);
    (void)report;

    const auto [label, row] = assign_cluster(model, 0);
    EXPECT_GE(label, 1);
    EXPECT_LE(label, 2);
    EXPECT_NEAR(row.sum(), 1.0, 1e-9);
    EXPECT_THROW(assign_cluster(model, -1), IndexOutOfRange);
    EXPECT_THROW(assign_cluster(model, data.n_individuals()), IndexOutOfRange);

    const auto all = hard_labels(model);
    EXPECT_EQ(all.size(), static_cast<std::size_t>(data.n_individuals()));
    for (int lab : all) {
        EXPECT_GE(lab, 1);
        EXPECT_LE(lab, 2);
    }
}

TEST(Serialization, RoundTripPreservesPredictions) {
    const auto [data, labels] = two_cluster_data(14);
    (void)labels;
    VemConfig config;
    config.max_iters = 6;
    const auto [model, report] = vem_fit(data, 2, config);
    (void)report;

    namespace fs = std::filesystem;
    const fs::path dir = fs::path(::testing::TempDir()) /
                         ("cluscast_magma_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const std::string path = (dir / "model.json").string();
    save(model, path);
    const MagmaClustModel loaded = load(path);
    fs::remove_all(dir);

    loaded.check();
    EXPECT_EQ(loaded.n_clusters, model.n_clusters);
    EXPECT_EQ(loaded.individual_ids, model.individual_ids);
    EXPECT_LT((loaded.memberships - model.memberships).cwiseAbs().maxCoeff(), 1e-15);

    const Eigen::VectorXd series = data.values[3].row(0).transpose();
    const auto fa = predict(model, TimeGrid({0, 1, 2}), series.head(3), TimeGrid({7, 9}));
    const auto fb = predict(loaded, TimeGrid({0, 1, 2}), series.head(3), TimeGrid({7, 9}));
    EXPECT_LT((fa.mean - fb.mean).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((fa.variance - fb.variance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Serialization, LoadRejectsWrongTag) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(::testing::TempDir()) /
                         ("cluscast_magma_tag_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const std::string path = (dir / "other.json").string();
    {
        std::FILE* f = std::fopen(path.c_str(), "w");
        ASSERT_NE(f, nullptr);
        std::fputs("{\"model\": \"something_else\"}", f);
        std::fclose(f);
    }
    EXPECT_THROW(load(path), Error);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace cluscast::magmaclust
