#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cluscast/errors.hpp"

namespace cluscast {

/// Ordered set of integer time indices shared by all individuals of a dataset
/// (e.g. month index 1..T).
class TimeGrid {
public:
    TimeGrid() = default;

    explicit TimeGrid(std::vector<int> points) : points_(std::move(points)) {
        if (points_.empty()) throw Error("TimeGrid: empty grid");
        for (std::size_t i = 1; i < points_.size(); ++i) {
            if (points_[i] <= points_[i - 1])
                throw Error("TimeGrid: points must be strictly increasing");
        }
    }

    static TimeGrid range(int first, int count) {
        std::vector<int> p(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) p[static_cast<std::size_t>(i)] = first + i;
        return TimeGrid(std::move(p));
    }

    const std::vector<int>& points() const { return points_; }
    std::size_t size() const { return points_.size(); }
    int operator[](std::size_t i) const { return points_[i]; }
    bool empty() const { return points_.empty(); }

    /// Grid points as reals, the coordinates GP kernels operate on.
    Eigen::VectorXd as_real() const {
        Eigen::VectorXd v(static_cast<Eigen::Index>(points_.size()));
        for (std::size_t i = 0; i < points_.size(); ++i)
            v[static_cast<Eigen::Index>(i)] = static_cast<double>(points_[i]);
        return v;
    }

    bool operator==(const TimeGrid& o) const { return points_ == o.points_; }

private:
    std::vector<int> points_;
};

/// Dense (individuals x dims x time) panel with an observation mask.
/// values(i) is a d x T matrix; mask(i) marks which entries are observed.
struct TimeSeriesSet {
    TimeGrid grid;
    int n_dims = 0;
    std::vector<Eigen::MatrixXd> values;                      // one d x T matrix per individual
    std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>> mask;
    std::vector<std::string> individual_ids;                  // optional; filled by CSV/synth
    std::vector<std::string> dim_names;                       // optional

    int n_individuals() const { return static_cast<int>(values.size()); }
    int n_time() const { return static_cast<int>(grid.size()); }

    static TimeSeriesSet zeros(int m, int d, const TimeGrid& g) {
        TimeSeriesSet s;
        s.grid = g;
        s.n_dims = d;
        s.values.assign(static_cast<std::size_t>(m),
                        Eigen::MatrixXd::Zero(d, static_cast<Eigen::Index>(g.size())));
        s.mask.assign(static_cast<std::size_t>(m),
                      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(
                          d, static_cast<Eigen::Index>(g.size()), true));
        s.individual_ids.assign(static_cast<std::size_t>(m), std::string());
        s.dim_names.resize(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) s.dim_names[static_cast<std::size_t>(j)] = "x" + std::to_string(j);
        return s;
    }

    bool fully_observed() const {
        for (const auto& m : mask)
            if (!m.all()) return false;
        return true;
    }

    /// Shape and finiteness invariants; throws on violation.
    void check() const {
        if (values.size() != mask.size()) throw Error("TimeSeriesSet: values/mask size mismatch");
        const auto t = static_cast<Eigen::Index>(grid.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i].rows() != n_dims || values[i].cols() != t)
                throw Error("TimeSeriesSet: bad value shape");
            if (mask[i].rows() != n_dims || mask[i].cols() != t)
                throw Error("TimeSeriesSet: bad mask shape");
            for (int j = 0; j < n_dims; ++j)
                for (Eigen::Index c = 0; c < t; ++c)
                    if (mask[i](j, c) && !std::isfinite(values[i](j, c)))
                        throw Error("TimeSeriesSet: non-finite observed value");
        }
    }

    /// Subset of individuals, preserving order of `indices`.
    TimeSeriesSet select_individuals(const std::vector<int>& indices) const {
        TimeSeriesSet out;
        out.grid = grid;
        out.n_dims = n_dims;
        out.dim_names = dim_names;
        for (int i : indices) {
            if (i < 0 || i >= n_individuals()) throw IndexOutOfRange("select_individuals");
            out.values.push_back(values[static_cast<std::size_t>(i)]);
            out.mask.push_back(mask[static_cast<std::size_t>(i)]);
            if (!individual_ids.empty())
                out.individual_ids.push_back(individual_ids[static_cast<std::size_t>(i)]);
        }
        return out;
    }

    /// Single dimension as a univariate set.
    TimeSeriesSet select_dim(int dim) const {
        if (dim < 0 || dim >= n_dims) throw IndexOutOfRange("select_dim");
        TimeSeriesSet out;
        out.grid = grid;
        out.n_dims = 1;
        out.individual_ids = individual_ids;
        if (!dim_names.empty()) out.dim_names = {dim_names[static_cast<std::size_t>(dim)]};
        for (std::size_t i = 0; i < values.size(); ++i) {
            out.values.push_back(values[i].row(dim));
            out.mask.push_back(mask[i].row(dim));
        }
        return out;
    }
};

/// Per-dimension mean/std pair fitted on a training set.
struct StandardizationParams {
    Eigen::VectorXd mean;
    Eigen::VectorXd stddev;  // strictly positive

    int n_dims() const { return static_cast<int>(mean.size()); }
};

struct SplitSpec {
    int history_len = 0;
    int horizon_len = 0;
};

enum class DimKind { Bmi, SleepDurationMinutes };

/// Plausibility filter: BMI in [10, 65], sleep duration in [45, 1200] minutes.
inline bool validate_record(DimKind kind, double value) {
    switch (kind) {
        case DimKind::Bmi: return value >= 10.0 && value <= 65.0;
        case DimKind::SleepDurationMinutes: return value >= 45.0 && value <= 1200.0;
    }
    return false;
}

/// Per-dimension mean and unbiased standard deviation over observed entries.
inline StandardizationParams fit_standardizer(const TimeSeriesSet& train) {
    StandardizationParams p;
    p.mean.resize(train.n_dims);
    p.stddev.resize(train.n_dims);
    for (int j = 0; j < train.n_dims; ++j) {
        double sum = 0.0;
        long n = 0;
        for (std::size_t i = 0; i < train.values.size(); ++i)
            for (Eigen::Index t = 0; t < train.values[i].cols(); ++t)
                if (train.mask[i](j, t)) {
                    sum += train.values[i](j, t);
                    ++n;
                }
        if (n == 0) throw EmptyDimension("fit_standardizer: dimension " + std::to_string(j) +
                                         " has no observed values");
        const double mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < train.values.size(); ++i)
            for (Eigen::Index t = 0; t < train.values[i].cols(); ++t)
                if (train.mask[i](j, t)) {
                    const double r = train.values[i](j, t) - mean;
                    ss += r * r;
                }
        if (n < 2 || ss <= 0.0)
            throw ZeroVariance("fit_standardizer: dimension " + std::to_string(j) +
                               " has zero variance");
        p.mean[j] = mean;
        p.stddev[j] = std::sqrt(ss / static_cast<double>(n - 1));
    }
    return p;
}

inline TimeSeriesSet standardize(const TimeSeriesSet& data, const StandardizationParams& p) {
    if (p.n_dims() != data.n_dims)
        throw DimensionMismatch("standardize: params cover " + std::to_string(p.n_dims()) +
                                " dims, data has " + std::to_string(data.n_dims));
    TimeSeriesSet out = data;
    for (auto& v : out.values)
        for (int j = 0; j < out.n_dims; ++j)
            v.row(j) = (v.row(j).array() - p.mean[j]) / p.stddev[j];
    return out;
}

inline TimeSeriesSet destandardize(const TimeSeriesSet& data, const StandardizationParams& p) {
    if (p.n_dims() != data.n_dims)
        throw DimensionMismatch("destandardize: dimension count mismatch");
    TimeSeriesSet out = data;
    for (auto& v : out.values)
        for (int j = 0; j < out.n_dims; ++j)
            v.row(j) = v.row(j).array() * p.stddev[j] + p.mean[j];
    return out;
}

/// First history_len grid points and the next horizon_len, as two sets.
inline std::pair<TimeSeriesSet, TimeSeriesSet> split_history_horizon(const TimeSeriesSet& data,
                                                                     const SplitSpec& spec) {
    const int t = data.n_time();
    if (spec.history_len < 1 || spec.horizon_len < 1 ||
        spec.history_len + spec.horizon_len > t)
        throw SplitTooLong("split_history_horizon: history " + std::to_string(spec.history_len) +
                           " + horizon " + std::to_string(spec.horizon_len) +
                           " does not fit grid of length " + std::to_string(t));

    const auto& pts = data.grid.points();
    TimeGrid hist_grid(std::vector<int>(pts.begin(), pts.begin() + spec.history_len));
    TimeGrid hori_grid(std::vector<int>(pts.begin() + spec.history_len,
                                        pts.begin() + spec.history_len + spec.horizon_len));

    TimeSeriesSet hist, hori;
    hist.grid = hist_grid;
    hori.grid = hori_grid;
    hist.n_dims = hori.n_dims = data.n_dims;
    hist.individual_ids = hori.individual_ids = data.individual_ids;
    hist.dim_names = hori.dim_names = data.dim_names;
    for (std::size_t i = 0; i < data.values.size(); ++i) {
        hist.values.push_back(data.values[i].leftCols(spec.history_len));
        hist.mask.push_back(data.mask[i].leftCols(spec.history_len));
        hori.values.push_back(data.values[i].middleCols(spec.history_len, spec.horizon_len));
        hori.mask.push_back(data.mask[i].middleCols(spec.history_len, spec.horizon_len));
    }
    return {std::move(hist), std::move(hori)};
}

}  // namespace cluscast
