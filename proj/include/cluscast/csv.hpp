#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cluscast/cluster_types.hpp"
#include "cluscast/errors.hpp"
#include "cluscast/time_series.hpp"

namespace cluscast::csv {

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s, const std::string& context) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last)
        throw DataLoadError("could not parse number '" + s + "' in " + context);
    return v;
}

inline int parse_int(const std::string& s, const std::string& context) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw DataLoadError("could not parse integer '" + s + "' in " + context);
    return v;
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

/// Dimensions named after known health measurements get plausibility
/// filtering on ingestion; synthetic dimensions (x0, x1, ...) do not.
inline std::optional<DimKind> dim_kind_for_name(const std::string& name) {
    std::string lower(name.size(), '\0');
    std::transform(name.begin(), name.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "bmi") return DimKind::Bmi;
    if (lower == "sleep_duration_minutes" || lower == "sleep") return DimKind::SleepDurationMinutes;
    return std::nullopt;
}

}  // namespace detail

inline constexpr const char* kTimeSeriesHeader = "individual_id,dim_name,time_index,value";

inline void write_time_series(const std::string& path, const TimeSeriesSet& data) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << kTimeSeriesHeader << '\n';
    for (int i = 0; i < data.n_individuals(); ++i)
        for (int j = 0; j < data.n_dims; ++j)
            for (int s = 0; s < data.n_time(); ++s) {
                if (!data.mask[static_cast<std::size_t>(i)](j, s)) continue;
                out << data.individual_ids[static_cast<std::size_t>(i)] << ','
                    << data.dim_names[static_cast<std::size_t>(j)] << ','
                    << data.grid.points()[static_cast<std::size_t>(s)] << ','
                    << detail::format_double(data.values[static_cast<std::size_t>(i)](j, s)) << '\n';
            }
    if (!out) throw IoError("write failed for '" + path + "'");
}

/// Reads the one-row-per-observation format. Individuals and dimensions keep
/// first-appearance order; the grid is the sorted union of time indices;
/// entries absent from the file are masked out. Rows failing the plausibility
/// bounds of a recognized dimension are dropped (count reported on stderr).
inline TimeSeriesSet read_time_series(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataLoadError("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw DataLoadError("'" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kTimeSeriesHeader)
        throw DataLoadError("'" + path + "' must start with header '" +
                            std::string(kTimeSeriesHeader) + "'");

    struct Record {
        std::size_t individual, dim;
        int time;
        double value;
    };
    std::vector<Record> records;
    std::vector<std::string> ids, dims;
    std::map<std::string, std::size_t> id_index, dim_index;
    std::vector<int> time_points;
    int dropped = 0;
    std::size_t line_no = 1;

    auto intern = [](const std::string& key, std::vector<std::string>& names,
                     std::map<std::string, std::size_t>& index) {
        auto [it, inserted] = index.try_emplace(key, names.size());
        if (inserted) names.push_back(key);
        return it->second;
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string context = path + ":" + std::to_string(line_no);
        auto fields = detail::split_fields(line);
        if (fields.size() != 4)
            throw DataLoadError("expected 4 fields, got " + std::to_string(fields.size()) +
                                " in " + context);
        const double value = detail::parse_double(fields[3], context);
        if (!std::isfinite(value)) throw DataLoadError("non-finite value in " + context);
        if (auto kind = detail::dim_kind_for_name(fields[1]);
            kind && !validate_record(*kind, value)) {
            ++dropped;
            continue;
        }
        Record r;
        r.individual = intern(fields[0], ids, id_index);
        r.dim = intern(fields[1], dims, dim_index);
        r.time = detail::parse_int(fields[2], context);
        r.value = value;
        records.push_back(r);
        time_points.push_back(r.time);
    }
    if (dropped > 0)
        std::cerr << "read_time_series: dropped " << dropped
                  << " out-of-range row(s) from '" << path << "'\n";
    if (records.empty()) throw DataLoadError("'" + path + "' contains no usable rows");

    std::sort(time_points.begin(), time_points.end());
    time_points.erase(std::unique(time_points.begin(), time_points.end()), time_points.end());
    std::map<int, int> time_index;
    for (std::size_t s = 0; s < time_points.size(); ++s)
        time_index[time_points[s]] = static_cast<int>(s);

    TimeSeriesSet data = TimeSeriesSet::zeros(static_cast<int>(ids.size()),
                                              static_cast<int>(dims.size()),
                                              TimeGrid(time_points));
    data.individual_ids = ids;
    data.dim_names = dims;
    for (auto& m : data.mask) m.setConstant(false);

    for (const auto& r : records) {
        const int s = time_index.at(r.time);
        auto& mask = data.mask[r.individual];
        if (mask(static_cast<Eigen::Index>(r.dim), s))
            throw DataLoadError("duplicate entry for (" + ids[r.individual] + ", " +
                                dims[r.dim] + ", " + std::to_string(r.time) + ") in '" +
                                path + "'");
        mask(static_cast<Eigen::Index>(r.dim), s) = true;
        data.values[r.individual](static_cast<Eigen::Index>(r.dim), s) = r.value;
    }
    return data;
}

/// Ground-truth static cluster labels, one row per individual.
inline void write_partition(const std::string& path, const std::vector<std::string>& ids,
                            const PartitionLabels& labels) {
    if (ids.size() != labels.size())
        throw LengthMismatch("write_partition: ids and labels differ in length");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "individual_id,label\n";
    for (std::size_t i = 0; i < ids.size(); ++i)
        out << ids[i] << ',' << labels[i] << '\n';
    if (!out) throw IoError("write failed for '" + path + "'");
}

/// Ground-truth per-timestep labels with their probability vectors.
inline void write_trajectories(const std::string& path, const std::vector<std::string>& ids,
                               const TimeGrid& grid,
                               const std::vector<ClusterTrajectory>& trajectories) {
    if (ids.size() != trajectories.size())
        throw LengthMismatch("write_trajectories: ids and trajectories differ in length");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    const int k = trajectories.empty() || trajectories[0].probs.empty()
                      ? 0
                      : static_cast<int>(trajectories[0].probs[0].size());
    out << "individual_id,time_index,label";
    for (int c = 1; c <= k; ++c) out << ",prob_" << c;
    out << '\n';
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& traj = trajectories[i];
        if (traj.size() != grid.size())
            throw LengthMismatch("write_trajectories: trajectory length != grid length");
        for (std::size_t s = 0; s < traj.labels.size(); ++s) {
            out << ids[i] << ',' << grid.points()[s] << ',' << traj.labels[s];
            for (int c = 0; c < k; ++c)
                out << ',' << detail::format_double(traj.probs[s][c]);
            out << '\n';
        }
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace cluscast::csv
