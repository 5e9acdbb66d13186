#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cluscast/csv.hpp"
#include "cluscast/dgm2.hpp"
#include "cluscast/errors.hpp"
#include "cluscast/magmaclust.hpp"
#include "cluscast/math_util.hpp"
#include "cluscast/metrics.hpp"
#include "cluscast/synth.hpp"
#include "cluscast/time_series.hpp"

namespace cluscast::bench {

/// Experiment description parsed from a `key = value` text file (# comments).
/// Defaults follow the benchmark protocol: 10-step history, 2-step horizon,
/// 30% test individuals capped at 18, standardized-scale metrics.
struct ExperimentConfig {
    std::string dataset;  // "<path>.csv" | "synth:magma" | "synth:dgm2"
    std::string out_dir = "bench_out";
    std::uint64_t seed = 1;
    std::vector<std::string> models = {"magmaclust", "dgm2", "last_value", "mean", "median"};
    std::vector<int> k_list = {3};
    std::vector<int> k1_list, k2_list;  // compare-multi pairs; k_multi = k1*k2
    SplitSpec split{10, 2};
    double gamma = 0.5;  // DGM2 mixture blend
    int epochs = 200;
    int dgm2_hidden = 16;
    int dgm2_batch = 32;
    double dgm2_learning_rate = 1e-2;
    int dgm2_kl_warmup = 20;
    int vem_max_iters = 50;
    double test_fraction = 0.3;
    int test_cap = 18;
    bool raw_scale = false;  // report metrics on the original scale
    // synth:* dataset knobs
    int synth_m = 60;
    int synth_k = 3;
    int synth_t = 12;
    int synth_d = 1;
    double synth_noise_var = 0.04;     // magma observation noise
    double synth_emission_var = 1.0;   // dgm2 emission variance
    double synth_stickiness = 0.9;     // dgm2 transition stickiness
    double synth_gamma = 0.2;          // dgm2 generative blend
    bool synth_independent_dims = false;  // d=2 from two independent generators
};

struct BenchRow {
    std::string model;
    int k = 0;             // 0 for baselines
    int k1 = 0, k2 = 0;    // set on combined-univariate rows
    Eigen::VectorXd rmse_per_dim, mae_per_dim;
    double rmse_avg = std::numeric_limits<double>::quiet_NaN();
    double mae_avg = std::numeric_limits<double>::quiet_NaN();
    double fit_seconds = 0.0;
    std::string status = "ok";  // "ok" or the error message
};

struct AriEntry {
    int k_multi = 0, k1 = 0, k2 = 0;
    std::vector<double> per_timestep;
    double mean_ari = std::numeric_limits<double>::quiet_NaN();
};

struct BenchmarkReport {
    std::string scale = "standardized";  // or "raw"
    std::vector<std::string> dim_names;
    std::vector<BenchRow> rows;
    std::vector<AriEntry> ari;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

inline int config_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigInvalid("config: key '" + key + "' expects an integer, got '" + value + "'");
    }
}

inline double config_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigInvalid("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

inline std::uint64_t config_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigInvalid("config: key '" + key + "' expects an unsigned integer, got '" +
                            value + "'");
    }
}

inline bool config_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigInvalid("config: key '" + key + "' expects true/false, got '" + value + "'");
}

inline std::vector<std::string> config_list(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::vector<int> config_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (const auto& item : config_list(value)) out.push_back(config_int(key, item));
    return out;
}

}  // namespace detail

/// Parses the key=value config format. Blank lines and lines starting with
/// '#' are skipped; unknown keys are rejected.
inline ExperimentConfig parse_config_text(const std::string& text) {
    static const std::set<std::string> known = {
        "dataset",       "out_dir",          "seed",
        "models",        "k_list",           "k1_list",
        "k2_list",       "split.history",    "split.horizon",
        "gamma",         "epochs",           "dgm2.hidden",
        "dgm2.batch",    "dgm2.learning_rate",
        "dgm2.kl_warmup",
        "vem.max_iters", "test.fraction",    "test.cap",
        "report.scale",  "synth.m",          "synth.k",
        "synth.t",       "synth.d",          "synth.noise_var",
        "synth.emission_var", "synth.stickiness", "synth.gamma",
        "synth.independent_dims"};
    static const std::set<std::string> model_names = {"magmaclust", "dgm2", "last_value", "mean",
                                                      "median"};

    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigInvalid("config line " + std::to_string(line_no) +
                                ": expected 'key = value', got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (known.find(key) == known.end())
            throw ConfigInvalid("config line " + std::to_string(line_no) + ": unknown key '" +
                                key + "'");

        if (key == "dataset") cfg.dataset = value;
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "seed") cfg.seed = detail::config_u64(key, value);
        else if (key == "models") cfg.models = detail::config_list(value);
        else if (key == "k_list") cfg.k_list = detail::config_int_list(key, value);
        else if (key == "k1_list") cfg.k1_list = detail::config_int_list(key, value);
        else if (key == "k2_list") cfg.k2_list = detail::config_int_list(key, value);
        else if (key == "split.history") cfg.split.history_len = detail::config_int(key, value);
        else if (key == "split.horizon") cfg.split.horizon_len = detail::config_int(key, value);
        else if (key == "gamma") cfg.gamma = detail::config_double(key, value);
        else if (key == "epochs") cfg.epochs = detail::config_int(key, value);
        else if (key == "dgm2.hidden") cfg.dgm2_hidden = detail::config_int(key, value);
        else if (key == "dgm2.batch") cfg.dgm2_batch = detail::config_int(key, value);
        else if (key == "dgm2.learning_rate") cfg.dgm2_learning_rate = detail::config_double(key, value);
        else if (key == "dgm2.kl_warmup") cfg.dgm2_kl_warmup = detail::config_int(key, value);
        else if (key == "vem.max_iters") cfg.vem_max_iters = detail::config_int(key, value);
        else if (key == "test.fraction") cfg.test_fraction = detail::config_double(key, value);
        else if (key == "test.cap") cfg.test_cap = detail::config_int(key, value);
        else if (key == "report.scale") {
            if (value == "standardized") cfg.raw_scale = false;
            else if (value == "raw") cfg.raw_scale = true;
            else throw ConfigInvalid("config: report.scale must be 'standardized' or 'raw'");
        } else if (key == "synth.m") cfg.synth_m = detail::config_int(key, value);
        else if (key == "synth.k") cfg.synth_k = detail::config_int(key, value);
        else if (key == "synth.t") cfg.synth_t = detail::config_int(key, value);
        else if (key == "synth.d") cfg.synth_d = detail::config_int(key, value);
        else if (key == "synth.noise_var") cfg.synth_noise_var = detail::config_double(key, value);
        else if (key == "synth.emission_var") cfg.synth_emission_var = detail::config_double(key, value);
        else if (key == "synth.stickiness") cfg.synth_stickiness = detail::config_double(key, value);
        else if (key == "synth.gamma") cfg.synth_gamma = detail::config_double(key, value);
        else if (key == "synth.independent_dims") cfg.synth_independent_dims = detail::config_bool(key, value);
    }

    if (cfg.dataset.empty()) throw ConfigInvalid("config: missing required key 'dataset'");
    if (cfg.models.empty()) throw ConfigInvalid("config: zero models configured");
    for (const auto& m : cfg.models)
        if (model_names.find(m) == model_names.end())
            throw ConfigInvalid("config: unknown model '" + m + "'");
    if (cfg.k_list.empty()) throw ConfigInvalid("config: k_list must be non-empty");
    for (int k : cfg.k_list)
        if (k < 1) throw ConfigInvalid("config: k_list entries must be >= 1");
    for (int k : cfg.k1_list)
        if (k < 1) throw ConfigInvalid("config: k1_list entries must be >= 1");
    for (int k : cfg.k2_list)
        if (k < 1) throw ConfigInvalid("config: k2_list entries must be >= 1");
    if (cfg.k1_list.size() != cfg.k2_list.size())
        throw ConfigInvalid("config: k1_list and k2_list must have the same length");
    if (cfg.split.history_len < 1 || cfg.split.horizon_len < 1)
        throw ConfigInvalid("config: split.history and split.horizon must be >= 1");
    if (cfg.gamma < 0.0 || cfg.gamma > 1.0)
        throw ConfigInvalid("config: gamma must lie in [0,1]");
    if (cfg.epochs < 1) throw ConfigInvalid("config: epochs must be >= 1");
    if (cfg.dgm2_hidden < 1 || cfg.dgm2_batch < 1 || cfg.dgm2_learning_rate <= 0.0)
        throw ConfigInvalid("config: dgm2.* settings must be positive");
    if (cfg.dgm2_kl_warmup < 0) throw ConfigInvalid("config: dgm2.kl_warmup must be >= 0");
    if (cfg.vem_max_iters < 1) throw ConfigInvalid("config: vem.max_iters must be >= 1");
    if (cfg.test_fraction <= 0.0 || cfg.test_fraction >= 1.0)
        throw ConfigInvalid("config: test.fraction must lie in (0,1)");
    if (cfg.test_cap < 1) throw ConfigInvalid("config: test.cap must be >= 1");
    if (cfg.synth_m < 2 || cfg.synth_k < 1 || cfg.synth_t < 2 || cfg.synth_d < 1)
        throw ConfigInvalid("config: synth.* counts out of range");
    if (cfg.synth_gamma < 0.0 || cfg.synth_gamma > 1.0 || cfg.synth_stickiness < 0.0 ||
        cfg.synth_stickiness > 1.0)
        throw ConfigInvalid("config: synth.gamma and synth.stickiness must lie in [0,1]");
    if (cfg.synth_noise_var < 0.0 || cfg.synth_emission_var <= 0.0)
        throw ConfigInvalid("config: synth variances out of range");
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigInvalid("config: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

/// Loads the configured dataset: a CSV path, or a seeded synthetic set. The
/// generator seed is derived from the master seed (stream 0).
inline TimeSeriesSet load_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset == "synth:magma") {
        synth::MagmaSynthSpec spec;
        spec.n_individuals = cfg.synth_m;
        spec.n_clusters = cfg.synth_k;
        spec.n_time = cfg.synth_t;
        spec.noise_var = cfg.synth_noise_var;
        spec.seed = derive_seed(cfg.seed, 0);
        return synth::generate_magma_data(spec).first;
    }
    if (cfg.dataset == "synth:dgm2") {
        synth::Dgm2SynthSpec spec;
        spec.n_individuals = cfg.synth_m;
        spec.n_clusters = cfg.synth_k;
        spec.n_time = cfg.synth_t;
        spec.emission_var = cfg.synth_emission_var;
        spec.stickiness = cfg.synth_stickiness;
        spec.gamma = cfg.synth_gamma;
        if (cfg.synth_independent_dims) {
            if (cfg.synth_d != 2)
                throw ConfigInvalid("config: synth.independent_dims requires synth.d = 2");
            const std::uint64_t base = derive_seed(cfg.seed, 0);
            spec.n_dims = 1;
            spec.seed = derive_seed(base, 0);
            TimeSeriesSet a = synth::generate_dgm2_data(spec).first;
            spec.seed = derive_seed(base, 1);
            TimeSeriesSet b = synth::generate_dgm2_data(spec).first;
            return synth::merge_dims(a, b);
        }
        spec.n_dims = cfg.synth_d;
        spec.seed = derive_seed(cfg.seed, 0);
        return synth::generate_dgm2_data(spec).first;
    }
    if (cfg.dataset.rfind("synth:", 0) == 0)
        throw ConfigInvalid("config: unknown synthetic dataset '" + cfg.dataset + "'");
    return csv::read_time_series(cfg.dataset);
}

namespace detail {

/// Per-dim mean/sd over observed training entries; constant dimensions pass
/// through unscaled (sd = 1) so degenerate datasets remain usable.
inline StandardizationParams tolerant_standardizer(const TimeSeriesSet& train) {
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
        if (n == 0)
            throw DataLoadError("dimension " + std::to_string(j) + " has no observed values");
        const double mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < train.values.size(); ++i)
            for (Eigen::Index t = 0; t < train.values[i].cols(); ++t)
                if (train.mask[i](j, t)) {
                    const double r = train.values[i](j, t) - mean;
                    ss += r * r;
                }
        p.mean[j] = mean;
        p.stddev[j] = (n < 2 || ss <= 0.0) ? 1.0 : std::sqrt(ss / static_cast<double>(n - 1));
    }
    return p;
}

/// Shared setup: load, hold out the test subset, standardize on training
/// statistics, split test histories from horizons.
struct Prepared {
    TimeSeriesSet data;  // full raw dataset
    std::vector<int> train_idx, test_idx;
    StandardizationParams params;
    TimeSeriesSet train_std;             // training individuals, full grid
    TimeSeriesSet hist_std, hori_std;    // test individuals, standardized
    TimeSeriesSet hist_raw, hori_raw;    // test individuals, original scale
    std::vector<std::string> dim_names;
};

inline Prepared prepare(const ExperimentConfig& cfg) {
    Prepared prep;
    prep.data = load_dataset(cfg);
    prep.data.check();
    const int m = prep.data.n_individuals();
    const int t = prep.data.n_time();
    if (cfg.split.history_len + cfg.split.horizon_len > t)
        throw ConfigInvalid("config: split.history + split.horizon = " +
                            std::to_string(cfg.split.history_len + cfg.split.horizon_len) +
                            " exceeds the grid length " + std::to_string(t));

    const int test_count = std::min(static_cast<int>(std::floor(cfg.test_fraction * m)),
                                    cfg.test_cap);
    if (test_count < 1)
        throw ConfigInvalid("config: test split is empty (" + std::to_string(m) +
                            " individuals at fraction " + std::to_string(cfg.test_fraction) + ")");
    if (m - test_count < 1) throw ConfigInvalid("config: training split is empty");

    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, 1));
    std::shuffle(order.begin(), order.end(), rng);
    prep.test_idx.assign(order.begin(), order.begin() + test_count);
    prep.train_idx.assign(order.begin() + test_count, order.end());
    std::sort(prep.test_idx.begin(), prep.test_idx.end());
    std::sort(prep.train_idx.begin(), prep.train_idx.end());

    const TimeSeriesSet train_raw = prep.data.select_individuals(prep.train_idx);
    const TimeSeriesSet test_raw = prep.data.select_individuals(prep.test_idx);
    prep.params = tolerant_standardizer(train_raw);
    prep.train_std = standardize(train_raw, prep.params);
    const TimeSeriesSet test_std = standardize(test_raw, prep.params);
    std::tie(prep.hist_std, prep.hori_std) = split_history_horizon(test_std, cfg.split);
    std::tie(prep.hist_raw, prep.hori_raw) = split_history_horizon(test_raw, cfg.split);

    prep.dim_names = prep.data.dim_names;
    if (prep.dim_names.empty())
        for (int j = 0; j < prep.data.n_dims; ++j) prep.dim_names.push_back("x" + std::to_string(j));
    return prep;
}

/// Pooled per-dimension RMSE/MAE over every observed horizon entry of the
/// test individuals. preds[i] is a d x horizon matrix on the standardized
/// scale; raw-scale reporting destandardizes both sides first.
inline void fill_metrics(BenchRow& row, const std::vector<Eigen::MatrixXd>& preds,
                         const Prepared& prep, bool raw_scale) {
    const auto& truth = raw_scale ? prep.hori_raw : prep.hori_std;
    const int d = truth.n_dims;
    row.rmse_per_dim.resize(d);
    row.mae_per_dim.resize(d);
    for (int j = 0; j < d; ++j) {
        std::vector<double> pv, tv;
        for (std::size_t i = 0; i < preds.size(); ++i)
            for (Eigen::Index s = 0; s < truth.values[i].cols(); ++s)
                if (truth.mask[i](j, s)) {
                    double pred = preds[i](j, s);
                    if (raw_scale) pred = pred * prep.params.stddev[j] + prep.params.mean[j];
                    pv.push_back(pred);
                    tv.push_back(truth.values[i](j, s));
                }
        if (pv.empty()) throw EmptyInput("metrics: no observed horizon values for dimension " +
                                         std::to_string(j));
        const Eigen::Map<Eigen::VectorXd> pm(pv.data(), static_cast<Eigen::Index>(pv.size()));
        const Eigen::Map<Eigen::VectorXd> tm(tv.data(), static_cast<Eigen::Index>(tv.size()));
        row.rmse_per_dim[j] = rmse(pm, tm);
        row.mae_per_dim[j] = mae(pm, tm);
    }
    row.rmse_avg = row.rmse_per_dim.mean();
    row.mae_avg = row.mae_per_dim.mean();
}

/// Observed history of one test individual in one dimension, as the
/// (grid, values) pair the GP-based model consumes.
inline std::pair<TimeGrid, Eigen::VectorXd> observed_history(const TimeSeriesSet& hist, int i,
                                                             int dim) {
    std::vector<int> pts;
    std::vector<double> vals;
    const auto ii = static_cast<std::size_t>(i);
    for (Eigen::Index s = 0; s < hist.values[ii].cols(); ++s)
        if (hist.mask[ii](dim, s)) {
            pts.push_back(hist.grid[static_cast<std::size_t>(s)]);
            vals.push_back(hist.values[ii](dim, s));
        }
    Eigen::VectorXd v = Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    if (pts.empty()) return {TimeGrid(), std::move(v)};
    return {TimeGrid(std::move(pts)), std::move(v)};
}

inline NaivePredictorKind naive_kind(const std::string& name) {
    if (name == "last_value") return NaivePredictorKind::LastValue;
    if (name == "mean") return NaivePredictorKind::Mean;
    return NaivePredictorKind::Median;
}

/// Predictions of one naive baseline for every test individual (per dim,
/// from the observed standardized history).
inline std::vector<Eigen::MatrixXd> naive_predictions(NaivePredictorKind kind,
                                                      const Prepared& prep, int horizon) {
    std::vector<Eigen::MatrixXd> preds;
    const int d = prep.hist_std.n_dims;
    for (int i = 0; i < prep.hist_std.n_individuals(); ++i) {
        Eigen::MatrixXd p(d, horizon);
        for (int j = 0; j < d; ++j) {
            auto [grid, vals] = observed_history(prep.hist_std, i, j);
            p.row(j) = naive_predict(kind, vals, horizon).transpose();
        }
        preds.push_back(std::move(p));
    }
    return preds;
}

inline std::vector<Eigen::MatrixXd> magmaclust_predictions(const magmaclust::MagmaClustModel& model,
                                                           const Prepared& prep) {
    std::vector<Eigen::MatrixXd> preds;
    const auto horizon = static_cast<Eigen::Index>(prep.hori_std.grid.size());
    for (int i = 0; i < prep.hist_std.n_individuals(); ++i) {
        auto [grid, vals] = observed_history(prep.hist_std, i, 0);
        const auto fc = magmaclust::predict(model, grid, vals, prep.hori_std.grid);
        Eigen::MatrixXd p(1, horizon);
        p.row(0) = fc.mean.row(0);
        preds.push_back(std::move(p));
    }
    return preds;
}

inline std::vector<Eigen::MatrixXd> dgm2_predictions(const dgm2::Dgm2Model& model,
                                                     const TimeSeriesSet& hist, int horizon) {
    std::vector<Eigen::MatrixXd> preds;
    for (int i = 0; i < hist.n_individuals(); ++i) {
        if (!hist.mask[static_cast<std::size_t>(i)].all())
            throw IncompleteSeries("dgm2 forecasting requires complete test histories");
        const auto fc = dgm2::forecast(model, hist.values[static_cast<std::size_t>(i)], horizon,
                                       dgm2::ForecastMode::Soft);
        preds.push_back(fc.mean);
    }
    return preds;
}

inline dgm2::Dgm2Config dgm2_config(const ExperimentConfig& cfg, std::uint64_t row_seed) {
    dgm2::Dgm2Config c;
    c.hidden = cfg.dgm2_hidden;
    c.learning_rate = cfg.dgm2_learning_rate;
    c.batch_size = cfg.dgm2_batch;
    c.epochs = cfg.epochs;
    c.gamma = cfg.gamma;
    c.kl_warmup_epochs = cfg.dgm2_kl_warmup;
    c.seed = row_seed;
    return c;
}

}  // namespace detail

/// K-sweep benchmark: fits every requested model on the training individuals'
/// full series and scores horizon forecasts for the held-out individuals.
/// Row seeds derive from the master seed (streams 2, 3, ...); a failing row
/// records its error without aborting the sweep.
inline BenchmarkReport run_experiment(const ExperimentConfig& cfg) {
    const auto prep = detail::prepare(cfg);
    const int horizon = cfg.split.horizon_len;

    BenchmarkReport report;
    report.scale = cfg.raw_scale ? "raw" : "standardized";
    report.dim_names = prep.dim_names;

    int row_index = 0;
    for (const auto& model_name : cfg.models) {
        const bool is_naive =
            model_name == "last_value" || model_name == "mean" || model_name == "median";
        const std::vector<int> ks = is_naive ? std::vector<int>{0} : cfg.k_list;
        for (int k : ks) {
            BenchRow row;
            row.model = model_name;
            row.k = k;
            const std::uint64_t row_seed = derive_seed(cfg.seed, 2 + row_index);
            ++row_index;
            try {
                std::vector<Eigen::MatrixXd> preds;
                if (is_naive) {
                    preds = detail::naive_predictions(detail::naive_kind(model_name), prep, horizon);
                    row.fit_seconds = 0.0;
                } else if (model_name == "magmaclust") {
                    magmaclust::VemConfig vc;
                    vc.max_iters = cfg.vem_max_iters;
                    vc.seed = row_seed;
                    auto [model, fit] = magmaclust::vem_fit(prep.train_std, k, vc);
                    row.fit_seconds = fit.wall_clock_seconds;
                    preds = detail::magmaclust_predictions(model, prep);
                } else {  // dgm2
                    auto [model, fit] =
                        dgm2::train(prep.train_std, k, detail::dgm2_config(cfg, row_seed));
                    row.fit_seconds = fit.wall_clock_seconds;
                    preds = detail::dgm2_predictions(model, prep.hist_std, horizon);
                }
                detail::fill_metrics(row, preds, prep, cfg.raw_scale);
            } catch (const Error& e) {
                row.status = e.what();
            }
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

/// Multivariate-vs-combined-univariate study on a 2-dimensional dataset: for
/// each (k1, k2) pair, one multivariate DGM2 with k = k1*k2 clusters against
/// two univariate DGM2 runs whose per-timestep labels are paired into the
/// product partition (l1-1)*k2 + l2; reports both rows' metrics plus the
/// per-timestep and mean ARI between the two partitions of all individuals.
inline BenchmarkReport run_multivariate_comparison(const ExperimentConfig& cfg) {
    if (cfg.k1_list.empty())
        throw ConfigInvalid("compare-multi: k1_list and k2_list must be provided");
    const auto prep = detail::prepare(cfg);
    if (prep.data.n_dims != 2)
        throw ConfigInvalid("compare-multi: dataset must have exactly 2 dimensions, got " +
                            std::to_string(prep.data.n_dims));
    if (!prep.data.fully_observed())
        throw ConfigInvalid("compare-multi: dataset must have a complete grid");
    const int horizon = cfg.split.horizon_len;
    const TimeSeriesSet all_std = standardize(prep.data, prep.params);

    BenchmarkReport report;
    report.scale = cfg.raw_scale ? "raw" : "standardized";
    report.dim_names = prep.dim_names;

    int row_index = 0;
    for (std::size_t pair = 0; pair < cfg.k1_list.size(); ++pair) {
        const int k1 = cfg.k1_list[pair], k2 = cfg.k2_list[pair];
        const int k_multi = k1 * k2;

        BenchRow multi_row;
        multi_row.model = "dgm2_multi";
        multi_row.k = k_multi;
        bool multi_ok = false;
        dgm2::Dgm2Model multi_model;
        {
            const std::uint64_t row_seed = derive_seed(cfg.seed, 2 + row_index);
            ++row_index;
            try {
                auto [model, fit] =
                    dgm2::train(prep.train_std, k_multi, detail::dgm2_config(cfg, row_seed));
                multi_row.fit_seconds = fit.wall_clock_seconds;
                const auto preds = detail::dgm2_predictions(model, prep.hist_std, horizon);
                detail::fill_metrics(multi_row, preds, prep, cfg.raw_scale);
                multi_model = std::move(model);
                multi_ok = true;
            } catch (const Error& e) {
                multi_row.status = e.what();
            }
        }
        report.rows.push_back(std::move(multi_row));

        BenchRow comb_row;
        comb_row.model = "dgm2_combined";
        comb_row.k = k_multi;
        comb_row.k1 = k1;
        comb_row.k2 = k2;
        bool comb_ok = false;
        dgm2::Dgm2Model uni0, uni1;
        {
            const std::uint64_t row_seed = derive_seed(cfg.seed, 2 + row_index);
            ++row_index;
            try {
                const TimeSeriesSet train0 = prep.train_std.select_dim(0);
                const TimeSeriesSet train1 = prep.train_std.select_dim(1);
                auto [m0, fit0] =
                    dgm2::train(train0, k1, detail::dgm2_config(cfg, derive_seed(row_seed, 0)));
                auto [m1, fit1] =
                    dgm2::train(train1, k2, detail::dgm2_config(cfg, derive_seed(row_seed, 1)));
                comb_row.fit_seconds = fit0.wall_clock_seconds + fit1.wall_clock_seconds;
                const auto preds0 =
                    detail::dgm2_predictions(m0, prep.hist_std.select_dim(0), horizon);
                const auto preds1 =
                    detail::dgm2_predictions(m1, prep.hist_std.select_dim(1), horizon);
                std::vector<Eigen::MatrixXd> preds;
                for (std::size_t i = 0; i < preds0.size(); ++i) {
                    Eigen::MatrixXd p(2, horizon);
                    p.row(0) = preds0[i].row(0);
                    p.row(1) = preds1[i].row(0);
                    preds.push_back(std::move(p));
                }
                detail::fill_metrics(comb_row, preds, prep, cfg.raw_scale);
                uni0 = std::move(m0);
                uni1 = std::move(m1);
                comb_ok = true;
            } catch (const Error& e) {
                comb_row.status = e.what();
            }
        }
        report.rows.push_back(std::move(comb_row));

        if (multi_ok && comb_ok) {
            AriEntry entry;
            entry.k_multi = k_multi;
            entry.k1 = k1;
            entry.k2 = k2;
            const int t_len = all_std.n_time();
            std::vector<ClusterTrajectory> multi_traj, product_traj;
            for (int i = 0; i < all_std.n_individuals(); ++i) {
                const auto& series = all_std.values[static_cast<std::size_t>(i)];
                multi_traj.push_back(dgm2::cluster_trajectory(multi_model, series));
                const auto t0 = dgm2::cluster_trajectory(uni0, series.row(0));
                const auto t1 = dgm2::cluster_trajectory(uni1, series.row(1));
                ClusterTrajectory product;
                for (int s = 0; s < t_len; ++s) {
                    const auto si = static_cast<std::size_t>(s);
                    product.labels.push_back((t0.labels[si] - 1) * k2 + t1.labels[si]);
                }
                product_traj.push_back(std::move(product));
            }
            double sum = 0.0;
            for (int s = 0; s < t_len; ++s) {
                const double a = ari(per_timestep_partition(multi_traj, s),
                                     per_timestep_partition(product_traj, s));
                entry.per_timestep.push_back(a);
                sum += a;
            }
            entry.mean_ari = sum / static_cast<double>(t_len);
            report.ari.push_back(std::move(entry));
        }
    }
    return report;
}

namespace detail {

inline std::string format_metric(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline std::string format_seconds(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

inline std::string sanitize_status(std::string s) {
    for (auto& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}

}  // namespace detail

enum class ReportFormat { Csv, Markdown };

/// Writes metrics.(csv|md) and, when partition comparisons exist,
/// ari.(csv|md) under out_dir. File content is deterministic except for the
/// wall-clock fit_seconds column. ARI rows with time_index -1 hold the mean
/// over timesteps.
inline std::vector<std::string> emit_report(const BenchmarkReport& report,
                                            const std::string& out_dir, ReportFormat format) {
    if (report.rows.empty()) throw ConfigInvalid("emit_report: report has no rows");
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> written;

    auto open = [](const std::string& path) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("emit_report: cannot write '" + path + "'");
        return out;
    };

    if (format == ReportFormat::Csv) {
        const std::string metrics_path = out_dir + "/metrics.csv";
        std::ofstream out = open(metrics_path);
        out << "# scale: " << report.scale << "\n";
        out << "model,k,k1,k2";
        for (const auto& d : report.dim_names) out << ",rmse_" << d;
        for (const auto& d : report.dim_names) out << ",mae_" << d;
        out << ",rmse_avg,mae_avg,fit_seconds,status\n";
        for (const auto& row : report.rows) {
            out << row.model << ',' << row.k << ',' << row.k1 << ',' << row.k2;
            for (std::size_t j = 0; j < report.dim_names.size(); ++j)
                out << ','
                    << detail::format_metric(row.rmse_per_dim.size() ? row.rmse_per_dim[static_cast<Eigen::Index>(j)]
                                                                     : std::numeric_limits<double>::quiet_NaN());
            for (std::size_t j = 0; j < report.dim_names.size(); ++j)
                out << ','
                    << detail::format_metric(row.mae_per_dim.size() ? row.mae_per_dim[static_cast<Eigen::Index>(j)]
                                                                    : std::numeric_limits<double>::quiet_NaN());
            out << ',' << detail::format_metric(row.rmse_avg) << ','
                << detail::format_metric(row.mae_avg) << ','
                << detail::format_seconds(row.fit_seconds) << ','
                << detail::sanitize_status(row.status) << "\n";
        }
        written.push_back(metrics_path);

        if (!report.ari.empty()) {
            const std::string ari_path = out_dir + "/ari.csv";
            std::ofstream aout = open(ari_path);
            aout << "k_multi,k1,k2,time_index,ari\n";
            for (const auto& entry : report.ari) {
                for (std::size_t s = 0; s < entry.per_timestep.size(); ++s)
                    aout << entry.k_multi << ',' << entry.k1 << ',' << entry.k2 << ',' << s << ','
                         << detail::format_metric(entry.per_timestep[s]) << "\n";
                aout << entry.k_multi << ',' << entry.k1 << ',' << entry.k2 << ",-1,"
                     << detail::format_metric(entry.mean_ari) << "\n";
            }
            written.push_back(ari_path);
        }
        return written;
    }

    const std::string md_path = out_dir + "/metrics.md";
    std::ofstream out = open(md_path);
    out << "# Benchmark metrics\n\n";
    out << "Scale: " << report.scale
        << (report.scale == "standardized"
                ? " (metrics on z-scored values fitted on the training individuals)"
                : " (metrics on the original measurement scale)")
        << "\n\n";
    out << "| model | K | RMSE | MAE | time (s) |\n";
    out << "|---|---|---|---|---|\n";
    for (const auto& row : report.rows) {
        std::string kcol = row.k == 0 ? "-" : std::to_string(row.k);
        if (row.k1 > 0)
            kcol += " (" + std::to_string(row.k1) + "x" + std::to_string(row.k2) + ")";
        out << "| " << row.model << " | " << kcol << " | ";
        if (row.status == "ok")
            out << detail::format_metric(row.rmse_avg) << " | " << detail::format_metric(row.mae_avg);
        else
            out << "error: " << detail::sanitize_status(row.status) << " | -";
        out << " | " << detail::format_seconds(row.fit_seconds) << " |\n";
    }
    written.push_back(md_path);

    if (!report.ari.empty()) {
        const std::string ari_path = out_dir + "/ari.md";
        std::ofstream aout = open(ari_path);
        aout << "# Partition agreement (multivariate vs product of univariate)\n\n";
        aout << "| k_multi | k1 | k2 | time index | ARI |\n";
        aout << "|---|---|---|---|---|\n";
        for (const auto& entry : report.ari) {
            for (std::size_t s = 0; s < entry.per_timestep.size(); ++s)
                aout << "| " << entry.k_multi << " | " << entry.k1 << " | " << entry.k2 << " | "
                     << s << " | " << detail::format_metric(entry.per_timestep[s]) << " |\n";
            aout << "| " << entry.k_multi << " | " << entry.k1 << " | " << entry.k2
                 << " | mean | " << detail::format_metric(entry.mean_ari) << " |\n";
        }
        written.push_back(ari_path);
    }
    return written;
}

/// Re-parses an emitted metrics.csv (the round-trip counterpart of
/// emit_report's CSV output; ARI entries live in ari.csv).
inline BenchmarkReport read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_metrics_csv: cannot open '" + path + "'");
    BenchmarkReport report;
    std::string line;

    if (!std::getline(in, line)) throw DataLoadError("read_metrics_csv: empty file");
    if (line.rfind("# scale: ", 0) != 0)
        throw DataLoadError("read_metrics_csv: missing scale header");
    report.scale = detail::trim(line.substr(9));

    if (!std::getline(in, line)) throw DataLoadError("read_metrics_csv: missing column header");
    const auto header = csv::detail::split_fields(detail::trim(line));
    std::size_t dim_count = 0;
    for (const auto& col : header)
        if (col.rfind("rmse_", 0) == 0 && col != "rmse_avg") {
            report.dim_names.push_back(col.substr(5));
            ++dim_count;
        }

    auto parse_metric = [](const std::string& s) {
        return s == "nan" ? std::numeric_limits<double>::quiet_NaN()
                          : csv::detail::parse_double(s, "metrics.csv");
    };
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto f = csv::detail::split_fields(line);
        if (f.size() != 4 + 2 * dim_count + 4)
            throw DataLoadError("read_metrics_csv: bad row '" + line + "'");
        BenchRow row;
        row.model = f[0];
        row.k = csv::detail::parse_int(f[1], "metrics.csv");
        row.k1 = csv::detail::parse_int(f[2], "metrics.csv");
        row.k2 = csv::detail::parse_int(f[3], "metrics.csv");
        row.rmse_per_dim.resize(static_cast<Eigen::Index>(dim_count));
        row.mae_per_dim.resize(static_cast<Eigen::Index>(dim_count));
        for (std::size_t j = 0; j < dim_count; ++j)
            row.rmse_per_dim[static_cast<Eigen::Index>(j)] = parse_metric(f[4 + j]);
        for (std::size_t j = 0; j < dim_count; ++j)
            row.mae_per_dim[static_cast<Eigen::Index>(j)] = parse_metric(f[4 + dim_count + j]);
        row.rmse_avg = parse_metric(f[4 + 2 * dim_count]);
        row.mae_avg = parse_metric(f[5 + 2 * dim_count]);
        row.fit_seconds = parse_metric(f[6 + 2 * dim_count]);
        row.status = f[7 + 2 * dim_count];
        report.rows.push_back(std::move(row));
    }
    return report;
}

/// `bench synth`: generates the configured synthetic dataset and writes
/// data.csv plus ground-truth label files under out_dir.
inline std::vector<std::string> run_synth(const ExperimentConfig& cfg) {
    if (cfg.dataset.rfind("synth:", 0) != 0)
        throw ConfigInvalid("synth: dataset must be synth:magma or synth:dgm2");
    std::filesystem::create_directories(cfg.out_dir);
    std::vector<std::string> written;
    const std::string data_path = cfg.out_dir + "/data.csv";

    if (cfg.dataset == "synth:magma") {
        synth::MagmaSynthSpec spec;
        spec.n_individuals = cfg.synth_m;
        spec.n_clusters = cfg.synth_k;
        spec.n_time = cfg.synth_t;
        spec.noise_var = cfg.synth_noise_var;
        spec.seed = derive_seed(cfg.seed, 0);
        const auto [data, labels] = synth::generate_magma_data(spec);
        csv::write_time_series(data_path, data);
        written.push_back(data_path);
        const std::string label_path = cfg.out_dir + "/labels.csv";
        csv::write_partition(label_path, data.individual_ids, labels);
        written.push_back(label_path);
        return written;
    }
    if (cfg.dataset != "synth:dgm2")
        throw ConfigInvalid("synth: unknown synthetic dataset '" + cfg.dataset + "'");

    synth::Dgm2SynthSpec spec;
    spec.n_individuals = cfg.synth_m;
    spec.n_clusters = cfg.synth_k;
    spec.n_time = cfg.synth_t;
    spec.emission_var = cfg.synth_emission_var;
    spec.stickiness = cfg.synth_stickiness;
    spec.gamma = cfg.synth_gamma;
    if (cfg.synth_independent_dims) {
        if (cfg.synth_d != 2)
            throw ConfigInvalid("synth: synth.independent_dims requires synth.d = 2");
        const std::uint64_t base = derive_seed(cfg.seed, 0);
        spec.n_dims = 1;
        spec.seed = derive_seed(base, 0);
        const auto [a, traj_a] = synth::generate_dgm2_data(spec);
        spec.seed = derive_seed(base, 1);
        const auto [b, traj_b] = synth::generate_dgm2_data(spec);
        const TimeSeriesSet merged = synth::merge_dims(a, b);
        csv::write_time_series(data_path, merged);
        written.push_back(data_path);
        const std::string path_a = cfg.out_dir + "/labels_" + merged.dim_names[0] + ".csv";
        csv::write_trajectories(path_a, merged.individual_ids, merged.grid, traj_a);
        written.push_back(path_a);
        const std::string path_b = cfg.out_dir + "/labels_" + merged.dim_names[1] + ".csv";
        csv::write_trajectories(path_b, merged.individual_ids, merged.grid, traj_b);
        written.push_back(path_b);
        return written;
    }
    spec.n_dims = cfg.synth_d;
    spec.seed = derive_seed(cfg.seed, 0);
    const auto [data, traj] = synth::generate_dgm2_data(spec);
    csv::write_time_series(data_path, data);
    written.push_back(data_path);
    const std::string label_path = cfg.out_dir + "/labels.csv";
    csv::write_trajectories(label_path, data.individual_ids, data.grid, traj);
    written.push_back(label_path);
    return written;
}

}  // namespace cluscast::bench
