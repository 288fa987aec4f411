/*
 * Copyright 2026 The M-DEW Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Experiment orchestration: configuration, the cross-validated two-stage
// protocol, report assembly and emission, and multi-experiment grids.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"
#include "mdew/data.hpp"
#include "mdew/ensemble.hpp"
#include "mdew/metrics.hpp"
#include "mdew/missingness.hpp"

namespace mdew {

inline constexpr int kReportFormatVersion = 1;

struct DatasetConfig {
  std::string name = "dataset";
  std::string path;
  std::string target = "target";
  std::vector<std::string> ignore;
  std::vector<std::string> missing_tokens = {"", "NA", "NaN", "?"};
};

struct MissingnessConfig {
  Mechanism mechanism = Mechanism::kMcar;
  AmputationOptions options;
  // Draw a fresh mask for every fold instead of once before folding.
  bool per_fold = false;
};

struct PoolConfig {
  std::vector<std::string> imputers = {"knn", "ridge-iter", "rf-iter", "gbm-iter"};
  std::vector<std::string> classifiers = {"rf", "gbm"};
  TreeParams trees;
  std::size_t knn_k = 5;
  int max_rounds = 10;
  double tolerance = 1e-3;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  MissingnessConfig missingness;
  PoolConfig pool;
  std::size_t k_neighbors = 5;
  std::size_t folds = 5;
  double stage2_fraction = 0.2;
  std::size_t calibration_bins = 10;
  std::uint64_t seed = 0;
  // Not echoed into reports: neither changes any result.
  std::string output;
  std::size_t jobs = 1;

  void validate() const {
    auto open_unit = [](double v, const char* what) {
      if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string(what) + " must lie in (0, 1)");
    };
    if (pool.imputers.empty() || pool.classifiers.empty()) {
      throw ConfigError("empty pipeline pool");
    }
    if (missingness.mechanism != Mechanism::kNone) {
      open_unit(missingness.options.rate, "missingness.rate");
      open_unit(missingness.options.column_fraction, "missingness.column_fraction");
      open_unit(missingness.options.cause_rate, "missingness.cause_rate");
      if (!(missingness.options.cause_fraction >= 0.0 && missingness.options.cause_fraction < 1.0)) {
        throw ConfigError("missingness.cause_fraction must lie in [0, 1)");
      }
    }
    open_unit(stage2_fraction, "cv.stage2_fraction");
    if (folds < 2) throw ConfigError("cv.folds must be >= 2");
    if (k_neighbors < 1) throw ConfigError("ensemble.k_neighbors must be >= 1");
    if (calibration_bins < 2) throw ConfigError("calibration_bins must be >= 2");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (dataset.target.empty()) throw ConfigError("dataset.target is required");
    detail::check_pool_specs(pipeline_specs());
  }

  std::vector<PipelineSpec> pipeline_specs() const {
    return make_pool(pool.imputers, pool.classifiers, pool.trees, pool.knn_k, pool.max_rounds,
                     pool.tolerance);
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& section) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw ConfigError("unknown key '" + item.key() + "' in '" + section + "'");
    }
  }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "'");
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  const auto& m = c.missingness;
  j = nlohmann::json{
      {"name", c.name},
      {"dataset",
       {{"name", c.dataset.name},
        {"path", c.dataset.path},
        {"target", c.dataset.target},
        {"ignore", c.dataset.ignore},
        {"missing_tokens", c.dataset.missing_tokens}}},
      {"missingness",
       {{"mechanism", to_string(m.mechanism)},
        {"rate", m.options.rate},
        {"column_fraction", m.options.column_fraction},
        {"cause_fraction", m.options.cause_fraction},
        {"cause_rate", m.options.cause_rate},
        {"per_fold", m.per_fold}}},
      {"pool",
       {{"imputers", c.pool.imputers},
        {"classifiers", c.pool.classifiers},
        {"trees", c.pool.trees},
        {"knn_k", c.pool.knn_k},
        {"max_rounds", c.pool.max_rounds},
        {"tolerance", c.pool.tolerance}}},
      {"ensemble", {{"k_neighbors", c.k_neighbors}}},
      {"cv", {{"folds", c.folds}, {"stage2_fraction", c.stage2_fraction}}},
      {"calibration_bins", c.calibration_bins},
      {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  using detail::read_key;
  c = ExperimentConfig{};
  detail::check_keys(j, {"name", "dataset", "missingness", "pool", "ensemble", "cv",
                         "calibration_bins", "seed", "output", "jobs"},
                     "config");
  read_key(j, "name", c.name, "config");
  read_key(j, "calibration_bins", c.calibration_bins, "config");
  read_key(j, "seed", c.seed, "config");
  read_key(j, "output", c.output, "config");
  read_key(j, "jobs", c.jobs, "config");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::check_keys(d, {"name", "path", "target", "ignore", "missing_tokens"}, "dataset");
    read_key(d, "name", c.dataset.name, "dataset");
    read_key(d, "path", c.dataset.path, "dataset");
    read_key(d, "target", c.dataset.target, "dataset");
    read_key(d, "ignore", c.dataset.ignore, "dataset");
    read_key(d, "missing_tokens", c.dataset.missing_tokens, "dataset");
  }
  if (j.contains("missingness")) {
    const auto& m = j.at("missingness");
    detail::check_keys(m, {"mechanism", "rate", "column_fraction", "cause_fraction", "cause_rate",
                           "per_fold"},
                       "missingness");
    std::string mechanism = to_string(c.missingness.mechanism);
    read_key(m, "mechanism", mechanism, "missingness");
    c.missingness.mechanism = parse_mechanism(mechanism);
    read_key(m, "rate", c.missingness.options.rate, "missingness");
    read_key(m, "column_fraction", c.missingness.options.column_fraction, "missingness");
    read_key(m, "cause_fraction", c.missingness.options.cause_fraction, "missingness");
    read_key(m, "cause_rate", c.missingness.options.cause_rate, "missingness");
    read_key(m, "per_fold", c.missingness.per_fold, "missingness");
  }
  if (j.contains("pool")) {
    const auto& p = j.at("pool");
    detail::check_keys(p, {"imputers", "classifiers", "trees", "knn_k", "max_rounds", "tolerance"},
                       "pool");
    read_key(p, "imputers", c.pool.imputers, "pool");
    read_key(p, "classifiers", c.pool.classifiers, "pool");
    if (p.contains("trees")) {
      detail::check_keys(p.at("trees"), {"max_depth", "n_trees", "learning_rate", "min_samples_leaf",
                                         "feature_subsample", "bootstrap", "seed"},
                         "pool.trees");
      read_key(p, "trees", c.pool.trees, "pool");
    }
    read_key(p, "knn_k", c.pool.knn_k, "pool");
    read_key(p, "max_rounds", c.pool.max_rounds, "pool");
    read_key(p, "tolerance", c.pool.tolerance, "pool");
  }
  if (j.contains("ensemble")) {
    detail::check_keys(j.at("ensemble"), {"k_neighbors"}, "ensemble");
    read_key(j.at("ensemble"), "k_neighbors", c.k_neighbors, "ensemble");
  }
  if (j.contains("cv")) {
    detail::check_keys(j.at("cv"), {"folds", "stage2_fraction"}, "cv");
    read_key(j.at("cv"), "folds", c.folds, "cv");
    read_key(j.at("cv"), "stage2_fraction", c.stage2_fraction, "cv");
  }
  c.validate();
}

// Parses a config document. Relative dataset and output paths are resolved
// against `base_dir` when given.
inline ExperimentConfig parse_config(const nlohmann::json& j,
                                     const std::filesystem::path& base_dir = {}) {
  ExperimentConfig config;
  try {
    config = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  auto resolve = [&](std::string& path) {
    if (!path.empty() && !base_dir.empty() && std::filesystem::path(path).is_relative()) {
      path = (base_dir / path).lexically_normal().string();
    }
  };
  resolve(config.dataset.path);
  resolve(config.output);
  return config;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::string text;
  try {
    text = csv::read_file(path);
  } catch (const DataError&) {
    throw ConfigError("cannot open config " + path);
  }
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  return parse_config(read_json_file(path), std::filesystem::path(path).parent_path());
}

inline Dataset load_experiment_dataset(const DatasetConfig& config) {
  if (config.path.empty()) throw ConfigError("dataset.path is required");
  CsvOptions options;
  options.missing_tokens = {config.missing_tokens.begin(), config.missing_tokens.end()};
  options.ignore_columns = config.ignore;
  return load_csv(config.path, config.target, options);
}

// ---------------------------------------------------------------------------
// Reports

struct MethodMetrics {
  double ap = 0.0;
  double auroc = 0.0;
  double brier = 0.0;
  double mean_error = 0.0;
};

inline void to_json(nlohmann::json& j, const MethodMetrics& m) {
  j = nlohmann::json{
      {"ap", m.ap}, {"auroc", m.auroc}, {"brier", m.brier}, {"mean_error", m.mean_error}};
}
inline void from_json(const nlohmann::json& j, MethodMetrics& m) {
  j.at("ap").get_to(m.ap);
  j.at("auroc").get_to(m.auroc);
  j.at("brier").get_to(m.brier);
  j.at("mean_error").get_to(m.mean_error);
}

inline MethodMetrics score_method(const ScoredSet& s) {
  const auto errors = per_sample_errors(s);
  return {average_precision(s), auroc(s), brier(s), mean_of(errors)};
}

struct FoldReport {
  std::size_t fold = 0;
  std::size_t test_rows = 0;
  std::size_t stage1_rows = 0;
  std::size_t stage2_rows = 0;
  std::size_t error_matrix_entries = 0;
  std::map<std::string, MethodMetrics> methods;
  double fraction_improved = 0.0;
};

inline void to_json(nlohmann::json& j, const FoldReport& f) {
  j = nlohmann::json{{"fold", f.fold},
                     {"test_rows", f.test_rows},
                     {"stage1_rows", f.stage1_rows},
                     {"stage2_rows", f.stage2_rows},
                     {"error_matrix_entries", f.error_matrix_entries},
                     {"methods", f.methods},
                     {"fraction_improved", f.fraction_improved}};
}
inline void from_json(const nlohmann::json& j, FoldReport& f) {
  j.at("fold").get_to(f.fold);
  j.at("test_rows").get_to(f.test_rows);
  j.at("stage1_rows").get_to(f.stage1_rows);
  j.at("stage2_rows").get_to(f.stage2_rows);
  j.at("error_matrix_entries").get_to(f.error_matrix_entries);
  j.at("methods").get_to(f.methods);
  j.at("fraction_improved").get_to(f.fraction_improved);
}

inline nlohmann::json nullable(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}
inline double from_nullable(const nlohmann::json& j) {
  return j.is_null() ? kNaN : j.get<double>();
}

inline void to_json(nlohmann::json& j, const CalibrationCurve& c) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : c.bins) {
    bins.push_back({{"lower", b.lower},
                    {"upper", b.upper},
                    {"count", b.count},
                    {"mean_predicted", nullable(b.mean_predicted)},
                    {"fraction_positive", nullable(b.fraction_positive)}});
  }
  j = nlohmann::json{{"n_bins", c.n_bins}, {"bins", std::move(bins)}};
}
inline void from_json(const nlohmann::json& j, CalibrationCurve& c) {
  j.at("n_bins").get_to(c.n_bins);
  c.bins.clear();
  for (const auto& b : j.at("bins")) {
    c.bins.push_back({b.at("lower").get<double>(), b.at("upper").get<double>(),
                      b.at("count").get<std::size_t>(), from_nullable(b.at("mean_predicted")),
                      from_nullable(b.at("fraction_positive"))});
  }
}

struct CalibrationReport {
  CalibrationCurve curve;
  double brier = 0.0;
};

inline void to_json(nlohmann::json& j, const CalibrationReport& c) {
  j = nlohmann::json{{"curve", c.curve}, {"brier", c.brier}};
}
inline void from_json(const nlohmann::json& j, CalibrationReport& c) {
  j.at("curve").get_to(c.curve);
  j.at("brier").get_to(c.brier);
}

// One test-fold sample.
struct PredictionRecord {
  std::size_t row_id = 0;
  std::size_t fold = 0;
  int target = 0;
  double uma = 0.0;
  double mdew = 0.0;
  std::vector<double> pipeline_probs;
  std::vector<double> weights;
};

struct DatasetSummary {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t positives = 0;
  std::size_t missing_before = 0;
  std::size_t missing_after = 0;
};

inline void to_json(nlohmann::json& j, const DatasetSummary& d) {
  j = nlohmann::json{{"name", d.name},
                     {"rows", d.rows},
                     {"cols", d.cols},
                     {"positives", d.positives},
                     {"missing_cells_before", d.missing_before},
                     {"missing_cells_after", d.missing_after}};
}
inline void from_json(const nlohmann::json& j, DatasetSummary& d) {
  j.at("name").get_to(d.name);
  j.at("rows").get_to(d.rows);
  j.at("cols").get_to(d.cols);
  j.at("positives").get_to(d.positives);
  j.at("missing_cells_before").get_to(d.missing_before);
  j.at("missing_cells_after").get_to(d.missing_after);
}

struct ExperimentReport {
  std::string experiment;
  std::uint64_t seed = 0;
  ExperimentConfig config;
  DatasetSummary dataset;
  // One amputation plan, or one per fold.
  std::vector<AmputationPlan> amputation;
  std::vector<std::string> pipelines;
  // Pooled over every test fold; keys are pipeline labels plus "mdew" and "uma".
  std::map<std::string, MethodMetrics> methods;
  double fraction_improved = 0.0;
  TTestResult t_test;
  // AUROC rank among all methods, 1 = best.
  std::map<std::string, double> rank;
  std::vector<FoldReport> folds;
  // "mdew", "uma" (raw) and "mdew_platt", "uma_platt" (cross-fitted Platt).
  std::map<std::string, CalibrationReport> calibration;
  // Not part of report.json.
  std::vector<PredictionRecord> predictions;
  FoldPlan fold_plan;
  std::vector<StageSplit> stage_splits;
  double wall_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const ExperimentReport& r) {
  j = nlohmann::json{{"format_version", kReportFormatVersion},
                     {"experiment", r.experiment},
                     {"seed", r.seed},
                     {"config", r.config},
                     {"dataset", r.dataset},
                     {"amputation", r.amputation},
                     {"pipelines", r.pipelines},
                     {"methods", r.methods},
                     {"fraction_improved", r.fraction_improved},
                     {"t_test", r.t_test},
                     {"rank", r.rank},
                     {"folds", r.folds},
                     {"calibration", r.calibration}};
}

inline void from_json(const nlohmann::json& j, ExperimentReport& r) {
  if (j.at("format_version").get<int>() != kReportFormatVersion) {
    throw DataError("unsupported report format version");
  }
  r = ExperimentReport{};
  j.at("experiment").get_to(r.experiment);
  j.at("seed").get_to(r.seed);
  r.config = parse_config(j.at("config"));
  j.at("dataset").get_to(r.dataset);
  j.at("amputation").get_to(r.amputation);
  j.at("pipelines").get_to(r.pipelines);
  j.at("methods").get_to(r.methods);
  j.at("fraction_improved").get_to(r.fraction_improved);
  j.at("t_test").get_to(r.t_test);
  j.at("rank").get_to(r.rank);
  j.at("folds").get_to(r.folds);
  j.at("calibration").get_to(r.calibration);
}

inline std::string report_json(const ExperimentReport& report) {
  return nlohmann::json(report).dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Long-format scores: row_id,target,probability,method.

inline std::string scores_csv(const ExperimentReport& r) {
  std::string out = "row_id,target,probability,method\n";
  auto emit = [&](const std::string& method, auto&& prob) {
    for (const auto& p : r.predictions) {
      out += std::to_string(p.row_id) + "," + std::to_string(p.target) + "," +
             format_double(prob(p)) + "," + csv::escape(method) + "\n";
    }
  };
  emit("mdew", [](const PredictionRecord& p) { return p.mdew; });
  emit("uma", [](const PredictionRecord& p) { return p.uma; });
  for (std::size_t j = 0; j < r.pipelines.size(); ++j) {
    emit(r.pipelines[j], [j](const PredictionRecord& p) { return p.pipeline_probs[j]; });
  }
  return out;
}

// Groups a long-format scores CSV by method, preserving row order. Also
// returns row ids per method so paired comparisons can be aligned.
struct MethodScores {
  ScoredSet scores;
  std::vector<std::size_t> row_ids;
};

inline std::map<std::string, MethodScores> parse_scores_csv(std::string_view text) {
  const auto rows = csv::parse(text);
  if (rows.empty()) throw DataError("scores CSV is empty");
  const auto& header = rows.front();
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("scores CSV lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_row = column("row_id"), c_target = column("target"),
                    c_prob = column("probability"), c_method = column("method");
  std::map<std::string, MethodScores> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const std::string where = "scores CSV line " + std::to_string(i + 1);
    if (row.size() != header.size()) throw DataError(where + ": wrong field count");
    double id = 0, target = 0, prob = 0;
    if (!parse_double(row[c_row], id) || id < 0) throw DataError(where + ": bad row_id");
    if (!parse_double(row[c_target], target) || (target != 0.0 && target != 1.0)) {
      throw DataError(where + ": target must be 0 or 1");
    }
    if (!parse_double(row[c_prob], prob) || prob < 0.0 || prob > 1.0) {
      throw DataError(where + ": probability must lie in [0, 1]");
    }
    auto& entry = out[row[c_method]];
    entry.scores.label = row[c_method];
    entry.scores.targets.push_back(static_cast<int>(target));
    entry.scores.probabilities.push_back(prob);
    entry.row_ids.push_back(static_cast<std::size_t>(id));
  }
  return out;
}

// Metrics per method; with both "mdew" and "uma" present, adds the paired
// comparison over row ids common to both.
inline nlohmann::json summarize_scores(const std::map<std::string, MethodScores>& methods) {
  nlohmann::json out = nlohmann::json::object();
  nlohmann::json per_method = nlohmann::json::object();
  for (const auto& [name, m] : methods) {
    per_method[name] = score_method(m.scores);
    per_method[name]["n"] = m.scores.size();
  }
  out["methods"] = std::move(per_method);
  const auto mdew = methods.find("mdew");
  const auto uma = methods.find("uma");
  if (mdew != methods.end() && uma != methods.end()) {
    std::map<std::size_t, double> uma_error;
    const auto ue = per_sample_errors(uma->second.scores);
    for (std::size_t i = 0; i < ue.size(); ++i) uma_error[uma->second.row_ids[i]] = ue[i];
    const auto me = per_sample_errors(mdew->second.scores);
    std::vector<double> a, b;
    for (std::size_t i = 0; i < me.size(); ++i) {
      const auto it = uma_error.find(mdew->second.row_ids[i]);
      if (it == uma_error.end()) continue;
      a.push_back(me[i]);
      b.push_back(it->second);
    }
    if (a.empty()) throw DataError("mdew and uma scores share no row ids");
    out["paired_rows"] = a.size();
    out["fraction_improved"] = fraction_improved(a, b);
    out["t_test"] = paired_t_test_less(a, b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// The experiment

namespace detail {

inline ScoredSet gather(const std::vector<PredictionRecord>& records, const std::string& label,
                        const std::vector<std::size_t>& which, auto&& prob) {
  ScoredSet s;
  s.label = label;
  for (std::size_t i : which) {
    s.targets.push_back(records[i].target);
    s.probabilities.push_back(prob(records[i]));
  }
  return s;
}

inline void check_no_leakage(const StageSplit& split, std::span<const std::size_t> train,
                             std::span<const std::size_t> test) {
  std::set<std::size_t> test_set(test.begin(), test.end());
  std::set<std::size_t> seen;
  for (const auto* part : {&split.stage1, &split.stage2}) {
    for (std::size_t i : *part) {
      if (test_set.contains(i)) throw ComputeError("test row " + std::to_string(i) + " leaked into training");
      if (!seen.insert(i).second) throw ComputeError("row " + std::to_string(i) + " in both stages");
    }
  }
  if (seen.size() != train.size()) throw ComputeError("stage split does not cover the training rows");
}

// Platt maps fit on the other folds, applied to each fold.
inline CalibrationReport cross_fitted_platt(const std::vector<PredictionRecord>& records,
                                            std::size_t folds, std::size_t bins, auto&& prob) {
  ScoredSet calibrated;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> in, out;
    for (std::size_t i = 0; i < records.size(); ++i) (records[i].fold == f ? in : out).push_back(i);
    if (in.empty()) continue;
    const PlattMap map = platt_calibrate(gather(records, "", out, prob));
    for (std::size_t i : in) {
      calibrated.targets.push_back(records[i].target);
      calibrated.probabilities.push_back(map(prob(records[i])));
    }
  }
  return {calibration_curve(calibrated, bins), brier(calibrated)};
}

}  // namespace detail

// Runs the full protocol on an already loaded dataset. Amputation (unless
// the mechanism is none) happens once before folding, or per fold when
// configured. Every fold fits the pool on stage 1, records errors on stage
// 2 and predicts its test rows with M-DEW, UMA and every base pipeline.
inline ExperimentReport run_experiment(const ExperimentConfig& config, const Dataset& data) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  data.validate();
  const auto specs = config.pipeline_specs();
  const std::size_t p = specs.size();

  ExperimentReport report;
  report.experiment = config.name;
  report.seed = config.seed;
  report.config = config;
  for (const auto& s : specs) report.pipelines.push_back(s.label);
  report.dataset = {config.dataset.name, data.rows(), data.cols(),
                    static_cast<std::size_t>(std::count(data.target.begin(), data.target.end(), 1)),
                    data.missing_count(), 0};

  auto amputed = [&](std::uint64_t index) {
    return ampute(data, config.missingness.mechanism, config.missingness.options,
                  derive_seed(config.seed, "amputation", index));
  };
  AmputationResult shared;
  if (!config.missingness.per_fold) {
    shared = amputed(0);
    report.amputation.push_back(shared.plan);
    report.dataset.missing_after = shared.dataset.missing_count();
  }

  report.fold_plan = stratified_kfold(data.target, config.folds, derive_seed(config.seed, "folds"));
  for (std::size_t f = 0; f < config.folds; ++f) {
    AmputationResult local;
    if (config.missingness.per_fold) {
      local = amputed(f + 1);
      report.amputation.push_back(local.plan);
      report.dataset.missing_after += local.dataset.missing_count();
    }
    const Dataset& working = config.missingness.per_fold ? local.dataset : shared.dataset;

    const auto train = report.fold_plan.train_indices(f);
    const auto test = report.fold_plan.test_indices(f);
    const StageSplit split = two_stage_split(train, config.stage2_fraction,
                                             derive_seed(config.seed, "stage_split", f), data.target);
    detail::check_no_leakage(split, train, test);
    report.stage_splits.push_back(split);

    const Dataset stage1 = working.subset(split.stage1);
    const Dataset stage2 = working.subset(split.stage2);
    const Dataset held_out = working.subset(test);

    auto pool = fit_pool(specs, stage1, derive_seed(config.seed, "pool", f), config.jobs);
    const ErrorMatrix errors = build_error_matrix(pool, stage2, config.jobs);
    const auto expected_stage2 = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::floor(config.stage2_fraction * static_cast<double>(train.size()) + 0.5)),
        1, train.size() - 1);
    if (errors.entries.size() != stage2.rows() * p || stage2.rows() != expected_stage2) {
      throw ComputeError("error matrix does not hold |stage2| x p entries");
    }

    const auto mdew = predict_rows(held_out.values, held_out.mask, pool, &errors,
                                   config.k_neighbors, Method::kMdew, config.jobs);
    const auto uma = predict_rows(held_out.values, held_out.mask, pool, nullptr, 0, Method::kUma,
                                  config.jobs);
    for (std::size_t i = 0; i < test.size(); ++i) {
      report.predictions.push_back({held_out.row_ids[i], f, held_out.target[i], uma[i].probability,
                                    mdew[i].probability, mdew[i].per_pipeline_probs,
                                    mdew[i].weights});
    }
    report.folds.push_back({f, test.size(), split.stage1.size(), split.stage2.size(),
                            errors.entries.size(), {}, 0.0});
  }
  std::sort(report.predictions.begin(), report.predictions.end(),
            [](const auto& a, const auto& b) { return a.row_id < b.row_id; });

  const auto& records = report.predictions;
  auto score_all = [&](const std::vector<std::size_t>& which,
                       std::map<std::string, MethodMetrics>& out) {
    out["mdew"] = score_method(detail::gather(records, "mdew", which, [](auto& r) { return r.mdew; }));
    out["uma"] = score_method(detail::gather(records, "uma", which, [](auto& r) { return r.uma; }));
    for (std::size_t j = 0; j < p; ++j) {
      out[report.pipelines[j]] = score_method(detail::gather(
          records, report.pipelines[j], which, [j](auto& r) { return r.pipeline_probs[j]; }));
    }
  };
  auto errors_of = [&](const std::vector<std::size_t>& which, bool use_mdew) {
    std::vector<double> e;
    for (std::size_t i : which) {
      e.push_back(std::abs(records[i].target - (use_mdew ? records[i].mdew : records[i].uma)));
    }
    return e;
  };

  std::vector<std::size_t> everyone(records.size());
  std::iota(everyone.begin(), everyone.end(), std::size_t{0});
  score_all(everyone, report.methods);
  const auto mdew_errors = errors_of(everyone, true);
  const auto uma_errors = errors_of(everyone, false);
  report.fraction_improved = fraction_improved(mdew_errors, uma_errors);
  report.t_test = paired_t_test_less(mdew_errors, uma_errors);

  for (auto& fold : report.folds) {
    std::vector<std::size_t> which;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].fold == fold.fold) which.push_back(i);
    }
    score_all(which, fold.methods);
    fold.fraction_improved = fraction_improved(errors_of(which, true), errors_of(which, false));
  }

  std::vector<std::string> labels;
  std::vector<double> aurocs;
  for (const auto& [label, m] : report.methods) {
    labels.push_back(label);
    aurocs.push_back(m.auroc);
  }
  const auto ranks = rank_descending(aurocs);
  for (std::size_t i = 0; i < labels.size(); ++i) report.rank[labels[i]] = ranks[i];

  const std::size_t bins = config.calibration_bins;
  const auto mdew_prob = [](const PredictionRecord& r) { return r.mdew; };
  const auto uma_prob = [](const PredictionRecord& r) { return r.uma; };
  const ScoredSet mdew_set = detail::gather(records, "mdew", everyone, mdew_prob);
  const ScoredSet uma_set = detail::gather(records, "uma", everyone, uma_prob);
  report.calibration["mdew"] = {calibration_curve(mdew_set, bins), brier(mdew_set)};
  report.calibration["uma"] = {calibration_curve(uma_set, bins), brier(uma_set)};
  report.calibration["mdew_platt"] = detail::cross_fitted_platt(records, config.folds, bins, mdew_prob);
  report.calibration["uma_platt"] = detail::cross_fitted_platt(records, config.folds, bins, uma_prob);

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

inline ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  return run_experiment(config, load_experiment_dataset(config.dataset));
}

// ---------------------------------------------------------------------------
// Emission

inline std::string predictions_csv(const ExperimentReport& r) {
  std::string out = "row_id,fold,target,uma_prob,mdew_prob";
  for (const auto& label : r.pipelines) out += "," + csv::escape("p:" + label);
  for (const auto& label : r.pipelines) out += "," + csv::escape("w:" + label);
  out.push_back('\n');
  for (const auto& p : r.predictions) {
    out += std::to_string(p.row_id) + "," + std::to_string(p.fold) + "," +
           std::to_string(p.target) + "," + format_double(p.uma) + "," + format_double(p.mdew);
    for (double v : p.pipeline_probs) out += "," + format_double(v);
    for (double v : p.weights) out += "," + format_double(v);
    out.push_back('\n');
  }
  return out;
}

inline std::string calibration_csv(const ExperimentReport& r) {
  std::string out = "method,bin,lower,upper,count,mean_predicted,fraction_positive\n";
  for (const auto& [method, c] : r.calibration) {
    for (std::size_t b = 0; b < c.curve.bins.size(); ++b) {
      const auto& bin = c.curve.bins[b];
      out += method + "," + std::to_string(b) + "," + format_double(bin.lower) + "," +
             format_double(bin.upper) + "," + std::to_string(bin.count) + "," +
             (bin.count ? format_double(bin.mean_predicted) : "") + "," +
             (bin.count ? format_double(bin.fraction_positive) : "") + "\n";
    }
  }
  return out;
}

inline std::string folds_json(const ExperimentReport& r) {
  return nlohmann::json{{"fold_plan", r.fold_plan}, {"stage_splits", r.stage_splits}}.dump() + "\n";
}

// Writes report.json, predictions.csv, scores.csv, calibration.csv and
// folds.json (all deterministic), plus timing.json with the wall-clock.
inline void emit_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ComputeError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_text((dir / "report.json").string(), report_json(report));
  write_text((dir / "predictions.csv").string(), predictions_csv(report));
  write_text((dir / "scores.csv").string(), scores_csv(report));
  write_text((dir / "calibration.csv").string(), calibration_csv(report));
  write_text((dir / "folds.json").string(), folds_json(report));
  write_text((dir / "timing.json").string(),
             nlohmann::json{{"experiment", report.experiment}, {"wall_seconds", report.wall_seconds}}
                     .dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Grids

struct GridFailure {
  std::string experiment;
  std::string message;
};

struct GridResult {
  std::vector<ExperimentReport> reports;
  std::vector<GridFailure> failures;
  RankTable ranks;
};

// Grid document: {"base": config, "experiments": [patch...]} where each patch
// is merged into the base (JSON merge patch), and/or {"datasets": [...],
// "mechanisms": [...]} crossing dataset sections with mechanisms. Names
// default to "<dataset>-<mechanism>".
inline std::vector<ExperimentConfig> expand_grid(const nlohmann::json& grid,
                                                 const std::filesystem::path& base_dir = {}) {
  detail::check_keys(grid, {"base", "experiments", "datasets", "mechanisms", "output", "jobs"}, "grid");
  const nlohmann::json base = grid.value("base", nlohmann::json::object());
  std::vector<nlohmann::json> documents;
  if (grid.contains("experiments")) {
    for (const auto& patch : grid.at("experiments")) {
      nlohmann::json doc = base;
      doc.merge_patch(patch);
      documents.push_back(std::move(doc));
    }
  }
  if (grid.contains("datasets") || grid.contains("mechanisms")) {
    const auto datasets = grid.value("datasets", nlohmann::json::array({base.value("dataset", nlohmann::json::object())}));
    const auto mechanisms = grid.value("mechanisms", nlohmann::json::array({"mcar"}));
    for (const auto& dataset : datasets) {
      for (const auto& mechanism : mechanisms) {
        nlohmann::json doc = base;
        doc["dataset"] = base.value("dataset", nlohmann::json::object());
        doc["dataset"].merge_patch(dataset);
        doc["missingness"] = base.value("missingness", nlohmann::json::object());
        doc["missingness"]["mechanism"] = mechanism;
        if (!dataset.contains("name") && !doc["dataset"].contains("name")) {
          throw ConfigError("grid datasets need a 'name'");
        }
        doc["name"] = doc["dataset"]["name"].get<std::string>() + "-" + mechanism.get<std::string>();
        documents.push_back(std::move(doc));
      }
    }
  }
  if (documents.empty()) throw ConfigError("grid defines no experiments");
  std::vector<ExperimentConfig> configs;
  std::set<std::string> names;
  for (const auto& doc : documents) {
    configs.push_back(parse_config(doc, base_dir));
    if (!names.insert(configs.back().name).second) {
      throw ConfigError("duplicate experiment name '" + configs.back().name + "'");
    }
  }
  return configs;
}

// Runs experiments in order. A failed experiment is recorded and left out of
// the rank table; config errors are rethrown since they are caught by
// expand_grid up front.
inline GridResult run_grid(const std::vector<ExperimentConfig>& configs, std::ostream* log = nullptr) {
  GridResult result;
  for (const auto& config : configs) {
    try {
      result.reports.push_back(run_experiment(config));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      result.failures.push_back({config.name, e.what()});
      if (log) *log << "warning: experiment '" << config.name << "' failed: " << e.what() << "\n";
    }
  }
  std::vector<ExperimentScores> table;
  for (const auto& r : result.reports) {
    ExperimentScores e{r.experiment, {}};
    for (const auto& [label, m] : r.methods) e.scores[label] = m.auroc;
    table.push_back(std::move(e));
  }
  result.ranks = rank_experiments(table);
  return result;
}

inline void emit_grid(const GridResult& grid, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ComputeError("cannot create output directory " + dir.string() + ": " + ec.message());
  for (const auto& r : grid.reports) emit_report(r, dir / r.experiment);
  write_text((dir / "rank_table.csv").string(), rank_table_csv(grid.ranks));
  write_text((dir / "rank_summary.csv").string(), rank_summary_csv(grid.ranks));
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : grid.reports) {
    summary.push_back({{"experiment", r.experiment},
                       {"status", "ok"},
                       {"mechanism", to_string(r.config.missingness.mechanism)},
                       {"mdew", r.methods.at("mdew")},
                       {"uma", r.methods.at("uma")},
                       {"fraction_improved", r.fraction_improved},
                       {"p_value", r.t_test.p_value}});
  }
  for (const auto& f : grid.failures) {
    summary.push_back({{"experiment", f.experiment}, {"status", "failed"}, {"error", f.message}});
  }
  write_text((dir / "grid_summary.json").string(), summary.dump(2) + "\n");
}

}  // namespace mdew
