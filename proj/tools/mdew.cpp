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

// Command-line front end: run, grid, ampute, impute, fit, predict, metrics.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mdew/common.hpp"
#include "mdew/data.hpp"
#include "mdew/ensemble.hpp"
#include "mdew/imputers.hpp"
#include "mdew/missingness.hpp"
#include "mdew/runner.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mdew;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;

  void add_to(CLI::App* app) {
    app->add_option("--seed", seed, "Override the config seed");
    app->add_option("--out", out, "Override the output directory");
    app->add_option("--jobs", jobs, "Override the worker count")->check(CLI::PositiveNumber);
  }

  void apply(ExperimentConfig& config) const {
    if (seed) config.seed = *seed;
    if (out) config.output = *out;
    if (jobs) config.jobs = *jobs;
  }
};

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw ComputeError("cannot create directory " + parent.string() + ": " + ec.message());
}

void write_file(const std::string& path, const std::string& text) {
  ensure_parent(path);
  write_text(path, text);
}

std::string output_dir(const ExperimentConfig& config) {
  return config.output.empty() ? "mdew_out/" + config.name : config.output;
}

void print_summary(const ExperimentReport& report, std::ostream& os) {
  os << report.experiment << ":";
  for (const char* method : {"mdew", "uma"}) {
    const auto it = report.methods.find(method);
    if (it == report.methods.end()) continue;
    os << " " << method << " auroc=" << format_double(it->second.auroc)
       << " ap=" << format_double(it->second.ap);
  }
  os << " improved=" << format_double(report.fraction_improved)
     << " p=" << format_double(report.t_test.p_value) << "\n";
}

// --- run -------------------------------------------------------------------

struct RunArgs {
  std::string config;
  Overrides overrides;
};

int cmd_run(const RunArgs& args) {
  ExperimentConfig config = load_config(args.config);
  args.overrides.apply(config);
  config.validate();
  const ExperimentReport report = run_experiment(config);
  const std::string dir = output_dir(config);
  emit_report(report, dir);
  print_summary(report, std::cout);
  std::cout << "wrote " << dir << "\n";
  return kExitOk;
}

// --- grid ------------------------------------------------------------------

int cmd_grid(const RunArgs& args) {
  const nlohmann::json doc = read_json_file(args.config);
  std::vector<ExperimentConfig> configs =
      expand_grid(doc, fs::path(args.config).parent_path());
  std::string dir = "mdew_out/grid";
  std::size_t jobs = 1;
  try {
    if (doc.contains("output")) {
      const fs::path output = doc.at("output").get<std::string>();
      dir = output.is_relative()
                ? (fs::path(args.config).parent_path() / output).lexically_normal().string()
                : output.string();
    }
    if (doc.contains("jobs")) jobs = doc.at("jobs").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid grid: ") + e.what());
  }
  if (args.overrides.out) dir = *args.overrides.out;
  for (auto& config : configs) {
    config.jobs = jobs;
    if (args.overrides.seed) config.seed = *args.overrides.seed;
    if (args.overrides.jobs) config.jobs = *args.overrides.jobs;
    config.output = (fs::path(dir) / config.name).string();
    config.validate();
  }
  const GridResult grid = run_grid(configs, &std::cerr);
  emit_grid(grid, dir);
  for (const auto& report : grid.reports) print_summary(report, std::cout);
  std::cout << grid.reports.size() << " succeeded, " << grid.failures.size() << " failed; wrote "
            << dir << "\n";
  return grid.reports.empty() ? kExitRuntime : kExitOk;
}

// --- ampute ----------------------------------------------------------------

struct AmputeArgs {
  std::string in;
  std::string out;
  std::string plan_out;
  std::string target = "target";
  std::string mechanism = "mcar";
  AmputationOptions options;
  std::uint64_t seed = 0;
};

int cmd_ampute(const AmputeArgs& args) {
  const Mechanism mechanism = parse_mechanism(args.mechanism);
  const Dataset data = load_csv(args.in, args.target);
  const AmputationResult result = ampute(data, mechanism, args.options, args.seed);
  write_file(args.out, to_csv(result.dataset));
  if (!args.plan_out.empty()) write_file(args.plan_out, amputation_json(result).dump(2) + "\n");
  std::cout << "masked " << result.ground_truth.size() << " of " << data.values.size()
            << " cells\n";
  return kExitOk;
}

// --- impute ----------------------------------------------------------------

struct ImputeArgs {
  std::string in;
  std::string out;
  std::string model_out;
  std::string target = "target";
  std::string imputer = "knn";
  std::uint64_t seed = 0;
};

int cmd_impute(const ImputeArgs& args) {
  const ImputerSpec spec = parse_imputer_name(args.imputer);
  const Dataset data = load_csv(args.in, args.target);
  const FittedImputer imputer = fit_imputer(spec, data, args.seed);
  Dataset completed = data;
  completed.values = transform(imputer, data);
  std::fill(completed.mask.begin(), completed.mask.end(), std::uint8_t{0});
  write_file(args.out, to_csv(completed));
  const std::string model = args.model_out.empty() ? args.out + ".imputer.json" : args.model_out;
  write_file(model, nlohmann::json(imputer).dump() + "\n");
  std::cout << "filled " << data.missing_count() << " cells with " << spec.name() << "\n";
  return kExitOk;
}

// --- fit -------------------------------------------------------------------

int cmd_fit(const RunArgs& args) {
  ExperimentConfig config = load_config(args.config);
  args.overrides.apply(config);
  config.validate();
  const Dataset data = load_experiment_dataset(config.dataset);
  data.validate();
  std::vector<std::size_t> all(data.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const StageSplit split =
      two_stage_split(all, config.stage2_fraction, derive_seed(config.seed, "stage_split", 0),
                      data.target);
  const Dataset stage1 = data.subset(split.stage1);
  const Dataset stage2 = data.subset(split.stage2);
  PredictionContext context;
  context.k = config.k_neighbors;
  context.columns = data.column_names;
  const auto specs = config.pipeline_specs();
  context.pipelines = fit_pool(specs, stage1, derive_seed(config.seed, "pool", 0), config.jobs);
  context.errors = build_error_matrix(context.pipelines, stage2, config.jobs);
  const std::string dir = config.output.empty() ? "mdew_out/context" : config.output;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ComputeError("cannot create directory " + dir + ": " + ec.message());
  save_context(dir, context);
  std::cout << "fitted " << context.pipelines.size() << " pipelines on " << stage1.rows()
            << " rows, " << stage2.rows() << " competence rows; wrote " << dir << "\n";
  return kExitOk;
}

// --- predict ---------------------------------------------------------------

struct PredictArgs {
  std::string context;
  std::string in;
  std::string out;
  std::string target = "target";
  std::string method = "mdew";
  std::optional<std::size_t> k;
  std::size_t jobs = 1;
};

// Reorders `data` so its columns follow `columns`; extra input columns are
// dropped.
Dataset align_columns(const Dataset& data, const std::vector<std::string>& columns) {
  if (columns.empty()) return data;
  std::vector<std::size_t> source;
  for (const auto& name : columns) {
    const auto it = std::find(data.column_names.begin(), data.column_names.end(), name);
    if (it == data.column_names.end()) throw DataError("input lacks feature column '" + name + "'");
    source.push_back(static_cast<std::size_t>(it - data.column_names.begin()));
  }
  Dataset out = data;
  out.column_names = columns;
  out.values = Matrix(data.rows(), columns.size());
  out.mask.assign(data.rows() * columns.size(), 0);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      out.values(r, c) = data.values(r, source[c]);
      out.mask[r * columns.size() + c] = data.mask[r * data.cols() + source[c]];
    }
  }
  return out;
}

int cmd_predict(const PredictArgs& args) {
  Method method;
  if (args.method == "mdew") {
    method = Method::kMdew;
  } else if (args.method == "uma") {
    method = Method::kUma;
  } else {
    throw ConfigError("unknown method '" + args.method + "'");
  }
  const PredictionContext context = load_context(args.context);
  const std::size_t k = args.k.value_or(context.k);
  if (k < 1) throw ConfigError("k must be >= 1");

  CsvOptions options;
  options.require_target = false;
  const std::string text = csv::read_file(args.in);
  const Dataset raw = parse_csv_dataset(text, args.target, options);
  const auto header = csv::parse(text.substr(0, text.find('\n'))).front();
  const bool has_target = std::find(header.begin(), header.end(), args.target) != header.end();
  const Dataset data = align_columns(raw, context.columns);

  const auto predictions = predict_rows(data.values, data.mask, context.pipelines,
                                        method == Method::kMdew ? &context.errors : nullptr, k,
                                        method, args.jobs);
  std::string csv = "row_id";
  if (has_target) csv += "," + csv::escape(args.target);
  csv += ",probability";
  for (const auto& label : context.errors.labels) csv += "," + csv::escape("w:" + label);
  csv.push_back('\n');
  for (std::size_t r = 0; r < predictions.size(); ++r) {
    csv += std::to_string(data.row_ids[r]);
    if (has_target) csv += "," + std::to_string(data.target[r]);
    csv += "," + format_double(predictions[r].probability);
    for (double w : predictions[r].weights) csv += "," + format_double(w);
    csv.push_back('\n');
  }
  if (args.out.empty()) {
    std::cout << csv;
  } else {
    write_file(args.out, csv);
  }
  return kExitOk;
}

// --- metrics ---------------------------------------------------------------

struct MetricsArgs {
  std::string in;
  std::string out;
};

int cmd_metrics(const MetricsArgs& args) {
  const auto methods = parse_scores_csv(csv::read_file(args.in));
  const std::string text = summarize_scores(methods).dump(2) + "\n";
  if (args.out.empty()) {
    std::cout << text;
  } else {
    write_file(args.out, text);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Missingness-aware dynamic ensemble weighting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mdew 1.0.0");

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run one cross-validated experiment");
  run->add_option("--config", run_args.config, "Experiment config (JSON)")->required();
  run_args.overrides.add_to(run);

  RunArgs grid_args;
  auto* grid = app.add_subcommand("grid", "Run a grid of experiments and rank them");
  grid->add_option("--config", grid_args.config, "Grid config (JSON)")->required();
  grid_args.overrides.add_to(grid);

  AmputeArgs ampute_args;
  auto* amp = app.add_subcommand("ampute", "Inject missing values into a complete CSV");
  amp->add_option("--in", ampute_args.in, "Input CSV")->required();
  amp->add_option("--out", ampute_args.out, "Output CSV")->required();
  amp->add_option("--plan-out", ampute_args.plan_out, "Amputation plan and ground truth (JSON)");
  amp->add_option("--target", ampute_args.target, "Target column")->capture_default_str();
  amp->add_option("--mechanism", ampute_args.mechanism, "mcar, mar, mnar or none")
      ->check(CLI::IsMember({"mcar", "mar", "mnar", "none"}))
      ->capture_default_str();
  amp->add_option("--rate", ampute_args.options.rate, "Missing rate")->capture_default_str();
  amp->add_option("--column-fraction", ampute_args.options.column_fraction,
                  "Fraction of columns masked (mar, mnar)")
      ->capture_default_str();
  amp->add_option("--cause-fraction", ampute_args.options.cause_fraction,
                  "Fraction of the remaining columns driving missingness (mar, mnar)");
  amp->add_option("--cause-rate", ampute_args.options.cause_rate,
                  "Missing rate of the cause columns (mnar)")
      ->capture_default_str();
  amp->add_option("--seed", ampute_args.seed, "Random seed")->capture_default_str();

  ImputeArgs impute_args;
  auto* imp = app.add_subcommand("impute", "Fit an imputer and fill a CSV");
  imp->add_option("--in", impute_args.in, "Input CSV")->required();
  imp->add_option("--out", impute_args.out, "Completed CSV")->required();
  imp->add_option("--model-out", impute_args.model_out,
                  "Fitted imputer JSON (default: <out>.imputer.json)");
  imp->add_option("--target", impute_args.target, "Target column")->capture_default_str();
  imp->add_option("--imputer", impute_args.imputer,
                  "mean, knn, ridge-iter, rf-iter, gbm-iter or tree-iter")
      ->capture_default_str();
  imp->add_option("--seed", impute_args.seed, "Random seed")->capture_default_str();

  RunArgs fit_args;
  auto* fit = app.add_subcommand("fit", "Fit a pool on a whole dataset and save the context");
  fit->add_option("--config", fit_args.config, "Experiment config (JSON)")->required();
  fit_args.overrides.add_to(fit);

  PredictArgs predict_args;
  auto* predict = app.add_subcommand("predict", "Score a CSV with a saved context");
  predict->add_option("--context", predict_args.context, "Context directory")->required();
  predict->add_option("--in", predict_args.in, "Samples CSV")->required();
  predict->add_option("--out", predict_args.out, "Output CSV (default: stdout)");
  predict->add_option("--target", predict_args.target, "Target column, if present")
      ->capture_default_str();
  predict->add_option("--method", predict_args.method, "mdew or uma")
      ->check(CLI::IsMember({"mdew", "uma"}))
      ->capture_default_str();
  predict->add_option("--k", predict_args.k, "Neighborhood size (default: from context)");
  predict->add_option("--jobs", predict_args.jobs, "Worker count")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  MetricsArgs metrics_args;
  auto* metrics = app.add_subcommand("metrics", "Summarize a long-format scores CSV");
  metrics->add_option("--in", metrics_args.in, "Scores CSV: row_id,target,probability,method")
      ->required();
  metrics->add_option("--out", metrics_args.out, "Metrics JSON (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_args);
    if (*grid) return cmd_grid(grid_args);
    if (*amp) return cmd_ampute(ampute_args);
    if (*imp) return cmd_impute(impute_args);
    if (*fit) return cmd_fit(fit_args);
    if (*predict) return cmd_predict(predict_args);
    if (*metrics) return cmd_metrics(metrics_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
