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

// Drives the mdew binary end to end and checks files and exit codes.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "json.hpp"
#include "mdew/data.hpp"
#include "mdew/ensemble.hpp"
#include "mdew/missingness.hpp"
#include "mdew/runner.hpp"
#include "test_util.hpp"

namespace mdew {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

CliResult cli(const fs::path& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string command = "cd '" + dir.string() + "' && '" + std::string(MDEW_CLI_PATH) + "' " +
                              args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(command.c_str());
  CliResult result;
  result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = slurp(out);
  result.err = slurp(err);
  return result;
}

// Workspace with data.csv (300 x 6, target in the middle) and config.json.
fs::path workspace(const std::string& name) {
  const fs::path dir = testing::temp_dir("cli_" + name);
  Dataset d = testing::linear_logit_dataset(300, 6, 11);
  d.target_position = 3;
  write_text((dir / "data.csv").string(), to_csv(d));
  const nlohmann::json config = {
      {"name", "cli"},
      {"dataset", {{"name", "synthetic"}, {"path", "data.csv"}}},
      {"missingness", {{"mechanism", "mar"}, {"rate", 0.3}}},
      {"pool",
       {{"imputers", {"mean", "knn"}},
        {"classifiers", {"rf", "gbm"}},
        {"trees", {{"n_trees", 8}}}}},
      {"cv", {{"folds", 3}}},
      {"seed", 4}};
  write_text((dir / "config.json").string(), config.dump(2));
  return dir;
}

TEST(Cli, RunWritesReportFiles) {
  const fs::path dir = workspace("run");
  const CliResult r = cli(dir, "run --config config.json --out out");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* file : {"report.json", "predictions.csv", "scores.csv", "calibration.csv",
                           "folds.json", "timing.json"}) {
    EXPECT_TRUE(fs::exists(dir / "out" / file)) << file;
  }
  const auto report = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report.at("experiment"), "cli");
  EXPECT_EQ(report.at("seed"), 4);
  EXPECT_NE(r.out.find("mdew auroc="), std::string::npos);
}

TEST(Cli, RunIsByteIdenticalAcrossInvocations) {
  const fs::path dir = workspace("determinism");
  ASSERT_EQ(cli(dir, "run --config config.json --out a").code, 0);
  ASSERT_EQ(cli(dir, "run --config config.json --out b --jobs 3").code, 0);
  for (const char* file : {"report.json", "predictions.csv", "scores.csv", "calibration.csv",
                           "folds.json"}) {
    EXPECT_EQ(slurp(dir / "a" / file), slurp(dir / "b" / file)) << file;
  }
}

TEST(Cli, SeedOverrideChangesReport) {
  const fs::path dir = workspace("seed");
  ASSERT_EQ(cli(dir, "run --config config.json --out a").code, 0);
  ASSERT_EQ(cli(dir, "run --config config.json --out b --seed 99").code, 0);
  const auto b = nlohmann::json::parse(slurp(dir / "b" / "report.json"));
  EXPECT_EQ(b.at("seed"), 99);
  EXPECT_NE(slurp(dir / "a" / "predictions.csv"), slurp(dir / "b" / "predictions.csv"));
}

TEST(Cli, ExitCodes) {
  const fs::path dir = workspace("exit_codes");
  EXPECT_EQ(cli(dir, "").code, 2);
  EXPECT_EQ(cli(dir, "run").code, 2);
  EXPECT_EQ(cli(dir, "run --config missing.json").code, 2);
  EXPECT_EQ(cli(dir, "run --config config.json --jobs 0").code, 2);
  EXPECT_EQ(cli(dir, "frobnicate").code, 2);
  EXPECT_EQ(cli(dir, "--help").code, 0);

  write_text((dir / "bad_key.json").string(), R"({"colour": "red"})");
  EXPECT_EQ(cli(dir, "run --config bad_key.json").code, 2);
  write_text((dir / "empty_pool.json").string(),
             R"({"dataset": {"path": "data.csv"}, "pool": {"imputers": []}})");
  const CliResult empty = cli(dir, "run --config empty_pool.json");
  EXPECT_EQ(empty.code, 2);
  EXPECT_NE(empty.err.find("empty pipeline pool"), std::string::npos);

  write_text((dir / "no_data.json").string(), R"({"dataset": {"path": "absent.csv"}})");
  EXPECT_EQ(cli(dir, "run --config no_data.json").code, 3);
  write_text((dir / "ragged.csv").string(), "a,target\n1,0\n2\n");
  write_text((dir / "ragged.json").string(), R"({"dataset": {"path": "ragged.csv"}})");
  EXPECT_EQ(cli(dir, "run --config ragged.json").code, 3);

  write_text((dir / "blocker").string(), "a file, not a directory");
  EXPECT_EQ(cli(dir, "run --config config.json --out blocker/out").code, 4);
}

TEST(Cli, AmputeWritesMaskAndPlan) {
  const fs::path dir = workspace("ampute");
  const CliResult r =
      cli(dir, "ampute --in data.csv --out amputed.csv --plan-out plan.json --mechanism mar "
               "--rate 0.3 --seed 8");
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset original = load_csv((dir / "data.csv").string(), "target");
  const Dataset amputed = load_csv((dir / "amputed.csv").string(), "target");
  EXPECT_EQ(amputed.target, original.target);
  EXPECT_EQ(amputed.column_names, original.column_names);
  const auto plan_doc = nlohmann::json::parse(slurp(dir / "plan.json"));
  const auto plan = plan_doc.at("plan").get<AmputationPlan>();
  EXPECT_EQ(plan.mechanism, Mechanism::kMar);
  EXPECT_EQ(plan_doc.at("ground_truth").size(), amputed.missing_count());
  for (const auto& cell : plan_doc.at("ground_truth")) {
    const auto row = cell[0].get<std::size_t>();
    const auto col = cell[1].get<std::size_t>();
    EXPECT_TRUE(amputed.missing(row, col));
    EXPECT_NEAR(cell[2].get<double>(), original.values(row, col), 1e-12);
  }
  // The library call with the same seed yields the same mask.
  AmputationOptions options;
  options.rate = 0.3;
  EXPECT_EQ(ampute(original, Mechanism::kMar, options, 8).dataset.mask, amputed.mask);

  EXPECT_EQ(cli(dir, "ampute --in data.csv --out x.csv --mechanism mxar").code, 2);
  EXPECT_EQ(cli(dir, "ampute --in data.csv --out x.csv --rate 1.5").code, 2);
  EXPECT_EQ(cli(dir, "ampute --in data.csv --out x.csv --target nope").code, 3);
}

TEST(Cli, ImputeFillsAndSavesModel) {
  const fs::path dir = workspace("impute");
  ASSERT_EQ(cli(dir, "ampute --in data.csv --out amputed.csv --seed 2").code, 0);
  const CliResult r = cli(dir, "impute --in amputed.csv --out filled.csv --imputer knn");
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset amputed = load_csv((dir / "amputed.csv").string(), "target");
  const Dataset filled = load_csv((dir / "filled.csv").string(), "target");
  EXPECT_EQ(filled.missing_count(), 0u);
  for (std::size_t i = 0; i < amputed.rows(); ++i) {
    for (std::size_t j = 0; j < amputed.cols(); ++j) {
      if (!amputed.missing(i, j)) {
        EXPECT_EQ(filled.values(i, j), amputed.values(i, j));
      }
    }
  }
  const auto model = nlohmann::json::parse(slurp(dir / "filled.csv.imputer.json"));
  const auto imputer = model.get<FittedImputer>();
  const Matrix again = transform(imputer, amputed);
  for (std::size_t i = 0; i < again.size(); ++i) {
    EXPECT_NEAR(again.data()[i], filled.values.data()[i], 1e-12);
  }
  EXPECT_EQ(cli(dir, "impute --in amputed.csv --out x.csv --imputer magic").code, 2);
}

TEST(Cli, FitThenPredictMatchesLibrary) {
  const fs::path dir = workspace("predict");
  ASSERT_EQ(cli(dir, "ampute --in data.csv --out amputed.csv --seed 6").code, 0);
  ASSERT_EQ(cli(dir, "fit --config config.json --out context").code, 0);
  ASSERT_TRUE(fs::exists(dir / "context" / "pipelines.json"));
  ASSERT_TRUE(fs::exists(dir / "context" / "error_matrix.csv"));

  // Reverse the columns and drop the target: alignment goes by name.
  const Dataset amputed = load_csv((dir / "amputed.csv").string(), "target");
  {
    std::string text;
    for (std::size_t c = amputed.cols(); c-- > 0;) {
      text += amputed.column_names[c] + (c ? "," : "\n");
    }
    for (std::size_t r = 0; r < amputed.rows(); ++r) {
      for (std::size_t c = amputed.cols(); c-- > 0;) {
        text += (amputed.missing(r, c) ? std::string("NA") : format_double(amputed.values(r, c))) +
                (c ? "," : "\n");
      }
    }
    write_text((dir / "samples.csv").string(), text);
  }
  const CliResult r = cli(dir, "predict --context context --in samples.csv --out scores.csv");
  ASSERT_EQ(r.code, 0) << r.err;

  const PredictionContext context = load_context(dir / "context");
  EXPECT_EQ(context.columns, amputed.column_names);
  const auto expected = predict_batch(amputed, context.pipelines, context.errors, context.k,
                                      Method::kMdew);
  const auto rows = csv::parse(slurp(dir / "scores.csv"));
  ASSERT_EQ(rows.size(), amputed.rows() + 1);
  ASSERT_EQ(rows[0][0], "row_id");
  ASSERT_EQ(rows[0][1], "probability");
  ASSERT_EQ(rows[0].size(), 2 + context.pipelines.size());
  for (std::size_t i = 0; i < amputed.rows(); ++i) {
    double p = 0.0;
    ASSERT_TRUE(parse_double(rows[i + 1][1], p));
    EXPECT_EQ(p, expected[i].probability);
    double total = 0.0;
    for (std::size_t j = 0; j < context.pipelines.size(); ++j) {
      double w = 0.0;
      ASSERT_TRUE(parse_double(rows[i + 1][2 + j], w));
      EXPECT_EQ(w, expected[i].weights[j]);
      total += w;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }

  const CliResult uma = cli(dir, "predict --context context --in amputed.csv --method uma");
  ASSERT_EQ(uma.code, 0) << uma.err;
  const auto uma_rows = csv::parse(uma.out);
  EXPECT_EQ(uma_rows[0][1], "target");
  double w = 0.0;
  ASSERT_TRUE(parse_double(uma_rows[1][3], w));
  EXPECT_DOUBLE_EQ(w, 1.0 / static_cast<double>(context.pipelines.size()));

  write_text((dir / "short.csv").string(), "a,b\n1,2\n");
  EXPECT_EQ(cli(dir, "predict --context context --in short.csv").code, 3);
  EXPECT_EQ(cli(dir, "predict --context nowhere --in samples.csv").code, 3);
  EXPECT_EQ(cli(dir, "predict --context context --in samples.csv --method vote").code, 2);
}

TEST(Cli, MetricsSummarizesScores) {
  const fs::path dir = workspace("metrics");
  write_text((dir / "scores.csv").string(),
             "row_id,target,probability,method\n"
             "0,1,0.9,mdew\n1,0,0.2,mdew\n2,1,0.4,mdew\n3,0,0.6,mdew\n"
             "0,1,0.8,uma\n1,0,0.3,uma\n2,1,0.3,uma\n3,0,0.7,uma\n");
  const CliResult r = cli(dir, "metrics --in scores.csv --out metrics.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir / "metrics.json"));
  EXPECT_DOUBLE_EQ(j.at("methods").at("mdew").at("auroc").get<double>(), 0.75);
  // uma pairs: 0.8 beats both negatives, 0.3 ties 0.3 and loses to 0.7.
  EXPECT_DOUBLE_EQ(j.at("methods").at("uma").at("auroc").get<double>(), 0.625);
  EXPECT_EQ(j.at("paired_rows"), 4);
  // Errors: mdew 0.1 0.2 0.6 0.6 vs uma 0.2 0.3 0.7 0.7 improve all four rows.
  EXPECT_DOUBLE_EQ(j.at("fraction_improved").get<double>(), 1.0);

  write_text((dir / "bad.csv").string(), "row_id,target,probability,method\n0,2,0.5,mdew\n");
  EXPECT_EQ(cli(dir, "metrics --in bad.csv").code, 3);
}

TEST(Cli, GridRecordsFailuresAndRanks) {
  const fs::path dir = workspace("grid");
  write_text((dir / "one_class.csv").string(), "a,b,c,target\n1,2,3,0\n2,3,4,0\n3,4,5,0\n4,5,6,0\n");
  const nlohmann::json grid = {
      {"base", nlohmann::json::parse(slurp(dir / "config.json"))},
      {"datasets", {{{"name", "good"}, {"path", "data.csv"}},
                    {{"name", "bad"}, {"path", "one_class.csv"}}}},
      {"mechanisms", {"mcar", "mnar"}},
      {"output", "grid_out"}};
  write_text((dir / "grid.json").string(), grid.dump(2));
  const CliResult r = cli(dir, "grid --config grid.json");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  for (const char* name : {"good-mcar", "good-mnar"}) {
    EXPECT_TRUE(fs::exists(dir / "grid_out" / name / "report.json")) << name;
  }
  EXPECT_FALSE(fs::exists(dir / "grid_out" / "bad-mcar"));
  const auto summary = nlohmann::json::parse(slurp(dir / "grid_out" / "grid_summary.json"));
  std::size_t failed = 0;
  for (const auto& entry : summary) failed += entry.at("status") == "failed" ? 1 : 0;
  EXPECT_EQ(failed, 2u);
  const auto table = csv::parse(slurp(dir / "grid_out" / "rank_table.csv"));
  EXPECT_EQ(table.size(), 3u);

  const nlohmann::json all_bad = {{"base", grid.at("base")},
                                  {"datasets", {{{"name", "bad"}, {"path", "one_class.csv"}}}},
                                  {"output", "bad_out"}};
  write_text((dir / "all_bad.json").string(), all_bad.dump());
  EXPECT_EQ(cli(dir, "grid --config all_bad.json").code, 4);
  write_text((dir / "typo.json").string(), R"({"base": {}, "experimets": []})");
  EXPECT_EQ(cli(dir, "grid --config typo.json").code, 2);
}

}  // namespace
}  // namespace mdew
