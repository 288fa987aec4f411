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

#include "mdew/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "gtest/gtest.h"
#include "mdew/missingness.hpp"
#include "test_util.hpp"

namespace mdew {
namespace {

TreeParams small_params() {
  TreeParams params;
  params.n_trees = 8;
  params.max_depth = 3;
  return params;
}

std::vector<PipelineSpec> small_pool() {
  return make_pool({"mean", "knn", "ridge-iter"}, {"rf", "gbm"}, small_params(), 5, 2);
}

// A pipeline whose classifier always answers `p`.
FittedPipeline constant_pipeline(const Dataset& stage1, double p, const std::string& label) {
  FittedPipeline pipeline;
  pipeline.spec.label = label;
  pipeline.spec.imputer = parse_imputer_name("mean");
  pipeline.spec.classifier = ClassifierKind::kConstant;
  pipeline.imputer = std::make_shared<FittedImputer>(fit_imputer(pipeline.spec.imputer, stage1));
  pipeline.classifier = Classifier(ConstantClassifier{p});
  return pipeline;
}

struct Fixture {
  Dataset stage1, stage2, test;
  std::vector<FittedPipeline> pool;
  ErrorMatrix errors;
};

Fixture fitted_fixture(std::uint64_t seed = 1) {
  const Dataset full = ampute_mar(testing::linear_logit_dataset(260, 5, seed), {}, seed).dataset;
  std::vector<std::size_t> a(120), b(60), c(80);
  std::iota(a.begin(), a.end(), std::size_t{0});
  std::iota(b.begin(), b.end(), std::size_t{120});
  std::iota(c.begin(), c.end(), std::size_t{180});
  Fixture f{full.subset(a), full.subset(b), full.subset(c), {}, {}};
  const auto specs = small_pool();
  f.pool = fit_pool(specs, f.stage1, seed);
  f.errors = build_error_matrix(f.pool, f.stage2);
  return f;
}

TEST(Pool, DefaultPoolHasEightPipelines) {
  const auto specs = default_pool();
  ASSERT_EQ(specs.size(), 8u);
  std::set<std::string> labels;
  for (const auto& s : specs) labels.insert(s.label);
  EXPECT_EQ(labels.size(), 8u);
  EXPECT_TRUE(labels.contains("knn+rf"));
  EXPECT_TRUE(labels.contains("gbm-iter+gbm"));

  TreeParams params;
  params.n_trees = 3;
  const Dataset d = ampute_mcar(testing::linear_logit_dataset(80, 4, 2), 0.3, 3).dataset;
  auto pool_specs = default_pool(params);
  for (auto& s : pool_specs) s.imputer.max_rounds = 1;
  const auto pool = fit_pool(pool_specs, d, 5);
  EXPECT_EQ(pool.size(), 8u);
  // Two classifiers per imputer share one fitted imputer.
  EXPECT_EQ(pool[0].imputer, pool[1].imputer);
  EXPECT_NE(pool[0].imputer, pool[2].imputer);
}

TEST(Pool, Errors) {
  const Dataset d = testing::linear_logit_dataset(40, 3, 4);
  EXPECT_THROW(
      {
        try {
          fit_pool(std::vector<PipelineSpec>{}, d);
        } catch (const ConfigError& e) {
          EXPECT_STREQ(e.what(), "empty pipeline pool");
          throw;
        }
      },
      ConfigError);
  auto specs = make_pool({"mean"}, {"rf"}, small_params());
  specs.push_back(specs.front());
  specs.back().classifier_params.seed = 9;
  EXPECT_THROW(fit_pool(specs, d), ConfigError);
  specs.back().label = "mean+rf#2";
  EXPECT_NO_THROW(fit_pool(specs, d));
  Dataset one_class = d;
  std::fill(one_class.target.begin(), one_class.target.end(), 1);
  EXPECT_THROW(fit_pool(make_pool({"mean"}, {"rf"}), one_class), DataError);
}

TEST(Pool, DeterministicAcrossJobCounts) {
  const Dataset d = ampute_mcar(testing::linear_logit_dataset(100, 4, 6), 0.3, 7).dataset;
  const auto specs = small_pool();
  const auto a = fit_pool(specs, d, 11, 1);
  const auto b = fit_pool(specs, d, 11, 4);
  EXPECT_EQ(pipelines_json(a, 5), pipelines_json(b, 5));
  const auto c = fit_pool(specs, d, 12, 1);
  EXPECT_NE(pipelines_json(a, 5), pipelines_json(c, 5));
}

TEST(ErrorMatrix, HandBuiltConstantClassifiers) {
  const Dataset stage1 = testing::linear_logit_dataset(10, 2, 1);
  Dataset stage2 = Dataset::from_values(Matrix(3, 2, {0, 0, 1, 1, 2, 2}), {1, 0, 1});
  std::vector<FittedPipeline> pool = {constant_pipeline(stage1, 0.4, "a"),
                                      constant_pipeline(stage1, 0.7, "b")};
  const ErrorMatrix e = build_error_matrix(pool, stage2);
  const double expected[3][2] = {{0.6, 0.3}, {0.4, 0.7}, {0.6, 0.3}};
  ASSERT_EQ(e.entries.rows(), 3u);
  ASSERT_EQ(e.entries.cols(), 2u);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(e.entries(i, j), expected[i][j], 1e-15);
  }
  EXPECT_EQ(e.labels, (std::vector<std::string>{"a", "b"}));
  stage2 = Dataset::from_values(Matrix(1, 3), {1});
  EXPECT_THROW(build_error_matrix(pool, stage2), DataError);
}

TEST(ErrorMatrix, DefinitionAndShape) {
  Fixture f = fitted_fixture();
  EXPECT_EQ(f.errors.entries.size(), f.stage2.rows() * f.pool.size());
  EXPECT_EQ(f.errors.row_ids, f.stage2.row_ids);
  for (std::size_t j = 0; j < f.pool.size(); ++j) {
    const Matrix imputed = transform(*f.pool[j].imputer, f.stage2);
    EXPECT_EQ(f.pool[j].substrate.rows(), f.stage2.rows());
    for (std::size_t i = 0; i < f.stage2.rows(); ++i) {
      const double p = f.pool[j].classifier.predict_proba(imputed.row(i));
      EXPECT_EQ(f.errors.entries(i, j), std::abs(f.stage2.target[i] - p));
      EXPECT_GE(f.errors.entries(i, j), 0.0);
      EXPECT_LE(f.errors.entries(i, j), 1.0);
    }
  }
}

TEST(Softmax, ArithmeticAndShiftInvariance) {
  const std::vector<double> c = {0.9, 0.8};
  const auto w = softmax(c);
  EXPECT_NEAR(w[0], std::exp(0.9) / (std::exp(0.9) + std::exp(0.8)), 1e-15);
  EXPECT_NEAR(w[0], 0.52498, 1e-5);
  EXPECT_NEAR(w[1], 0.47502, 1e-5);
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + rng.below(10));
    for (double& v : s) v = rng.uniform();
    std::vector<double> shifted = s;
    const double shift = rng.normal() * 10.0;
    for (double& v : shifted) v += shift;
    const auto a = softmax(s);
    const auto b = softmax(shifted);
    EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-12);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
  const std::vector<double> equal = {0.3, 0.3, 0.3, 0.3};
  for (double v : softmax(equal)) EXPECT_EQ(v, 0.25);
}

TEST(MdewPredict, NeighborhoodErrorsGiveExpectedWeights) {
  // Two constant pipelines; every stage-2 row is a neighbor when k = |s2|,
  // so competences are one minus the column means.
  const Dataset stage1 = testing::linear_logit_dataset(10, 2, 2);
  const Dataset stage2 = Dataset::from_values(Matrix(2, 2, {0, 0, 1, 1}), {1, 0});
  std::vector<FittedPipeline> pool = {constant_pipeline(stage1, 0.3, "a"),
                                      constant_pipeline(stage1, 0.6, "b")};
  ErrorMatrix errors = build_error_matrix(pool, stage2);
  errors.entries = Matrix(2, 2, {0.05, 0.1, 0.15, 0.3});
  const std::vector<double> x = {0.5, 0.5};
  const std::vector<std::uint8_t> m = {0, 0};
  const WeightedPrediction w = mdew_predict(x, m, pool, errors, 2);
  EXPECT_NEAR(w.competences[0], 0.9, 1e-15);
  EXPECT_NEAR(w.competences[1], 0.8, 1e-15);
  EXPECT_NEAR(w.weights[0], 0.52498, 1e-5);
  EXPECT_NEAR(w.probability, w.weights[0] * 0.3 + w.weights[1] * 0.6, 1e-15);
  EXPECT_THROW(mdew_predict(x, m, pool, errors, 3), ConfigError);
  EXPECT_THROW(mdew_predict(x, m, pool, errors, 0), ConfigError);
}

TEST(MdewPredict, TiesBreakByRowId) {
  const Dataset stage1 = testing::linear_logit_dataset(10, 1, 2);
  Dataset stage2 = Dataset::from_values(Matrix(4, 1, {1, -1, 1, -1}), {1, 0, 1, 0});
  stage2.row_ids = {40, 30, 20, 10};
  std::vector<FittedPipeline> pool = {constant_pipeline(stage1, 0.5, "a")};
  const ErrorMatrix errors = build_error_matrix(pool, stage2);
  const std::vector<double> x = {0.0};
  const std::vector<std::uint8_t> m = {0};
  const WeightedPrediction w = mdew_predict(x, m, pool, errors, 3);
  // All four rows are equidistant from 0 after standardization.
  EXPECT_EQ(w.neighbor_ids[0], (std::vector<std::size_t>{10, 20, 30}));
}

TEST(MdewPredict, SimplexConvexityAndNeighborContract) {
  Fixture f = fitted_fixture(3);
  const auto preds = predict_batch(f.test, f.pool, f.errors, 5, Method::kMdew);
  ASSERT_EQ(preds.size(), f.test.rows());
  const std::set<std::size_t> stage2_ids(f.stage2.row_ids.begin(), f.stage2.row_ids.end());
  for (const auto& w : preds) {
    EXPECT_NEAR(std::accumulate(w.weights.begin(), w.weights.end(), 0.0), 1.0, 1e-9);
    double dot = 0.0;
    for (std::size_t j = 0; j < w.weights.size(); ++j) {
      EXPECT_GE(w.weights[j], 0.0);
      EXPECT_GE(w.competences[j], 0.0);
      EXPECT_LE(w.competences[j], 1.0);
      dot += w.weights[j] * w.per_pipeline_probs[j];
      ASSERT_EQ(w.neighbor_ids[j].size(), 5u);
      const std::set<std::size_t> unique(w.neighbor_ids[j].begin(), w.neighbor_ids[j].end());
      EXPECT_EQ(unique.size(), 5u);
      for (auto id : unique) EXPECT_TRUE(stage2_ids.contains(id));
    }
    EXPECT_NEAR(w.probability, dot, 1e-12);
    EXPECT_GE(w.probability, *std::min_element(w.per_pipeline_probs.begin(), w.per_pipeline_probs.end()));
    EXPECT_LE(w.probability, *std::max_element(w.per_pipeline_probs.begin(), w.per_pipeline_probs.end()));
  }
}

TEST(MdewPredict, IdenticalErrorColumnsReduceToUma) {
  // Constant identical columns: every neighborhood has the same mean error.
  Fixture f = fitted_fixture(4);
  for (std::size_t i = 0; i < f.errors.rows(); ++i) {
    for (std::size_t j = 0; j < f.errors.pipelines(); ++j) f.errors.entries(i, j) = 0.35;
  }
  auto mdew = predict_batch(f.test, f.pool, f.errors, 5, Method::kMdew);
  auto uma = predict_batch(f.test, f.pool, f.errors, 5, Method::kUma);
  for (std::size_t r = 0; r < mdew.size(); ++r) {
    EXPECT_NEAR(mdew[r].probability, uma[r].probability, 1e-12);
    for (double w : mdew[r].weights) EXPECT_EQ(w, 1.0 / static_cast<double>(f.pool.size()));
  }

  // Shared imputer: one substrate, so arbitrary identical columns suffice.
  const auto specs = make_pool({"knn"}, {"rf", "gbm", "tree"}, small_params());
  auto pool = fit_pool(specs, f.stage1, 2);
  ErrorMatrix errors = build_error_matrix(pool, f.stage2);
  for (std::size_t i = 0; i < errors.rows(); ++i) {
    for (std::size_t j = 1; j < errors.pipelines(); ++j) errors.entries(i, j) = errors.entries(i, 0);
  }
  mdew = predict_batch(f.test, pool, errors, 5, Method::kMdew);
  uma = predict_batch(f.test, pool, errors, 5, Method::kUma);
  for (std::size_t r = 0; r < mdew.size(); ++r) {
    EXPECT_NEAR(mdew[r].probability, uma[r].probability, 1e-12);
  }
}

TEST(UmaPredict, MeanOfPipelines) {
  const Dataset stage1 = testing::linear_logit_dataset(10, 2, 5);
  const std::vector<double> x = {kNaN, 1.0};
  const std::vector<std::uint8_t> m = {1, 0};
  std::vector<FittedPipeline> two = {constant_pipeline(stage1, 0.2, "a"),
                                     constant_pipeline(stage1, 0.8, "b")};
  EXPECT_NEAR(uma_predict(x, m, two).probability, 0.5, 1e-15);
  std::vector<FittedPipeline> one = {constant_pipeline(stage1, 0.37, "a")};
  EXPECT_EQ(uma_predict(x, m, one).probability, 0.37);
  const std::vector<double> probs = {0.1, 0.9, 0.25, 0.5, 0.33, 0.05, 0.75, 0.6};
  std::vector<FittedPipeline> eight;
  double sum = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    eight.push_back(constant_pipeline(stage1, probs[j], "p" + std::to_string(j)));
    sum += probs[j];
  }
  const auto w = uma_predict(x, m, eight);
  EXPECT_NEAR(w.probability, sum / 8.0, 1e-15);
  for (double v : w.weights) EXPECT_EQ(v, 0.125);
  EXPECT_THROW(uma_predict(x, m, std::vector<FittedPipeline>{}), ConfigError);
}

TEST(PredictBatch, SingleRowAndPermutation) {
  Fixture f = fitted_fixture(5);
  const auto batch = predict_batch(f.test, f.pool, f.errors, 5, Method::kMdew, 3);
  for (std::size_t r = 0; r < f.test.rows(); r += 9) {
    const auto one = mdew_predict(f.test.values.row(r), f.test.mask_row(r), f.pool, f.errors, 5);
    EXPECT_EQ(one.probability, batch[r].probability);
    EXPECT_EQ(one.weights, batch[r].weights);
    EXPECT_EQ(one.neighbor_ids, batch[r].neighbor_ids);
  }
  std::vector<std::size_t> perm(f.test.rows());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(8);
  rng.shuffle(perm);
  const auto permuted = predict_batch(f.test.subset(perm), f.pool, f.errors, 5, Method::kMdew);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_EQ(permuted[i].probability, batch[perm[i]].probability);
  }
}

TEST(PredictBatch, HundredRowSmoke) {
  Fixture f = fitted_fixture(6);
  Dataset test = f.test;
  const Dataset extra = ampute_mar(testing::linear_logit_dataset(100, 5, 60), {}, 61).dataset;
  const auto mdew = predict_batch(extra, f.pool, f.errors, 5, Method::kMdew);
  const auto uma = predict_batch(extra, f.pool, f.errors, 5, Method::kUma);
  ASSERT_EQ(mdew.size(), 100u);
  for (std::size_t r = 0; r < 100; ++r) {
    EXPECT_TRUE(std::isfinite(mdew[r].probability));
    EXPECT_GE(uma[r].probability, 0.0);
    EXPECT_LE(uma[r].probability, 1.0);
    EXPECT_TRUE(uma[r].neighbor_ids.empty());
  }
}

TEST(Context, SaveLoadReproducesPredictions) {
  Fixture f = fitted_fixture(7);
  const auto dir = testing::temp_dir("ensemble_context");
  save_context(dir, {f.pool, f.errors, 5, f.test.column_names});
  const PredictionContext back = load_context(dir);
  EXPECT_EQ(back.k, 5u);
  EXPECT_EQ(back.columns, f.test.column_names);
  EXPECT_EQ(back.errors.row_ids, f.errors.row_ids);
  EXPECT_EQ(back.errors.entries, f.errors.entries);
  const auto a = predict_batch(f.test, f.pool, f.errors, 5, Method::kMdew);
  const auto b = predict_batch(f.test, back.pipelines, back.errors, 5, Method::kMdew);
  for (std::size_t r = 0; r < a.size(); ++r) EXPECT_EQ(a[r].probability, b[r].probability);
  EXPECT_EQ(back.pipelines[0].imputer, back.pipelines[1].imputer);
}

TEST(Context, MalformedErrorMatrix) {
  EXPECT_THROW(parse_error_matrix_csv("row_id,a\n1,1.5\n"), DataError);
  EXPECT_THROW(parse_error_matrix_csv("row_id,a\n1\n"), DataError);
  EXPECT_THROW(parse_error_matrix_csv(""), DataError);
}

TEST(Context, MalformedPipelinesJsonIsDataError) {
  const auto dir = testing::temp_dir("ensemble_bad_context");
  write_text((dir / "pipelines.json").string(), R"({"version": 1, "k": "five"})");
  write_text((dir / "error_matrix.csv").string(), "row_id,a\n0,0.5\n");
  EXPECT_THROW(load_context(dir), DataError);
  write_text((dir / "pipelines.json").string(), "{ not json");
  EXPECT_THROW(load_context(dir), DataError);
}

}  // namespace
}  // namespace mdew
