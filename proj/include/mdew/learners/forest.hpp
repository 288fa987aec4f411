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

#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

#include "json.hpp"
#include "mdew/learners/tree.hpp"

namespace mdew {

// Bagged CART trees; the prediction is the mean tree output (for
// classification, the mean leaf positive fraction).
struct RandomForest {
  Task task = Task::kClassification;
  std::vector<DecisionTree> trees;

  double predict(std::span<const double> x) const {
    double sum = 0.0;
    for (const auto& tree : trees) sum += tree.predict(x);
    return sum / static_cast<double>(trees.size());
  }
};

inline RandomForest fit_random_forest(const Matrix& x, std::span<const double> y,
                                      const TreeParams& params, Task task) {
  params.validate();
  detail::check_fit_inputs(x, y, task);
  const std::size_t n = x.rows();
  const std::size_t max_features = resolve_max_features(params.feature_subsample, task, x.cols());
  const auto presorted = detail::presort(x);
  RandomForest forest{task, {}};
  forest.trees.reserve(static_cast<std::size_t>(params.n_trees));
  for (int t = 0; t < params.n_trees; ++t) {
    Rng rng(derive_seed(params.seed, "forest_tree", static_cast<std::uint64_t>(t)));
    std::vector<std::size_t> rows(n);
    if (params.bootstrap) {
      for (auto& r : rows) r = rng.below(n);
      std::sort(rows.begin(), rows.end());
    } else {
      std::iota(rows.begin(), rows.end(), std::size_t{0});
    }
    forest.trees.push_back(fit_tree(x, y, params, task, std::move(rows), max_features, &rng, &presorted));
  }
  return forest;
}

inline void to_json(nlohmann::json& j, const RandomForest& f) {
  j = nlohmann::json{{"task", f.task == Task::kRegression ? "regression" : "classification"},
                     {"trees", f.trees}};
}

inline void from_json(const nlohmann::json& j, RandomForest& f) {
  f.task = j.at("task").get<std::string>() == "regression" ? Task::kRegression
                                                           : Task::kClassification;
  j.at("trees").get_to(f.trees);
}

}  // namespace mdew
