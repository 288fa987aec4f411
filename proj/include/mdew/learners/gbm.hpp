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

// Gradient-boosted regression trees. Regression boosts squared error on
// residuals; classification boosts binomial log-loss with one Newton step per
// leaf.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "json.hpp"
#include "mdew/learners/tree.hpp"

namespace mdew {

inline constexpr double kProbabilityFloor = 1e-6;

struct GradientBoosting {
  Task task = Task::kClassification;
  double base_score = 0.0;
  // Leaf values already include the learning rate.
  std::vector<DecisionTree> trees;
  // Training loss after initialization and after each round (log-loss for
  // classification, MSE for regression).
  std::vector<double> training_loss;
  // Single-class training set: the model is the clamped base rate.
  bool degenerate = false;

  double raw_score(std::span<const double> x) const {
    double f = base_score;
    for (const auto& tree : trees) f += tree.predict(x);
    return f;
  }

  double predict(std::span<const double> x) const {
    const double f = raw_score(x);
    if (task == Task::kRegression) return f;
    return std::clamp(sigmoid(f), kProbabilityFloor, 1.0 - kProbabilityFloor);
  }
};

namespace detail {

// log(1 + e^f) - y f, evaluated without overflow.
inline double log_loss_at(double y, double f) {
  const double softplus = f > 0 ? f + std::log1p(std::exp(-f)) : std::log1p(std::exp(f));
  return softplus - y * f;
}

inline double mean_log_loss(std::span<const double> y, std::span<const double> f) {
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) sum += log_loss_at(y[i], f[i]);
  return sum / static_cast<double>(y.size());
}

inline double mean_squared(std::span<const double> y, std::span<const double> f) {
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) sum += (y[i] - f[i]) * (y[i] - f[i]);
  return sum / static_cast<double>(y.size());
}

}  // namespace detail

inline GradientBoosting fit_gbm(const Matrix& x, std::span<const double> y,
                                const TreeParams& params, Task task) {
  params.validate();
  detail::check_fit_inputs(x, y, task);
  const std::size_t n = x.rows();
  GradientBoosting model;
  model.task = task;
  const double mean_y = mean_of(y);

  if (task == Task::kClassification && (mean_y == 0.0 || mean_y == 1.0)) {
    model.degenerate = true;
    model.base_score = logit(std::clamp(mean_y, kProbabilityFloor, 1.0 - kProbabilityFloor));
    return model;
  }
  model.base_score = task == Task::kClassification ? logit(mean_y) : mean_y;

  std::vector<double> score(n, model.base_score);
  std::vector<double> residual(n);
  auto loss = [&] {
    return task == Task::kClassification ? detail::mean_log_loss(y, score)
                                         : detail::mean_squared(y, score);
  };
  model.training_loss.push_back(loss());

  TreeParams tree_params = params;
  tree_params.feature_subsample = FeatureSubsample::kAll;
  std::vector<std::size_t> leaf_of(n);
  const auto presorted = detail::presort(x);
  for (int round = 0; round < params.n_trees; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      residual[i] = task == Task::kClassification ? y[i] - sigmoid(score[i]) : y[i] - score[i];
    }
    DecisionTree tree = fit_tree(x, residual, tree_params, Task::kRegression, {}, 0, nullptr, &presorted);
    auto& nodes = tree.mutable_nodes();
    for (std::size_t i = 0; i < n; ++i) leaf_of[i] = tree.leaf_index(x.row(i));

    if (task == Task::kRegression) {
      for (auto& node : nodes) {
        if (node.is_leaf()) node.value *= params.learning_rate;
      }
    } else {
      std::vector<double> grad(nodes.size(), 0.0), hess(nodes.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = sigmoid(score[i]);
        grad[leaf_of[i]] += residual[i];
        hess[leaf_of[i]] += p * (1.0 - p);
      }
      // Leaf-wise losses before and after a candidate step. The step is
      // halved while it would raise the leaf's training loss, so every round
      // is a descent step.
      std::vector<std::vector<std::size_t>> members(nodes.size());
      for (std::size_t i = 0; i < n; ++i) members[leaf_of[i]].push_back(i);
      for (std::size_t leaf = 0; leaf < nodes.size(); ++leaf) {
        if (!nodes[leaf].is_leaf()) continue;
        double step = params.learning_rate * grad[leaf] / std::max(hess[leaf], 1e-12);
        auto leaf_loss = [&](double delta) {
          double sum = 0.0;
          for (std::size_t i : members[leaf]) sum += detail::log_loss_at(y[i], score[i] + delta);
          return sum;
        };
        const double before = leaf_loss(0.0);
        int halvings = 0;
        while (step != 0.0 && leaf_loss(step) > before) {
          step = ++halvings < 60 ? step / 2.0 : 0.0;
        }
        nodes[leaf].value = step;
      }
    }
    for (std::size_t i = 0; i < n; ++i) score[i] += nodes[leaf_of[i]].value;
    model.trees.push_back(std::move(tree));
    model.training_loss.push_back(loss());
  }
  return model;
}

inline void to_json(nlohmann::json& j, const GradientBoosting& g) {
  j = nlohmann::json{{"task", g.task == Task::kRegression ? "regression" : "classification"},
                     {"base_score", g.base_score},
                     {"degenerate", g.degenerate},
                     {"training_loss", g.training_loss},
                     {"trees", g.trees}};
}

inline void from_json(const nlohmann::json& j, GradientBoosting& g) {
  g.task = j.at("task").get<std::string>() == "regression" ? Task::kRegression
                                                           : Task::kClassification;
  j.at("base_score").get_to(g.base_score);
  j.at("degenerate").get_to(g.degenerate);
  j.at("training_loss").get_to(g.training_loss);
  j.at("trees").get_to(g.trees);
}

}  // namespace mdew
