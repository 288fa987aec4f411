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

// Type-erased regressors and classifiers over the concrete learners, with a
// versioned JSON form.

#pragma once

#include <algorithm>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mdew/learners/forest.hpp"
#include "mdew/learners/gbm.hpp"
#include "mdew/learners/knn.hpp"
#include "mdew/learners/linear.hpp"
#include "mdew/learners/tree.hpp"

namespace mdew {

inline constexpr int kModelFormatVersion = 1;

enum class RegressorKind { kBayesRidge, kKnn, kTree, kForest, kBoosted };
enum class ClassifierKind { kTree, kForest, kBoosted, kConstant };

inline std::string to_string(RegressorKind k) {
  switch (k) {
    case RegressorKind::kBayesRidge: return "bayes_ridge";
    case RegressorKind::kKnn: return "knn";
    case RegressorKind::kTree: return "tree";
    case RegressorKind::kForest: return "forest";
    case RegressorKind::kBoosted: return "boosted";
  }
  return "bayes_ridge";
}

inline RegressorKind parse_regressor_kind(const std::string& s) {
  if (s == "bayes_ridge" || s == "ridge") return RegressorKind::kBayesRidge;
  if (s == "knn") return RegressorKind::kKnn;
  if (s == "tree") return RegressorKind::kTree;
  if (s == "forest" || s == "rf") return RegressorKind::kForest;
  if (s == "boosted" || s == "gbm") return RegressorKind::kBoosted;
  throw ConfigError("unknown regressor kind '" + s + "'");
}

inline std::string to_string(ClassifierKind k) {
  switch (k) {
    case ClassifierKind::kTree: return "tree";
    case ClassifierKind::kForest: return "rf";
    case ClassifierKind::kBoosted: return "gbm";
    case ClassifierKind::kConstant: return "constant";
  }
  return "rf";
}

inline ClassifierKind parse_classifier_kind(const std::string& s) {
  if (s == "tree") return ClassifierKind::kTree;
  if (s == "rf" || s == "forest" || s == "random_forest") return ClassifierKind::kForest;
  if (s == "gbm" || s == "boosted") return ClassifierKind::kBoosted;
  if (s == "constant") return ClassifierKind::kConstant;
  throw ConfigError("unknown classifier kind '" + s + "'");
}

// Always predicts the same probability.
struct ConstantClassifier {
  double probability = 0.5;
  double predict(std::span<const double>) const { return probability; }
};

class Regressor {
 public:
  using Model = std::variant<LinearModel, KnnRegressor, DecisionTree, RandomForest, GradientBoosting>;

  Regressor() = default;
  explicit Regressor(Model model) : model_(std::move(model)) {}

  double predict(std::span<const double> x) const {
    return std::visit([&](const auto& m) { return m.predict(x); }, model_);
  }
  RegressorKind kind() const { return static_cast<RegressorKind>(model_.index()); }
  const Model& model() const { return model_; }

 private:
  Model model_;
};

class Classifier {
 public:
  using Model = std::variant<DecisionTree, RandomForest, GradientBoosting, ConstantClassifier>;

  Classifier() = default;
  explicit Classifier(Model model) : model_(std::move(model)) {}

  // Probability of the positive class, in [0, 1].
  double predict_proba(std::span<const double> x) const {
    const double p = std::visit([&](const auto& m) { return m.predict(x); }, model_);
    return std::clamp(p, 0.0, 1.0);
  }
  ClassifierKind kind() const { return static_cast<ClassifierKind>(model_.index()); }
  const Model& model() const { return model_; }

 private:
  Model model_;
};

inline Regressor fit_regressor(RegressorKind kind, const Matrix& x, std::span<const double> y,
                               const TreeParams& params, std::size_t knn_k = 5) {
  switch (kind) {
    case RegressorKind::kBayesRidge: return Regressor(fit_bayes_ridge(x, y));
    case RegressorKind::kKnn: return Regressor(fit_knn_regressor(x, y, knn_k));
    case RegressorKind::kTree: return Regressor(fit_tree(x, y, params, Task::kRegression));
    case RegressorKind::kForest:
      return Regressor(fit_random_forest(x, y, params, Task::kRegression));
    case RegressorKind::kBoosted: return Regressor(fit_gbm(x, y, params, Task::kRegression));
  }
  throw ConfigError("unknown regressor kind");
}

inline Classifier fit_classifier(ClassifierKind kind, const Matrix& x, std::span<const int> target,
                                 const TreeParams& params) {
  std::vector<double> y(target.begin(), target.end());
  switch (kind) {
    case ClassifierKind::kTree: return Classifier(fit_tree(x, y, params, Task::kClassification));
    case ClassifierKind::kForest:
      return Classifier(fit_random_forest(x, y, params, Task::kClassification));
    case ClassifierKind::kBoosted: return Classifier(fit_gbm(x, y, params, Task::kClassification));
    case ClassifierKind::kConstant: return Classifier(ConstantClassifier{mean_of(y)});
  }
  throw ConfigError("unknown classifier kind");
}

inline void to_json(nlohmann::json& j, const ConstantClassifier& c) {
  j = nlohmann::json{{"probability", c.probability}};
}
inline void from_json(const nlohmann::json& j, ConstantClassifier& c) {
  j.at("probability").get_to(c.probability);
}

inline void to_json(nlohmann::json& j, const Regressor& r) {
  j = nlohmann::json{{"version", kModelFormatVersion}, {"kind", to_string(r.kind())}};
  std::visit([&](const auto& m) { j["model"] = m; }, r.model());
}

inline void to_json(nlohmann::json& j, const Classifier& c) {
  j = nlohmann::json{{"version", kModelFormatVersion}, {"kind", to_string(c.kind())}};
  std::visit([&](const auto& m) { j["model"] = m; }, c.model());
}

namespace detail {
inline void check_model_version(const nlohmann::json& j) {
  if (j.at("version").get<int>() != kModelFormatVersion) {
    throw DataError("unsupported model format version");
  }
}
}  // namespace detail

inline void from_json(const nlohmann::json& j, Regressor& r) {
  detail::check_model_version(j);
  const auto& m = j.at("model");
  switch (parse_regressor_kind(j.at("kind").get<std::string>())) {
    case RegressorKind::kBayesRidge: r = Regressor(m.get<LinearModel>()); break;
    case RegressorKind::kKnn: r = Regressor(m.get<KnnRegressor>()); break;
    case RegressorKind::kTree: r = Regressor(m.get<DecisionTree>()); break;
    case RegressorKind::kForest: r = Regressor(m.get<RandomForest>()); break;
    case RegressorKind::kBoosted: r = Regressor(m.get<GradientBoosting>()); break;
  }
}

inline void from_json(const nlohmann::json& j, Classifier& c) {
  detail::check_model_version(j);
  const auto& m = j.at("model");
  switch (parse_classifier_kind(j.at("kind").get<std::string>())) {
    case ClassifierKind::kTree: c = Classifier(m.get<DecisionTree>()); break;
    case ClassifierKind::kForest: c = Classifier(m.get<RandomForest>()); break;
    case ClassifierKind::kBoosted: c = Classifier(m.get<GradientBoosting>()); break;
    case ClassifierKind::kConstant: c = Classifier(m.get<ConstantClassifier>()); break;
  }
}

}  // namespace mdew
