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

// Greedy CART decision trees on complete feature matrices.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"

namespace mdew {

enum class Task { kRegression, kClassification };

enum class FeatureSubsample { kAuto, kSqrt, kThird, kAll };

inline std::string to_string(FeatureSubsample f) {
  switch (f) {
    case FeatureSubsample::kAuto: return "auto";
    case FeatureSubsample::kSqrt: return "sqrt";
    case FeatureSubsample::kThird: return "third";
    case FeatureSubsample::kAll: return "all";
  }
  return "auto";
}

inline FeatureSubsample parse_feature_subsample(const std::string& s) {
  if (s == "auto") return FeatureSubsample::kAuto;
  if (s == "sqrt") return FeatureSubsample::kSqrt;
  if (s == "third") return FeatureSubsample::kThird;
  if (s == "all") return FeatureSubsample::kAll;
  throw ConfigError("unknown feature_subsample '" + s + "'");
}

struct TreeParams {
  int max_depth = 4;
  int n_trees = 50;
  double learning_rate = 0.3;
  int min_samples_leaf = 1;
  // kAuto resolves to sqrt for classification forests and third for
  // regression forests. Single trees and boosting always use every feature.
  FeatureSubsample feature_subsample = FeatureSubsample::kAuto;
  bool bootstrap = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_depth < 1) throw ConfigError("max_depth must be >= 1");
    if (n_trees < 1) throw ConfigError("n_trees must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
      throw ConfigError("learning_rate must lie in (0, 1]");
    }
    if (min_samples_leaf < 1) throw ConfigError("min_samples_leaf must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TreeParams& p) {
  j = nlohmann::json{{"max_depth", p.max_depth},
                     {"n_trees", p.n_trees},
                     {"learning_rate", p.learning_rate},
                     {"min_samples_leaf", p.min_samples_leaf},
                     {"feature_subsample", to_string(p.feature_subsample)},
                     {"bootstrap", p.bootstrap},
                     {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, TreeParams& p) {
  p = TreeParams{};
  if (j.contains("max_depth")) j.at("max_depth").get_to(p.max_depth);
  if (j.contains("n_trees")) j.at("n_trees").get_to(p.n_trees);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(p.learning_rate);
  if (j.contains("min_samples_leaf")) j.at("min_samples_leaf").get_to(p.min_samples_leaf);
  if (j.contains("feature_subsample")) {
    p.feature_subsample = parse_feature_subsample(j.at("feature_subsample").get<std::string>());
  }
  if (j.contains("bootstrap")) j.at("bootstrap").get_to(p.bootstrap);
  if (j.contains("seed")) j.at("seed").get_to(p.seed);
  p.validate();
}

inline std::size_t resolve_max_features(FeatureSubsample mode, Task task, std::size_t d) {
  if (mode == FeatureSubsample::kAuto) {
    mode = task == Task::kClassification ? FeatureSubsample::kSqrt : FeatureSubsample::kThird;
  }
  switch (mode) {
    case FeatureSubsample::kSqrt:
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(d))));
    case FeatureSubsample::kThird: return std::max<std::size_t>(1, (d + 2) / 3);
    default: return d;
  }
}

struct TreeNode {
  // -1 marks a leaf.
  int feature = -1;
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  double value = 0.0;
  std::uint32_t samples = 0;

  bool is_leaf() const { return feature < 0; }
};

class DecisionTree {
 public:
  DecisionTree() = default;
  explicit DecisionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

  std::size_t leaf_index(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes_[i].is_leaf()) {
      const auto& node = nodes_[i];
      i = x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
    }
    return i;
  }

  double predict(std::span<const double> x) const { return nodes_[leaf_index(x)].value; }

  int depth() const { return depth_from(0); }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::vector<TreeNode>& mutable_nodes() { return nodes_; }

 private:
  int depth_from(std::size_t i) const {
    if (nodes_[i].is_leaf()) return 0;
    return 1 + std::max(depth_from(nodes_[i].left), depth_from(nodes_[i].right));
  }

  std::vector<TreeNode> nodes_;
};

inline void to_json(nlohmann::json& j, const DecisionTree& tree) {
  // Compact columnar encoding: [feature, threshold, left, right, value].
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : tree.nodes()) {
    nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
  }
  j = std::move(nodes);
}

inline void from_json(const nlohmann::json& j, DecisionTree& tree) {
  std::vector<TreeNode> nodes;
  for (const auto& row : j) {
    TreeNode n;
    n.feature = row.at(0).get<int>();
    n.threshold = row.at(1).get<double>();
    n.left = row.at(2).get<std::uint32_t>();
    n.right = row.at(3).get<std::uint32_t>();
    n.value = row.at(4).get<double>();
    nodes.push_back(n);
  }
  tree = DecisionTree(std::move(nodes));
}

// Axis-aligned split: rows with x[feature] <= threshold go left.
struct SplitCandidate {
  int feature = -1;
  double threshold = 0.0;
  double decrease = 0.0;
};

namespace detail {

// Sum-of-impurity of a node given sufficient statistics. Regression: SSE.
// Classification: n * Gini = n - (c0^2 + c1^2) / n.
inline double node_impurity(Task task, double n, double sum, double sum_sq) {
  if (n <= 0) return 0.0;
  if (task == Task::kRegression) return std::max(0.0, sum_sq - sum * sum / n);
  const double c1 = sum;
  const double c0 = n - sum;
  return n - (c0 * c0 + c1 * c1) / n;
}

// Row indices sorted by value, one order per feature. Computed once per
// matrix and shared by every tree fit on it.
struct SortedIndex {
  std::vector<std::vector<std::uint32_t>> order;
};

inline SortedIndex presort(const Matrix& x) {
  SortedIndex index;
  index.order.resize(x.cols());
  for (std::size_t f = 0; f < x.cols(); ++f) {
    auto& order = index.order[f];
    order.resize(x.rows());
    std::iota(order.begin(), order.end(), std::uint32_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return x(a, f) < x(b, f); });
  }
  return index;
}

// Depth-first CART growth. Every feature keeps its own value-sorted copy of
// the sample; a node owns the same [begin, end) segment in each copy, and a
// split stably partitions all copies, so no node ever re-sorts.
class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, std::span<const double> y, const TreeParams& params, Task task,
              std::size_t max_features, Rng* rng)
      : x_(x), y_(y), params_(params), task_(task), max_features_(max_features), rng_(rng) {
    features_.resize(x.cols());
    std::iota(features_.begin(), features_.end(), std::size_t{0});
  }

  DecisionTree build(const std::vector<std::size_t>& rows, const SortedIndex& index) {
    if (rows.empty()) throw ComputeError("cannot fit a tree on an empty node");
    std::vector<std::uint32_t> multiplicity(x_.rows(), 0);
    for (std::size_t r : rows) ++multiplicity[r];
    members_.assign(rows.begin(), rows.end());
    sorted_.assign(x_.cols(), {});
    for (std::size_t f = 0; f < x_.cols(); ++f) {
      auto& list = sorted_[f];
      list.reserve(rows.size());
      for (std::uint32_t r : index.order[f]) list.insert(list.end(), multiplicity[r], r);
    }
    scratch_.resize(rows.size());
    goes_left_.assign(x_.rows(), 0);
    grow(0, rows.size(), 0);
    return DecisionTree(std::move(nodes_));
  }

 private:
  SplitCandidate best_split(std::size_t begin, std::size_t end, double sum, double sum_sq) {
    const double n = static_cast<double>(end - begin);
    const double parent = node_impurity(task_, n, sum, sum_sq);
    const auto min_leaf = static_cast<std::size_t>(params_.min_samples_leaf);

    SplitCandidate best;
    bool found = false;
    std::size_t visited = 0;
    const bool sample = max_features_ < features_.size();
    std::vector<std::size_t> order = features_;
    if (sample) rng_->shuffle(order);

    for (std::size_t fi = 0; fi < order.size() && visited < max_features_; ++fi) {
      const std::size_t f = order[fi];
      const auto& list = sorted_[f];
      if (x_(list[begin], f) == x_(list[end - 1], f)) continue;  // constant in this node
      ++visited;
      double left_sum = 0.0, left_sq = 0.0;
      for (std::size_t i = begin; i + 1 < end; ++i) {
        const double yi = y_[list[i]];
        left_sum += yi;
        left_sq += yi * yi;
        const double lo = x_(list[i], f);
        const double hi = x_(list[i + 1], f);
        if (lo == hi) continue;
        const std::size_t n_left = i + 1 - begin;
        const std::size_t n_right = end - begin - n_left;
        if (n_left < min_leaf || n_right < min_leaf) continue;
        const double decrease =
            parent - node_impurity(task_, static_cast<double>(n_left), left_sum, left_sq) -
            node_impurity(task_, static_cast<double>(n_right), sum - left_sum, sum_sq - left_sq);
        if (!found || decrease > best.decrease) {
          double threshold = lo + (hi - lo) / 2.0;
          if (!(threshold < hi)) threshold = lo;
          best = {static_cast<int>(f), threshold, decrease};
          found = true;
        }
      }
    }
    return best;
  }

  // Stable partition of one list segment by goes_left_; returns the left size.
  std::size_t partition(std::vector<std::uint32_t>& list, std::size_t begin, std::size_t end) {
    std::size_t left = begin;
    std::size_t right = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const std::uint32_t r = list[i];
      if (goes_left_[r]) {
        list[left++] = r;
      } else {
        scratch_[right++] = r;
      }
    }
    std::copy_n(scratch_.begin(), right, list.begin() + static_cast<std::ptrdiff_t>(left));
    return left - begin;
  }

  std::uint32_t grow(std::size_t begin, std::size_t end, int depth) {
    const auto index = static_cast<std::uint32_t>(nodes_.size());
    nodes_.emplace_back();
    double sum = 0.0, sum_sq = 0.0;
    bool pure = true;
    const double first = y_[members_[begin]];
    for (std::size_t i = begin; i < end; ++i) {
      const double yi = y_[members_[i]];
      sum += yi;
      sum_sq += yi * yi;
      pure = pure && yi == first;
    }
    const std::size_t count = end - begin;
    nodes_[index].value = sum / static_cast<double>(count);
    nodes_[index].samples = static_cast<std::uint32_t>(count);
    if (depth >= params_.max_depth || pure ||
        count < 2 * static_cast<std::size_t>(params_.min_samples_leaf)) {
      return index;
    }
    const SplitCandidate split = best_split(begin, end, sum, sum_sq);
    if (split.feature < 0) return index;

    const auto f = static_cast<std::size_t>(split.feature);
    for (std::size_t i = begin; i < end; ++i) {
      const std::uint32_t r = members_[i];
      goes_left_[r] = x_(r, f) <= split.threshold ? 1 : 0;
    }
    const std::size_t n_left = partition(members_, begin, end);
    for (auto& list : sorted_) partition(list, begin, end);

    const std::uint32_t l = grow(begin, begin + n_left, depth + 1);
    const std::uint32_t r = grow(begin + n_left, end, depth + 1);
    nodes_[index].feature = split.feature;
    nodes_[index].threshold = split.threshold;
    nodes_[index].left = l;
    nodes_[index].right = r;
    return index;
  }

  const Matrix& x_;
  std::span<const double> y_;
  const TreeParams& params_;
  Task task_;
  std::size_t max_features_;
  Rng* rng_;
  std::vector<std::size_t> features_;
  std::vector<std::uint32_t> members_;
  std::vector<std::vector<std::uint32_t>> sorted_;
  std::vector<std::uint32_t> scratch_;
  std::vector<std::uint8_t> goes_left_;
  std::vector<TreeNode> nodes_;
};

inline void check_fit_inputs(const Matrix& x, std::span<const double> y, Task task) {
  if (x.rows() == 0) throw ComputeError("empty training set");
  if (y.size() != x.rows()) throw ComputeError("target length differs from row count");
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw ComputeError("training matrix has non-finite cells");
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw ComputeError("training target has non-finite values");
    if (task == Task::kClassification && v != 0.0 && v != 1.0) {
      throw ComputeError("classification targets must be 0 or 1");
    }
  }
}

}  // namespace detail

// Fits one CART tree using every feature at every split. `rows` (possibly with
// repeats) selects the training sample; empty means all rows.
inline DecisionTree fit_tree(const Matrix& x, std::span<const double> y, const TreeParams& params,
                             Task task, std::vector<std::size_t> rows = {},
                             std::size_t max_features = 0, Rng* rng = nullptr,
                             const detail::SortedIndex* presorted = nullptr) {
  params.validate();
  detail::check_fit_inputs(x, y, task);
  if (rows.empty()) {
    rows.resize(x.rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  if (max_features == 0 || max_features > x.cols()) max_features = x.cols();
  if (max_features < x.cols() && rng == nullptr) {
    throw ComputeError("feature subsampling requires a random stream");
  }
  detail::TreeBuilder builder(x, y, params, task, max_features, rng);
  if (presorted) return builder.build(rows, *presorted);
  return builder.build(rows, detail::presort(x));
}

}  // namespace mdew
