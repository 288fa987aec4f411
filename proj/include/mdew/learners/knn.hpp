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

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"

namespace mdew {

// Indices of the k rows of `points` closest to `query` under squared
// Euclidean distance, nearest first; equal distances resolve to the lower
// row index.
inline std::vector<std::size_t> nearest_rows(const Matrix& points, std::span<const double> query,
                                             std::size_t k) {
  std::vector<std::pair<double, std::size_t>> dist(points.rows());
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const auto row = points.row(r);
    double sum = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) sum += (row[c] - query[c]) * (row[c] - query[c]);
    dist[r] = {sum, r};
  }
  k = std::min(k, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

// Unweighted k-nearest-neighbor regression; uses all rows when n < k.
struct KnnRegressor {
  Matrix points;
  std::vector<double> targets;
  std::size_t k = 5;

  double predict(std::span<const double> x) const {
    const auto neighbors = nearest_rows(points, x, k);
    double sum = 0.0;
    for (std::size_t i : neighbors) sum += targets[i];
    return sum / static_cast<double>(neighbors.size());
  }
};

inline KnnRegressor fit_knn_regressor(const Matrix& x, std::span<const double> y, std::size_t k) {
  if (k < 1) throw ConfigError("knn requires k >= 1");
  if (x.rows() == 0) throw ComputeError("empty training set");
  if (y.size() != x.rows()) throw ComputeError("target length differs from row count");
  return KnnRegressor{x, std::vector<double>(y.begin(), y.end()), k};
}

inline void to_json(nlohmann::json& j, const KnnRegressor& m) {
  j = nlohmann::json{{"k", m.k},
                     {"rows", m.points.rows()},
                     {"cols", m.points.cols()},
                     {"points", m.points.data()},
                     {"targets", m.targets}};
}

inline void from_json(const nlohmann::json& j, KnnRegressor& m) {
  m.k = j.at("k").get<std::size_t>();
  m.points = Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                    j.at("points").get<std::vector<double>>());
  j.at("targets").get_to(m.targets);
}

}  // namespace mdew
