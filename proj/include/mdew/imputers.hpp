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

// Imputation stage of every pipeline: column means, nan-Euclidean KNN, and
// iterative chained-equation imputation with a pluggable regressor backbone.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"
#include "mdew/data.hpp"
#include "mdew/learners/model.hpp"

namespace mdew {

enum class ImputerKind { kMean, kKnn, kIterative };

struct ImputerSpec {
  ImputerKind kind = ImputerKind::kMean;
  // Iterative only.
  RegressorKind backbone = RegressorKind::kBayesRidge;
  TreeParams backbone_params;
  // KNN only.
  std::size_t k = 5;
  int max_rounds = 10;
  double tolerance = 1e-3;

  void validate() const {
    if (kind == ImputerKind::kKnn && k < 1) throw ConfigError("knn imputer requires k >= 1");
    if (kind == ImputerKind::kIterative) {
      if (max_rounds < 0) throw ConfigError("max_rounds must be >= 0");
      if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");
      if (backbone == RegressorKind::kKnn) {
        throw ConfigError("knn is not an iterative imputer backbone");
      }
      backbone_params.validate();
    }
  }

  // CLI-style name: mean, knn, ridge-iter, rf-iter, gbm-iter.
  std::string name() const {
    switch (kind) {
      case ImputerKind::kMean: return "mean";
      case ImputerKind::kKnn: return "knn";
      case ImputerKind::kIterative:
        switch (backbone) {
          case RegressorKind::kBayesRidge: return "ridge-iter";
          case RegressorKind::kForest: return "rf-iter";
          case RegressorKind::kBoosted: return "gbm-iter";
          case RegressorKind::kTree: return "tree-iter";
          case RegressorKind::kKnn: break;
        }
    }
    return "unknown";
  }

  friend bool operator==(const ImputerSpec& a, const ImputerSpec& b) {
    return a.kind == b.kind && a.backbone == b.backbone && a.k == b.k &&
           a.max_rounds == b.max_rounds && a.tolerance == b.tolerance &&
           nlohmann::json(a.backbone_params) == nlohmann::json(b.backbone_params);
  }
};

inline ImputerSpec parse_imputer_name(const std::string& name) {
  ImputerSpec spec;
  if (name == "mean") {
    spec.kind = ImputerKind::kMean;
  } else if (name == "knn") {
    spec.kind = ImputerKind::kKnn;
  } else if (name == "ridge-iter") {
    spec.kind = ImputerKind::kIterative;
    spec.backbone = RegressorKind::kBayesRidge;
  } else if (name == "rf-iter") {
    spec.kind = ImputerKind::kIterative;
    spec.backbone = RegressorKind::kForest;
  } else if (name == "gbm-iter") {
    spec.kind = ImputerKind::kIterative;
    spec.backbone = RegressorKind::kBoosted;
  } else if (name == "tree-iter") {
    spec.kind = ImputerKind::kIterative;
    spec.backbone = RegressorKind::kTree;
  } else {
    throw ConfigError("unknown imputer '" + name + "'");
  }
  return spec;
}

inline void to_json(nlohmann::json& j, const ImputerSpec& s) {
  j = nlohmann::json{{"name", s.name()},
                     {"k", s.k},
                     {"max_rounds", s.max_rounds},
                     {"tolerance", s.tolerance},
                     {"backbone_params", s.backbone_params}};
}

inline void from_json(const nlohmann::json& j, ImputerSpec& s) {
  s = parse_imputer_name(j.at("name").get<std::string>());
  if (j.contains("k")) j.at("k").get_to(s.k);
  if (j.contains("max_rounds")) j.at("max_rounds").get_to(s.max_rounds);
  if (j.contains("tolerance")) j.at("tolerance").get_to(s.tolerance);
  if (j.contains("backbone_params")) s.backbone_params = j.at("backbone_params").get<TreeParams>();
  s.validate();
}

// One regressor of the chained-equation sequence: predicts `column` from all
// other columns.
struct ImputationStep {
  std::size_t column = 0;
  Regressor regressor;
};

struct FittedImputer {
  ImputerSpec spec;
  std::vector<double> means;
  ScalerStats scaler;
  // KNN: the training rows, NaN where missing.
  Matrix reference;
  Mask reference_mask;
  // `reference` in z-scores, the space KNN distances are measured in.
  Matrix reference_scaled;
  // Iterative: sweeps in fit order, replayed verbatim by transform.
  std::vector<std::vector<ImputationStep>> rounds;
  // Max relative change of any imputed cell in each completed sweep.
  std::vector<double> round_changes;
  bool converged = false;

  std::size_t cols() const { return means.size(); }
};

namespace detail {

// Squared nan-Euclidean distance: squared differences over coordinates
// observed in both rows, scaled by d / #overlap. Returns -1 with no overlap.
inline double nan_euclidean_sq(std::span<const double> a, std::span<const std::uint8_t> a_mask,
                               std::span<const double> b, std::span<const std::uint8_t> b_mask) {
  double sum = 0.0;
  std::size_t overlap = 0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    if (a_mask[c] || b_mask[c]) continue;
    const double diff = a[c] - b[c];
    sum += diff * diff;
    ++overlap;
  }
  if (overlap == 0) return -1.0;
  return sum * static_cast<double>(a.size()) / static_cast<double>(overlap);
}

// Feature matrix without `column`, for the regressor of that column.
inline Matrix drop_column(const Matrix& x, std::size_t column, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), x.cols() - 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = x.row(rows[i]);
    auto dst = out.row(i);
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(column), dst.begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(column) + 1, src.end(),
              dst.begin() + static_cast<std::ptrdiff_t>(column));
  }
  return out;
}

inline void row_without(std::span<const double> row, std::size_t column, std::vector<double>& out) {
  out.clear();
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (c != column) out.push_back(row[c]);
  }
}

inline void check_shape(const FittedImputer& imputer, const Matrix& values, const Mask& mask) {
  if (values.cols() != imputer.cols()) throw DataError("imputer dimension mismatch");
  if (mask.size() != values.size()) throw DataError("mask and values differ in shape");
}

// Applies the stored sweeps to already mean-filled rows.
inline void replay_rounds(const FittedImputer& imputer, Matrix& filled, const Mask& mask) {
  const std::size_t d = filled.cols();
  std::vector<double> features;
  for (const auto& round : imputer.rounds) {
    for (const auto& step : round) {
      for (std::size_t r = 0; r < filled.rows(); ++r) {
        if (!mask[r * d + step.column]) continue;
        row_without(filled.row(r), step.column, features);
        filled(r, step.column) = step.regressor.predict(features);
      }
    }
  }
}

inline void knn_fill(const FittedImputer& imputer, Matrix& out, const Matrix& values,
                     const Mask& mask) {
  const std::size_t d = values.cols();
  const std::size_t n_ref = imputer.reference.rows();
  std::vector<double> query(d);
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t r = 0; r < values.rows(); ++r) {
    const auto row_mask = std::span<const std::uint8_t>(mask.data() + r * d, d);
    if (std::none_of(row_mask.begin(), row_mask.end(), [](auto m) { return m != 0; })) continue;
    for (std::size_t c = 0; c < d; ++c) {
      query[c] = row_mask[c] ? 0.0 : (values(r, c) - imputer.scaler.mean[c]) / imputer.scaler.std[c];
    }
    dist.clear();
    for (std::size_t t = 0; t < n_ref; ++t) {
      const double dd = nan_euclidean_sq(
          query, row_mask, imputer.reference_scaled.row(t),
          std::span<const std::uint8_t>(imputer.reference_mask.data() + t * d, d));
      if (dd >= 0.0) dist.emplace_back(dd, t);
    }
    std::sort(dist.begin(), dist.end());
    for (std::size_t c = 0; c < d; ++c) {
      if (!row_mask[c]) continue;
      double sum = 0.0;
      std::size_t used = 0;
      for (const auto& [dd, t] : dist) {
        if (used == imputer.spec.k) break;
        if (imputer.reference_mask[t * d + c]) continue;
        sum += imputer.reference(t, c);
        ++used;
      }
      out(r, c) = used > 0 ? sum / static_cast<double>(used) : imputer.means[c];
    }
  }
}

}  // namespace detail

// Complete matrix: observed cells pass through, missing cells are filled.
inline Matrix transform(const FittedImputer& imputer, const Matrix& values, const Mask& mask) {
  detail::check_shape(imputer, values, mask);
  const std::size_t d = values.cols();
  Matrix out = values;
  for (std::size_t r = 0; r < values.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      if (mask[r * d + c]) out(r, c) = imputer.means[c];
    }
  }
  switch (imputer.spec.kind) {
    case ImputerKind::kMean: break;
    case ImputerKind::kKnn: detail::knn_fill(imputer, out, values, mask); break;
    case ImputerKind::kIterative: detail::replay_rounds(imputer, out, mask); break;
  }
  return out;
}

inline Matrix transform(const FittedImputer& imputer, const Dataset& data) {
  return transform(imputer, data.values, data.mask);
}

// Fits on the observed cells of `data`. Iterative: cells start at column
// means; each sweep visits columns in ascending order of missing count, fits
// the backbone on rows where the column is observed and re-predicts its
// missing cells. Stops after max_rounds sweeps, or earlier once the largest
// change of an imputed cell, relative to its column std, drops below
// tolerance.
inline FittedImputer fit_imputer(const ImputerSpec& spec, const Dataset& data,
                                 std::uint64_t seed = 0) {
  spec.validate();
  if (data.rows() == 0) throw DataError("cannot fit an imputer on zero rows");
  FittedImputer imputer;
  imputer.spec = spec;
  imputer.scaler = fit_standardizer(data);
  imputer.means = imputer.scaler.mean;

  if (spec.kind == ImputerKind::kKnn) {
    imputer.reference = data.values;
    imputer.reference_mask = data.mask;
    imputer.reference_scaled = data.values;
    standardize_in_place(imputer.reference_scaled, imputer.scaler);
  }
  if (spec.kind != ImputerKind::kIterative) return imputer;

  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  Matrix filled = transform(imputer, data.values, data.mask);  // mean fill

  std::vector<std::size_t> missing_count(d, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) missing_count[c] += data.missing(r, c) ? 1 : 0;
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return missing_count[a] < missing_count[b]; });
  if (std::all_of(missing_count.begin(), missing_count.end(), [](auto m) { return m == 0; })) {
    imputer.converged = true;
    return imputer;
  }

  std::vector<double> features;
  for (int round = 0; round < spec.max_rounds; ++round) {
    std::vector<ImputationStep> steps;
    double max_change = 0.0;
    for (std::size_t column : order) {
      std::vector<std::size_t> observed, missing;
      for (std::size_t r = 0; r < n; ++r) {
        (data.missing(r, column) ? missing : observed).push_back(r);
      }
      const Matrix x = detail::drop_column(filled, column, observed);
      std::vector<double> y(observed.size());
      for (std::size_t i = 0; i < observed.size(); ++i) y[i] = filled(observed[i], column);
      TreeParams params = spec.backbone_params;
      params.seed = derive_seed(seed ^ params.seed, "imputer_step",
                                static_cast<std::uint64_t>(round) * d + column);
      Regressor regressor = fit_regressor(spec.backbone, x, y, params);
      for (std::size_t r : missing) {
        detail::row_without(filled.row(r), column, features);
        const double updated = regressor.predict(features);
        max_change = std::max(max_change,
                              std::abs(updated - filled(r, column)) / imputer.scaler.std[column]);
        filled(r, column) = updated;
      }
      steps.push_back({column, std::move(regressor)});
    }
    imputer.rounds.push_back(std::move(steps));
    imputer.round_changes.push_back(max_change);
    if (max_change < spec.tolerance) {
      imputer.converged = true;
      break;
    }
  }
  return imputer;
}

// Fits on `train` only and transforms train plus every other split with the
// same fitted state.
inline std::pair<FittedImputer, std::vector<Matrix>> impute_dataset(
    const ImputerSpec& spec, const Dataset& train, std::span<const Dataset> others,
    std::uint64_t seed = 0) {
  FittedImputer imputer = fit_imputer(spec, train, seed);
  std::vector<Matrix> outputs;
  outputs.push_back(transform(imputer, train));
  for (const auto& other : others) outputs.push_back(transform(imputer, other));
  return {std::move(imputer), std::move(outputs)};
}

inline void to_json(nlohmann::json& j, const FittedImputer& imp) {
  j = nlohmann::json{{"version", kModelFormatVersion},
                     {"spec", imp.spec},
                     {"means", imp.means},
                     {"scaler", imp.scaler},
                     {"round_changes", imp.round_changes},
                     {"converged", imp.converged}};
  if (imp.spec.kind == ImputerKind::kKnn) {
    std::vector<double> cells(imp.reference.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      cells[i] = imp.reference_mask[i] ? 0.0 : imp.reference.data()[i];
    }
    j["reference"] = {{"rows", imp.reference.rows()},
                      {"cols", imp.reference.cols()},
                      {"values", cells},
                      {"mask", imp.reference_mask}};
  }
  if (imp.spec.kind == ImputerKind::kIterative) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& round : imp.rounds) {
      nlohmann::json steps = nlohmann::json::array();
      for (const auto& step : round) {
        steps.push_back({{"column", step.column}, {"regressor", step.regressor}});
      }
      rounds.push_back(std::move(steps));
    }
    j["rounds"] = std::move(rounds);
  }
}

inline void from_json(const nlohmann::json& j, FittedImputer& imp) {
  detail::check_model_version(j);
  imp = FittedImputer{};
  j.at("spec").get_to(imp.spec);
  j.at("means").get_to(imp.means);
  j.at("scaler").get_to(imp.scaler);
  j.at("round_changes").get_to(imp.round_changes);
  j.at("converged").get_to(imp.converged);
  if (j.contains("reference")) {
    const auto& ref = j.at("reference");
    imp.reference = Matrix(ref.at("rows").get<std::size_t>(), ref.at("cols").get<std::size_t>(),
                           ref.at("values").get<std::vector<double>>());
    ref.at("mask").get_to(imp.reference_mask);
    for (std::size_t i = 0; i < imp.reference_mask.size(); ++i) {
      if (imp.reference_mask[i]) imp.reference.data()[i] = kNaN;
    }
    imp.reference_scaled = imp.reference;
    standardize_in_place(imp.reference_scaled, imp.scaler);
  }
  if (j.contains("rounds")) {
    for (const auto& round : j.at("rounds")) {
      std::vector<ImputationStep> steps;
      for (const auto& step : round) {
        steps.push_back({step.at("column").get<std::size_t>(), step.at("regressor").get<Regressor>()});
      }
      imp.rounds.push_back(std::move(steps));
    }
  }
}

}  // namespace mdew
