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

// Synthetic amputation of complete (or partially observed) datasets under
// MCAR, MAR and MNAR mechanisms. Ground truth of every newly masked cell is
// retained so imputation error can be measured afterwards.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"
#include "mdew/data.hpp"

namespace mdew {

enum class Mechanism { kNone, kMcar, kMar, kMnar };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::kNone: return "none";
    case Mechanism::kMcar: return "mcar";
    case Mechanism::kMar: return "mar";
    case Mechanism::kMnar: return "mnar";
  }
  return "none";
}

inline Mechanism parse_mechanism(const std::string& name) {
  if (name == "none") return Mechanism::kNone;
  if (name == "mcar") return Mechanism::kMcar;
  if (name == "mar") return Mechanism::kMar;
  if (name == "mnar") return Mechanism::kMnar;
  throw ConfigError("unknown missingness mechanism '" + name + "'");
}

struct AmputationPlan {
  Mechanism mechanism = Mechanism::kMcar;
  std::vector<std::size_t> masked_columns;
  std::vector<std::size_t> cause_columns;
  // One weight vector (over cause_columns) and one intercept per masked column.
  std::vector<std::vector<double>> logistic_weights;
  std::vector<double> intercepts;
  double target_rate = 0.3;
  // MNAR only: MCAR rate applied to the cause columns afterwards.
  double cause_rate = 0.0;
  std::uint64_t seed = 0;
};

struct GroundTruthCell {
  std::size_t row = 0;
  std::size_t col = 0;
  double value = 0.0;
};

struct AmputationResult {
  Dataset dataset;
  std::vector<GroundTruthCell> ground_truth;
  AmputationPlan plan;
};

struct AmputationOptions {
  double rate = 0.3;
  double column_fraction = 0.3;
  double cause_fraction = 3.0 / 7.0;
  double cause_rate = 0.3;
};

inline void to_json(nlohmann::json& j, const AmputationPlan& p) {
  j = nlohmann::json{{"mechanism", to_string(p.mechanism)},
                     {"masked_columns", p.masked_columns},
                     {"cause_columns", p.cause_columns},
                     {"logistic_weights", p.logistic_weights},
                     {"intercepts", p.intercepts},
                     {"target_rate", p.target_rate},
                     {"cause_rate", p.cause_rate},
                     {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, AmputationPlan& p) {
  p.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  j.at("masked_columns").get_to(p.masked_columns);
  j.at("cause_columns").get_to(p.cause_columns);
  j.at("logistic_weights").get_to(p.logistic_weights);
  j.at("intercepts").get_to(p.intercepts);
  j.at("target_rate").get_to(p.target_rate);
  j.at("cause_rate").get_to(p.cause_rate);
  j.at("seed").get_to(p.seed);
}

inline nlohmann::json amputation_json(const AmputationResult& result) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : result.ground_truth) {
    cells.push_back({cell.row, cell.col, cell.value});
  }
  return nlohmann::json{{"plan", result.plan}, {"ground_truth", std::move(cells)}};
}

// Intercept b with mean(sigmoid(z_i + b)) == target_rate, by bisection on
// [-30, 30]. The mean is monotone increasing in b.
inline double calibrate_intercept(std::span<const double> logits, double target_rate) {
  if (!(target_rate > 0.0 && target_rate < 1.0)) {
    throw ConfigError("target missing rate must lie in (0, 1)");
  }
  if (logits.empty()) return logit(target_rate);
  auto mean_rate = [&](double b) {
    double sum = 0.0;
    for (double z : logits) sum += sigmoid(z + b);
    return sum / static_cast<double>(logits.size());
  };
  double lo = -30.0;
  double hi = 30.0;
  for (int iter = 0; iter < 200 && hi - lo > 1e-13; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mean_rate(mid) < target_rate) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// ceil(fraction * d), at least 1.
inline std::size_t masked_column_count(std::size_t d, double column_fraction) {
  const double exact = column_fraction * static_cast<double>(d);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(exact - 1e-9)));
}

// round-half-up(fraction * remaining), at least 1 unless the fraction is zero.
inline std::size_t cause_column_count(std::size_t remaining, double cause_fraction) {
  if (cause_fraction <= 0.0) return 0;
  const double exact = cause_fraction * static_cast<double>(remaining);
  const auto count = static_cast<std::size_t>(std::floor(exact + 0.5 + 1e-9));
  return std::clamp<std::size_t>(count, 1, remaining);
}

namespace detail {

inline void check_rate(double rate) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("amputation rate must lie in (0, 1)");
}

inline void mask_cell(Dataset& data, std::vector<GroundTruthCell>& truth, std::size_t r,
                      std::size_t c) {
  truth.push_back({r, c, data.values(r, c)});
  data.values(r, c) = kNaN;
  data.mask[r * data.cols() + c] = 1;
}

inline void sort_truth(std::vector<GroundTruthCell>& truth) {
  std::sort(truth.begin(), truth.end(), [](const auto& a, const auto& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
}

inline AmputationResult ampute_logistic(const Dataset& input, Mechanism mechanism,
                                        const AmputationOptions& options, std::uint64_t seed) {
  check_rate(options.rate);
  const std::size_t d = input.cols();
  if (d < 2) throw DataError("logistic amputation needs at least 2 columns");
  const std::size_t n_masked = masked_column_count(d, options.column_fraction);
  if (n_masked > d) throw DataError("column fraction selects more columns than exist");
  const std::size_t remaining = d - n_masked;
  if (options.cause_fraction > 0.0 && remaining == 0) {
    throw DataError("too few columns to allocate both masked and cause columns");
  }
  const std::size_t n_cause = cause_column_count(remaining, options.cause_fraction);

  Rng rng(derive_seed(seed, "amputation", static_cast<std::uint64_t>(mechanism)));
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  AmputationResult result{input, {}, {}};
  AmputationPlan& plan = result.plan;
  plan.mechanism = mechanism;
  plan.target_rate = options.rate;
  plan.seed = seed;
  plan.masked_columns.assign(order.begin(), order.begin() + n_masked);
  plan.cause_columns.assign(order.begin() + n_masked, order.begin() + n_masked + n_cause);
  std::sort(plan.masked_columns.begin(), plan.masked_columns.end());
  std::sort(plan.cause_columns.begin(), plan.cause_columns.end());

  // Standardized cause values; missing cause cells sit at the column mean.
  const std::size_t n = input.rows();
  Matrix causes(n, n_cause);
  for (std::size_t k = 0; k < n_cause; ++k) {
    const std::size_t c = plan.cause_columns[k];
    double sum = 0.0, count = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!input.missing(r, c)) {
        sum += input.values(r, c);
        count += 1.0;
      }
    }
    if (count == 0.0) throw DataError("cause column is fully missing");
    const double mean = sum / count;
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!input.missing(r, c)) ss += (input.values(r, c) - mean) * (input.values(r, c) - mean);
    }
    const double sd = std::sqrt(ss / count) > 0.0 ? std::sqrt(ss / count) : 1.0;
    for (std::size_t r = 0; r < n; ++r) {
      causes(r, k) = input.missing(r, c) ? 0.0 : (input.values(r, c) - mean) / sd;
    }
  }

  std::vector<double> logits(n);
  for (std::size_t column : plan.masked_columns) {
    std::vector<double> weights(n_cause);
    for (double& w : weights) w = rng.normal();
    for (std::size_t r = 0; r < n; ++r) {
      double z = 0.0;
      for (std::size_t k = 0; k < n_cause; ++k) z += weights[k] * causes(r, k);
      logits[r] = z;
    }
    const double intercept = calibrate_intercept(logits, options.rate);
    for (std::size_t r = 0; r < n; ++r) {
      const bool hit = rng.bernoulli(sigmoid(logits[r] + intercept));
      if (hit && !result.dataset.missing(r, column)) {
        mask_cell(result.dataset, result.ground_truth, r, column);
      }
    }
    plan.logistic_weights.push_back(std::move(weights));
    plan.intercepts.push_back(intercept);
  }

  if (mechanism == Mechanism::kMnar) {
    check_rate(options.cause_rate);
    plan.cause_rate = options.cause_rate;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t column : plan.cause_columns) {
        const bool hit = rng.bernoulli(options.cause_rate);
        if (hit && !result.dataset.missing(r, column)) {
          mask_cell(result.dataset, result.ground_truth, r, column);
        }
      }
    }
  }
  sort_truth(result.ground_truth);
  return result;
}

}  // namespace detail

// Masks each observed cell independently with probability `rate`. A row that
// would end up fully missing gets one of its newly masked cells restored.
inline AmputationResult ampute_mcar(const Dataset& input, double rate, std::uint64_t seed) {
  detail::check_rate(rate);
  Rng rng(derive_seed(seed, "amputation", static_cast<std::uint64_t>(Mechanism::kMcar)));
  AmputationResult result{input, {}, {}};
  result.plan.mechanism = Mechanism::kMcar;
  result.plan.target_rate = rate;
  result.plan.seed = seed;
  result.plan.masked_columns.resize(input.cols());
  std::iota(result.plan.masked_columns.begin(), result.plan.masked_columns.end(), std::size_t{0});

  Dataset& data = result.dataset;
  const std::size_t d = data.cols();
  std::vector<std::size_t> fresh;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    fresh.clear();
    for (std::size_t c = 0; c < d; ++c) {
      if (!data.missing(r, c) && rng.bernoulli(rate)) fresh.push_back(c);
    }
    std::size_t observed_left = 0;
    for (std::size_t c = 0; c < d; ++c) observed_left += data.missing(r, c) ? 0 : 1;
    observed_left -= fresh.size();
    if (observed_left == 0 && !fresh.empty()) {
      fresh.erase(fresh.begin() + static_cast<std::ptrdiff_t>(rng.below(fresh.size())));
    }
    for (std::size_t c : fresh) detail::mask_cell(data, result.ground_truth, r, c);
  }
  return result;
}

inline AmputationResult ampute_mar(const Dataset& input, const AmputationOptions& options,
                                   std::uint64_t seed) {
  return detail::ampute_logistic(input, Mechanism::kMar, options, seed);
}

// MAR masking, after which the cause columns are themselves MCAR-masked, so
// the missingness of the masked columns depends on values that may be missing.
inline AmputationResult ampute_mnar(const Dataset& input, const AmputationOptions& options,
                                    std::uint64_t seed) {
  return detail::ampute_logistic(input, Mechanism::kMnar, options, seed);
}

inline AmputationResult ampute(const Dataset& input, Mechanism mechanism,
                               const AmputationOptions& options, std::uint64_t seed) {
  switch (mechanism) {
    case Mechanism::kMcar: return ampute_mcar(input, options.rate, seed);
    case Mechanism::kMar: return ampute_mar(input, options, seed);
    case Mechanism::kMnar: return ampute_mnar(input, options, seed);
    case Mechanism::kNone: break;
  }
  return AmputationResult{input, {}, AmputationPlan{Mechanism::kNone, {}, {}, {}, {}, 0.0, 0.0, seed}};
}

// RMSE over exactly the newly masked cells.
inline double imputation_rmse(const AmputationResult& result, const Matrix& imputed) {
  if (imputed.rows() != result.dataset.rows() || imputed.cols() != result.dataset.cols()) {
    throw DataError("imputed matrix dimension mismatch");
  }
  if (result.ground_truth.empty()) throw DataError("nothing was amputed");
  double sum = 0.0;
  for (const auto& cell : result.ground_truth) {
    const double diff = imputed(cell.row, cell.col) - cell.value;
    sum += diff * diff;
  }
  return std::sqrt(sum / static_cast<double>(result.ground_truth.size()));
}

}  // namespace mdew
