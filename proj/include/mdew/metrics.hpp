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

// Evaluation metrics and statistics: ranking metrics, probability errors,
// paired t-test, calibration curves, Platt scaling and cross-experiment
// ranking.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"

namespace mdew {

struct ScoredSet {
  std::vector<int> targets;
  std::vector<double> probabilities;
  std::string label;

  std::size_t size() const { return targets.size(); }
};

namespace detail {

inline void check_scored(const ScoredSet& s) {
  if (s.targets.size() != s.probabilities.size()) {
    throw DataError("targets and probabilities differ in length");
  }
}

inline std::pair<std::size_t, std::size_t> class_counts(const ScoredSet& s) {
  const auto pos = static_cast<std::size_t>(std::count(s.targets.begin(), s.targets.end(), 1));
  return {pos, s.targets.size() - pos};
}

// Indices ordered by probability (descending when `descending`).
inline std::vector<std::size_t> order_by_score(const ScoredSet& s, bool descending) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return descending ? s.probabilities[a] > s.probabilities[b]
                      : s.probabilities[a] < s.probabilities[b];
  });
  return order;
}

}  // namespace detail

// Mann-Whitney AUROC: (concordant + 0.5 * tied) / (n+ * n-), accumulated as
// the integer 2*concordant + tied so the result is exact.
inline double auroc(const ScoredSet& s) {
  detail::check_scored(s);
  const auto [n_pos, n_neg] = detail::class_counts(s);
  if (n_pos == 0 || n_neg == 0) throw DataError("AUROC needs both classes");
  const auto order = detail::order_by_score(s, false);
  double twice_concordant = 0.0;
  double negatives_below = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && s.probabilities[order[j]] == s.probabilities[order[i]]) {
      (s.targets[order[j]] == 1 ? pos : neg) += 1.0;
      ++j;
    }
    twice_concordant += 2.0 * pos * negatives_below + pos * neg;
    negatives_below += neg;
    i = j;
  }
  return twice_concordant / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Step-sum average precision: sum over descending thresholds of
// (R_n - R_{n-1}) * P_n, with tied scores forming one threshold.
inline double average_precision(const ScoredSet& s) {
  detail::check_scored(s);
  const auto [n_pos, n_neg] = detail::class_counts(s);
  (void)n_neg;
  if (n_pos == 0) throw DataError("average precision needs at least one positive");
  const auto order = detail::order_by_score(s, true);
  double tp = 0.0, fp = 0.0, previous_recall = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s.probabilities[order[j]] == s.probabilities[order[i]]) {
      (s.targets[order[j]] == 1 ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / static_cast<double>(n_pos);
    const double precision = tp / (tp + fp);
    ap += (recall - previous_recall) * precision;
    previous_recall = recall;
    i = j;
  }
  return ap;
}

inline double brier(const ScoredSet& s) {
  detail::check_scored(s);
  if (s.size() == 0) throw DataError("Brier score of an empty set");
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double diff = s.probabilities[i] - static_cast<double>(s.targets[i]);
    sum += diff * diff;
  }
  return sum / static_cast<double>(s.size());
}

// |p_i - y_i| for every sample.
inline std::vector<double> per_sample_errors(const ScoredSet& s) {
  detail::check_scored(s);
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = std::abs(s.probabilities[i] - static_cast<double>(s.targets[i]));
  }
  return out;
}

// Fraction of indices where a is strictly below b.
inline double fraction_improved(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("error vectors differ in length");
  if (a.empty()) throw DataError("empty error vectors");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < a.size(); ++i) wins += a[i] < b[i] ? 1 : 0;
  return static_cast<double>(wins) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Student t distribution

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-15;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 20000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) return h;
  }
  throw ComputeError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

inline double student_t_cdf(double t, double df) {
  if (std::isnan(t)) return kNaN;
  if (std::isinf(t)) return t < 0 ? 0.0 : 1.0;
  const double x = df / (df + t * t);
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
  return t < 0 ? tail : 1.0 - tail;
}

struct TTestResult {
  double t_statistic = 0.0;
  std::size_t degrees_of_freedom = 0;
  double p_value = 0.5;
  std::string alternative = "less";
  // All differences identical: t is 0 or infinite by convention.
  bool degenerate = false;
};

inline void to_json(nlohmann::json& j, const TTestResult& r) {
  j = nlohmann::json{{"t_statistic", r.t_statistic},
                     {"degrees_of_freedom", r.degrees_of_freedom},
                     {"p_value", r.p_value},
                     {"alternative", r.alternative},
                     {"degenerate", r.degenerate}};
}

inline void from_json(const nlohmann::json& j, TTestResult& r) {
  // Infinite t statistics serialize as null; the sign follows the p-value.
  j.at("degrees_of_freedom").get_to(r.degrees_of_freedom);
  j.at("p_value").get_to(r.p_value);
  const auto& t = j.at("t_statistic");
  const double inf = std::numeric_limits<double>::infinity();
  r.t_statistic = t.is_null() ? (r.p_value < 0.5 ? -inf : inf) : t.get<double>();
  j.at("alternative").get_to(r.alternative);
  j.at("degenerate").get_to(r.degenerate);
}

// One-sided paired t-test of H1: mean(a - b) < 0.
inline TTestResult paired_t_test_less(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("paired samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw DataError("paired t-test needs at least 2 pairs");
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
  const double mean = mean_of(diff);
  double ss = 0.0;
  for (double v : diff) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult result;
  result.degrees_of_freedom = n - 1;
  if (sd == 0.0) {
    result.degenerate = true;
    if (mean == 0.0) {
      result.t_statistic = 0.0;
      result.p_value = 0.5;
    } else {
      result.t_statistic = mean < 0 ? -std::numeric_limits<double>::infinity()
                                    : std::numeric_limits<double>::infinity();
      result.p_value = mean < 0 ? 0.0 : 1.0;
    }
    return result;
  }
  result.t_statistic = mean / (sd / std::sqrt(static_cast<double>(n)));
  result.p_value = student_t_cdf(result.t_statistic, static_cast<double>(n - 1));
  return result;
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  // NaN for empty bins.
  double mean_predicted = kNaN;
  double fraction_positive = kNaN;
};

struct CalibrationCurve {
  std::size_t n_bins = 0;
  std::vector<CalibrationBin> bins;
};

// Uniform-width bins on [0, 1]; the last bin is closed on the right.
inline CalibrationCurve calibration_curve(const ScoredSet& s, std::size_t n_bins = 10) {
  detail::check_scored(s);
  if (n_bins < 2) throw ConfigError("calibration curve needs at least 2 bins");
  CalibrationCurve curve{n_bins, std::vector<CalibrationBin>(n_bins)};
  std::vector<double> prob_sum(n_bins, 0.0), pos_sum(n_bins, 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp(s.probabilities[i], 0.0, 1.0);
    const auto bin = std::min(n_bins - 1, static_cast<std::size_t>(p * static_cast<double>(n_bins)));
    ++curve.bins[bin].count;
    prob_sum[bin] += s.probabilities[i];
    pos_sum[bin] += s.targets[i];
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    auto& bin = curve.bins[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(n_bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    if (bin.count > 0) {
      bin.mean_predicted = prob_sum[b] / static_cast<double>(bin.count);
      bin.fraction_positive = pos_sum[b] / static_cast<double>(bin.count);
    }
  }
  return curve;
}

// p -> sigmoid(a * p + b).
struct PlattMap {
  double a = 0.0;
  double b = 0.0;
  int iterations = 0;
  // |a| hit the clamp because the classes are perfectly separated by p.
  bool separated = false;
  bool monotone_increasing() const { return a > 0.0; }

  double operator()(double p) const { return sigmoid(a * p + b); }
};

inline constexpr double kPlattSlopeLimit = 1e3;

// Fits sigmoid(a * p + b) to the labels by Newton iterations on log-loss with
// step halving.
inline PlattMap platt_calibrate(const ScoredSet& train, int max_iterations = 100,
                                double tolerance = 1e-8) {
  detail::check_scored(train);
  const auto [n_pos, n_neg] = detail::class_counts(train);
  if (n_pos == 0 || n_neg == 0) throw DataError("Platt calibration needs both classes");
  const auto& p = train.probabilities;
  const auto& y = train.targets;
  const std::size_t n = train.size();

  // Perfect separation: the optimum is at infinite slope; return the clamped
  // limit centred between the classes.
  double max_neg = -std::numeric_limits<double>::infinity(), min_neg = -max_neg;
  double max_pos = max_neg, min_pos = min_neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] == 1) {
      max_pos = std::max(max_pos, p[i]);
      min_pos = std::min(min_pos, p[i]);
    } else {
      max_neg = std::max(max_neg, p[i]);
      min_neg = std::min(min_neg, p[i]);
    }
  }
  if (max_neg < min_pos || max_pos < min_neg) {
    PlattMap map;
    map.separated = true;
    map.a = max_neg < min_pos ? kPlattSlopeLimit : -kPlattSlopeLimit;
    const double midpoint = max_neg < min_pos ? 0.5 * (max_neg + min_pos) : 0.5 * (max_pos + min_neg);
    map.b = -map.a * midpoint;
    return map;
  }

  auto loss = [&](double a, double b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = a * p[i] + b;
      const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      sum += softplus - y[i] * z;
    }
    return sum;
  };

  PlattMap map;
  map.b = logit(static_cast<double>(n_pos) / static_cast<double>(n));
  double current = loss(map.a, map.b);
  for (int iter = 0; iter < max_iterations; ++iter) {
    double ga = 0.0, gb = 0.0, haa = 0.0, hab = 0.0, hbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double q = sigmoid(map.a * p[i] + map.b);
      const double r = q - y[i];
      const double w = q * (1.0 - q);
      ga += r * p[i];
      gb += r;
      haa += w * p[i] * p[i];
      hab += w * p[i];
      hbb += w;
    }
    const double det = haa * hbb - hab * hab;
    double step_a = 0.0, step_b = 0.0;
    if (det > 1e-12 * std::max(1.0, haa * hbb)) {
      step_a = (hbb * ga - hab * gb) / det;
      step_b = (haa * gb - hab * ga) / det;
    } else if (hbb > 0.0) {
      step_b = gb / hbb;  // slope not identifiable (constant scores)
    }
    if (std::abs(step_a) < tolerance && std::abs(step_b) < tolerance) {
      map.iterations = iter;
      return map;
    }
    double scale = 1.0;
    double next_a = map.a - step_a, next_b = map.b - step_b;
    double next = loss(next_a, next_b);
    while (next > current && scale > 1e-10) {
      scale /= 2.0;
      next_a = map.a - scale * step_a;
      next_b = map.b - scale * step_b;
      next = loss(next_a, next_b);
    }
    if (!(next < current)) {  // stationary at machine precision
      map.iterations = iter;
      return map;
    }
    map.a = next_a;
    map.b = next_b;
    current = next;
    if (std::abs(map.a) >= kPlattSlopeLimit) {
      map.a = std::copysign(kPlattSlopeLimit, map.a);
      map.separated = true;
      map.iterations = iter + 1;
      return map;
    }
  }
  throw ComputeError("Platt calibration did not converge");
}

// ---------------------------------------------------------------------------
// Cross-experiment ranking

struct ExperimentScores {
  std::string experiment;
  std::map<std::string, double> scores;
};

struct RankSummary {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr() const { return q3 - q1; }
};

struct RankTable {
  std::vector<std::string> labels;
  std::vector<std::string> experiments;
  // ranks[e][l]: rank of labels[l] in experiments[e]; 1 = highest score.
  std::vector<std::vector<double>> ranks;
  std::vector<RankSummary> summary;
};

// Fractional ranks (1 = best), ties share the average of their positions.
inline std::vector<double> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> ranks(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double average = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = average;
    i = j;
  }
  return ranks;
}

// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return kNaN;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline RankTable rank_experiments(std::span<const ExperimentScores> experiments) {
  RankTable table;
  if (experiments.empty()) return table;
  for (const auto& [label, score] : experiments.front().scores) table.labels.push_back(label);
  for (const auto& e : experiments) {
    if (e.scores.size() != table.labels.size()) {
      throw DataError("experiment '" + e.experiment + "' has an inconsistent label set");
    }
    std::vector<double> scores;
    for (const auto& label : table.labels) {
      const auto it = e.scores.find(label);
      if (it == e.scores.end()) {
        throw DataError("experiment '" + e.experiment + "' lacks label '" + label + "'");
      }
      scores.push_back(it->second);
    }
    table.experiments.push_back(e.experiment);
    table.ranks.push_back(rank_descending(scores));
  }
  for (std::size_t l = 0; l < table.labels.size(); ++l) {
    std::vector<double> column;
    for (const auto& row : table.ranks) column.push_back(row[l]);
    std::sort(column.begin(), column.end());
    table.summary.push_back(
        {quantile_sorted(column, 0.5), quantile_sorted(column, 0.25), quantile_sorted(column, 0.75)});
  }
  return table;
}

inline std::string rank_table_csv(const RankTable& table) {
  std::string out = "experiment";
  for (const auto& label : table.labels) out += "," + label;
  out.push_back('\n');
  for (std::size_t e = 0; e < table.experiments.size(); ++e) {
    out += table.experiments[e];
    for (double r : table.ranks[e]) out += "," + format_double(r);
    out.push_back('\n');
  }
  return out;
}

inline std::string rank_summary_csv(const RankTable& table) {
  std::string out = "label,median,q1,q3,iqr\n";
  for (std::size_t l = 0; l < table.labels.size(); ++l) {
    const auto& s = table.summary[l];
    out += table.labels[l] + "," + format_double(s.median) + "," + format_double(s.q1) + "," +
           format_double(s.q3) + "," + format_double(s.iqr()) + "\n";
  }
  return out;
}

}  // namespace mdew
