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

// Tabular datasets with an explicit missingness mask, CSV ingestion,
// standardization and deterministic (stratified) splitting.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"

namespace mdew {

// Feature matrix + missingness mask + binary target. Masked cells hold NaN and
// are never read by a learner.
struct Dataset {
  Matrix values;
  Mask mask;
  std::vector<int> target;
  std::vector<std::string> column_names;
  std::vector<std::size_t> row_ids;
  std::string target_name = "target";
  // Position of the target column in the source header, for writing back.
  std::size_t target_position = 0;

  std::size_t rows() const { return values.rows(); }
  std::size_t cols() const { return values.cols(); }

  bool missing(std::size_t r, std::size_t c) const { return mask[r * cols() + c] != 0; }
  std::span<const std::uint8_t> mask_row(std::size_t r) const {
    return {mask.data() + r * cols(), cols()};
  }

  std::size_t missing_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }

  // Throws DataError if any structural invariant is broken.
  void validate() const {
    if (mask.size() != values.size()) throw DataError("mask and values differ in shape");
    if (target.size() != rows()) throw DataError("target length differs from row count");
    if (column_names.size() != cols()) throw DataError("column name count differs from width");
    if (row_ids.size() != rows()) throw DataError("row id count differs from row count");
    for (int y : target) {
      if (y != 0 && y != 1) throw DataError("non-binary target");
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] && !std::isnan(values.data()[i])) {
        throw DataError("masked cell does not hold the missing sentinel");
      }
      if (!mask[i] && !std::isfinite(values.data()[i])) {
        throw DataError("observed cell is not finite");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.values = values.select_rows(indices);
    out.mask.resize(indices.size() * cols());
    out.target.resize(indices.size());
    out.row_ids.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(mask.begin() + indices[i] * cols(), cols(), out.mask.begin() + i * cols());
      out.target[i] = target[indices[i]];
      out.row_ids[i] = row_ids[indices[i]];
    }
    out.column_names = column_names;
    out.target_name = target_name;
    out.target_position = target_position;
    return out;
  }

  // Builds a dataset from values where NaN marks a missing cell.
  static Dataset from_values(Matrix values, std::vector<int> target,
                             std::vector<std::string> names = {}) {
    Dataset out;
    out.mask.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      out.mask[i] = std::isnan(values.data()[i]) ? 1 : 0;
    }
    if (names.empty()) {
      for (std::size_t c = 0; c < values.cols(); ++c) names.push_back("x" + std::to_string(c));
    }
    out.row_ids.resize(values.rows());
    std::iota(out.row_ids.begin(), out.row_ids.end(), std::size_t{0});
    out.values = std::move(values);
    out.target = std::move(target);
    out.column_names = std::move(names);
    out.target_position = out.column_names.size();
    out.validate();
    return out;
  }
};

// ---------------------------------------------------------------------------
// CSV

namespace csv {

// RFC-4180 reader: quoted fields, doubled quotes, embedded newlines, CRLF.
inline std::vector<std::vector<std::string>> parse(std::string_view text) {
  if (text.starts_with("\xEF\xBB\xBF")) text.remove_prefix(3);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
      continue;
    }
    switch (ch) {
      case '"':
        quoted = true;
        field_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        if (field_started || !field.empty() || !row.empty()) {
          row.push_back(std::move(field));
          rows.push_back(std::move(row));
        }
        row.clear();
        field.clear();
        field_started = false;
        break;
      default:
        field.push_back(ch);
        field_started = true;
    }
  }
  if (quoted) throw DataError("unterminated quoted CSV field");
  if (field_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string escape(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace csv

struct CsvOptions {
  std::set<std::string> missing_tokens = {"", "NA", "NaN", "?"};
  // Columns dropped before building the feature matrix (e.g. an id column).
  std::vector<std::string> ignore_columns;
  // When false, a file without the target column loads with all-zero targets.
  bool require_target = true;
};

inline Dataset parse_csv_dataset(std::string_view text, const std::string& target_column,
                                 const CsvOptions& options = {}) {
  const auto rows = csv::parse(text);
  if (rows.empty()) throw DataError("CSV has no header row");
  const auto& header = rows.front();
  {
    std::unordered_set<std::string> seen;
    for (const auto& name : header) {
      if (!seen.insert(name).second) throw DataError("duplicate column name '" + name + "'");
    }
  }
  const auto target_it = std::find(header.begin(), header.end(), target_column);
  if (target_it == header.end() && options.require_target) {
    throw DataError("target column '" + target_column + "' not found");
  }
  const bool has_target = target_it != header.end();
  const std::size_t target_index = static_cast<std::size_t>(target_it - header.begin());
  if (rows.size() < 2) throw DataError("CSV has zero data rows");

  std::vector<std::size_t> feature_index;
  Dataset out;
  out.target_name = target_column;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == target_index) {
      out.target_position = out.column_names.size();
      continue;
    }
    if (std::find(options.ignore_columns.begin(), options.ignore_columns.end(), header[c]) !=
        options.ignore_columns.end()) {
      continue;
    }
    feature_index.push_back(c);
    out.column_names.push_back(header[c]);
  }

  const std::size_t n = rows.size() - 1;
  const std::size_t d = feature_index.size();
  out.values = Matrix(n, d);
  out.mask.assign(n * d, 0);
  out.target.resize(n);
  out.row_ids.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = rows[r + 1];
    const std::size_t line = r + 2;
    if (row.size() != header.size()) {
      throw DataError("row " + std::to_string(line) + " has " + std::to_string(row.size()) +
                      " fields, expected " + std::to_string(header.size()));
    }
    out.row_ids[r] = r;
    if (has_target) {
      const std::string& label = row[target_index];
      if (options.missing_tokens.contains(label)) {
        throw DataError("missing target value at row " + std::to_string(line));
      }
      double y = 0.0;
      if (!parse_double(label, y)) {
        throw DataError("unparseable target '" + label + "' at row " + std::to_string(line));
      }
      if (y != 0.0 && y != 1.0) throw DataError("non-binary target at row " + std::to_string(line));
      out.target[r] = static_cast<int>(y);
    }
    for (std::size_t j = 0; j < d; ++j) {
      const std::string& cell = row[feature_index[j]];
      if (options.missing_tokens.contains(cell)) {
        out.values(r, j) = kNaN;
        out.mask[r * d + j] = 1;
        continue;
      }
      double value = 0.0;
      if (!parse_double(cell, value)) {
        throw DataError("unparseable numeric cell '" + cell + "' at row " + std::to_string(line) +
                        ", column '" + header[feature_index[j]] + "'");
      }
      out.values(r, j) = value;
    }
  }
  return out;
}

inline Dataset load_csv(const std::string& path, const std::string& target_column,
                        const CsvOptions& options = {}) {
  return parse_csv_dataset(csv::read_file(path), target_column, options);
}

// Writes features and target in the original column order; missing cells
// become `missing_token`.
inline std::string to_csv(const Dataset& data, const std::string& missing_token = "NA") {
  std::string out;
  auto emit_row = [&](auto&& cell_at) {
    for (std::size_t c = 0; c <= data.cols(); ++c) {
      if (c > 0) out.push_back(',');
      out += cell_at(c);
    }
    out.push_back('\n');
  };
  auto column_at = [&](std::size_t c) -> std::ptrdiff_t {
    // -1 marks the target slot.
    if (c == data.target_position) return -1;
    return static_cast<std::ptrdiff_t>(c < data.target_position ? c : c - 1);
  };
  emit_row([&](std::size_t c) {
    const auto j = column_at(c);
    return csv::escape(j < 0 ? data.target_name : data.column_names[static_cast<std::size_t>(j)]);
  });
  for (std::size_t r = 0; r < data.rows(); ++r) {
    emit_row([&](std::size_t c) -> std::string {
      const auto j = column_at(c);
      if (j < 0) return std::to_string(data.target[r]);
      const auto col = static_cast<std::size_t>(j);
      return data.missing(r, col) ? missing_token : format_double(data.values(r, col));
    });
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ComputeError("cannot write " + path);
  out << text;
  if (!out) throw ComputeError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Standardization

struct ScalerStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t cols() const { return mean.size(); }
};

// Population mean/std over observed cells only. Zero-variance columns get
// std 1 so the transform is a pure shift.
inline ScalerStats fit_standardizer(const Matrix& values, const Mask* mask = nullptr) {
  const std::size_t n = values.rows();
  const std::size_t d = values.cols();
  ScalerStats stats{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  for (std::size_t c = 0; c < d; ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (mask && (*mask)[r * d + c]) continue;
      sum += values(r, c);
      ++count;
    }
    if (count == 0) throw DataError("column " + std::to_string(c) + " has no observed cells");
    stats.mean[c] = sum / static_cast<double>(count);
    double sum_sq_dev = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (mask && (*mask)[r * d + c]) continue;
      const double dev = values(r, c) - stats.mean[c];
      sum_sq_dev += dev * dev;
    }
    const double sd = std::sqrt(sum_sq_dev / static_cast<double>(count));
    // Relative threshold absorbs rounding noise on constant columns.
    stats.std[c] = sd > 1e-12 * std::max(1.0, std::abs(stats.mean[c])) ? sd : 1.0;
  }
  return stats;
}

inline ScalerStats fit_standardizer(const Dataset& data) {
  try {
    return fit_standardizer(data.values, &data.mask);
  } catch (const DataError&) {
    for (std::size_t c = 0; c < data.cols(); ++c) {
      bool observed = false;
      for (std::size_t r = 0; r < data.rows() && !observed; ++r) observed = !data.missing(r, c);
      if (!observed) throw DataError("column '" + data.column_names[c] + "' is fully missing");
    }
    throw;
  }
}

inline void standardize_in_place(Matrix& values, const ScalerStats& stats) {
  if (values.cols() != stats.cols()) throw DataError("standardizer dimension mismatch");
  for (std::size_t r = 0; r < values.rows(); ++r) {
    auto row = values.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] = (row[c] - stats.mean[c]) / stats.std[c];
    }
  }
}

// NaN (masked) cells stay NaN, so the mask is untouched.
inline Dataset apply_standardizer(const Dataset& data, const ScalerStats& stats) {
  Dataset out = data;
  standardize_in_place(out.values, stats);
  return out;
}

inline Dataset invert_standardizer(const Dataset& data, const ScalerStats& stats) {
  if (data.cols() != stats.cols()) throw DataError("standardizer dimension mismatch");
  Dataset out = data;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.values.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = row[c] * stats.std[c] + stats.mean[c];
  }
  return out;
}

inline void to_json(nlohmann::json& j, const ScalerStats& s) {
  j = nlohmann::json{{"mean", s.mean}, {"std", s.std}};
}
inline void from_json(const nlohmann::json& j, ScalerStats& s) {
  j.at("mean").get_to(s.mean);
  j.at("std").get_to(s.std);
}

// ---------------------------------------------------------------------------
// Splitting

struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::size_t> assignments;
  std::uint64_t seed = 0;

  std::vector<std::size_t> test_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
      if (assignments[i] == fold) out.push_back(i);
    }
    return out;
  }
  std::vector<std::size_t> train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
      if (assignments[i] != fold) out.push_back(i);
    }
    return out;
  }
};

inline void to_json(nlohmann::json& j, const FoldPlan& plan) {
  j = nlohmann::json{{"k", plan.k}, {"seed", plan.seed}, {"assignments", plan.assignments}};
}
inline void from_json(const nlohmann::json& j, FoldPlan& plan) {
  j.at("k").get_to(plan.k);
  j.at("seed").get_to(plan.seed);
  j.at("assignments").get_to(plan.assignments);
}

// Shuffles each class separately, then deals the concatenated
// (positives, negatives) sequence round-robin over the folds. Both the fold
// sizes and the per-fold class counts then differ by at most one.
inline FoldPlan stratified_kfold(std::span<const int> target, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold requires k >= 2");
  std::vector<std::size_t> positives, negatives;
  for (std::size_t i = 0; i < target.size(); ++i) {
    (target[i] == 1 ? positives : negatives).push_back(i);
  }
  if (positives.size() < k || negatives.size() < k) {
    throw DataError("a class has fewer than k=" + std::to_string(k) + " members");
  }
  Rng rng(derive_seed(seed, "kfold"));
  rng.shuffle(positives);
  rng.shuffle(negatives);
  FoldPlan plan{k, std::vector<std::size_t>(target.size(), 0), seed};
  std::size_t slot = 0;
  for (const auto* group : {&positives, &negatives}) {
    for (std::size_t index : *group) plan.assignments[index] = slot++ % k;
  }
  return plan;
}

inline FoldPlan stratified_kfold(const Dataset& data, std::size_t k, std::uint64_t seed) {
  return stratified_kfold(data.target, k, seed);
}

struct StageSplit {
  std::vector<std::size_t> stage1;
  std::vector<std::size_t> stage2;
};

inline void to_json(nlohmann::json& j, const StageSplit& s) {
  j = nlohmann::json{{"stage1", s.stage1}, {"stage2", s.stage2}};
}

// Splits training rows into a fitting stage and a competence stage. The
// stage-2 size is round(fraction * n) clamped to [1, n-1], allocated across
// classes by largest remainder. `targets` is indexed by row index.
inline StageSplit two_stage_split(std::span<const std::size_t> train_indices,
                                  double stage2_fraction, std::uint64_t seed,
                                  std::span<const int> targets) {
  if (!(stage2_fraction > 0.0 && stage2_fraction < 1.0)) {
    throw ConfigError("stage2_fraction must lie in (0, 1)");
  }
  const std::size_t n = train_indices.size();
  if (n < 2) throw DataError("two-stage split needs at least two training rows");
  std::size_t stage2_total =
      static_cast<std::size_t>(std::floor(stage2_fraction * static_cast<double>(n) + 0.5));
  stage2_total = std::clamp<std::size_t>(stage2_total, 1, n - 1);

  std::vector<std::size_t> by_class[2];
  for (std::size_t index : train_indices) {
    if (index >= targets.size()) throw DataError("train index out of range");
    by_class[targets[index] == 1 ? 1 : 0].push_back(index);
  }
  Rng rng(derive_seed(seed, "two_stage"));
  for (auto& group : by_class) {
    std::sort(group.begin(), group.end());
    rng.shuffle(group);
  }

  // Largest-remainder allocation of stage-2 slots to classes.
  std::size_t quota[2];
  double remainder[2];
  std::size_t assigned = 0;
  for (int c = 0; c < 2; ++c) {
    const double exact = static_cast<double>(stage2_total) *
                         static_cast<double>(by_class[c].size()) / static_cast<double>(n);
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(quota[c]);
    assigned += quota[c];
  }
  while (assigned < stage2_total) {
    const int pick = remainder[1] > remainder[0] ? 1 : 0;
    const int target_class = quota[pick] < by_class[pick].size() ? pick : 1 - pick;
    ++quota[target_class];
    remainder[target_class] = -1.0;
    ++assigned;
  }

  StageSplit split;
  for (int c = 0; c < 2; ++c) {
    const auto& group = by_class[c];
    split.stage2.insert(split.stage2.end(), group.begin(), group.begin() + quota[c]);
    split.stage1.insert(split.stage1.end(), group.begin() + quota[c], group.end());
    if (!group.empty() && quota[c] == group.size()) {
      throw DataError("two-stage split leaves class " + std::to_string(c) + " out of stage 1");
    }
  }
  std::sort(split.stage1.begin(), split.stage1.end());
  std::sort(split.stage2.begin(), split.stage2.end());
  return split;
}

}  // namespace mdew
