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

// Missingness-aware dynamic ensemble weighting over a pool of
// imputer -> classifier pipelines.
//
// Fitting is phase-ordered: fit_pool on stage-1 rows, then
// build_error_matrix on stage-2 rows (which also caches each pipeline's
// standardized imputation of stage 2 as its neighbor-search substrate). At
// prediction time each pipeline imputes the sample, finds its k nearest
// stage-2 rows in that pipeline's own imputed space, and scores its
// competence as one minus its mean absolute probability error over those
// rows. Weights are the softmax of the competences.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mdew/common.hpp"
#include "mdew/data.hpp"
#include "mdew/imputers.hpp"
#include "mdew/learners/model.hpp"
#include "mdew/parallel.hpp"

namespace mdew {

struct PipelineSpec {
  ImputerSpec imputer;
  ClassifierKind classifier = ClassifierKind::kForest;
  TreeParams classifier_params;
  std::string label;
};

inline void to_json(nlohmann::json& j, const PipelineSpec& s) {
  j = nlohmann::json{{"label", s.label},
                     {"imputer", s.imputer},
                     {"classifier", to_string(s.classifier)},
                     {"classifier_params", s.classifier_params}};
}

inline void from_json(const nlohmann::json& j, PipelineSpec& s) {
  j.at("label").get_to(s.label);
  j.at("imputer").get_to(s.imputer);
  s.classifier = parse_classifier_kind(j.at("classifier").get<std::string>());
  s.classifier_params = j.at("classifier_params").get<TreeParams>();
}

// Every imputer paired with every classifier; labels are "imputer+classifier".
inline std::vector<PipelineSpec> make_pool(const std::vector<std::string>& imputers,
                                           const std::vector<std::string>& classifiers,
                                           const TreeParams& params = {}, std::size_t knn_k = 5,
                                           int max_rounds = 10, double tolerance = 1e-3) {
  std::vector<PipelineSpec> pool;
  for (const auto& imputer_name : imputers) {
    ImputerSpec imputer = parse_imputer_name(imputer_name);
    imputer.k = knn_k;
    imputer.max_rounds = max_rounds;
    imputer.tolerance = tolerance;
    imputer.backbone_params = params;
    for (const auto& classifier_name : classifiers) {
      const ClassifierKind kind = parse_classifier_kind(classifier_name);
      pool.push_back({imputer, kind, params, imputer_name + "+" + to_string(kind)});
    }
  }
  return pool;
}

// The four imputers (KNN, Bayesian-ridge, forest and boosted chained
// equations) crossed with forest and boosted classifiers: eight pipelines.
inline std::vector<PipelineSpec> default_pool(const TreeParams& params = {}) {
  return make_pool({"knn", "ridge-iter", "rf-iter", "gbm-iter"}, {"rf", "gbm"}, params);
}

struct FittedPipeline {
  PipelineSpec spec;
  std::shared_ptr<const FittedImputer> imputer;
  Classifier classifier;
  // Set by build_error_matrix: standardized imputation of the stage-2 rows
  // and the statistics used to standardize it.
  Matrix substrate;
  ScalerStats substrate_scaler;

  bool has_substrate() const { return substrate.rows() > 0; }
};

// |stage2| x p absolute probability errors, columns aligned with the pool.
struct ErrorMatrix {
  Matrix entries;
  std::vector<std::size_t> row_ids;
  std::vector<std::string> labels;

  std::size_t rows() const { return entries.rows(); }
  std::size_t pipelines() const { return entries.cols(); }
};

struct WeightedPrediction {
  double probability = 0.0;
  std::vector<double> weights;
  std::vector<double> per_pipeline_probs;
  std::vector<double> competences;
  // Per pipeline, the stage-2 row ids of the neighborhood (M-DEW only).
  std::vector<std::vector<std::size_t>> neighbor_ids;
};

enum class Method { kMdew, kUma };

inline std::string to_string(Method m) { return m == Method::kMdew ? "mdew" : "uma"; }

// Numerically stable softmax (temperature 1).
inline std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  if (scores.empty()) return out;
  const double top = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - top);
    total += out[i];
  }
  for (double& w : out) w /= total;
  return out;
}

namespace detail {

inline std::uint64_t label_hash(const std::string& label) { return derive_seed(0, label); }

inline void check_pool_specs(std::span<const PipelineSpec> specs) {
  if (specs.empty()) throw ConfigError("empty pipeline pool");
  std::set<std::string> labels;
  for (const auto& spec : specs) {
    if (!labels.insert(spec.label).second) {
      throw ConfigError("duplicate pipeline label '" + spec.label + "'");
    }
    spec.imputer.validate();
    spec.classifier_params.validate();
  }
}

}  // namespace detail

// Fits each pipeline's imputer on stage 1, then its classifier on stage 1 as
// imputed by that imputer. Pipelines with identical imputer specs share one
// fitted imputer.
inline std::vector<FittedPipeline> fit_pool(std::span<const PipelineSpec> specs,
                                            const Dataset& stage1, std::uint64_t seed = 0,
                                            std::size_t jobs = 1) {
  detail::check_pool_specs(specs);
  const auto positives = std::count(stage1.target.begin(), stage1.target.end(), 1);
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(stage1.rows())) {
    throw DataError("stage-1 training set has a single class");
  }

  std::vector<ImputerSpec> unique_imputers;
  std::vector<std::size_t> imputer_of(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto it = std::find(unique_imputers.begin(), unique_imputers.end(), specs[i].imputer);
    imputer_of[i] = static_cast<std::size_t>(it - unique_imputers.begin());
    if (it == unique_imputers.end()) unique_imputers.push_back(specs[i].imputer);
  }

  std::vector<std::shared_ptr<const FittedImputer>> imputers(unique_imputers.size());
  std::vector<Matrix> imputed(unique_imputers.size());
  parallel_for(unique_imputers.size(), jobs, [&](std::size_t u) {
    const std::uint64_t imputer_seed =
        derive_seed(seed, "imputer:" + unique_imputers[u].name(),
                    unique_imputers[u].backbone_params.seed);
    auto fitted = std::make_shared<FittedImputer>(fit_imputer(unique_imputers[u], stage1, imputer_seed));
    imputed[u] = transform(*fitted, stage1);
    imputers[u] = std::move(fitted);
  });

  std::vector<FittedPipeline> pool(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t i) {
    TreeParams params = specs[i].classifier_params;
    params.seed = derive_seed(seed ^ mix64(params.seed), "classifier",
                              detail::label_hash(specs[i].label));
    pool[i].spec = specs[i];
    pool[i].imputer = imputers[imputer_of[i]];
    pool[i].classifier =
        fit_classifier(specs[i].classifier, imputed[imputer_of[i]], stage1.target, params);
  });
  return pool;
}

// Entry (i, j) = |y_i - p_j(x_i)|, where pipeline j imputes stage-2 row i
// with its own imputer. Caches each pipeline's standardized stage-2
// imputation for neighbor search.
inline ErrorMatrix build_error_matrix(std::span<FittedPipeline> pipelines, const Dataset& stage2,
                                      std::size_t jobs = 1) {
  if (pipelines.empty()) throw ConfigError("empty pipeline pool");
  if (stage2.rows() == 0) throw DataError("stage-2 set is empty");
  ErrorMatrix errors;
  errors.entries = Matrix(stage2.rows(), pipelines.size());
  errors.row_ids = stage2.row_ids;
  for (const auto& p : pipelines) {
    if (!p.imputer) throw ComputeError("unfitted pipeline '" + p.spec.label + "'");
    if (p.imputer->cols() != stage2.cols()) throw DataError("stage-2 dimension mismatch");
    errors.labels.push_back(p.spec.label);
  }
  parallel_for(pipelines.size(), jobs, [&](std::size_t j) {
    auto& pipeline = pipelines[j];
    Matrix imputed = transform(*pipeline.imputer, stage2);
    for (std::size_t i = 0; i < stage2.rows(); ++i) {
      const double p = pipeline.classifier.predict_proba(imputed.row(i));
      errors.entries(i, j) = std::abs(static_cast<double>(stage2.target[i]) - p);
    }
    pipeline.substrate_scaler = fit_standardizer(imputed);
    standardize_in_place(imputed, pipeline.substrate_scaler);
    pipeline.substrate = std::move(imputed);
  });
  return errors;
}

namespace detail {

// k nearest substrate rows to `query`; equal distances resolve to the lower
// stage-2 row id. Returns positions into the substrate.
inline std::vector<std::size_t> stage2_neighbors(const Matrix& substrate,
                                                 std::span<const std::size_t> row_ids,
                                                 std::span<const double> query, std::size_t k) {
  struct Candidate {
    double distance;
    std::size_t id;
    std::size_t position;
    bool operator<(const Candidate& o) const {
      return distance != o.distance ? distance < o.distance : id < o.id;
    }
  };
  std::vector<Candidate> candidates(substrate.rows());
  for (std::size_t t = 0; t < substrate.rows(); ++t) {
    const auto row = substrate.row(t);
    double sum = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) sum += (row[c] - query[c]) * (row[c] - query[c]);
    candidates[t] = {sum, row_ids[t], t};
  }
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                    candidates.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = candidates[i].position;
  return out;
}

// Per-pipeline state for a batch of samples: imputed rows and probabilities.
struct BatchView {
  Matrix imputed;
  std::vector<double> probs;
};

inline void check_context(std::span<const FittedPipeline> pipelines, const ErrorMatrix* errors,
                          std::size_t k, Method method) {
  if (pipelines.empty()) throw ConfigError("empty pipeline pool");
  for (const auto& p : pipelines) {
    if (!p.imputer) throw ComputeError("unfitted pipeline '" + p.spec.label + "'");
  }
  if (method == Method::kUma) return;
  if (errors == nullptr) throw ComputeError("M-DEW prediction needs an error matrix");
  if (errors->pipelines() != pipelines.size()) {
    throw ComputeError("error matrix does not match the pipeline pool");
  }
  if (k < 1) throw ConfigError("k must be >= 1");
  if (k > errors->rows()) {
    throw ConfigError("k=" + std::to_string(k) + " exceeds the stage-2 size " +
                      std::to_string(errors->rows()));
  }
  for (const auto& p : pipelines) {
    if (!p.has_substrate() || p.substrate.rows() != errors->rows()) {
      throw ComputeError("pipeline '" + p.spec.label + "' has no stage-2 substrate");
    }
  }
}

inline WeightedPrediction combine(std::span<const FittedPipeline> pipelines,
                                  const ErrorMatrix* errors, std::span<const BatchView> views,
                                  std::size_t r, std::size_t k, Method method) {
  const std::size_t p = pipelines.size();
  WeightedPrediction out;
  out.per_pipeline_probs.resize(p);
  for (std::size_t j = 0; j < p; ++j) out.per_pipeline_probs[j] = views[j].probs[r];

  if (method == Method::kUma) {
    out.weights.assign(p, 1.0 / static_cast<double>(p));
    double sum = 0.0;
    for (double prob : out.per_pipeline_probs) sum += prob;
    out.probability = sum / static_cast<double>(p);
    return out;
  }

  out.competences.resize(p);
  out.neighbor_ids.resize(p);
  std::vector<double> query;
  for (std::size_t j = 0; j < p; ++j) {
    const auto& pipeline = pipelines[j];
    const auto imputed = views[j].imputed.row(r);
    query.assign(imputed.begin(), imputed.end());
    for (std::size_t c = 0; c < query.size(); ++c) {
      query[c] = (query[c] - pipeline.substrate_scaler.mean[c]) / pipeline.substrate_scaler.std[c];
    }
    const auto neighbors = stage2_neighbors(pipeline.substrate, errors->row_ids, query, k);
    double error_sum = 0.0;
    for (std::size_t t : neighbors) {
      error_sum += errors->entries(t, j);
      out.neighbor_ids[j].push_back(errors->row_ids[t]);
    }
    out.competences[j] = 1.0 - error_sum / static_cast<double>(k);
  }
  out.weights = softmax(out.competences);
  double dot = 0.0;
  for (std::size_t j = 0; j < p; ++j) dot += out.weights[j] * out.per_pipeline_probs[j];
  const auto [lo, hi] =
      std::minmax_element(out.per_pipeline_probs.begin(), out.per_pipeline_probs.end());
  out.probability = std::clamp(dot, *lo, *hi);
  return out;
}

}  // namespace detail

// Predicts every row of (values, mask) with the given method; output order
// follows input order.
inline std::vector<WeightedPrediction> predict_rows(const Matrix& values, const Mask& mask,
                                                    std::span<const FittedPipeline> pipelines,
                                                    const ErrorMatrix* errors, std::size_t k,
                                                    Method method, std::size_t jobs = 1) {
  detail::check_context(pipelines, errors, k, method);
  std::vector<detail::BatchView> views(pipelines.size());
  parallel_for(pipelines.size(), jobs, [&](std::size_t j) {
    views[j].imputed = transform(*pipelines[j].imputer, values, mask);
    views[j].probs.resize(values.rows());
    for (std::size_t r = 0; r < values.rows(); ++r) {
      views[j].probs[r] = pipelines[j].classifier.predict_proba(views[j].imputed.row(r));
    }
  });
  std::vector<WeightedPrediction> out(values.rows());
  parallel_for(values.rows(), jobs, [&](std::size_t r) {
    out[r] = detail::combine(pipelines, errors, views, r, k, method);
  });
  return out;
}

inline std::vector<WeightedPrediction> predict_batch(const Dataset& samples,
                                                     std::span<const FittedPipeline> pipelines,
                                                     const ErrorMatrix& errors, std::size_t k,
                                                     Method method, std::size_t jobs = 1) {
  return predict_rows(samples.values, samples.mask, pipelines, &errors, k, method, jobs);
}

// One masked row (NaN or mask bit = missing).
inline WeightedPrediction mdew_predict(std::span<const double> values,
                                       std::span<const std::uint8_t> mask,
                                       std::span<const FittedPipeline> pipelines,
                                       const ErrorMatrix& errors, std::size_t k) {
  Matrix row(1, values.size(), std::vector<double>(values.begin(), values.end()));
  Mask row_mask(mask.begin(), mask.end());
  return predict_rows(row, row_mask, pipelines, &errors, k, Method::kMdew).front();
}

inline WeightedPrediction uma_predict(std::span<const double> values,
                                      std::span<const std::uint8_t> mask,
                                      std::span<const FittedPipeline> pipelines) {
  Matrix row(1, values.size(), std::vector<double>(values.begin(), values.end()));
  Mask row_mask(mask.begin(), mask.end());
  return predict_rows(row, row_mask, pipelines, nullptr, 0, Method::kUma).front();
}

// ---------------------------------------------------------------------------
// Persisted prediction context: pipelines.json + error_matrix.csv.

struct PredictionContext {
  std::vector<FittedPipeline> pipelines;
  ErrorMatrix errors;
  std::size_t k = 5;
  // Feature names in fitting order; empty when unknown.
  std::vector<std::string> columns;
};

inline std::string error_matrix_csv(const ErrorMatrix& errors) {
  std::string out = "row_id";
  for (const auto& label : errors.labels) out += "," + csv::escape(label);
  out.push_back('\n');
  for (std::size_t i = 0; i < errors.rows(); ++i) {
    out += std::to_string(errors.row_ids[i]);
    for (std::size_t j = 0; j < errors.pipelines(); ++j) {
      out += "," + format_double(errors.entries(i, j));
    }
    out.push_back('\n');
  }
  return out;
}

inline ErrorMatrix parse_error_matrix_csv(std::string_view text) {
  const auto rows = csv::parse(text);
  if (rows.empty() || rows.front().size() < 2) throw DataError("malformed error matrix CSV");
  ErrorMatrix errors;
  errors.labels.assign(rows.front().begin() + 1, rows.front().end());
  const std::size_t p = errors.labels.size();
  errors.entries = Matrix(rows.size() - 1, p);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != p + 1) throw DataError("ragged error matrix CSV");
    double id = 0.0;
    if (!parse_double(rows[i][0], id)) throw DataError("bad row id in error matrix CSV");
    errors.row_ids.push_back(static_cast<std::size_t>(id));
    for (std::size_t j = 0; j < p; ++j) {
      double v = 0.0;
      if (!parse_double(rows[i][j + 1], v) || v < 0.0 || v > 1.0) {
        throw DataError("error matrix entry outside [0, 1]");
      }
      errors.entries(i - 1, j) = v;
    }
  }
  return errors;
}

inline nlohmann::json pipelines_json(std::span<const FittedPipeline> pipelines, std::size_t k,
                                     const std::vector<std::string>& columns = {}) {
  std::vector<const FittedImputer*> unique;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& p : pipelines) {
    auto it = std::find(unique.begin(), unique.end(), p.imputer.get());
    if (it == unique.end()) {
      unique.push_back(p.imputer.get());
      it = unique.end() - 1;
    }
    entries.push_back({{"spec", p.spec},
                       {"imputer_index", static_cast<std::size_t>(it - unique.begin())},
                       {"classifier", p.classifier},
                       {"substrate_scaler", p.substrate_scaler},
                       {"substrate",
                        {{"rows", p.substrate.rows()},
                         {"cols", p.substrate.cols()},
                         {"values", p.substrate.data()}}}});
  }
  nlohmann::json imputers = nlohmann::json::array();
  for (const auto* imputer : unique) imputers.push_back(*imputer);
  return {{"version", kModelFormatVersion},
          {"k", k},
          {"columns", columns},
          {"imputers", imputers},
          {"pipelines", entries}};
}

inline void save_context(const std::filesystem::path& dir, const PredictionContext& context) {
  std::filesystem::create_directories(dir);
  write_text((dir / "pipelines.json").string(), pipelines_json(context.pipelines, context.k, context.columns).dump());
  write_text((dir / "error_matrix.csv").string(), error_matrix_csv(context.errors));
}

inline PredictionContext load_context(const std::filesystem::path& dir) {
  const std::string text = csv::read_file((dir / "pipelines.json").string());
  PredictionContext context;
  try {
    const auto j = nlohmann::json::parse(text);
    detail::check_model_version(j);
    context.k = j.at("k").get<std::size_t>();
    if (j.contains("columns")) j.at("columns").get_to(context.columns);
    std::vector<std::shared_ptr<const FittedImputer>> imputers;
    for (const auto& entry : j.at("imputers")) {
      imputers.push_back(std::make_shared<FittedImputer>(entry.get<FittedImputer>()));
    }
    for (const auto& entry : j.at("pipelines")) {
      FittedPipeline p;
      entry.at("spec").get_to(p.spec);
      p.imputer = imputers.at(entry.at("imputer_index").get<std::size_t>());
      entry.at("classifier").get_to(p.classifier);
      entry.at("substrate_scaler").get_to(p.substrate_scaler);
      const auto& s = entry.at("substrate");
      p.substrate = Matrix(s.at("rows").get<std::size_t>(), s.at("cols").get<std::size_t>(),
                           s.at("values").get<std::vector<double>>());
      context.pipelines.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed pipelines.json: ") + e.what());
  }
  context.errors = parse_error_matrix_csv(csv::read_file((dir / "error_matrix.csv").string()));
  if (context.errors.labels.size() != context.pipelines.size()) {
    throw DataError("error matrix and pipelines disagree on pool size");
  }
  return context;
}

}  // namespace mdew
