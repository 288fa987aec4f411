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

// Bayesian ridge regression fit by evidence maximization, with Gamma
// hyperpriors on the weight and noise precisions.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "mdew/common.hpp"

namespace mdew {

struct LinearModel {
  std::vector<double> coefficients;
  double intercept = 0.0;
  double noise_precision = 1.0;   // beta
  double weight_precision = 1.0;  // alpha
  int iterations = 0;

  double predict(std::span<const double> x) const {
    double sum = intercept;
    for (std::size_t i = 0; i < coefficients.size(); ++i) sum += coefficients[i] * x[i];
    return sum;
  }
};

struct BayesRidgeOptions {
  int max_iterations = 300;
  double tolerance = 1e-3;
  // Gamma(shape, rate) hyperpriors.
  double weight_shape = 1e-6;
  double weight_rate = 1e-6;
  double noise_shape = 1e-6;
  double noise_rate = 1e-6;
};

inline LinearModel fit_bayes_ridge(const Matrix& x, std::span<const double> y,
                                   const BayesRidgeOptions& options = {}) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n == 0) throw ComputeError("empty training set");
  if (y.size() != n) throw ComputeError("target length differs from row count");
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw ComputeError("non-finite input to Bayesian ridge");
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw ComputeError("non-finite target to Bayesian ridge");
  }

  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMatrix> xm(x.data().data(), static_cast<Eigen::Index>(n),
                                 static_cast<Eigen::Index>(d));
  Eigen::Map<const Eigen::VectorXd> ym(y.data(), static_cast<Eigen::Index>(n));
  const Eigen::RowVectorXd x_mean = xm.colwise().mean();
  const double y_mean = ym.mean();
  const Eigen::MatrixXd xc = xm.rowwise() - x_mean;
  const Eigen::VectorXd yc = ym.array() - y_mean;

  LinearModel model;
  model.coefficients.assign(d, 0.0);
  if (n == 1 || d == 0) {
    model.intercept = y_mean;
    return model;
  }

  const double eps = std::numeric_limits<double>::epsilon();
  double beta = 1.0 / (yc.squaredNorm() / static_cast<double>(n) + eps);
  double alpha = 1.0;

  // X^T X = Q diag(e) Q^T; the posterior mean is
  // Q diag(1 / (e + alpha/beta)) Q^T X^T y.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(xc.transpose() * xc);
  const Eigen::VectorXd e = eig.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd& q = eig.eigenvectors();
  const Eigen::VectorXd qty = q.transpose() * (xc.transpose() * yc);

  auto posterior_mean = [&](double a, double b) -> Eigen::VectorXd {
    return q * (qty.array() / (e.array() + a / b)).matrix();
  };

  Eigen::VectorXd coef = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  Eigen::VectorXd coef_old = coef;
  int iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    coef = posterior_mean(alpha, beta);
    const double sse = (yc - xc * coef).squaredNorm();
    const double gamma = (beta * e.array() / (alpha + beta * e.array())).sum();
    alpha = (gamma + 2.0 * options.weight_shape) /
            (coef.squaredNorm() + 2.0 * options.weight_rate);
    beta = (static_cast<double>(n) - gamma + 2.0 * options.noise_shape) /
           (sse + 2.0 * options.noise_rate);
    if (iter > 0 && (coef_old - coef).cwiseAbs().sum() < options.tolerance) break;
    coef_old = coef;
  }
  coef = posterior_mean(alpha, beta);

  for (std::size_t i = 0; i < d; ++i) model.coefficients[i] = coef(static_cast<Eigen::Index>(i));
  model.intercept = y_mean - x_mean.dot(coef);
  model.noise_precision = beta;
  model.weight_precision = alpha;
  model.iterations = iter + 1;
  return model;
}

inline void to_json(nlohmann::json& j, const LinearModel& m) {
  j = nlohmann::json{{"coefficients", m.coefficients},
                     {"intercept", m.intercept},
                     {"noise_precision", m.noise_precision},
                     {"weight_precision", m.weight_precision},
                     {"iterations", m.iterations}};
}

inline void from_json(const nlohmann::json& j, LinearModel& m) {
  j.at("coefficients").get_to(m.coefficients);
  j.at("intercept").get_to(m.intercept);
  j.at("noise_precision").get_to(m.noise_precision);
  j.at("weight_precision").get_to(m.weight_precision);
  j.at("iterations").get_to(m.iterations);
}

}  // namespace mdew
