// Copyright 2026 The poolbal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "poolbal/solver.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "poolbal/lbfgs.hpp"

namespace poolbal {

namespace {

// Per-stratum views reused across objective evaluations.
struct Workspace {
  int K = 0;
  int p = 0;
  Pooling pooling = Pooling::partial;
  std::vector<Eigen::MatrixXd> control_phi;  // n0g x p
  std::vector<Eigen::VectorXd> treated_sum;  // p
  std::vector<double> lambda_g;
  std::vector<double> n1g;
  // Scratch sized to the largest stratum.
  mutable Eigen::VectorXd u;
  mutable Eigen::VectorXd r;
  mutable Eigen::VectorXd gbeta;

  int dim() const {
    switch (pooling) {
      case Pooling::partial: return K + K * p + p;
      case Pooling::full: return K + p;
      case Pooling::none: return K + K * p;
    }
    return 0;
  }
  int beta_offset(int g) const { return K + g * p; }
  int mu_offset() const { return pooling == Pooling::full ? K : K + K * p; }
};

Workspace make_workspace(const FeatureMatrix& features,
                         const AnalysisSample& sample,
                         const SolverConfig& config) {
  if (features.values.rows() != sample.n()) {
    throw ValidationError("feature matrix row count mismatch");
  }
  if (config.lambda <= 0.0) {
    throw ConfigError("lambda must be positive");
  }
  Workspace ws;
  ws.K = sample.n_strata();
  ws.p = features.p();
  ws.pooling = config.pooling;
  ws.control_phi.reserve(static_cast<std::size_t>(ws.K));
  ws.treated_sum.reserve(static_cast<std::size_t>(ws.K));
  int max_n0 = 1;
  for (int g = 0; g < ws.K; ++g) {
    const auto& controls = sample.control_rows(g);
    const auto& treats = sample.treated_rows(g);
    Eigen::MatrixXd phi(static_cast<Eigen::Index>(controls.size()), ws.p);
    for (std::size_t k = 0; k < controls.size(); ++k) {
      phi.row(static_cast<Eigen::Index>(k)) = features.values.row(controls[k]);
    }
    Eigen::VectorXd tsum = Eigen::VectorXd::Zero(ws.p);
    for (int row : treats) tsum += features.values.row(row).transpose();
    ws.control_phi.push_back(std::move(phi));
    ws.treated_sum.push_back(std::move(tsum));
    ws.lambda_g.push_back(config.lambda_for(sample, g));
    ws.n1g.push_back(static_cast<double>(sample.n_treated(g)));
    max_n0 = std::max(max_n0, static_cast<int>(controls.size()));
  }
  ws.u.resize(max_n0);
  ws.r.resize(max_n0);
  ws.gbeta.resize(ws.p);
  return ws;
}

// Smooth dual value and gradient at packed coordinates theta.
double eval_dual(const Workspace& ws, const Eigen::VectorXd& theta,
                 Eigen::VectorXd& grad) {
  grad.setZero();
  double obj = 0.0;
  const int p = ws.p;
  switch (ws.pooling) {
    case Pooling::partial: {
      const auto mu = theta.segment(ws.mu_offset(), p);
      auto gmu = grad.segment(ws.mu_offset(), p);
      for (int g = 0; g < ws.K; ++g) {
        const double a = theta[g];
        const auto beta = theta.segment(ws.beta_offset(g), p);
        const auto& phi = ws.control_phi[static_cast<std::size_t>(g)];
        const Eigen::Index n0 = phi.rows();
        auto u = ws.u.head(n0);
        auto r = ws.r.head(n0);
        u.noalias() = phi * beta;
        u.array() += a;
        r = u.cwiseMax(0.0);
        const double inv_lambda = 1.0 / ws.lambda_g[static_cast<std::size_t>(g)];
        obj += 0.5 * inv_lambda * r.squaredNorm() - a * ws.n1g[static_cast<std::size_t>(g)] -
               beta.dot(ws.treated_sum[static_cast<std::size_t>(g)]);
        grad[g] = inv_lambda * r.sum() - ws.n1g[static_cast<std::size_t>(g)];
        ws.gbeta.noalias() = phi.transpose() * r;
        ws.gbeta *= inv_lambda;
        ws.gbeta -= ws.treated_sum[static_cast<std::size_t>(g)];
        obj += 0.5 * (beta - mu).squaredNorm();
        grad.segment(ws.beta_offset(g), p) = ws.gbeta + (beta - mu);
        gmu -= beta - mu;
      }
      break;
    }
    case Pooling::full: {
      const auto mu = theta.segment(ws.mu_offset(), p);
      auto gmu = grad.segment(ws.mu_offset(), p);
      for (int g = 0; g < ws.K; ++g) {
        const double a = theta[g];
        const auto& phi = ws.control_phi[static_cast<std::size_t>(g)];
        const Eigen::Index n0 = phi.rows();
        auto u = ws.u.head(n0);
        auto r = ws.r.head(n0);
        u.noalias() = phi * mu;
        u.array() += a;
        r = u.cwiseMax(0.0);
        const double inv_lambda = 1.0 / ws.lambda_g[static_cast<std::size_t>(g)];
        obj += 0.5 * inv_lambda * r.squaredNorm() - a * ws.n1g[static_cast<std::size_t>(g)] -
               mu.dot(ws.treated_sum[static_cast<std::size_t>(g)]);
        grad[g] = inv_lambda * r.sum() - ws.n1g[static_cast<std::size_t>(g)];
        ws.gbeta.noalias() = phi.transpose() * r;
        ws.gbeta *= inv_lambda;
        gmu += ws.gbeta - ws.treated_sum[static_cast<std::size_t>(g)];
      }
      break;
    }
    case Pooling::none: {
      for (int g = 0; g < ws.K; ++g) {
        const double a = theta[g];
        const auto beta = theta.segment(ws.beta_offset(g), p);
        const auto& phi = ws.control_phi[static_cast<std::size_t>(g)];
        const Eigen::Index n0 = phi.rows();
        auto u = ws.u.head(n0);
        auto r = ws.r.head(n0);
        u.noalias() = phi * beta;
        u.array() += a;
        r = u.cwiseMax(0.0);
        const double inv_lambda = 1.0 / ws.lambda_g[static_cast<std::size_t>(g)];
        obj += 0.5 * inv_lambda * r.squaredNorm() - a * ws.n1g[static_cast<std::size_t>(g)] -
               beta.dot(ws.treated_sum[static_cast<std::size_t>(g)]);
        grad[g] = inv_lambda * r.sum() - ws.n1g[static_cast<std::size_t>(g)];
        ws.gbeta.noalias() = phi.transpose() * r;
        ws.gbeta *= inv_lambda;
        ws.gbeta -= ws.treated_sum[static_cast<std::size_t>(g)];
        obj += 0.5 * beta.squaredNorm();
        grad.segment(ws.beta_offset(g), p) = ws.gbeta + beta;
      }
      break;
    }
  }
  return obj;
}

Eigen::VectorXd pack(const Workspace& ws, const DualParams& params) {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(ws.dim());
  if (params.alpha.size() == ws.K) theta.head(ws.K) = params.alpha;
  switch (ws.pooling) {
    case Pooling::partial:
      if (params.beta.rows() == ws.K && params.beta.cols() == ws.p) {
        for (int g = 0; g < ws.K; ++g) {
          theta.segment(ws.beta_offset(g), ws.p) = params.beta.row(g);
        }
      }
      if (params.mu_beta.size() == ws.p) {
        theta.segment(ws.mu_offset(), ws.p) = params.mu_beta;
      }
      break;
    case Pooling::full:
      if (params.mu_beta.size() == ws.p) {
        theta.segment(ws.mu_offset(), ws.p) = params.mu_beta;
      }
      break;
    case Pooling::none:
      if (params.beta.rows() == ws.K && params.beta.cols() == ws.p) {
        for (int g = 0; g < ws.K; ++g) {
          theta.segment(ws.beta_offset(g), ws.p) = params.beta.row(g);
        }
      }
      break;
  }
  return theta;
}

DualParams unpack(const Workspace& ws, const Eigen::VectorXd& theta) {
  DualParams params;
  params.alpha = theta.head(ws.K);
  params.beta = Eigen::MatrixXd::Zero(ws.K, ws.p);
  params.mu_beta = Eigen::VectorXd::Zero(ws.p);
  switch (ws.pooling) {
    case Pooling::partial:
      for (int g = 0; g < ws.K; ++g) {
        params.beta.row(g) = theta.segment(ws.beta_offset(g), ws.p);
      }
      params.mu_beta = theta.segment(ws.mu_offset(), ws.p);
      break;
    case Pooling::full:
      params.mu_beta = theta.segment(ws.mu_offset(), ws.p);
      for (int g = 0; g < ws.K; ++g) params.beta.row(g) = params.mu_beta;
      break;
    case Pooling::none:
      for (int g = 0; g < ws.K; ++g) {
        params.beta.row(g) = theta.segment(ws.beta_offset(g), ws.p);
      }
      break;
  }
  return params;
}

// Internal primal value at gamma without constraint validation.
double primal_value_of(const Workspace& ws, const AnalysisSample& sample,
                       const FeatureMatrix& features,
                       const Eigen::VectorXd& gamma) {
  double value = 0.0;
  for (int g = 0; g < ws.K; ++g) {
    const auto& controls = sample.control_rows(g);
    Eigen::VectorXd e = -ws.treated_sum[static_cast<std::size_t>(g)];
    double sq = 0.0;
    for (std::size_t k = 0; k < controls.size(); ++k) {
      const double w = gamma[controls[k]];
      e += w * features.values.row(controls[k]).transpose();
      sq += w * w;
    }
    if (ws.pooling != Pooling::full) value += 0.5 * e.squaredNorm();
    value += 0.5 * ws.lambda_g[static_cast<std::size_t>(g)] * sq;
  }
  return value;
}

std::string worst_feature(const Workspace& ws, const FeatureMatrix& features,
                          const Eigen::VectorXd& theta) {
  int worst = 0;
  double best = -1.0;
  if (ws.pooling == Pooling::none) {
    for (int g = 0; g < ws.K; ++g) {
      for (int j = 0; j < ws.p; ++j) {
        const double v = std::abs(theta[ws.beta_offset(g) + j]);
        if (v > best) {
          best = v;
          worst = j;
        }
      }
    }
  } else {
    for (int j = 0; j < ws.p; ++j) {
      const double v = std::abs(theta[ws.mu_offset() + j]);
      if (v > best) {
        best = v;
        worst = j;
      }
    }
  }
  return features.columns[static_cast<std::size_t>(worst)].name;
}

}  // namespace

double SolverConfig::lambda_for(const AnalysisSample& s, int g) const {
  switch (divisor) {
    case LambdaDivisor::stratum_size:
      return lambda / static_cast<double>(s.stratum_size(g));
    case LambdaDivisor::treated_count:
      return lambda / static_cast<double>(s.n_treated(g));
    case LambdaDivisor::none:
      return lambda;
  }
  return lambda;
}

double dual_objective(const DualParams& params, const FeatureMatrix& features,
                      const AnalysisSample& sample,
                      const SolverConfig& config) {
  Workspace ws = make_workspace(features, sample, config);
  Eigen::VectorXd grad(ws.dim());
  return eval_dual(ws, pack(ws, params), grad);
}

DualParams dual_gradient(const DualParams& params, const FeatureMatrix& features,
                         const AnalysisSample& sample,
                         const SolverConfig& config) {
  Workspace ws = make_workspace(features, sample, config);
  Eigen::VectorXd grad(ws.dim());
  eval_dual(ws, pack(ws, params), grad);
  DualParams g = unpack(ws, grad);
  if (config.pooling == Pooling::full) {
    // The unpack ties beta rows to mu_beta; gradient rows are not defined
    // separately under full pooling.
    g.beta.setZero();
  }
  return g;
}

WeightSolution solve(const FeatureMatrix& features, const AnalysisSample& sample,
                     const SolverConfig& config,
                     const std::optional<DualParams>& warm_start) {
  Workspace ws = make_workspace(features, sample, config);
  Eigen::VectorXd theta = warm_start ? pack(ws, *warm_start)
                                     : Eigen::VectorXd::Zero(ws.dim());

  LbfgsOptions options;
  options.max_iterations = config.max_iterations;
  options.gradient_tolerance = config.gradient_tolerance;

  auto objective = [&ws](const Eigen::VectorXd& t, Eigen::VectorXd& g) {
    return eval_dual(ws, t, g);
  };

  LbfgsResult fit = lbfgs_minimize(objective, theta, options);
  int iterations = fit.iterations;

  if (fit.diverged) {
    throw InfeasibleError(
        "balance constraints appear infeasible: dual objective diverged, "
        "largest multiplier on feature \"" +
        worst_feature(ws, features, fit.x) + "\"");
  }

  WeightSolution solution;
  const int K = ws.K;
  const int p = ws.p;
  const double n1_total = static_cast<double>(sample.n_treated());

  // Tighten until the recovered weights meet the global balance tolerance;
  // the gradient bound is relative to |q|, so large objectives occasionally
  // need a second pass.
  for (int attempt = 0; attempt < 3; ++attempt) {
    DualParams params = unpack(ws, fit.x);
    solution.gamma = Eigen::VectorXd::Zero(sample.n());
    bool zero_stratum = false;
    std::string zero_label;
    for (int g = 0; g < K; ++g) {
      const auto& controls = sample.control_rows(g);
      const double inv_lambda = 1.0 / ws.lambda_g[static_cast<std::size_t>(g)];
      double sum = 0.0;
      for (int row : controls) {
        const double z = params.alpha[g] +
                         params.beta.row(g).dot(features.values.row(row));
        const double w = z > 0.0 ? inv_lambda * z : 0.0;
        solution.gamma[row] = w;
        sum += w;
      }
      if (sum <= 0.0) {
        zero_stratum = true;
        zero_label = sample.stratum_labels()[static_cast<std::size_t>(g)];
        continue;
      }
      // Snap onto the sum constraint; the factor is 1 + O(tolerance).
      const double scale = ws.n1g[static_cast<std::size_t>(g)] / sum;
      for (int row : controls) solution.gamma[row] *= scale;
    }

    solution.dual = std::move(params);
    solution.iterations = iterations;
    solution.dual_value = fit.value;

    solution.local_imbalance.resize(K, p);
    for (int g = 0; g < K; ++g) {
      Eigen::VectorXd e = -ws.treated_sum[static_cast<std::size_t>(g)];
      for (int row : sample.control_rows(g)) {
        e += solution.gamma[row] * features.values.row(row).transpose();
      }
      solution.local_imbalance.row(g) = e;
    }
    solution.global_imbalance = solution.local_imbalance.colwise().sum();
    solution.primal_value = primal_value_of(ws, sample, features, solution.gamma);

    if (zero_stratum) {
      solution.converged = false;
      solution.diagnostic =
          "all control weights are zero in stratum \"" + zero_label + "\"";
      return solution;
    }

    const double global_norm =
        config.pooling == Pooling::none
            ? 0.0
            : solution.global_imbalance.cwiseAbs().maxCoeff() / n1_total;
    const bool balanced = global_norm <= config.global_balance_tolerance;
    if (fit.converged && balanced) {
      solution.converged = true;
      return solution;
    }
    if (!fit.converged) {
      solution.converged = false;
      std::ostringstream msg;
      msg << "stopped after " << iterations
          << " iterations with gradient norm " << fit.gradient.norm();
      solution.diagnostic = msg.str();
      return solution;
    }
    // Converged in the dual but above the balance tolerance: refine.
    options.gradient_tolerance *= 1e-2;
    fit = lbfgs_minimize(objective, fit.x, options);
    iterations += fit.iterations;
    if (fit.diverged) {
      throw InfeasibleError(
          "balance constraints appear infeasible: dual objective diverged, "
          "largest multiplier on feature \"" +
          worst_feature(ws, features, fit.x) + "\"");
    }
  }

  solution.converged = false;
  solution.diagnostic = "global imbalance above tolerance after refinement";
  return solution;
}

double primal_objective(const Eigen::VectorXd& gamma,
                        const FeatureMatrix& features,
                        const AnalysisSample& sample,
                        const SolverConfig& config) {
  if (gamma.size() != sample.n()) {
    throw ValidationError("gamma length mismatch");
  }
  Workspace ws = make_workspace(features, sample, config);
  for (int g = 0; g < ws.K; ++g) {
    double sum = 0.0;
    for (int row : sample.control_rows(g)) {
      if (gamma[row] < -1e-9) {
        throw ValidationError("constraint violation: negative weight at row " +
                              std::to_string(row));
      }
      sum += gamma[row];
    }
    const double n1g = ws.n1g[static_cast<std::size_t>(g)];
    if (std::abs(sum - n1g) > 1e-6 * std::max(1.0, n1g)) {
      throw ValidationError(
          "constraint violation: weights in stratum \"" +
          sample.stratum_labels()[static_cast<std::size_t>(g)] + "\" sum to " +
          std::to_string(sum) + ", expected " + std::to_string(n1g));
    }
  }
  if (config.pooling != Pooling::none) {
    Eigen::VectorXd global = Eigen::VectorXd::Zero(ws.p);
    for (int g = 0; g < ws.K; ++g) {
      global -= ws.treated_sum[static_cast<std::size_t>(g)];
      for (int row : sample.control_rows(g)) {
        global += gamma[row] * features.values.row(row).transpose();
      }
    }
    const double norm =
        global.cwiseAbs().maxCoeff() / static_cast<double>(sample.n_treated());
    if (norm > config.global_balance_tolerance) {
      throw ValidationError(
          "constraint violation: global imbalance " + std::to_string(norm) +
          " exceeds tolerance");
    }
  }
  return primal_value_of(ws, sample, features, gamma);
}

std::vector<SweepPoint> sweep_lambda(const FeatureMatrix& features,
                                     const AnalysisSample& sample,
                                     SolverConfig config,
                                     const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("empty lambda grid");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] <= 0.0) throw ConfigError("lambda grid must be positive");
    if (k > 0 && grid[k] <= grid[k - 1]) {
      throw ConfigError("lambda grid must be strictly increasing");
    }
  }
  std::vector<SweepPoint> points;
  points.reserve(grid.size());
  std::optional<DualParams> warm;
  double prev_lambda = 0.0;
  for (double lambda : grid) {
    if (warm && prev_lambda > 0.0) {
      // Dual coordinates scale like lambda near the optimum.
      const double ratio = lambda / prev_lambda;
      warm->alpha *= ratio;
      warm->beta *= ratio;
      warm->mu_beta *= ratio;
    }
    config.lambda = lambda;
    WeightSolution sol = solve(features, sample, config, warm);
    SweepPoint point;
    point.lambda = lambda;
    point.converged = sol.converged;
    double local_sq = 0.0;
    for (int g = 0; g < sample.n_strata(); ++g) {
      const double n1g = static_cast<double>(sample.n_treated(g));
      local_sq += (sol.local_imbalance.row(g) / n1g).squaredNorm();
    }
    point.local_imbalance_norm = std::sqrt(local_sq);
    point.global_imbalance_norm =
        sol.global_imbalance.cwiseAbs().maxCoeff() /
        static_cast<double>(sample.n_treated());
    double wsum = 0.0, wsq = 0.0;
    for (int g = 0; g < sample.n_strata(); ++g) {
      for (int row : sample.control_rows(g)) {
        wsum += sol.gamma[row];
        wsq += sol.gamma[row] * sol.gamma[row];
      }
    }
    point.ess_overall = wsq > 0.0 ? wsum * wsum / wsq : 0.0;
    points.push_back(point);
    warm = sol.dual;
    prev_lambda = lambda;
  }
  return points;
}

}  // namespace poolbal
