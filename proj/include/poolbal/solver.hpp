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

#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "poolbal/data.hpp"
#include "poolbal/features.hpp"

namespace poolbal {

// partial: per-stratum coefficients shrunk toward a free global vector, with
//          exact global balance.
// full:    one global coefficient vector shared by all strata.
// none:    independent strata; no global balance constraint.
enum class Pooling { partial, full, none };

// Per-stratum penalty lambda_g = lambda / divisor(g).
enum class LambdaDivisor { stratum_size, treated_count, none };

struct SolverConfig {
  double lambda = 1.0;
  Pooling pooling = Pooling::partial;
  LambdaDivisor divisor = LambdaDivisor::stratum_size;
  int max_iterations = 20000;
  double gradient_tolerance = 1e-8;
  double global_balance_tolerance = 1e-6;

  double lambda_for(const AnalysisSample& s, int g) const;
};

// Unconstrained dual coordinates. alpha pairs with the per-stratum sum
// constraints, beta rows with per-stratum balance, mu_beta with the exact
// global balance constraint (unused when pooling == none; beta rows are tied
// to mu_beta when pooling == full).
struct DualParams {
  Eigen::VectorXd alpha;    // K
  Eigen::MatrixXd beta;     // K x p
  Eigen::VectorXd mu_beta;  // p
};

struct WeightSolution {
  // Weight per input row; zero at treated rows, which carry weight 1
  // implicitly. Each stratum's control weights sum to its treated count.
  Eigen::VectorXd gamma;
  DualParams dual;
  bool converged = false;
  int iterations = 0;
  double dual_value = 0.0;
  double primal_value = 0.0;
  // Raw imbalance vectors: local row g holds sum_c gamma*phi - sum_t phi
  // within stratum g; global is the sum over strata.
  Eigen::MatrixXd local_imbalance;
  Eigen::VectorXd global_imbalance;
  std::string diagnostic;
};

// Value of the smooth dual objective at the given coordinates. Zero
// coordinates give zero.
double dual_objective(const DualParams& params, const FeatureMatrix& features,
                      const AnalysisSample& sample, const SolverConfig& config);

// Exact gradient of dual_objective in the same coordinates.
DualParams dual_gradient(const DualParams& params, const FeatureMatrix& features,
                         const AnalysisSample& sample,
                         const SolverConfig& config);

// Minimizes the dual by limited-memory quasi-Newton iteration, recovers the
// hinge weights, and renormalizes each stratum's weights onto its sum
// constraint. Raises InfeasibleError when the dual diverges, naming the worst
// feature. A feasible but unconverged run returns converged == false with a
// diagnostic instead of throwing.
WeightSolution solve(const FeatureMatrix& features, const AnalysisSample& sample,
                     const SolverConfig& config,
                     const std::optional<DualParams>& warm_start = std::nullopt);

// Objective of the constrained weighting problem evaluated at gamma. Validates
// nonnegativity, the per-stratum sum constraints, and (modes with a global
// constraint) global balance; raises ValidationError naming the violated
// constraint otherwise.
double primal_objective(const Eigen::VectorXd& gamma,
                        const FeatureMatrix& features,
                        const AnalysisSample& sample,
                        const SolverConfig& config);

struct SweepPoint {
  double lambda = 0.0;
  double local_imbalance_norm = 0.0;   // sqrt of summed squared local entries
  double global_imbalance_norm = 0.0;  // normalized per-feature max
  double ess_overall = 0.0;
  bool converged = false;
};

// Solves along an ascending lambda grid with warm starts scaled by the
// lambda ratio between consecutive grid points.
std::vector<SweepPoint> sweep_lambda(const FeatureMatrix& features,
                                     const AnalysisSample& sample,
                                     SolverConfig config,
                                     const std::vector<double>& grid);

}  // namespace poolbal
