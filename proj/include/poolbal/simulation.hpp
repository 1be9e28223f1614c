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
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "poolbal/data.hpp"

namespace poolbal {

namespace estimator_id {
inline constexpr const char* kPartial = "partial";
inline constexpr const char* kFull = "full";
inline constexpr const char* kNone = "none";
inline constexpr const char* kAugmented = "augmented";
inline constexpr const char* kIpwInteract = "ipw_interact";
inline constexpr const char* kIpwFixed = "ipw_fixed";
inline constexpr const char* kRidgeOutcome = "ridge_outcome";
}  // namespace estimator_id

struct SimConfig {
  int n = 10000;
  int d = 50;
  int groups = 50;
  int replicates = 100;
  std::uint64_t seed = 0;
  // Models see the transformed covariates unless this flag is set.
  bool use_raw_covariates = false;
  std::vector<std::string> roster;  // empty: all estimators
  int threads = 1;
  int group_retry_limit = 100;
};

// One synthetic draw. X holds the untransformed Gaussian covariates and
// X_transformed the dichotomized and exponentiated version seen by models.
struct DGPDraw {
  Eigen::MatrixXd X;
  Eigen::MatrixXd X_transformed;
  std::vector<int> group;  // 0..G-1, monotone in the last raw covariate
  std::vector<std::uint8_t> treated;
  Eigen::VectorXd y;
  Eigen::VectorXd tau;  // unit-level effect on the raw scale
};

// Covariance eigenvalues decay as ((d-j+1)/d)^5 before a random rotation.
Eigen::MatrixXd covariance_root(int d, std::mt19937_64& rng);

// Draws n rows and applies the fixed transform lists: dichotomize at the
// empirical 80th percentile, exponentiate the skew columns.
void gen_covariates(const SimConfig& config, std::mt19937_64& rng,
                    Eigen::MatrixXd& X, Eigen::MatrixXd& X_transformed);

// Cuts the last raw covariate at G-1 points sampled without replacement from
// the grid of every G-th order statistic; retries on an empty group up to
// the configured limit.
std::vector<int> assign_groups(const Eigen::VectorXd& x_last, int groups,
                               int retry_limit, std::mt19937_64& rng);

void gen_treatment_and_outcomes(const SimConfig& config, DGPDraw& draw,
                                std::mt19937_64& param_rng,
                                std::mt19937_64& treat_rng,
                                std::mt19937_64& noise_rng);

DGPDraw draw_dgp(const SimConfig& config, std::uint64_t replicate);

// Per-replicate records kept in replicate order for reproducibility checks.
struct ReplicateRecord {
  int replicate = 0;
  std::string estimator;
  // Group-level entries aligned with retained group ids; NaN se when the
  // estimator has no variance formula.
  std::vector<int> group_ids;
  std::vector<double> estimates;
  std::vector<double> ses;
  std::vector<double> truths;
  double overall_estimate = 0.0;
  double overall_se = 0.0;
  double overall_truth = 0.0;
  bool failed = false;
  std::string failure;
};

struct EstimatorMetrics {
  std::string estimator;
  double subgroup_mab = 0.0;       // mean over groups of |mean error|
  double subgroup_rmse = 0.0;      // pooled over group-replicate cells
  double overall_abs_bias = 0.0;
  double overall_rmse = 0.0;
  double subgroup_coverage = 0.0;  // 95% interval hit rate, NaN without ses
  double overall_coverage = 0.0;
  int failures = 0;
};

struct SimResult {
  SimConfig config;
  std::vector<EstimatorMetrics> metrics;
  std::vector<ReplicateRecord> records;
};

// Runs the estimator roster over independent replicates. Replicate streams
// are indexed by (seed, replicate, stage), so results are bitwise identical
// for any thread count.
SimResult run_monte_carlo(const SimConfig& config);

}  // namespace poolbal
