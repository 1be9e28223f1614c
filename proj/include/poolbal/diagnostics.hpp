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
#include <string>
#include <vector>

#include "poolbal/data.hpp"
#include "poolbal/features.hpp"
#include "poolbal/solver.hpp"

namespace poolbal {

// Standardized per-feature imbalances before and after weighting. Local rows
// are |sum_c gamma*phi - sum_t phi| / n_1g within each stratum; the global
// row is |sum_c gamma*phi - sum_t phi| / n_1 across all strata. The
// pre-weighting columns use uniform weights n_1g / n_0g per control.
struct BalanceReport {
  std::vector<std::string> feature_names;
  std::vector<std::string> stratum_labels;
  Eigen::MatrixXd local_pre;   // K x p
  Eigen::MatrixXd local_post;  // K x p
  Eigen::VectorXd global_pre;  // p
  Eigen::VectorXd global_post;
  Eigen::VectorXd local_pre_norm;   // per-stratum L2 over features
  Eigen::VectorXd local_post_norm;
};

BalanceReport balance_report(const WeightSolution& solution,
                             const FeatureMatrix& features,
                             const AnalysisSample& sample);

// Weight concentration summary. ESS is (sum gamma)^2 / sum gamma^2 per
// stratum and overall. Histogram bins cover normalized weights gamma / n_1g
// in 20 equal-width bins; zero weights are excluded from the bins and
// counted separately.
struct OverlapReport {
  std::vector<std::string> stratum_labels;
  Eigen::VectorXd ess;  // per stratum
  double ess_overall = 0.0;
  Eigen::VectorXd fraction_above_threshold;  // gamma / n_1g > 0.001
  double fraction_above_threshold_overall = 0.0;
  Eigen::VectorXd max_normalized_weight;  // per stratum
  std::vector<double> histogram_edges;    // 21 edges
  std::vector<int> histogram_counts;      // 20 bins over positive weights
  int zero_weight_count = 0;
};

// Raises ValidationError when every weight in some stratum is zero.
OverlapReport ess(const WeightSolution& solution, const AnalysisSample& sample);

}  // namespace poolbal
