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
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "poolbal/data.hpp"
#include "poolbal/estimators.hpp"
#include "poolbal/features.hpp"
#include "poolbal/solver.hpp"

namespace poolbal {

// Strata whose treated units define the effect being stress-tested.
struct SensitivityTarget {
  std::string name = "overall";
  std::vector<int> strata;  // empty: all strata

  static SensitivityTarget overall();
  static SensitivityTarget stratum(const AnalysisSample& sample,
                                   const std::string& label);
  static SensitivityTarget level(const AnalysisSample& sample,
                                 const Grouping& grouping,
                                 const std::string& level);
};

struct SensitivityConfig {
  double lambda = 1.0;        // odds-of-reweighting bound, >= 1
  int bootstrap_reps = 1000;
  double confidence = 0.95;
  std::uint64_t seed = 0;
  double max_dropped_fraction = 0.10;
};

struct SensitivityBounds {
  std::string target;
  double lambda = 1.0;
  double tau_min = 0.0;  // point bounds on the original sample
  double tau_max = 0.0;
  double ci_lower = 0.0;  // percentile interval over bootstrap extrema
  double ci_upper = 0.0;
  int bootstrap_reps = 0;
  int dropped_reps = 0;
};

// Extreme values of the reweighted control mean when every control's weight
// may be multiplied by a factor in [1/lambda, lambda]. The optimum sits at a
// threshold in the outcome order, found by scanning prefix sums; returns
// point bounds only. Raises ValidationError when the target has no controls
// with positive weight.
SensitivityBounds bounds_at_lambda(const WeightSolution& solution,
                                   const AnalysisSample& sample,
                                   const Eigen::VectorXd& outcomes,
                                   const SensitivityTarget& target,
                                   const SensitivityConfig& config);

// Recomputes weights on each resample. Replicas draw rows with replacement
// within each stratum-by-treatment cell, so cell counts are preserved.
using WeightsProcedure = std::function<WeightSolution(
    const FeatureMatrix&, const AnalysisSample&)>;

// Per-replicate extrema retained so intervals at any lambda can be formed
// without re-solving. Replicates whose weight fit fails are dropped and
// counted; more than max_dropped_fraction dropped raises ValidationError.
class BootstrapEnsemble {
 public:
  static BootstrapEnsemble run(const WeightsProcedure& procedure,
                               const FeatureMatrix& features,
                               const AnalysisSample& sample,
                               const Eigen::VectorXd& outcomes,
                               const SensitivityTarget& target,
                               const SensitivityConfig& config,
                               int threads = 1);

  // Percentile interval over replicate lower and upper bounds at lambda.
  std::pair<double, double> interval(double lambda, double confidence) const;
  int reps() const { return static_cast<int>(replicates_.size()); }
  int dropped() const { return dropped_; }
  std::vector<double> lower_bounds(double lambda) const;

 private:
  struct Replicate {
    double mu1 = 0.0;
    // Target control outcomes sorted ascending with their weights.
    std::vector<double> y;
    std::vector<double> gamma;
  };
  std::vector<Replicate> replicates_;
  int dropped_ = 0;

  friend SensitivityBounds bootstrap_ci(const WeightsProcedure&,
                                        const FeatureMatrix&,
                                        const AnalysisSample&,
                                        const Eigen::VectorXd&,
                                        const SensitivityTarget&,
                                        const SensitivityConfig&, int);
};

// Point bounds on the original sample plus a percentile interval over
// stratified bootstrap replicates.
SensitivityBounds bootstrap_ci(const WeightsProcedure& procedure,
                               const FeatureMatrix& features,
                               const AnalysisSample& sample,
                               const Eigen::VectorXd& outcomes,
                               const SensitivityTarget& target,
                               const SensitivityConfig& config,
                               int threads = 1);

// Bounds on the difference of two target effects; lower = A.min - B.max,
// upper = A.max - B.min, intervals from the paired replicate differences.
SensitivityBounds difference_bounds(const WeightsProcedure& procedure,
                                    const FeatureMatrix& features,
                                    const AnalysisSample& sample,
                                    const Eigen::VectorXd& outcomes,
                                    const SensitivityTarget& target_a,
                                    const SensitivityTarget& target_b,
                                    const SensitivityConfig& config,
                                    int threads = 1);

struct BreakdownResult {
  double lambda = 1.0;
  bool censored = false;         // still significant at the grid upper end
  bool not_significant = false;  // the lambda = 1 interval already covers 0
};

// Smallest lambda at which the sensitivity interval first covers zero, found
// on an ascending grid and refined by bisection; one bootstrap ensemble is
// reused across all lambda values.
BreakdownResult breakdown_lambda(const WeightsProcedure& procedure,
                                 const FeatureMatrix& features,
                                 const AnalysisSample& sample,
                                 const Eigen::VectorXd& outcomes,
                                 const SensitivityTarget& target,
                                 const SensitivityConfig& config,
                                 const std::vector<double>& grid,
                                 int threads = 1);

struct AmplificationPoint {
  double delta = 0.0;     // outcome-scale confounder effect
  double required = 0.0;  // selection imbalance needed to explain the width
};

// Decomposes a bound width into (confounder effect) x (selection imbalance)
// pairs: required = width / delta. Raises ConfigError at delta == 0.
std::vector<AmplificationPoint> amplification_curve(
    double bound_width, const std::vector<double>& delta_grid);

}  // namespace poolbal
