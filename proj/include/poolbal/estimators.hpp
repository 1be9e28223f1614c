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
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "poolbal/data.hpp"
#include "poolbal/features.hpp"
#include "poolbal/solver.hpp"

namespace poolbal {

// Maps stratum labels onto coarser reporting levels.
struct Grouping {
  std::string name;
  std::map<std::string, std::string> stratum_to_level;
};

// One reporting row. level is "stratum", a grouping name, or "overall";
// group identifies the member. Stratum rows satisfy tau == mu1 - mu0
// exactly; aggregate rows carry the treated-count weighted average of their
// stratum contrasts, so aggregate tau can differ from mu1 - mu0 by rounding.
struct EstimateRow {
  std::string level;
  std::string group;
  double mu1 = 0.0;
  double mu0 = 0.0;
  double tau = 0.0;
  double se = 0.0;
  int n_treated = 0;
};

struct EstimateTable {
  std::vector<EstimateRow> rows;
  const EstimateRow* find(const std::string& level,
                          const std::string& group) const;
};

// Imputed contrast per stratum: treated mean minus gamma-weighted control
// mean scaled by 1/n_1g, with aggregates over groupings and overall.
// Outcomes are passed explicitly so weight construction stays outcome-free.
EstimateTable weighted_means(const WeightSolution& solution,
                             const AnalysisSample& sample,
                             const Eigen::VectorXd& outcomes,
                             const std::vector<Grouping>& groupings = {});

enum class ResidualSource { weighted_mean, outcome_model };

class OutcomeModel;

// Design-fixed variance per stratum:
//   (1/n_1g^2) sum_t (Y - mu1_g)^2 + (1/n_1g^2) sum_c gamma^2 (Y - r_i)^2
// where r_i is the stratum's weighted control mean or an outcome-model
// prediction. Returns one variance per stratum.
Eigen::VectorXd sandwich_variances(const WeightSolution& solution,
                                   const AnalysisSample& sample,
                                   const Eigen::VectorXd& outcomes,
                                   ResidualSource source,
                                   const OutcomeModel* model = nullptr,
                                   const FeatureMatrix* features = nullptr);

// Fills the se column of an estimate table from per-stratum variances,
// aggregating by treated-count weights across independent strata.
void apply_sandwich_se(EstimateTable& table, const AnalysisSample& sample,
                       const Eigen::VectorXd& stratum_variances,
                       const std::vector<Grouping>& groupings = {});

// full_interaction: per-stratum intercepts, one shared slope vector, and
// per-stratum slope deviations (shared and deviation slopes ridge-penalized,
// intercepts free). fixed_effects: per-stratum intercepts and a shared slope
// only.
enum class PropensityMode { full_interaction, fixed_effects };

struct PropensityModel {
  PropensityMode mode = PropensityMode::full_interaction;
  Eigen::VectorXd intercepts;   // K
  Eigen::VectorXd shared_slope; // p
  Eigen::MatrixXd deviations;   // K x p, zero rows for fixed_effects
  double penalty = 0.0;

  double linear_predictor(const Eigen::RowVectorXd& phi, int g) const;
  double probability(const Eigen::RowVectorXd& phi, int g) const;  // in (0,1)
};

// Ridge-penalized logistic fit by damped Newton iteration; the penalty is
// chosen from the grid by k-fold cross-validated log-loss with a seeded
// shuffle. An empty grid uses {1e-4, 1e-3, 1e-2, 1e-1, 1}.
PropensityModel fit_propensity(const FeatureMatrix& features,
                               const AnalysisSample& sample, PropensityMode mode,
                               std::vector<double> penalty_grid = {},
                               int folds = 5, std::uint64_t seed = 0);

// Odds-of-treatment weights for controls, renormalized within each stratum
// so weights sum to the treated count (hajek == true, the default). Raises
// OverlapError when a control's fitted probability reaches 1.
WeightSolution ipw_weights(const PropensityModel& model,
                           const FeatureMatrix& features,
                           const AnalysisSample& sample, bool hajek = true);

// Control-outcome predictor interface used for augmentation.
class OutcomeModel {
 public:
  virtual ~OutcomeModel() = default;
  virtual double predict(const Eigen::RowVectorXd& phi, int g) const = 0;
};

// Ridge regression on control units with per-stratum intercepts, a shared
// slope, and penalized per-stratum deviations; closed-form fit, k-fold
// cross-validated squared error for the penalty. As the penalty grows the
// fit approaches per-stratum intercepts with a shared slope.
class RidgeOutcomeModel : public OutcomeModel {
 public:
  double predict(const Eigen::RowVectorXd& phi, int g) const override;

  Eigen::VectorXd intercepts;   // K
  Eigen::VectorXd shared_slope; // p
  Eigen::MatrixXd deviations;   // K x p
  double penalty = 0.0;
};

RidgeOutcomeModel fit_outcome_ridge(const FeatureMatrix& features,
                                    const AnalysisSample& sample,
                                    const Eigen::VectorXd& outcomes,
                                    std::vector<double> penalty_grid = {},
                                    int folds = 5, std::uint64_t seed = 0);

struct AugmentResult {
  EstimateTable table;
  Eigen::VectorXd bias_correction;  // per stratum, added to tau
};

// Bias-corrects each stratum's imputed control mean by the model-predicted
// imbalance between treated units and weighted controls. Exactly balanced
// weights make the correction vanish for any linear model.
AugmentResult augment(const EstimateTable& estimates,
                      const WeightSolution& solution, const OutcomeModel& model,
                      const FeatureMatrix& features,
                      const AnalysisSample& sample,
                      const Eigen::VectorXd& outcomes,
                      const std::vector<Grouping>& groupings = {});

enum class RegressionInteraction { none, by_grouping };

// Least squares of the outcome on [1, treatment (interacted with grouping
// levels when requested), features] with heteroskedasticity-robust standard
// errors. Raises ValidationError on a rank-deficient design, including the
// case of a level without treatment variation.
EstimateTable linear_regression_baseline(const FeatureMatrix& features,
                                         const AnalysisSample& sample,
                                         const Eigen::VectorXd& outcomes,
                                         RegressionInteraction interaction,
                                         const Grouping* grouping = nullptr);

}  // namespace poolbal
