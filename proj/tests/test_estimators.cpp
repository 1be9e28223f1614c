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

#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "poolbal/estimators.hpp"
#include "poolbal/rng.hpp"
#include "poolbal/solver.hpp"

namespace {

using namespace poolbal;

FeatureMatrix plain_features(const Eigen::MatrixXd& values) {
  FeatureMatrix fm;
  fm.values = values;
  for (int j = 0; j < values.cols(); ++j) {
    ColumnInfo info;
    info.name = "x" + std::to_string(j + 1);
    fm.columns.push_back(info);
  }
  return fm;
}

WeightSolution manual_weights(int n, std::initializer_list<std::pair<int, double>> entries) {
  WeightSolution sol;
  sol.gamma = Eigen::VectorXd::Zero(n);
  for (const auto& [row, w] : entries) sol.gamma[row] = w;
  sol.converged = true;
  return sol;
}

}  // namespace

TEST_CASE("weighted means honor the contrast and aggregation identities") {
  oracle::Instance inst = oracle::random_instance(9, 16, 3, 4);
  SolverConfig config;
  WeightSolution sol = solve(inst.features, inst.sample, config);
  REQUIRE(sol.converged);

  Grouping coarse;
  coarse.name = "half";
  for (int g = 0; g < inst.sample.n_strata(); ++g) {
    coarse.stratum_to_level[inst.sample.stratum_labels()[static_cast<std::size_t>(g)]] =
        g % 2 == 0 ? "even" : "odd";
  }
  EstimateTable table = weighted_means(sol, inst.sample,
                                       inst.sample.outcomes(), {coarse});

  double n1 = 0.0;
  double overall = 0.0;
  for (int g = 0; g < inst.sample.n_strata(); ++g) {
    n1 += static_cast<double>(inst.sample.n_treated(g));
  }
  for (int g = 0; g < inst.sample.n_strata(); ++g) {
    const auto* row = table.find(
        "stratum", inst.sample.stratum_labels()[static_cast<std::size_t>(g)]);
    REQUIRE(row != nullptr);
    CHECK(row->tau == row->mu1 - row->mu0);  // bitwise identity
    CHECK(row->n_treated == inst.sample.n_treated(g));

    double mu1 = 0.0;
    for (int r : inst.sample.treated_rows(g)) mu1 += inst.sample.outcomes()[r];
    mu1 /= static_cast<double>(inst.sample.n_treated(g));
    CHECK(row->mu1 == doctest::Approx(mu1).epsilon(1e-14));
    overall += static_cast<double>(inst.sample.n_treated(g)) / n1 *
               (row->mu1 - row->mu0);
  }

  const auto* all = table.find("overall", "all");
  REQUIRE(all != nullptr);
  CHECK(all->tau == overall);  // treated-count weighted aggregate, bitwise
  CHECK(all->n_treated == inst.sample.n_treated());

  // Grouping levels aggregate the same way over their member strata.
  const auto* even = table.find("half", "even");
  REQUIRE(even != nullptr);
  double even_n1 = 0.0, even_tau = 0.0;
  for (int g = 0; g < inst.sample.n_strata(); g += 2) {
    even_n1 += static_cast<double>(inst.sample.n_treated(g));
  }
  for (int g = 0; g < inst.sample.n_strata(); g += 2) {
    const auto* row = table.find(
        "stratum", inst.sample.stratum_labels()[static_cast<std::size_t>(g)]);
    even_tau += static_cast<double>(inst.sample.n_treated(g)) / even_n1 *
                (row->mu1 - row->mu0);
  }
  CHECK(even->tau == even_tau);
}

TEST_CASE("sandwich se reproduces the hand-computed root two") {
  // One stratum, treated outcomes {0, 2}, controls at +/- sqrt(3) with unit
  // weights: variance = (2 + 6) / 4 = 2.
  const double s3 = std::sqrt(3.0);
  Eigen::VectorXd y(4);
  y << 0.0, 2.0, s3, -s3;
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(4, 1);
  auto sample = make_sample(y, {1, 1, 0, 0}, {"g", "g", "g", "g"}, X, {"x1"});
  WeightSolution sol = manual_weights(4, {{2, 1.0}, {3, 1.0}});

  Eigen::VectorXd variances =
      sandwich_variances(sol, sample, y, ResidualSource::weighted_mean);
  REQUIRE(variances.size() == 1);
  CHECK(std::abs(variances[0] - 2.0) <= 1e-10);

  EstimateTable table = weighted_means(sol, sample, y, {});
  apply_sandwich_se(table, sample, variances, {});
  const auto* stratum = table.find("stratum", "g");
  const auto* overall = table.find("overall", "all");
  REQUIRE(stratum != nullptr);
  REQUIRE(overall != nullptr);
  CHECK(std::abs(stratum->se - std::sqrt(2.0)) <= 1e-10);
  CHECK(std::abs(overall->se - std::sqrt(2.0)) <= 1e-10);
  CHECK(stratum->tau == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("model residuals replace the weighted mean in the sandwich") {
  Eigen::VectorXd y(5);
  y << 1.0, 3.0, 2.0, 4.0, 6.0;
  Eigen::MatrixXd X(5, 1);
  X << 0.0, 0.0, 1.0, 2.0, 3.0;
  auto sample = make_sample(y, {1, 1, 0, 0, 0}, {"g", "g", "g", "g", "g"}, X,
                            {"x1"});
  FeatureMatrix fm = plain_features(X);
  WeightSolution sol = manual_weights(5, {{2, 0.5}, {3, 1.0}, {4, 0.5}});

  // The model fits the controls exactly (y = 2x), so only the treated
  // spread remains: Var = ((1-2)^2 + (3-2)^2) / 4 = 0.5.
  RidgeOutcomeModel model;
  model.intercepts = Eigen::VectorXd::Zero(1);
  model.shared_slope = Eigen::VectorXd::Constant(1, 2.0);
  model.deviations = Eigen::MatrixXd::Zero(1, 1);
  Eigen::VectorXd variances = sandwich_variances(
      sol, sample, y, ResidualSource::outcome_model, &model, &fm);
  CHECK(variances[0] == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(sandwich_variances(sol, sample, y,
                                     ResidualSource::outcome_model),
                  ConfigError);
}

TEST_CASE("propensity intercept recovers the stratum treated share") {
  // Symmetric control features keep the slope at zero, so the intercept is
  // the logit of 1/4.
  Eigen::VectorXd y = Eigen::VectorXd::Zero(4);
  Eigen::MatrixXd X(4, 1);
  X << -1.5, 1.5, 0.0, 0.0;
  auto sample = make_sample(y, {0, 0, 0, 1}, {"g", "g", "g", "g"}, X, {"x1"});
  FeatureMatrix fm = plain_features(X);

  PropensityModel model =
      fit_propensity(fm, sample, PropensityMode::fixed_effects, {1e-6});
  CHECK(std::abs(model.intercepts[0] - std::log(1.0 / 3.0)) <= 1e-6);
  CHECK(std::abs(model.intercepts[0] + 1.0986122886681098) <= 1e-6);
  CHECK(std::abs(model.shared_slope[0]) <= 1e-8);
  CHECK(model.probability(fm.values.row(2), 0) ==
        doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("a crushing penalty reduces the propensity to stratum rates") {
  oracle::Instance inst = oracle::random_instance(12, 14, 3, 3);
  PropensityModel model = fit_propensity(
      inst.features, inst.sample, PropensityMode::full_interaction, {1e9});
  CHECK(model.shared_slope.lpNorm<Eigen::Infinity>() <= 1e-6);
  CHECK(model.deviations.lpNorm<Eigen::Infinity>() <= 1e-6);
  for (int g = 0; g < inst.sample.n_strata(); ++g) {
    const double share =
        static_cast<double>(inst.sample.n_treated(g)) /
        static_cast<double>(inst.sample.stratum_size(g));
    CHECK(model.probability(inst.features.values.row(0), g) ==
          doctest::Approx(share).epsilon(1e-5));
  }
}

TEST_CASE("propensity refits are deterministic under one seed") {
  oracle::Instance inst = oracle::random_instance(14, 14, 3, 3);
  PropensityModel a = fit_propensity(inst.features, inst.sample,
                                     PropensityMode::full_interaction, {},
                                     5, 42);
  PropensityModel b = fit_propensity(inst.features, inst.sample,
                                     PropensityMode::full_interaction, {},
                                     5, 42);
  CHECK(a.penalty == b.penalty);
  CHECK((a.intercepts - b.intercepts).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((a.deviations - b.deviations).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("inverse odds weights renormalize onto the treated count") {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(6);
  Eigen::MatrixXd X(6, 1);
  X << 0.0, 0.0, 1.0, -1.0, 2.0, -2.0;
  auto sample = make_sample(y, {1, 1, 0, 0, 0, 0},
                            {"g", "g", "g", "g", "g", "g"}, X, {"x1"});
  FeatureMatrix fm = plain_features(X);

  PropensityModel flat;
  flat.mode = PropensityMode::fixed_effects;
  flat.intercepts = Eigen::VectorXd::Zero(1);
  flat.shared_slope = Eigen::VectorXd::Zero(1);
  flat.deviations = Eigen::MatrixXd::Zero(1, 1);

  WeightSolution hajek = ipw_weights(flat, fm, sample, true);
  for (int row : sample.control_rows(0)) {
    CHECK(hajek.gamma[row] == doctest::Approx(0.5).epsilon(1e-14));
  }
  // Weighted controls cancel the symmetric features exactly.
  CHECK(hajek.local_imbalance.lpNorm<Eigen::Infinity>() <= 1e-14);

  WeightSolution raw = ipw_weights(flat, fm, sample, false);
  for (int row : sample.control_rows(0)) {
    CHECK(raw.gamma[row] == doctest::Approx(1.0).epsilon(1e-14));
  }

  PropensityModel sure;
  sure.mode = PropensityMode::fixed_effects;
  sure.intercepts = Eigen::VectorXd::Constant(1, 50.0);
  sure.shared_slope = Eigen::VectorXd::Zero(1);
  sure.deviations = Eigen::MatrixXd::Zero(1, 1);
  CHECK_THROWS_AS(ipw_weights(sure, fm, sample, true), OverlapError);
}

TEST_CASE("hierarchical ridge interpolates the generating linear model") {
  oracle::Instance inst = oracle::locally_balanced_instance(3, 2, 2, 10, 2);
  // Deterministic linear outcomes on the control rows.
  Eigen::VectorXd y(inst.sample.n());
  for (int i = 0; i < inst.sample.n(); ++i) {
    const int g = inst.sample.stratum(i);
    y[i] = 1.5 * static_cast<double>(g + 1) +
           inst.features.values(i, 0) - 2.0 * inst.features.values(i, 1);
  }
  RidgeOutcomeModel model =
      fit_outcome_ridge(inst.features, inst.sample, y, {1e-10});
  for (int i = 0; i < inst.sample.n(); ++i) {
    if (inst.sample.treated(i)) continue;
    CHECK(std::abs(model.predict(inst.features.values.row(i),
                                 inst.sample.stratum(i)) -
                   y[i]) <= 1e-6);
  }

  RidgeOutcomeModel flat =
      fit_outcome_ridge(inst.features, inst.sample, y, {1e12});
  CHECK(flat.deviations.lpNorm<Eigen::Infinity>() <= 1e-6);
}

TEST_CASE("augmentation shifts by the model-predicted gap") {
  // One stratum with a deliberate imbalance: gamma misses the treated moment
  // by (-0.5, 0) in raw feature units.
  Eigen::VectorXd y(4);
  y << 5.0, 1.0, 2.0, 3.0;
  Eigen::MatrixXd X(4, 2);
  X << 1.0, 1.0,  //
      2.0, 0.0,   //
      0.0, 2.0,   //
      3.0, 3.0;
  auto sample = make_sample(y, {1, 0, 0, 0}, {"g", "g", "g", "g"}, X,
                            {"x1", "x2"});
  FeatureMatrix fm = plain_features(X);
  WeightSolution sol = manual_weights(4, {{1, 0.25}, {2, 0.75}, {3, 0.0}});

  RidgeOutcomeModel model;
  model.intercepts = Eigen::VectorXd::Constant(1, 4.0);
  model.shared_slope = Eigen::VectorXd::Zero(2);
  model.shared_slope << 2.0, -1.0;
  model.deviations = Eigen::MatrixXd::Zero(1, 2);

  EstimateTable base = weighted_means(sol, sample, y, {});
  AugmentResult out = augment(base, sol, model, fm, sample, y, {});

  // Treated prediction 4 + 2 - 1 = 5; weighted control prediction
  // 0.25*(4+4) + 0.75*(4-2) = 3.5; shift = 1.5.
  REQUIRE(out.bias_correction.size() == 1);
  CHECK(out.bias_correction[0] == doctest::Approx(1.5).epsilon(1e-12));
  const auto* before = base.find("stratum", "g");
  const auto* after = out.table.find("stratum", "g");
  CHECK(after->mu0 == doctest::Approx(before->mu0 + 1.5).epsilon(1e-12));
  CHECK(after->tau == doctest::Approx(before->tau - 1.5).epsilon(1e-12));
  const auto* overall = out.table.find("overall", "all");
  CHECK(overall->tau == doctest::Approx(after->tau).epsilon(1e-12));
  CHECK(std::isfinite(after->se));
}

TEST_CASE("augmentation is inert once local balance is exact") {
  oracle::Instance inst = oracle::locally_balanced_instance(5, 3, 2, 12, 2);
  Eigen::VectorXd y(inst.sample.n());
  std::mt19937_64 rng = make_stream(5, 0, 9);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < y.size(); ++i) {
    y[i] = inst.features.values(i, 0) + 0.5 * gauss(rng);
  }

  SolverConfig config;
  config.lambda = 1e-6;  // local balance dominates the penalty
  WeightSolution sol = solve(inst.features, inst.sample, config);
  REQUIRE(sol.converged);
  REQUIRE(sol.local_imbalance.lpNorm<Eigen::Infinity>() <= 1e-6);

  EstimateTable base = weighted_means(sol, inst.sample, y, {});
  RidgeOutcomeModel model =
      fit_outcome_ridge(inst.features, inst.sample, y, {1e-3});
  AugmentResult out =
      augment(base, sol, model, inst.features, inst.sample, y, {});
  for (std::size_t r = 0; r < base.rows.size(); ++r) {
    CHECK(std::abs(out.table.rows[r].tau - base.rows[r].tau) <= 1e-6);
  }
}

TEST_CASE("regression baseline solves the noiseless design exactly") {
  std::mt19937_64 rng = make_stream(21, 0, 9);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = 24;
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXd y(n);
  std::vector<std::uint8_t> treated(static_cast<std::size_t>(n));
  std::vector<std::string> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    X(i, 0) = gauss(rng);
    treated[static_cast<std::size_t>(i)] = i % 3 == 0 ? 1 : 0;
    labels[static_cast<std::size_t>(i)] = i < n / 2 ? "a" : "b";
    const double tau_g = i < n / 2 ? 1.0 : 3.0;
    y[i] = 1.0 + 2.0 * X(i, 0) +
           (treated[static_cast<std::size_t>(i)] ? tau_g : 0.0);
  }
  auto sample = make_sample(y, treated, labels, X, {"x1"});
  FeatureMatrix fm = plain_features(X);

  // The pooled model carries one effect coefficient, so it is exact only
  // when the effect is common across strata.
  Eigen::VectorXd y_common(n);
  for (int i = 0; i < n; ++i) {
    y_common[i] = 1.0 + 2.0 * X(i, 0) +
                  (treated[static_cast<std::size_t>(i)] ? 2.0 : 0.0);
  }
  EstimateTable pooled = linear_regression_baseline(
      fm, sample, y_common, RegressionInteraction::none, nullptr);
  const auto* overall = pooled.find("overall", "all");
  REQUIRE(overall != nullptr);
  CHECK(overall->tau == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(overall->se <= 1e-6);

  EstimateTable split = linear_regression_baseline(
      fm, sample, y, RegressionInteraction::by_grouping, nullptr);
  CHECK(split.find("stratum", "a")->tau == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(split.find("stratum", "b")->tau == doctest::Approx(3.0).epsilon(1e-9));
  const auto* combined = split.find("overall", "all");
  CHECK(combined->tau == doctest::Approx(2.0).epsilon(1e-9));

  // A covariate equal to the treatment indicator defeats identification.
  Eigen::MatrixXd Xbad(n, 1);
  for (int i = 0; i < n; ++i) {
    Xbad(i, 0) = treated[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  }
  CHECK_THROWS_AS(
      linear_regression_baseline(plain_features(Xbad), sample, y,
                                 RegressionInteraction::none, nullptr),
      ValidationError);
}
