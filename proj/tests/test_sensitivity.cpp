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
#include "poolbal/sensitivity.hpp"
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

WeightsProcedure default_procedure() {
  return [](const FeatureMatrix& f, const AnalysisSample& s) {
    SolverConfig config;
    return solve(f, s, config);
  };
}

// One stratum whose treated outcomes sit `effect` above controls drawn with
// the given spread; features are exactly balanceable.
struct Effect {
  AnalysisSample sample;
  FeatureMatrix features;
  Eigen::VectorXd y;
};

Effect effect_fixture(std::uint64_t seed, int n1, int n0, double effect,
                      double spread) {
  std::mt19937_64 rng = make_stream(seed, 0, 9);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = n0 + n1;
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXd y(n);
  std::vector<std::uint8_t> treated(static_cast<std::size_t>(n));
  std::vector<std::string> labels(static_cast<std::size_t>(n), "g");
  double mean = 0.0;
  for (int i = 0; i < n0; ++i) {
    X(i, 0) = gauss(rng);
    y[i] = 0.3 * X(i, 0) + spread * gauss(rng);
    mean += X(i, 0) / static_cast<double>(n0);
  }
  for (int i = n0; i < n; ++i) {
    X(i, 0) = mean;  // inside the control hull
    y[i] = effect + 0.3 * mean + spread * gauss(rng);
    treated[static_cast<std::size_t>(i)] = 1;
  }
  return {make_sample(y, treated, labels, X, {"x1"}), plain_features(X), y};
}

}  // namespace

TEST_CASE("unit odds ratio collapses the bounds onto the point estimate") {
  oracle::Instance inst = oracle::random_instance(17, 18, 3, 3);
  SolverConfig config;
  WeightSolution sol = solve(inst.features, inst.sample, config);
  REQUIRE(sol.converged);
  EstimateTable table =
      weighted_means(sol, inst.sample, inst.sample.outcomes(), {});

  SensitivityConfig sc;
  sc.lambda = 1.0;
  SensitivityBounds overall =
      bounds_at_lambda(sol, inst.sample, inst.sample.outcomes(),
                       SensitivityTarget::overall(), sc);
  const double tau = table.find("overall", "all")->tau;
  CHECK(std::abs(overall.tau_min - tau) <= 1e-10);
  CHECK(std::abs(overall.tau_max - tau) <= 1e-10);

  const std::string label = inst.sample.stratum_labels()[0];
  SensitivityBounds one =
      bounds_at_lambda(sol, inst.sample, inst.sample.outcomes(),
                       SensitivityTarget::stratum(inst.sample, label), sc);
  const double tau_g = table.find("stratum", label)->tau;
  CHECK(std::abs(one.tau_min - tau_g) <= 1e-10);
  CHECK(std::abs(one.tau_max - tau_g) <= 1e-10);
}

TEST_CASE("two controls at lambda two give the textbook interval") {
  Eigen::VectorXd y(4);
  y << 1.0, 1.0, 0.0, 1.0;
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(4, 1);
  auto sample = make_sample(y, {1, 1, 0, 0}, {"g", "g", "g", "g"}, X, {"x1"});
  WeightSolution sol;
  sol.gamma = Eigen::VectorXd::Zero(4);
  sol.gamma[2] = 1.0;
  sol.gamma[3] = 1.0;
  sol.converged = true;

  SensitivityConfig sc;
  sc.lambda = 2.0;
  SensitivityBounds b = bounds_at_lambda(sol, sample, y,
                                         SensitivityTarget::overall(), sc);
  // Control mean range [0.2, 0.8] around mu1 = 1.
  CHECK(b.tau_min == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(b.tau_max == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("threshold scan equals exhaustive corner enumeration") {
  std::mt19937_64 rng = make_stream(23, 0, 9);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.1, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    const int n0 = 3 + static_cast<int>(rng() % 10);  // up to 12 controls
    std::vector<double> yc(static_cast<std::size_t>(n0));
    std::vector<double> gamma(static_cast<std::size_t>(n0));
    Eigen::VectorXd y(n0 + 1);
    for (int i = 0; i < n0; ++i) {
      yc[static_cast<std::size_t>(i)] = gauss(rng);
      gamma[static_cast<std::size_t>(i)] = unif(rng);
      y[i + 1] = yc[static_cast<std::size_t>(i)];
    }
    y[0] = 0.0;  // lone treated unit with mu1 = 0
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n0 + 1, 1);
    std::vector<std::uint8_t> treated(static_cast<std::size_t>(n0 + 1), 0);
    treated[0] = 1;
    auto sample = make_sample(y, treated,
                              std::vector<std::string>(
                                  static_cast<std::size_t>(n0 + 1), "g"),
                              X, {"x1"});
    WeightSolution sol;
    sol.gamma = Eigen::VectorXd::Zero(n0 + 1);
    for (int i = 0; i < n0; ++i) sol.gamma[i + 1] = gamma[static_cast<std::size_t>(i)];
    sol.converged = true;

    for (double lambda : {1.2, 2.0, 5.0}) {
      SensitivityConfig sc;
      sc.lambda = lambda;
      SensitivityBounds b = bounds_at_lambda(sol, sample, y,
                                             SensitivityTarget::overall(), sc);
      auto [mu_min, mu_max] = oracle::corner_extremes(yc, gamma, lambda);
      // mu1 = 0, so tau bounds are the negated mean extremes.
      CHECK(std::abs(-b.tau_max - mu_min) <= 1e-10 * (1.0 + std::abs(mu_min)));
      CHECK(std::abs(-b.tau_min - mu_max) <= 1e-10 * (1.0 + std::abs(mu_max)));
    }
  }
}

TEST_CASE("bounds widen monotonically with the odds ratio") {
  oracle::Instance inst = oracle::random_instance(29, 20, 3, 2);
  SolverConfig config;
  WeightSolution sol = solve(inst.features, inst.sample, config);
  REQUIRE(sol.converged);

  double prev_min = std::numeric_limits<double>::infinity();
  double prev_max = -std::numeric_limits<double>::infinity();
  bool first = true;
  for (double lambda : {1.0, 1.5, 2.0, 4.0, 8.0}) {
    SensitivityConfig sc;
    sc.lambda = lambda;
    SensitivityBounds b =
        bounds_at_lambda(sol, inst.sample, inst.sample.outcomes(),
                         SensitivityTarget::overall(), sc);
    CHECK(b.tau_min <= b.tau_max);
    if (!first) {
      CHECK(b.tau_min <= prev_min + 1e-12);
      CHECK(b.tau_max >= prev_max - 1e-12);
    }
    prev_min = b.tau_min;
    prev_max = b.tau_max;
    first = false;
  }

  SensitivityConfig bad;
  bad.lambda = 0.5;
  CHECK_THROWS_AS(bounds_at_lambda(sol, inst.sample, inst.sample.outcomes(),
                                   SensitivityTarget::overall(), bad),
                  ConfigError);
}

TEST_CASE("bootstrap intervals are reproducible across thread counts") {
  Effect fx = effect_fixture(31, 8, 24, 1.0, 0.7);
  SensitivityConfig sc;
  sc.lambda = 1.5;
  sc.bootstrap_reps = 80;
  sc.seed = 97;

  SensitivityBounds a = bootstrap_ci(default_procedure(), fx.features,
                                     fx.sample, fx.y,
                                     SensitivityTarget::overall(), sc, 1);
  SensitivityBounds b = bootstrap_ci(default_procedure(), fx.features,
                                     fx.sample, fx.y,
                                     SensitivityTarget::overall(), sc, 4);
  CHECK(a.ci_lower == b.ci_lower);
  CHECK(a.ci_upper == b.ci_upper);
  CHECK(a.bootstrap_reps == 80);
  CHECK(a.dropped_reps == 0);
  CHECK(a.ci_lower < a.ci_upper);
  CHECK(a.ci_lower <= a.tau_min);
  CHECK(a.ci_upper >= a.tau_max);

  sc.seed = 98;
  SensitivityBounds c = bootstrap_ci(default_procedure(), fx.features,
                                     fx.sample, fx.y,
                                     SensitivityTarget::overall(), sc, 1);
  CHECK(c.ci_lower != a.ci_lower);
}

TEST_CASE("percentile interval covers the truth at the nominal rate") {
  // 200 simulated data sets; with no hidden confounding the lambda = 1
  // interval is a plain percentile bootstrap for the weighting estimator.
  const int sims = 200;
  const double tau_true = 1.0;
  int hits = 0;
  for (int s = 0; s < sims; ++s) {
    std::mt19937_64 rng = make_stream(500, static_cast<std::uint64_t>(s), 9);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int n0 = 30, n1 = 10, n = n0 + n1;
    Eigen::MatrixXd X(n, 1);
    Eigen::VectorXd y(n);
    std::vector<std::uint8_t> treated(static_cast<std::size_t>(n));
    std::vector<std::string> labels(static_cast<std::size_t>(n), "g");
    for (int i = 0; i < n; ++i) {
      X(i, 0) = gauss(rng);
      treated[static_cast<std::size_t>(i)] = i < n1 ? 1 : 0;
      y[i] = X(i, 0) + (treated[static_cast<std::size_t>(i)] ? tau_true : 0.0) +
             gauss(rng);
    }
    auto sample = make_sample(y, treated, labels, X, {"x1"});
    SensitivityConfig sc;
    sc.lambda = 1.0;
    sc.bootstrap_reps = 200;
    sc.seed = 1000 + static_cast<std::uint64_t>(s);
    SensitivityBounds b = bootstrap_ci(default_procedure(), plain_features(X),
                                       sample, y,
                                       SensitivityTarget::overall(), sc, 2);
    if (b.ci_lower <= tau_true && tau_true <= b.ci_upper) ++hits;
  }
  const double coverage = static_cast<double>(hits) / sims;
  CHECK(coverage >= 0.90);
  CHECK(coverage <= 1.0);
}

TEST_CASE("breakdown search brackets the crossing odds ratio") {
  // Controls span well past the treated mean, so a finite lambda erases
  // significance.
  Effect fx = effect_fixture(37, 8, 16, 3.0, 1.6);
  SensitivityConfig sc;
  sc.bootstrap_reps = 150;
  sc.seed = 11;
  const std::vector<double> grid{1.5, 2.0, 3.0, 5.0, 9.0, 17.0};

  BreakdownResult result =
      breakdown_lambda(default_procedure(), fx.features, fx.sample, fx.y,
                       SensitivityTarget::overall(), sc, grid, 2);
  REQUIRE_FALSE(result.not_significant);
  REQUIRE_FALSE(result.censored);
  CHECK(result.lambda > 1.0);
  CHECK(result.lambda <= grid.back());

  // The ensemble is seed-deterministic, so the reported crossing must agree
  // with a reconstruction of the same intervals.
  BootstrapEnsemble ensemble = BootstrapEnsemble::run(
      default_procedure(), fx.features, fx.sample, fx.y,
      SensitivityTarget::overall(), sc, 2);
  auto at = ensemble.interval(result.lambda, sc.confidence);
  CHECK(at.first <= 0.0);
  CHECK(at.second >= 0.0);
  auto before = ensemble.interval(result.lambda * (1.0 - 1e-6), sc.confidence);
  CHECK(before.first > 0.0);
}

TEST_CASE("breakdown degenerate outcomes are flagged") {
  Effect null_fx = effect_fixture(41, 8, 16, 0.0, 1.0);
  SensitivityConfig sc;
  sc.bootstrap_reps = 120;
  sc.seed = 13;
  BreakdownResult flat = breakdown_lambda(
      default_procedure(), null_fx.features, null_fx.sample, null_fx.y,
      SensitivityTarget::overall(), sc, {2.0, 4.0}, 1);
  CHECK(flat.not_significant);
  CHECK(flat.lambda == 1.0);

  Effect strong = effect_fixture(43, 8, 16, 5.0, 0.3);
  BreakdownResult censored = breakdown_lambda(
      default_procedure(), strong.features, strong.sample, strong.y,
      SensitivityTarget::overall(), sc, {1.05}, 1);
  CHECK(censored.censored);
  CHECK(censored.lambda == 1.05);

  CHECK_THROWS_AS(breakdown_lambda(default_procedure(), strong.features,
                                   strong.sample, strong.y,
                                   SensitivityTarget::overall(), sc, {}, 1),
                  ConfigError);
  CHECK_THROWS_AS(breakdown_lambda(default_procedure(), strong.features,
                                   strong.sample, strong.y,
                                   SensitivityTarget::overall(), sc,
                                   {2.0, 1.5}, 1),
                  ConfigError);
}

TEST_CASE("difference bounds combine the per-target extremes") {
  oracle::Instance inst = oracle::locally_balanced_instance(47, 2, 2, 10, 2);
  SolverConfig config;
  WeightSolution sol = solve(inst.features, inst.sample, config);
  REQUIRE(sol.converged);

  const auto& labels = inst.sample.stratum_labels();
  REQUIRE(labels.size() >= 2);
  SensitivityConfig sc;
  sc.lambda = 2.0;
  sc.bootstrap_reps = 0;
  auto ta = SensitivityTarget::stratum(inst.sample, labels[0]);
  auto tb = SensitivityTarget::stratum(inst.sample, labels[1]);
  SensitivityBounds a =
      bounds_at_lambda(sol, inst.sample, inst.sample.outcomes(), ta, sc);
  SensitivityBounds b =
      bounds_at_lambda(sol, inst.sample, inst.sample.outcomes(), tb, sc);

  WeightsProcedure fixed = [&](const FeatureMatrix&, const AnalysisSample&) {
    return sol;
  };
  SensitivityBounds diff =
      difference_bounds(fixed, inst.features, inst.sample,
                        inst.sample.outcomes(), ta, tb, sc, 1);
  CHECK(diff.tau_min == doctest::Approx(a.tau_min - b.tau_max).epsilon(1e-14));
  CHECK(diff.tau_max == doctest::Approx(a.tau_max - b.tau_min).epsilon(1e-14));
}

TEST_CASE("amplification spreads a bound width over confounder strength") {
  auto curve = amplification_curve(0.6, {0.3, 0.6, 1.2});
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].delta == 0.3);
  CHECK(curve[0].required == doctest::Approx(2.0));
  CHECK(curve[1].required == doctest::Approx(1.0));
  CHECK(curve[2].required == doctest::Approx(0.5));
  CHECK_THROWS_AS(amplification_curve(-0.1, {0.5}), ConfigError);
  CHECK_THROWS_AS(amplification_curve(0.6, {0.0}), ConfigError);
}
