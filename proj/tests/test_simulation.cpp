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

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "poolbal/rng.hpp"
#include "poolbal/serialize.hpp"
#include "poolbal/simulation.hpp"

namespace {

using namespace poolbal;

}  // namespace

TEST_CASE("covariance root reproduces the declining eigenvalue profile") {
  const int d = 50;
  std::mt19937_64 rng = make_stream(99, 0, 1);
  Eigen::MatrixXd root = covariance_root(d, rng);
  Eigen::MatrixXd sigma = root * root.transpose();
  CHECK((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-12);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma);
  REQUIRE(eig.info() == Eigen::Success);
  const Eigen::VectorXd values = eig.eigenvalues();  // ascending
  CHECK(values.minCoeff() >= -1e-10);
  for (int j = 0; j < d; ++j) {
    const double expected =
        std::pow(static_cast<double>(j + 1) / static_cast<double>(d), 5);
    CHECK(std::abs(values[j] - expected) <= 1e-10);
  }
}

TEST_CASE("covariate transforms dichotomize and skew the listed columns") {
  SimConfig config;
  config.n = 10000;
  config.d = 10;
  std::mt19937_64 rng = make_stream(3, 0, 1);
  Eigen::MatrixXd X, Xt;
  gen_covariates(config, rng, X, Xt);
  REQUIRE(X.rows() == 10000);
  REQUIRE(Xt.cols() == 10);

  // Column 1 (1-based) is cut at its empirical 80th percentile.
  double mean0 = 0.0;
  for (int i = 0; i < config.n; ++i) {
    CHECK((Xt(i, 0) == 0.0 || Xt(i, 0) == 1.0));
    mean0 += Xt(i, 0);
  }
  mean0 /= static_cast<double>(config.n);
  CHECK(mean0 >= 0.18);
  CHECK(mean0 <= 0.22);

  // Columns 2 and 7 (1-based) are exponentiated; the rest pass through.
  for (int j : {1, 6}) {
    for (int i = 0; i < 50; ++i) {
      CHECK(Xt(i, j) > 0.0);
      CHECK(Xt(i, j) == doctest::Approx(std::exp(X(i, j))).epsilon(1e-12));
    }
  }
  for (int j : {2, 3, 4, 5, 7, 8, 9}) {
    CHECK(Xt.col(j).cwiseEqual(X.col(j)).all());
  }
}

TEST_CASE("group assignment is monotone in the driving covariate") {
  std::mt19937_64 rng = make_stream(5, 0, 2);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = 600, G = 7;
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x[i] = gauss(rng);

  std::vector<int> ids = assign_groups(x, G, 100, rng);
  REQUIRE(static_cast<int>(ids.size()) == n);
  std::vector<int> counts(G, 0);
  for (int g : ids) {
    REQUIRE(g >= 0);
    REQUIRE(g < G);
    counts[static_cast<std::size_t>(g)] += 1;
  }
  for (int c : counts) CHECK(c > 0);

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return x[a] < x[b]; });
  for (std::size_t k = 1; k < order.size(); ++k) {
    CHECK(ids[static_cast<std::size_t>(order[k - 1])] <=
          ids[static_cast<std::size_t>(order[k])]);
  }

  CHECK_THROWS_AS(assign_groups(x, 1, 100, rng), ConfigError);
  Eigen::VectorXd tiny = x.head(5);
  CHECK_THROWS_AS(assign_groups(tiny, 4, 100, rng), ConfigError);
}

TEST_CASE("synthetic draws are replicate-indexed and reproducible") {
  SimConfig config;
  config.n = 400;
  config.d = 6;
  config.groups = 4;
  config.seed = 11;

  DGPDraw a = draw_dgp(config, 2);
  DGPDraw b = draw_dgp(config, 2);
  CHECK(a.X.cwiseEqual(b.X).all());
  CHECK(a.X_transformed.cwiseEqual(b.X_transformed).all());
  CHECK(a.y.cwiseEqual(b.y).all());
  CHECK(a.tau.cwiseEqual(b.tau).all());
  CHECK(a.group == b.group);
  CHECK(a.treated == b.treated);

  DGPDraw c = draw_dgp(config, 3);
  CHECK_FALSE(a.y.cwiseEqual(c.y).all());

  // The unit-level effect lives on the raw scale of the last and third
  // covariates.
  const int d = config.d;
  for (int i = 0; i < config.n; ++i) {
    const double expected =
        a.X(i, d - 1) - a.X(i, 2) + 0.3 * a.X(i, d - 1) * a.X(i, 2);
    CHECK(std::abs(a.tau[i] - expected) <= 1e-12);
  }

  int treated = 0;
  for (auto t : a.treated) treated += t;
  CHECK(treated > 0);
  CHECK(treated < config.n);

  SimConfig narrow = config;
  narrow.d = 2;
  CHECK_THROWS_AS(draw_dgp(narrow, 0), ConfigError);
}

TEST_CASE("benchmark output is identical for any thread count") {
  SimConfig config;
  config.n = 300;
  config.d = 5;
  config.groups = 4;
  config.replicates = 6;
  config.seed = 21;
  config.roster = {estimator_id::kPartial, estimator_id::kIpwFixed};

  config.threads = 1;
  SimResult serial = run_monte_carlo(config);
  config.threads = 4;
  SimResult parallel = run_monte_carlo(config);

  const std::string a = simulation_json(serial, true).dump();
  const std::string b = simulation_json(parallel, true).dump();
  CHECK(a == b);

  // Roster subsetting shows up in both metrics and records.
  REQUIRE(serial.metrics.size() == 2);
  CHECK(serial.metrics[0].estimator == estimator_id::kPartial);
  CHECK(serial.metrics[1].estimator == estimator_id::kIpwFixed);
  std::set<std::string> seen;
  for (const auto& rec : serial.records) seen.insert(rec.estimator);
  CHECK(seen == std::set<std::string>{estimator_id::kPartial,
                                      estimator_id::kIpwFixed});
  CHECK(static_cast<int>(serial.records.size()) == 2 * config.replicates);

  // Records stay in replicate-major order regardless of scheduling.
  for (std::size_t k = 0; k + 1 < parallel.records.size(); ++k) {
    CHECK(parallel.records[k].replicate <= parallel.records[k + 1].replicate);
  }

  SimConfig bad = config;
  bad.roster = {"nonsense"};
  CHECK_THROWS_AS(run_monte_carlo(bad), ConfigError);
}
