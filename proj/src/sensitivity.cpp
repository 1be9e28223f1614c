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

#include "poolbal/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "poolbal/rng.hpp"
#include "poolbal/threading.hpp"

namespace poolbal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double quantile7(std::vector<double> values, double level) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n == 1) return values[0];
  double h = level * static_cast<double>(n - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo >= n - 1) return values[n - 1];
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

// Target control outcomes (ascending) with weights, plus the treated mean.
struct TargetData {
  double mu1 = 0.0;
  std::vector<double> y;
  std::vector<double> gamma;
  // Prefix sums over the sorted order; a[k] = sum of gamma*y below k.
  std::vector<double> a;
  std::vector<double> b;
};

TargetData collect_target(const WeightSolution& solution,
                          const AnalysisSample& sample,
                          const Eigen::VectorXd& outcomes,
                          const SensitivityTarget& target) {
  std::vector<int> strata = target.strata;
  if (strata.empty()) {
    strata.resize(static_cast<std::size_t>(sample.n_strata()));
    std::iota(strata.begin(), strata.end(), 0);
  }
  TargetData data;
  double treated_sum = 0.0;
  int n1 = 0;
  std::vector<std::pair<double, double>> pairs;
  for (int g : strata) {
    if (g < 0 || g >= sample.n_strata()) {
      throw ConfigError("target stratum id out of range");
    }
    for (int row : sample.treated_rows(g)) {
      treated_sum += outcomes[row];
      ++n1;
    }
    for (int row : sample.control_rows(g)) {
      pairs.emplace_back(outcomes[row], solution.gamma[row]);
    }
  }
  if (n1 == 0 || pairs.empty()) {
    throw ValidationError("sensitivity target \"" + target.name +
                          "\" has no treated units or no controls");
  }
  double gamma_sum = 0.0;
  for (const auto& pr : pairs) gamma_sum += pr.second;
  if (gamma_sum <= 0.0) {
    throw ValidationError("sensitivity target \"" + target.name +
                          "\" has zero total control weight");
  }
  std::sort(pairs.begin(), pairs.end());
  data.mu1 = treated_sum / static_cast<double>(n1);
  data.y.reserve(pairs.size());
  data.gamma.reserve(pairs.size());
  for (const auto& pr : pairs) {
    data.y.push_back(pr.first);
    data.gamma.push_back(pr.second);
  }
  data.a.resize(pairs.size() + 1, 0.0);
  data.b.resize(pairs.size() + 1, 0.0);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    data.a[k + 1] = data.a[k] + data.gamma[k] * data.y[k];
    data.b[k + 1] = data.b[k] + data.gamma[k];
  }
  return data;
}

// Extreme reweighted control means when each weight may be scaled by a
// factor in [1/lambda, lambda]. The optimum assigns the low factor below a
// threshold in the outcome order and the high factor above it (or the
// mirror image), so scanning the n+1 thresholds is exact.
std::pair<double, double> extreme_means(const TargetData& data, double lambda) {
  const std::size_t n = data.y.size();
  const double inv = 1.0 / lambda;
  const double a_total = data.a[n];
  const double b_total = data.b[n];
  double mu_max = -std::numeric_limits<double>::infinity();
  double mu_min = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k <= n; ++k) {
    const double hi_num = inv * data.a[k] + lambda * (a_total - data.a[k]);
    const double hi_den = inv * data.b[k] + lambda * (b_total - data.b[k]);
    mu_max = std::max(mu_max, hi_num / hi_den);
    const double lo_num = lambda * data.a[k] + inv * (a_total - data.a[k]);
    const double lo_den = lambda * data.b[k] + inv * (b_total - data.b[k]);
    mu_min = std::min(mu_min, lo_num / lo_den);
  }
  return {mu_min, mu_max};
}

std::pair<double, double> tau_bounds(const TargetData& data, double lambda) {
  auto [mu_min, mu_max] = extreme_means(data, lambda);
  return {data.mu1 - mu_max, data.mu1 - mu_min};
}

// Shared bootstrap loop; collects per-replicate target data for every
// requested target from one set of resampled weight fits.
std::vector<std::vector<TargetData>> run_replicates(
    const WeightsProcedure& procedure, const FeatureMatrix& features,
    const AnalysisSample& sample, const Eigen::VectorXd& outcomes,
    const std::vector<SensitivityTarget>& targets,
    const SensitivityConfig& config, int threads, int& dropped) {
  const int B = config.bootstrap_reps;
  std::vector<std::vector<TargetData>> collected(
      targets.size(), std::vector<TargetData>(static_cast<std::size_t>(B)));
  std::vector<std::uint8_t> ok(static_cast<std::size_t>(B), 0);

  parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t rep) {
    std::mt19937_64 rng =
        make_stream(config.seed, static_cast<std::uint64_t>(rep),
                    stage::kBootstrap);
    // Resample rows with replacement within stratum-by-treatment cells so
    // every cell keeps its count.
    std::vector<int> picks;
    picks.reserve(static_cast<std::size_t>(sample.n()));
    for (int g = 0; g < sample.n_strata(); ++g) {
      for (const auto* rows : {&sample.treated_rows(g), &sample.control_rows(g)}) {
        std::uniform_int_distribution<std::size_t> pick(0, rows->size() - 1);
        for (std::size_t k = 0; k < rows->size(); ++k) {
          picks.push_back((*rows)[pick(rng)]);
        }
      }
    }

    const int n = static_cast<int>(picks.size());
    Eigen::VectorXd y(n);
    std::vector<std::uint8_t> treated(static_cast<std::size_t>(n));
    std::vector<std::string> labels(static_cast<std::size_t>(n));
    Eigen::MatrixXd covariates(n, sample.covariates().cols());
    FeatureMatrix boot_features;
    boot_features.columns = features.columns;
    boot_features.dropped = features.dropped;
    boot_features.values.resize(n, features.values.cols());
    for (int i = 0; i < n; ++i) {
      const int src = picks[static_cast<std::size_t>(i)];
      y[i] = outcomes[src];
      treated[static_cast<std::size_t>(i)] = sample.treated(src) ? 1 : 0;
      labels[static_cast<std::size_t>(i)] =
          sample.stratum_labels()[static_cast<std::size_t>(sample.stratum(src))];
      covariates.row(i) = sample.covariates().row(src);
      boot_features.values.row(i) = features.values.row(src);
    }
    try {
      AnalysisSample boot = make_sample(y, treated, labels, covariates,
                                        sample.covariate_names());
      WeightSolution sol = procedure(boot_features, boot);
      if (!sol.converged) return;
      for (std::size_t t = 0; t < targets.size(); ++t) {
        collected[t][rep] = collect_target(sol, boot, y, targets[t]);
      }
      ok[rep] = 1;
    } catch (const Error&) {
      // Dropped replicate; counted below.
    }
  });

  dropped = 0;
  std::vector<std::vector<TargetData>> kept(targets.size());
  for (std::size_t rep = 0; rep < static_cast<std::size_t>(B); ++rep) {
    if (!ok[rep]) {
      ++dropped;
      continue;
    }
    for (std::size_t t = 0; t < targets.size(); ++t) {
      kept[t].push_back(std::move(collected[t][rep]));
    }
  }
  if (B > 0 &&
      static_cast<double>(dropped) >
          config.max_dropped_fraction * static_cast<double>(B)) {
    throw ValidationError(std::to_string(dropped) + " of " +
                          std::to_string(B) +
                          " bootstrap replicates failed to converge");
  }
  return kept;
}

void check_config(const SensitivityConfig& config) {
  if (config.lambda < 1.0) {
    throw ConfigError("sensitivity lambda must be at least 1");
  }
  if (config.confidence <= 0.0 || config.confidence >= 1.0) {
    throw ConfigError("confidence must lie in (0, 1)");
  }
}

}  // namespace

SensitivityTarget SensitivityTarget::overall() { return {}; }

SensitivityTarget SensitivityTarget::stratum(const AnalysisSample& sample,
                                             const std::string& label) {
  const auto& labels = sample.stratum_labels();
  for (int g = 0; g < sample.n_strata(); ++g) {
    if (labels[static_cast<std::size_t>(g)] == label) {
      SensitivityTarget target;
      target.name = label;
      target.strata = {g};
      return target;
    }
  }
  throw ConfigError("unknown stratum \"" + label + "\"");
}

SensitivityTarget SensitivityTarget::level(const AnalysisSample& sample,
                                           const Grouping& grouping,
                                           const std::string& level) {
  SensitivityTarget target;
  target.name = grouping.name + "=" + level;
  const auto& labels = sample.stratum_labels();
  for (int g = 0; g < sample.n_strata(); ++g) {
    auto it = grouping.stratum_to_level.find(labels[static_cast<std::size_t>(g)]);
    if (it != grouping.stratum_to_level.end() && it->second == level) {
      target.strata.push_back(g);
    }
  }
  if (target.strata.empty()) {
    throw ConfigError("level \"" + level + "\" matches no stratum");
  }
  return target;
}

SensitivityBounds bounds_at_lambda(const WeightSolution& solution,
                                   const AnalysisSample& sample,
                                   const Eigen::VectorXd& outcomes,
                                   const SensitivityTarget& target,
                                   const SensitivityConfig& config) {
  check_config(config);
  const TargetData data = collect_target(solution, sample, outcomes, target);
  auto [lo, hi] = tau_bounds(data, config.lambda);
  SensitivityBounds bounds;
  bounds.target = target.name;
  bounds.lambda = config.lambda;
  bounds.tau_min = lo;
  bounds.tau_max = hi;
  bounds.ci_lower = kNaN;
  bounds.ci_upper = kNaN;
  return bounds;
}

BootstrapEnsemble BootstrapEnsemble::run(const WeightsProcedure& procedure,
                                         const FeatureMatrix& features,
                                         const AnalysisSample& sample,
                                         const Eigen::VectorXd& outcomes,
                                         const SensitivityTarget& target,
                                         const SensitivityConfig& config,
                                         int threads) {
  check_config(config);
  int dropped = 0;
  auto collected = run_replicates(procedure, features, sample, outcomes,
                                  {target}, config, threads, dropped);
  BootstrapEnsemble ensemble;
  ensemble.dropped_ = dropped;
  for (auto& data : collected[0]) {
    Replicate rep;
    rep.mu1 = data.mu1;
    rep.y = std::move(data.y);
    rep.gamma = std::move(data.gamma);
    ensemble.replicates_.push_back(std::move(rep));
  }
  return ensemble;
}

std::pair<double, double> BootstrapEnsemble::interval(double lambda,
                                                      double confidence) const {
  if (replicates_.empty()) return {kNaN, kNaN};
  std::vector<double> lows, highs;
  lows.reserve(replicates_.size());
  highs.reserve(replicates_.size());
  for (const auto& rep : replicates_) {
    TargetData data;
    data.mu1 = rep.mu1;
    data.y = rep.y;
    data.gamma = rep.gamma;
    data.a.resize(rep.y.size() + 1, 0.0);
    data.b.resize(rep.y.size() + 1, 0.0);
    for (std::size_t k = 0; k < rep.y.size(); ++k) {
      data.a[k + 1] = data.a[k] + rep.gamma[k] * rep.y[k];
      data.b[k + 1] = data.b[k] + rep.gamma[k];
    }
    auto [lo, hi] = tau_bounds(data, lambda);
    lows.push_back(lo);
    highs.push_back(hi);
  }
  const double tail = 0.5 * (1.0 - confidence);
  return {quantile7(std::move(lows), tail),
          quantile7(std::move(highs), 1.0 - tail)};
}

std::vector<double> BootstrapEnsemble::lower_bounds(double lambda) const {
  std::vector<double> lows;
  lows.reserve(replicates_.size());
  for (const auto& rep : replicates_) {
    TargetData data;
    data.mu1 = rep.mu1;
    data.y = rep.y;
    data.gamma = rep.gamma;
    data.a.resize(rep.y.size() + 1, 0.0);
    data.b.resize(rep.y.size() + 1, 0.0);
    for (std::size_t k = 0; k < rep.y.size(); ++k) {
      data.a[k + 1] = data.a[k] + rep.gamma[k] * rep.y[k];
      data.b[k + 1] = data.b[k] + rep.gamma[k];
    }
    lows.push_back(tau_bounds(data, lambda).first);
  }
  return lows;
}

SensitivityBounds bootstrap_ci(const WeightsProcedure& procedure,
                               const FeatureMatrix& features,
                               const AnalysisSample& sample,
                               const Eigen::VectorXd& outcomes,
                               const SensitivityTarget& target,
                               const SensitivityConfig& config, int threads) {
  check_config(config);
  WeightSolution original = procedure(features, sample);
  SensitivityBounds bounds =
      bounds_at_lambda(original, sample, outcomes, target, config);
  if (config.bootstrap_reps <= 0) return bounds;
  BootstrapEnsemble ensemble = BootstrapEnsemble::run(
      procedure, features, sample, outcomes, target, config, threads);
  auto [lo, hi] = ensemble.interval(config.lambda, config.confidence);
  bounds.ci_lower = lo;
  bounds.ci_upper = hi;
  bounds.bootstrap_reps = ensemble.reps();
  bounds.dropped_reps = ensemble.dropped();
  return bounds;
}

SensitivityBounds difference_bounds(const WeightsProcedure& procedure,
                                    const FeatureMatrix& features,
                                    const AnalysisSample& sample,
                                    const Eigen::VectorXd& outcomes,
                                    const SensitivityTarget& target_a,
                                    const SensitivityTarget& target_b,
                                    const SensitivityConfig& config,
                                    int threads) {
  check_config(config);
  WeightSolution original = procedure(features, sample);
  const TargetData data_a = collect_target(original, sample, outcomes, target_a);
  const TargetData data_b = collect_target(original, sample, outcomes, target_b);
  auto [a_lo, a_hi] = tau_bounds(data_a, config.lambda);
  auto [b_lo, b_hi] = tau_bounds(data_b, config.lambda);

  SensitivityBounds bounds;
  bounds.target = target_a.name + " - " + target_b.name;
  bounds.lambda = config.lambda;
  bounds.tau_min = a_lo - b_hi;
  bounds.tau_max = a_hi - b_lo;
  bounds.ci_lower = kNaN;
  bounds.ci_upper = kNaN;
  if (config.bootstrap_reps <= 0) return bounds;

  int dropped = 0;
  auto collected =
      run_replicates(procedure, features, sample, outcomes,
                     {target_a, target_b}, config, threads, dropped);
  std::vector<double> lows, highs;
  for (std::size_t rep = 0; rep < collected[0].size(); ++rep) {
    auto [ra_lo, ra_hi] = tau_bounds(collected[0][rep], config.lambda);
    auto [rb_lo, rb_hi] = tau_bounds(collected[1][rep], config.lambda);
    lows.push_back(ra_lo - rb_hi);
    highs.push_back(ra_hi - rb_lo);
  }
  if (!lows.empty()) {
    const double tail = 0.5 * (1.0 - config.confidence);
    bounds.ci_lower = quantile7(std::move(lows), tail);
    bounds.ci_upper = quantile7(std::move(highs), 1.0 - tail);
  }
  bounds.bootstrap_reps = static_cast<int>(collected[0].size());
  bounds.dropped_reps = dropped;
  return bounds;
}

BreakdownResult breakdown_lambda(const WeightsProcedure& procedure,
                                 const FeatureMatrix& features,
                                 const AnalysisSample& sample,
                                 const Eigen::VectorXd& outcomes,
                                 const SensitivityTarget& target,
                                 const SensitivityConfig& config,
                                 const std::vector<double>& grid,
                                 int threads) {
  check_config(config);
  if (grid.empty()) throw ConfigError("empty breakdown grid");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] < 1.0) throw ConfigError("breakdown grid values must be >= 1");
    if (k > 0 && grid[k] <= grid[k - 1]) {
      throw ConfigError("breakdown grid must be strictly increasing");
    }
  }
  BootstrapEnsemble ensemble = BootstrapEnsemble::run(
      procedure, features, sample, outcomes, target, config, threads);

  auto covers_zero = [&](double lambda) {
    auto [lo, hi] = ensemble.interval(lambda, config.confidence);
    return lo <= 0.0 && hi >= 0.0;
  };

  BreakdownResult result;
  if (covers_zero(1.0)) {
    result.lambda = 1.0;
    result.not_significant = true;
    return result;
  }
  double below = 1.0;  // largest known lambda that keeps significance
  bool found = false;
  double above = grid.back();
  for (double lambda : grid) {
    if (covers_zero(lambda)) {
      above = lambda;
      found = true;
      break;
    }
    below = lambda;
  }
  if (!found) {
    result.lambda = grid.back();
    result.censored = true;
    return result;
  }
  // The interval widens monotonically in lambda, so bisection is valid.
  for (int iter = 0; iter < 60 && above - below > 1e-9 * above; ++iter) {
    const double mid = 0.5 * (below + above);
    if (covers_zero(mid)) {
      above = mid;
    } else {
      below = mid;
    }
  }
  result.lambda = above;
  return result;
}

std::vector<AmplificationPoint> amplification_curve(
    double bound_width, const std::vector<double>& delta_grid) {
  if (bound_width < 0.0) throw ConfigError("bound width must be nonnegative");
  std::vector<AmplificationPoint> curve;
  curve.reserve(delta_grid.size());
  for (double delta : delta_grid) {
    if (delta == 0.0) {
      throw ConfigError("amplification is undefined at delta = 0");
    }
    AmplificationPoint point;
    point.delta = delta;
    point.required = bound_width / delta;
    curve.push_back(point);
  }
  return curve;
}

}  // namespace poolbal
