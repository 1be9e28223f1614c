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

#include "poolbal/simulation.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>

#include "poolbal/estimators.hpp"
#include "poolbal/features.hpp"
#include "poolbal/rng.hpp"
#include "poolbal/solver.hpp"
#include "poolbal/threading.hpp"

namespace poolbal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// 1-based column lists for the covariate transforms; entries beyond d are
// ignored at smaller dimensions.
constexpr int kDichotomize[] = {1, 11, 21, 32, 41};
constexpr int kSkew[] = {2, 7, 12, 17, 22, 27, 37, 42, 47};

double quantile7(std::vector<double> values, double level) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  double h = level * static_cast<double>(n - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo >= n - 1) return values[n - 1];
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

std::vector<std::string> make_labels(int groups) {
  int width = 1;
  for (int v = groups; v >= 10; v /= 10) ++width;
  std::vector<std::string> labels;
  labels.reserve(static_cast<std::size_t>(groups));
  for (int g = 1; g <= groups; ++g) {
    std::string digits = std::to_string(g);
    labels.push_back("g" + std::string(static_cast<std::size_t>(width) - digits.size(), '0') +
                     digits);
  }
  return labels;
}

}  // namespace

Eigen::MatrixXd covariance_root(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd gauss(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) gauss(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
  Eigen::MatrixXd Q = qr.householderQ();
  const Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
  // Fix the factorization's sign ambiguity so Q is Haar-distributed.
  for (int j = 0; j < d; ++j) {
    if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
  }
  Eigen::VectorXd sigma(d);
  for (int j = 0; j < d; ++j) {
    const double frac = static_cast<double>(d - j) / static_cast<double>(d);
    sigma[j] = std::sqrt(std::pow(frac, 5));
  }
  return Q * sigma.asDiagonal();
}

void gen_covariates(const SimConfig& config, std::mt19937_64& rng,
                    Eigen::MatrixXd& X, Eigen::MatrixXd& X_transformed) {
  const int n = config.n;
  const int d = config.d;
  const Eigen::MatrixXd root = covariance_root(d, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd Z(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) Z(i, j) = normal(rng);
  }
  X.noalias() = Z * root.transpose();

  X_transformed = X;
  std::set<int> dichotomized;
  for (int col : kDichotomize) {
    if (col > d) continue;
    dichotomized.insert(col);
    const int j = col - 1;
    std::vector<double> values(X.col(j).data(), X.col(j).data() + n);
    const double cut = quantile7(std::move(values), 0.8);
    for (int i = 0; i < n; ++i) {
      X_transformed(i, j) = X(i, j) >= cut ? 1.0 : 0.0;
    }
  }
  for (int col : kSkew) {
    if (col > d || dichotomized.count(col)) continue;
    const int j = col - 1;
    for (int i = 0; i < n; ++i) X_transformed(i, j) = std::exp(X(i, j));
  }
}

std::vector<int> assign_groups(const Eigen::VectorXd& x_last, int groups,
                               int retry_limit, std::mt19937_64& rng) {
  const int n = static_cast<int>(x_last.size());
  if (groups < 2) throw ConfigError("need at least 2 groups");
  std::vector<double> sorted(x_last.data(), x_last.data() + n);
  std::sort(sorted.begin(), sorted.end());
  // Candidate cuts: every groups-th order statistic.
  const int grid_size = n / groups;
  if (grid_size < groups - 1) {
    throw ConfigError("sample too small to draw " + std::to_string(groups - 1) +
                      " distinct cut points");
  }
  std::vector<double> grid(static_cast<std::size_t>(grid_size));
  for (int k = 0; k < grid_size; ++k) {
    grid[static_cast<std::size_t>(k)] = sorted[static_cast<std::size_t>(k * groups + groups - 1)];
  }

  std::vector<int> assignment(static_cast<std::size_t>(n));
  for (int attempt = 0; attempt < retry_limit; ++attempt) {
    // Partial Fisher-Yates draw of groups-1 distinct grid positions.
    std::vector<int> positions(static_cast<std::size_t>(grid_size));
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<double> cuts;
    cuts.reserve(static_cast<std::size_t>(groups - 1));
    for (int k = 0; k < groups - 1; ++k) {
      std::uniform_int_distribution<int> pick(k, grid_size - 1);
      std::swap(positions[static_cast<std::size_t>(k)],
                positions[static_cast<std::size_t>(pick(rng))]);
      cuts.push_back(grid[static_cast<std::size_t>(positions[static_cast<std::size_t>(k)])]);
    }
    std::sort(cuts.begin(), cuts.end());

    std::vector<int> count(static_cast<std::size_t>(groups), 0);
    for (int i = 0; i < n; ++i) {
      const int g = static_cast<int>(
          std::upper_bound(cuts.begin(), cuts.end(), x_last[i]) - cuts.begin());
      assignment[static_cast<std::size_t>(i)] = g;
      count[static_cast<std::size_t>(g)] += 1;
    }
    if (std::all_of(count.begin(), count.end(), [](int c) { return c > 0; })) {
      return assignment;
    }
  }
  throw ValidationError("could not form " + std::to_string(groups) +
                        " nonempty groups after " +
                        std::to_string(retry_limit) + " attempts");
}

void gen_treatment_and_outcomes(const SimConfig& config, DGPDraw& draw,
                                std::mt19937_64& param_rng,
                                std::mt19937_64& treat_rng,
                                std::mt19937_64& noise_rng) {
  const int n = config.n;
  const int d = config.d;
  const int G = config.groups;
  const Eigen::MatrixXd& Xm =
      config.use_raw_covariates ? draw.X : draw.X_transformed;

  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::bernoulli_distribution sparse(0.25);
  const double scale = 3.0 / std::sqrt(static_cast<double>(d));

  Eigen::VectorXd mu_beta(d), mu_eta(d);
  for (int j = 0; j < d; ++j) mu_beta[j] = sign(param_rng) ? scale : -scale;
  for (int j = 0; j < d; ++j) mu_eta[j] = sign(param_rng) ? scale : -scale;
  Eigen::VectorXd alpha(G), eta0(G);
  for (int g = 0; g < G; ++g) alpha[g] = normal(param_rng);
  for (int g = 0; g < G; ++g) eta0[g] = normal(param_rng);
  Eigen::MatrixXd slope_beta(G, d), slope_eta(G, d);
  for (int g = 0; g < G; ++g) {
    for (int j = 0; j < d; ++j) {
      const double u = normal(param_rng);
      slope_beta(g, j) = mu_beta[j] + (sparse(param_rng) ? u : 0.0);
    }
  }
  for (int g = 0; g < G; ++g) {
    for (int j = 0; j < d; ++j) {
      const double u = normal(param_rng);
      slope_eta(g, j) = mu_eta[j] + (sparse(param_rng) ? u : 0.0);
    }
  }

  draw.treated.resize(static_cast<std::size_t>(n));
  draw.y.resize(n);
  draw.tau.resize(n);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const int g = draw.group[static_cast<std::size_t>(i)];
    const double eta = alpha[g] + Xm.row(i).dot(slope_beta.row(g));
    const double prob = 1.0 / (1.0 + std::exp(-eta));
    draw.treated[static_cast<std::size_t>(i)] = unif(treat_rng) < prob ? 1 : 0;
  }
  for (int i = 0; i < n; ++i) {
    const int g = draw.group[static_cast<std::size_t>(i)];
    const double y0 =
        eta0[g] + Xm.row(i).dot(slope_eta.row(g)) + normal(noise_rng);
    // Effects live on the raw covariate scale.
    draw.tau[i] = draw.X(i, d - 1) - draw.X(i, 2) +
                  0.3 * draw.X(i, d - 1) * draw.X(i, 2);
    draw.y[i] = draw.treated[static_cast<std::size_t>(i)] ? y0 + draw.tau[i] : y0;
  }
}

DGPDraw draw_dgp(const SimConfig& config, std::uint64_t replicate) {
  if (config.d < 3) throw ConfigError("the effect needs at least 3 covariates");
  DGPDraw draw;
  std::mt19937_64 cov_rng = make_stream(config.seed, replicate, stage::kCovariates);
  gen_covariates(config, cov_rng, draw.X, draw.X_transformed);
  std::mt19937_64 group_rng = make_stream(config.seed, replicate, stage::kGroups);
  draw.group = assign_groups(draw.X.col(config.d - 1), config.groups,
                             config.group_retry_limit, group_rng);
  std::mt19937_64 param_rng = make_stream(config.seed, replicate, stage::kParams);
  std::mt19937_64 treat_rng = make_stream(config.seed, replicate, stage::kTreatment);
  std::mt19937_64 noise_rng = make_stream(config.seed, replicate, stage::kNoise);
  gen_treatment_and_outcomes(config, draw, param_rng, treat_rng, noise_rng);
  return draw;
}

namespace {

const std::vector<std::string>& all_estimators() {
  static const std::vector<std::string> ids = {
      estimator_id::kPartial,     estimator_id::kFull,
      estimator_id::kNone,        estimator_id::kAugmented,
      estimator_id::kIpwInteract, estimator_id::kIpwFixed,
      estimator_id::kRidgeOutcome};
  return ids;
}

struct ReplicateContext {
  AnalysisSample sample;
  FeatureMatrix features;
  Eigen::VectorXd outcomes;
  std::vector<int> group_ids;     // retained original group index per stratum
  std::vector<double> truths;     // per retained stratum
  double overall_truth = 0.0;
};

// Weighting estimators share one record-building path.
ReplicateRecord record_from_table(const ReplicateContext& ctx,
                                  const EstimateTable& table) {
  ReplicateRecord rec;
  rec.group_ids = ctx.group_ids;
  rec.truths = ctx.truths;
  rec.overall_truth = ctx.overall_truth;
  for (int g = 0; g < ctx.sample.n_strata(); ++g) {
    const auto* row = table.find(
        "stratum", ctx.sample.stratum_labels()[static_cast<std::size_t>(g)]);
    rec.estimates.push_back(row->tau);
    rec.ses.push_back(row->se);
  }
  const auto* overall = table.find("overall", "all");
  rec.overall_estimate = overall->tau;
  rec.overall_se = overall->se;
  return rec;
}

std::uint64_t cv_seed(const SimConfig& config, std::uint64_t replicate,
                      std::uint64_t salt) {
  return mix64(config.seed ^ mix64(replicate ^ mix64(salt ^ 0xc5ULL)));
}

std::vector<ReplicateRecord> run_replicate(const SimConfig& config,
                                           std::uint64_t replicate,
                                           const std::vector<std::string>& roster) {
  DGPDraw draw = draw_dgp(config, replicate);
  const std::vector<std::string> labels = make_labels(config.groups);

  std::vector<std::string> subgroup(static_cast<std::size_t>(config.n));
  for (int i = 0; i < config.n; ++i) {
    subgroup[static_cast<std::size_t>(i)] =
        labels[static_cast<std::size_t>(draw.group[static_cast<std::size_t>(i)])];
  }
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(config.d));
  for (int j = 1; j <= config.d; ++j) names.push_back("x" + std::to_string(j));

  ReplicateContext ctx{
      make_sample(draw.y, draw.treated, subgroup,
                  config.use_raw_covariates ? draw.X : draw.X_transformed,
                  names, ZeroControlPolicy::drop),
      {}, {}, {}, {}, 0.0};
  // Dropped strata shorten the sample; use its aligned outcome vector.
  ctx.outcomes = ctx.sample.outcomes();
  ctx.features =
      standardize_columns(ctx.sample.covariates(), ctx.sample.covariate_names());

  // Truths over the treated units of retained groups only, so estimates and
  // targets describe the same population when a group is dropped.
  std::set<std::string> retained(ctx.sample.stratum_labels().begin(),
                                 ctx.sample.stratum_labels().end());
  std::vector<double> tau_sum(static_cast<std::size_t>(config.groups), 0.0);
  std::vector<int> tau_count(static_cast<std::size_t>(config.groups), 0);
  double overall_sum = 0.0;
  int overall_count = 0;
  for (int i = 0; i < config.n; ++i) {
    if (!draw.treated[static_cast<std::size_t>(i)]) continue;
    const int g = draw.group[static_cast<std::size_t>(i)];
    if (!retained.count(labels[static_cast<std::size_t>(g)])) continue;
    tau_sum[static_cast<std::size_t>(g)] += draw.tau[i];
    tau_count[static_cast<std::size_t>(g)] += 1;
    overall_sum += draw.tau[i];
    ++overall_count;
  }
  for (const auto& label : ctx.sample.stratum_labels()) {
    const int g = static_cast<int>(
        std::find(labels.begin(), labels.end(), label) - labels.begin());
    ctx.group_ids.push_back(g);
    ctx.truths.push_back(tau_sum[static_cast<std::size_t>(g)] /
                         static_cast<double>(tau_count[static_cast<std::size_t>(g)]));
  }
  ctx.overall_truth = overall_sum / static_cast<double>(overall_count);

  // Pieces shared between estimators, built on demand.
  std::optional<WeightSolution> partial_solution;
  std::optional<RidgeOutcomeModel> ridge_model;
  auto get_partial = [&]() -> const WeightSolution& {
    if (!partial_solution) {
      SolverConfig sc;
      sc.lambda = 1.0;
      sc.divisor = LambdaDivisor::treated_count;
      sc.pooling = Pooling::partial;
      partial_solution = solve(ctx.features, ctx.sample, sc);
      if (!partial_solution->converged) {
        throw ConvergenceError("weights did not converge: " +
                               partial_solution->diagnostic);
      }
    }
    return *partial_solution;
  };
  auto get_ridge = [&]() -> const RidgeOutcomeModel& {
    if (!ridge_model) {
      ridge_model = fit_outcome_ridge(ctx.features, ctx.sample, ctx.outcomes,
                                      {}, 5, cv_seed(config, replicate, 1));
    }
    return *ridge_model;
  };

  std::vector<ReplicateRecord> records;
  for (const auto& id : roster) {
    ReplicateRecord rec;
    try {
      if (id == estimator_id::kPartial || id == estimator_id::kFull ||
          id == estimator_id::kNone) {
        const WeightSolution* sol = nullptr;
        WeightSolution local;
        if (id == estimator_id::kPartial) {
          sol = &get_partial();
        } else {
          SolverConfig sc;
          sc.lambda = 1.0;
          sc.divisor = LambdaDivisor::treated_count;
          sc.pooling = id == estimator_id::kFull ? Pooling::full : Pooling::none;
          local = solve(ctx.features, ctx.sample, sc);
          if (!local.converged) {
            throw ConvergenceError("weights did not converge: " +
                                   local.diagnostic);
          }
          sol = &local;
        }
        EstimateTable table = weighted_means(*sol, ctx.sample, ctx.outcomes);
        apply_sandwich_se(table, ctx.sample,
                          sandwich_variances(*sol, ctx.sample, ctx.outcomes,
                                             ResidualSource::weighted_mean));
        rec = record_from_table(ctx, table);
      } else if (id == estimator_id::kAugmented) {
        const WeightSolution& sol = get_partial();
        EstimateTable base = weighted_means(sol, ctx.sample, ctx.outcomes);
        AugmentResult aug = augment(base, sol, get_ridge(), ctx.features,
                                    ctx.sample, ctx.outcomes);
        rec = record_from_table(ctx, aug.table);
      } else if (id == estimator_id::kIpwInteract ||
                 id == estimator_id::kIpwFixed) {
        const PropensityMode mode = id == estimator_id::kIpwInteract
                                        ? PropensityMode::full_interaction
                                        : PropensityMode::fixed_effects;
        PropensityModel model =
            fit_propensity(ctx.features, ctx.sample, mode, {}, 5,
                           cv_seed(config, replicate,
                                   mode == PropensityMode::full_interaction ? 2 : 3));
        WeightSolution weights = ipw_weights(model, ctx.features, ctx.sample);
        EstimateTable table = weighted_means(weights, ctx.sample, ctx.outcomes);
        apply_sandwich_se(table, ctx.sample,
                          sandwich_variances(weights, ctx.sample, ctx.outcomes,
                                             ResidualSource::weighted_mean));
        rec = record_from_table(ctx, table);
      } else if (id == estimator_id::kRidgeOutcome) {
        const RidgeOutcomeModel& model = get_ridge();
        rec.group_ids = ctx.group_ids;
        rec.truths = ctx.truths;
        rec.overall_truth = ctx.overall_truth;
        double overall = 0.0;
        double n1 = 0.0;
        for (int g = 0; g < ctx.sample.n_strata(); ++g) {
          const double n1g = static_cast<double>(ctx.sample.n_treated(g));
          double mu1 = 0.0, mu0 = 0.0;
          for (int row : ctx.sample.treated_rows(g)) {
            mu1 += ctx.outcomes[row];
            mu0 += model.predict(ctx.features.values.row(row), g);
          }
          const double tau = (mu1 - mu0) / n1g;
          rec.estimates.push_back(tau);
          rec.ses.push_back(kNaN);
          overall += n1g * tau;
          n1 += n1g;
        }
        rec.overall_estimate = overall / n1;
        rec.overall_se = kNaN;
      } else {
        throw ConfigError("unknown estimator \"" + id + "\"");
      }
    } catch (const Error& e) {
      rec = ReplicateRecord{};
      rec.failed = true;
      rec.failure = e.what();
    }
    rec.replicate = static_cast<int>(replicate);
    rec.estimator = id;
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace

SimResult run_monte_carlo(const SimConfig& config) {
  if (config.replicates < 1) throw ConfigError("need at least 1 replicate");
  std::vector<std::string> roster =
      config.roster.empty() ? all_estimators() : config.roster;
  for (const auto& id : roster) {
    if (std::find(all_estimators().begin(), all_estimators().end(), id) ==
        all_estimators().end()) {
      throw ConfigError("unknown estimator \"" + id + "\"");
    }
  }

  std::vector<std::vector<ReplicateRecord>> slots(
      static_cast<std::size_t>(config.replicates));
  parallel_for(static_cast<std::size_t>(config.replicates), config.threads,
               [&](std::size_t rep) {
                 slots[rep] = run_replicate(config, rep, roster);
               });

  SimResult result;
  result.config = config;
  for (auto& slot : slots) {
    for (auto& rec : slot) result.records.push_back(std::move(rec));
  }

  for (const auto& id : roster) {
    EstimatorMetrics m;
    m.estimator = id;
    std::vector<double> err_sum(static_cast<std::size_t>(config.groups), 0.0);
    std::vector<int> err_count(static_cast<std::size_t>(config.groups), 0);
    double cell_sq = 0.0;
    int cells = 0;
    int covered = 0, cover_cells = 0;
    double overall_err_sum = 0.0, overall_sq = 0.0;
    int overall_count = 0;
    int overall_covered = 0, overall_cover_cells = 0;
    for (const auto& rec : result.records) {
      if (rec.estimator != id) continue;
      if (rec.failed) {
        m.failures += 1;
        continue;
      }
      for (std::size_t k = 0; k < rec.group_ids.size(); ++k) {
        const double err = rec.estimates[k] - rec.truths[k];
        err_sum[static_cast<std::size_t>(rec.group_ids[k])] += err;
        err_count[static_cast<std::size_t>(rec.group_ids[k])] += 1;
        cell_sq += err * err;
        ++cells;
        if (std::isfinite(rec.ses[k])) {
          ++cover_cells;
          if (std::abs(err) <= 1.959963984540054 * rec.ses[k]) ++covered;
        }
      }
      const double oerr = rec.overall_estimate - rec.overall_truth;
      overall_err_sum += oerr;
      overall_sq += oerr * oerr;
      ++overall_count;
      if (std::isfinite(rec.overall_se)) {
        ++overall_cover_cells;
        if (std::abs(oerr) <= 1.959963984540054 * rec.overall_se) {
          ++overall_covered;
        }
      }
    }
    double mab = 0.0;
    int groups_seen = 0;
    for (int g = 0; g < config.groups; ++g) {
      if (err_count[static_cast<std::size_t>(g)] == 0) continue;
      mab += std::abs(err_sum[static_cast<std::size_t>(g)] /
                      static_cast<double>(err_count[static_cast<std::size_t>(g)]));
      ++groups_seen;
    }
    m.subgroup_mab = groups_seen > 0 ? mab / static_cast<double>(groups_seen) : kNaN;
    m.subgroup_rmse = cells > 0 ? std::sqrt(cell_sq / static_cast<double>(cells)) : kNaN;
    m.overall_abs_bias =
        overall_count > 0
            ? std::abs(overall_err_sum / static_cast<double>(overall_count))
            : kNaN;
    m.overall_rmse =
        overall_count > 0 ? std::sqrt(overall_sq / static_cast<double>(overall_count))
                          : kNaN;
    m.subgroup_coverage =
        cover_cells > 0
            ? static_cast<double>(covered) / static_cast<double>(cover_cells)
            : kNaN;
    m.overall_coverage = overall_cover_cells > 0
                             ? static_cast<double>(overall_covered) /
                                   static_cast<double>(overall_cover_cells)
                             : kNaN;
    result.metrics.push_back(std::move(m));
  }
  return result;
}

}  // namespace poolbal
