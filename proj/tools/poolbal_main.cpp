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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poolbal/common.hpp"
#include "poolbal/data.hpp"
#include "poolbal/diagnostics.hpp"
#include "poolbal/estimators.hpp"
#include "poolbal/features.hpp"
#include "poolbal/sensitivity.hpp"
#include "poolbal/serialize.hpp"
#include "poolbal/simulation.hpp"
#include "poolbal/solver.hpp"

namespace {

using poolbal::Json;

struct IoOpts {
  std::string input;
  std::string out = ".";
  std::string outcome_col = "y";
  std::string treatment_col = "w";
  std::string subgroup_col = "g";
  std::vector<std::string> covariates;
  std::string zero_control = "error";
  std::string features_path;
};

struct SolveOpts {
  double lambda = 1.0;
  std::string pooling = "partial";
  std::string divisor = "stratum_size";
  double tolerance = 1e-8;
  int max_iterations = 20000;
};

Json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw poolbal::ParseError("cannot open \"" + path + "\"");
  try {
    return Json::parse(in);
  } catch (const std::exception& e) {
    throw poolbal::ParseError("\"" + path + "\": " + e.what());
  }
}

poolbal::FeatureSpec parse_feature_spec(const std::string& path) {
  poolbal::FeatureSpec spec;
  if (path.empty()) return spec;
  const Json j = read_json_file(path);
  try {
    spec.include_raw = j.value("include_raw", true);
    spec.standardize = j.value("standardize", true);
    for (const auto& s : j.value("splines", Json::array())) {
      poolbal::SplineSpec sp;
      sp.column = s.at("column").get<std::string>();
      sp.knot_count = s.value("knots", 5);
      spec.splines.push_back(std::move(sp));
    }
    for (const auto& s : j.value("interactions", Json::array())) {
      poolbal::InteractionSpec is;
      for (const auto& c : s.at("columns")) {
        is.columns.push_back(c.get<std::string>());
      }
      is.name = s.value("name", std::string("stratum"));
      if (s.contains("levels")) {
        for (const auto& [key, value] : s.at("levels").items()) {
          is.stratum_to_level[key] = value.get<std::string>();
        }
      }
      spec.interactions.push_back(std::move(is));
    }
  } catch (const Json::exception& e) {
    throw poolbal::ParseError("feature spec \"" + path + "\": " + e.what());
  }
  return spec;
}

poolbal::Grouping parse_grouping(const std::string& path) {
  const Json j = read_json_file(path);
  poolbal::Grouping grouping;
  try {
    grouping.name = j.at("name").get<std::string>();
    for (const auto& [key, value] : j.at("map").items()) {
      grouping.stratum_to_level[key] = value.get<std::string>();
    }
  } catch (const Json::exception& e) {
    throw poolbal::ParseError("grouping \"" + path + "\": " + e.what());
  }
  return grouping;
}

poolbal::CsvSchema make_schema(const IoOpts& io) {
  poolbal::CsvSchema schema;
  schema.outcome = io.outcome_col;
  schema.treatment = io.treatment_col;
  schema.subgroup = io.subgroup_col;
  schema.covariates = io.covariates;
  return schema;
}

poolbal::ZeroControlPolicy zero_control_policy(const IoOpts& io) {
  if (io.zero_control == "drop") return poolbal::ZeroControlPolicy::drop;
  return poolbal::ZeroControlPolicy::error;
}

poolbal::SolverConfig make_solver_config(const SolveOpts& opts) {
  poolbal::SolverConfig config;
  config.lambda = opts.lambda;
  if (opts.pooling == "full") {
    config.pooling = poolbal::Pooling::full;
  } else if (opts.pooling == "none") {
    config.pooling = poolbal::Pooling::none;
  } else {
    config.pooling = poolbal::Pooling::partial;
  }
  if (opts.divisor == "treated_count") {
    config.divisor = poolbal::LambdaDivisor::treated_count;
  } else if (opts.divisor == "none") {
    config.divisor = poolbal::LambdaDivisor::none;
  } else {
    config.divisor = poolbal::LambdaDivisor::stratum_size;
  }
  config.gradient_tolerance = opts.tolerance;
  config.max_iterations = opts.max_iterations;
  return config;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 1099511628211ull;
  }
  return hash;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    std::uint64_t seed, const Json& flags) {
  Json manifest;
  manifest["version"] = poolbal::kVersion;
  manifest["command"] = command;
  manifest["seed"] = seed;
  manifest["config_hash"] = hex64(fnv1a(flags.dump()));
  manifest["flags"] = flags;
  poolbal::write_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");
}

std::string ensure_out_dir(const std::string& out) {
  std::filesystem::create_directories(out);
  return out;
}

Json io_flags(const IoOpts& io) {
  Json j;
  j["input"] = io.input;
  j["outcome_col"] = io.outcome_col;
  j["treatment_col"] = io.treatment_col;
  j["subgroup_col"] = io.subgroup_col;
  j["covariates"] = io.covariates;
  j["zero_control"] = io.zero_control;
  j["features"] = io.features_path;
  return j;
}

Json solve_flags(const SolveOpts& opts) {
  Json j;
  j["lambda"] = opts.lambda;
  j["pooling"] = opts.pooling;
  j["divisor"] = opts.divisor;
  j["tolerance"] = opts.tolerance;
  j["max_iterations"] = opts.max_iterations;
  return j;
}

void add_io_options(CLI::App* cmd, IoOpts& io) {
  cmd->add_option("--input", io.input, "Input CSV path")->required();
  cmd->add_option("--out", io.out, "Output directory");
  cmd->add_option("--outcome-col", io.outcome_col, "Outcome column name");
  cmd->add_option("--treatment-col", io.treatment_col, "Treatment column name");
  cmd->add_option("--subgroup-col", io.subgroup_col, "Subgroup column name");
  cmd->add_option("--covariates", io.covariates,
                  "Covariate columns (default: all remaining)")
      ->delimiter(',');
  cmd->add_option("--zero-control", io.zero_control,
                  "Zero-control stratum policy")
      ->check(CLI::IsMember({"error", "drop"}));
  cmd->add_option("--features", io.features_path, "Feature spec JSON path");
}

void add_solver_options(CLI::App* cmd, SolveOpts& opts) {
  cmd->add_option("--lambda", opts.lambda, "Shrinkage strength")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--pooling", opts.pooling, "Pooling mode")
      ->check(CLI::IsMember({"partial", "full", "none"}));
  cmd->add_option("--divisor", opts.divisor, "Per-stratum lambda divisor")
      ->check(CLI::IsMember({"stratum_size", "treated_count", "none"}));
  cmd->add_option("--tolerance", opts.tolerance, "Gradient tolerance")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--max-iterations", opts.max_iterations, "Iteration budget")
      ->check(CLI::PositiveNumber);
}

// Weight construction stays outcome-free: this command reads the outcome
// column only to satisfy the CSV schema and never passes it onward.
int cmd_weights(const IoOpts& io, const SolveOpts& opts) {
  const auto sample =
      poolbal::load_csv(io.input, make_schema(io), zero_control_policy(io));
  const auto features =
      poolbal::build_features(sample, parse_feature_spec(io.features_path));
  const auto config = make_solver_config(opts);
  const auto solution = poolbal::solve(features, sample, config);

  const std::string out = ensure_out_dir(io.out);
  const std::string method = "balance_" + opts.pooling;
  poolbal::write_file(
      out + "/weights.json",
      poolbal::weights_json(solution, features, sample, method).dump(2) + "\n");
  const auto balance = poolbal::balance_report(solution, features, sample);
  poolbal::write_file(out + "/balance.json",
                      poolbal::balance_json(balance).dump(2) + "\n");
  poolbal::write_file(out + "/balance.csv", poolbal::balance_csv(balance));
  const auto overlap = poolbal::ess(solution, sample);
  poolbal::write_file(out + "/overlap.json",
                      poolbal::overlap_json(overlap).dump(2) + "\n");
  poolbal::write_file(out + "/overlap.csv", poolbal::overlap_csv(overlap));

  Json flags = io_flags(io);
  flags.update(solve_flags(opts));
  write_manifest(out, "weights", 0, flags);

  double max_imbalance = 0.0;
  const double n1 = static_cast<double>(sample.n_treated());
  for (int j = 0; j < features.p(); ++j) {
    max_imbalance =
        std::max(max_imbalance, std::abs(solution.global_imbalance[j]) / n1);
  }
  std::cout << "weights: converged=" << (solution.converged ? "yes" : "no")
            << " iterations=" << solution.iterations
            << " max_global_imbalance=" << poolbal::format_double(max_imbalance)
            << "\n";
  if (!solution.converged) {
    std::cerr << "error: " << solution.diagnostic << "\n";
    return 2;
  }
  return 0;
}

// Rebuilds a weight vector from a weights.json written by cmd_weights.
poolbal::WeightSolution load_weights_file(const std::string& path,
                                          const poolbal::AnalysisSample& sample) {
  const Json j = read_json_file(path);
  poolbal::WeightSolution solution;
  solution.gamma = Eigen::VectorXd::Zero(sample.n());
  try {
    const Json& weights = j.at("weights");
    for (int g = 0; g < sample.n_strata(); ++g) {
      for (int row : sample.control_rows(g)) {
        const std::string key = std::to_string(row);
        if (!weights.contains(key)) {
          throw poolbal::ValidationError("weights file \"" + path +
                                         "\" is missing row " + key);
        }
        solution.gamma[row] = weights.at(key).get<double>();
      }
    }
    solution.converged = j.value("converged", true);
  } catch (const Json::exception& e) {
    throw poolbal::ParseError("weights file \"" + path + "\": " + e.what());
  }
  return solution;
}

int cmd_estimate(const IoOpts& io, const SolveOpts& opts,
                 const std::string& estimator, const std::string& augment_mode,
                 const std::string& grouping_path,
                 const std::string& weights_path, std::uint64_t seed) {
  const auto sample =
      poolbal::load_csv(io.input, make_schema(io), zero_control_policy(io));
  const auto features =
      poolbal::build_features(sample, parse_feature_spec(io.features_path));

  std::vector<poolbal::Grouping> groupings;
  if (!grouping_path.empty()) groupings.push_back(parse_grouping(grouping_path));

  poolbal::EstimateTable table;
  if (estimator == "regression" || estimator == "regression_interact") {
    const auto interaction = estimator == "regression"
                                 ? poolbal::RegressionInteraction::none
                                 : poolbal::RegressionInteraction::by_grouping;
    const poolbal::Grouping* grouping =
        groupings.empty() ? nullptr : &groupings.front();
    table = poolbal::linear_regression_baseline(features, sample,
                                                sample.outcomes(), interaction,
                                                grouping);
  } else {
    poolbal::WeightSolution solution;
    if (estimator == "ipw_interact" || estimator == "ipw_fixed") {
      const auto mode = estimator == "ipw_interact"
                            ? poolbal::PropensityMode::full_interaction
                            : poolbal::PropensityMode::fixed_effects;
      const auto model =
          poolbal::fit_propensity(features, sample, mode, {}, 5, seed);
      solution = poolbal::ipw_weights(model, features, sample);
    } else if (!weights_path.empty()) {
      solution = load_weights_file(weights_path, sample);
    } else {
      solution = poolbal::solve(features, sample, make_solver_config(opts));
    }
    table = poolbal::weighted_means(solution, sample, sample.outcomes(),
                                    groupings);
    if (augment_mode == "ridge") {
      const auto model = poolbal::fit_outcome_ridge(features, sample,
                                                    sample.outcomes(), {}, 5,
                                                    seed);
      auto augmented = poolbal::augment(table, solution, model, features,
                                        sample, sample.outcomes(), groupings);
      table = std::move(augmented.table);
      const auto variances = poolbal::sandwich_variances(
          solution, sample, sample.outcomes(),
          poolbal::ResidualSource::outcome_model, &model, &features);
      poolbal::apply_sandwich_se(table, sample, variances, groupings);
    } else {
      const auto variances = poolbal::sandwich_variances(
          solution, sample, sample.outcomes(),
          poolbal::ResidualSource::weighted_mean);
      poolbal::apply_sandwich_se(table, sample, variances, groupings);
    }
  }

  const std::string out = ensure_out_dir(io.out);
  poolbal::write_file(out + "/estimates.json",
                      poolbal::estimates_json(table).dump(2) + "\n");
  poolbal::write_file(out + "/estimates.csv", poolbal::estimates_csv(table));

  Json flags = io_flags(io);
  flags.update(solve_flags(opts));
  flags["estimator"] = estimator;
  flags["augment"] = augment_mode;
  flags["grouping"] = grouping_path;
  flags["weights"] = weights_path;
  write_manifest(out, "estimate", seed, flags);

  const auto* overall = table.find("overall", "all");
  if (overall != nullptr) {
    std::cout << "estimate: overall_tau=" << poolbal::format_double(overall->tau)
              << " se=" << poolbal::format_double(overall->se) << "\n";
  }
  return 0;
}

int cmd_sweep(const IoOpts& io, SolveOpts opts, const std::vector<double>& grid) {
  const auto sample =
      poolbal::load_csv(io.input, make_schema(io), zero_control_policy(io));
  const auto features =
      poolbal::build_features(sample, parse_feature_spec(io.features_path));
  const auto points =
      poolbal::sweep_lambda(features, sample, make_solver_config(opts), grid);

  const std::string out = ensure_out_dir(io.out);
  poolbal::write_file(out + "/sweep.json",
                      poolbal::sweep_json(points).dump(2) + "\n");
  poolbal::write_file(out + "/sweep.csv", poolbal::sweep_csv(points));

  Json flags = io_flags(io);
  flags.update(solve_flags(opts));
  flags["grid"] = grid;
  write_manifest(out, "sweep", 0, flags);
  std::cout << "sweep: " << points.size() << " grid points\n";
  return 0;
}

int cmd_simulate(const std::string& out_dir, const poolbal::SimConfig& config,
                 bool records) {
  const auto result = poolbal::run_monte_carlo(config);

  const std::string out = ensure_out_dir(out_dir);
  poolbal::write_file(out + "/simulation.json",
                      poolbal::simulation_json(result, records).dump(2) + "\n");
  poolbal::write_file(out + "/simulation.csv", poolbal::simulation_csv(result));
  if (records) {
    poolbal::write_file(out + "/replicates.csv",
                        poolbal::replicates_csv(result));
  }

  Json flags;
  flags["n"] = config.n;
  flags["d"] = config.d;
  flags["groups"] = config.groups;
  flags["replicates"] = config.replicates;
  flags["roster"] = config.roster;
  flags["use_raw_covariates"] = config.use_raw_covariates;
  flags["threads"] = config.threads;
  flags["records"] = records;
  write_manifest(out, "simulate", config.seed, flags);
  std::cout << "simulate: " << result.metrics.size() << " estimators, "
            << config.replicates << " replicates\n";
  return 0;
}

int cmd_sensitivity(const IoOpts& io, const SolveOpts& opts,
                    const std::vector<double>& sens_lambdas, int bootstrap,
                    double confidence, const std::string& target_spec,
                    std::uint64_t seed, int threads) {
  const auto sample =
      poolbal::load_csv(io.input, make_schema(io), zero_control_policy(io));
  const auto features =
      poolbal::build_features(sample, parse_feature_spec(io.features_path));
  const auto solver_config = make_solver_config(opts);
  const auto solution = poolbal::solve(features, sample, solver_config);

  poolbal::SensitivityTarget target = poolbal::SensitivityTarget::overall();
  if (!target_spec.empty() && target_spec != "overall") {
    const auto sep = target_spec.find(':');
    if (sep == std::string::npos || target_spec.substr(0, sep) != "stratum") {
      throw poolbal::ConfigError(
          "target must be \"overall\" or \"stratum:LABEL\"");
    }
    target = poolbal::SensitivityTarget::stratum(sample,
                                                 target_spec.substr(sep + 1));
  }

  poolbal::SensitivityConfig sens_config;
  sens_config.bootstrap_reps = bootstrap;
  sens_config.confidence = confidence;
  sens_config.seed = seed;

  std::optional<poolbal::BootstrapEnsemble> ensemble;
  if (bootstrap > 0) {
    const poolbal::WeightsProcedure procedure =
        [&solver_config](const poolbal::FeatureMatrix& f,
                         const poolbal::AnalysisSample& s) {
          return poolbal::solve(f, s, solver_config);
        };
    ensemble = poolbal::BootstrapEnsemble::run(procedure, features, sample,
                                               sample.outcomes(), target,
                                               sens_config, threads);
  }

  std::vector<poolbal::SensitivityBounds> bounds;
  for (double lambda : sens_lambdas) {
    sens_config.lambda = lambda;
    auto b = poolbal::bounds_at_lambda(solution, sample, sample.outcomes(),
                                       target, sens_config);
    if (ensemble) {
      const auto [lo, hi] = ensemble->interval(lambda, confidence);
      b.ci_lower = lo;
      b.ci_upper = hi;
      b.bootstrap_reps = ensemble->reps();
      b.dropped_reps = ensemble->dropped();
    }
    bounds.push_back(std::move(b));
  }

  const std::string out = ensure_out_dir(io.out);
  poolbal::write_file(out + "/sensitivity.json",
                      poolbal::sensitivity_json(bounds).dump(2) + "\n");

  Json flags = io_flags(io);
  flags.update(solve_flags(opts));
  flags["sens_lambda"] = sens_lambdas;
  flags["bootstrap"] = bootstrap;
  flags["confidence"] = confidence;
  flags["target"] = target_spec.empty() ? "overall" : target_spec;
  flags["threads"] = threads;
  write_manifest(out, "sensitivity", seed, flags);
  for (const auto& b : bounds) {
    std::cout << "sensitivity: lambda=" << poolbal::format_double(b.lambda)
              << " bounds=[" << poolbal::format_double(b.tau_min) << ", "
              << poolbal::format_double(b.tau_max) << "]\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partially pooled balancing weights for subgroup treatment "
               "effects"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(poolbal::kVersion));

  IoOpts io;
  SolveOpts solve_opts;
  std::string estimator = "balance";
  std::string augment_mode = "none";
  std::string grouping_path;
  std::string weights_path;
  std::string target_spec = "overall";
  std::vector<double> grid;
  std::vector<double> sens_lambdas{1.0};
  int bootstrap = 0;
  double confidence = 0.95;
  std::uint64_t seed = 0;
  int threads = 1;
  bool records = false;
  poolbal::SimConfig sim_config;
  std::string sim_out = ".";
  std::string roster_csv;

  auto* weights = app.add_subcommand("weights", "Solve for balancing weights");
  add_io_options(weights, io);
  add_solver_options(weights, solve_opts);

  auto* estimate = app.add_subcommand("estimate", "Estimate treatment effects");
  add_io_options(estimate, io);
  add_solver_options(estimate, solve_opts);
  estimate->add_option("--estimator", estimator, "Estimator")
      ->check(CLI::IsMember({"balance", "ipw_interact", "ipw_fixed",
                             "regression", "regression_interact"}));
  estimate->add_option("--augment", augment_mode, "Outcome-model augmentation")
      ->check(CLI::IsMember({"none", "ridge"}));
  estimate->add_option("--grouping", grouping_path,
                       "Grouping JSON path (stratum to level map)");
  estimate->add_option("--weights", weights_path,
                       "Reuse a weights.json instead of solving");
  estimate->add_option("--seed", seed, "Seed for cross-validated fits");

  auto* sweep = app.add_subcommand("sweep", "Trace the shrinkage path");
  add_io_options(sweep, io);
  add_solver_options(sweep, solve_opts);
  sweep->add_option("--grid", grid, "Ascending lambda grid")
      ->delimiter(',')
      ->required();

  auto* simulate = app.add_subcommand("simulate", "Run the benchmark study");
  simulate->add_option("--out", sim_out, "Output directory");
  simulate->add_option("--sim-n", sim_config.n, "Units per replicate");
  simulate->add_option("--sim-d", sim_config.d, "Covariate count");
  simulate->add_option("--sim-groups", sim_config.groups, "Subgroup count");
  simulate->add_option("--replicates", sim_config.replicates, "Replicates");
  simulate->add_option("--roster", roster_csv,
                       "Comma-separated estimator roster");
  simulate->add_option("--seed", seed, "Simulation seed");
  simulate->add_option("--threads", threads, "Worker cap");
  simulate->add_flag("--records", records, "Write per-replicate rows");
  simulate->add_flag("--use-raw-covariates", sim_config.use_raw_covariates,
                     "Fit models on untransformed covariates");

  auto* sensitivity =
      app.add_subcommand("sensitivity", "Bound effects under hidden bias");
  add_io_options(sensitivity, io);
  add_solver_options(sensitivity, solve_opts);
  sensitivity->add_option("--sens-lambda", sens_lambdas,
                          "Odds bounds to evaluate")
      ->delimiter(',');
  sensitivity->add_option("--bootstrap", bootstrap, "Bootstrap replicates");
  sensitivity->add_option("--confidence", confidence, "Interval level");
  sensitivity->add_option("--target", target_spec,
                          "\"overall\" or \"stratum:LABEL\"");
  sensitivity->add_option("--seed", seed, "Bootstrap seed");
  sensitivity->add_option("--threads", threads, "Worker cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (weights->parsed()) return cmd_weights(io, solve_opts);
    if (estimate->parsed()) {
      return cmd_estimate(io, solve_opts, estimator, augment_mode,
                          grouping_path, weights_path, seed);
    }
    if (sweep->parsed()) return cmd_sweep(io, solve_opts, grid);
    if (simulate->parsed()) {
      sim_config.seed = seed;
      sim_config.threads = threads;
      if (!roster_csv.empty()) {
        std::string item;
        for (char c : roster_csv + ",") {
          if (c == ',') {
            if (!item.empty()) sim_config.roster.push_back(item);
            item.clear();
          } else {
            item.push_back(c);
          }
        }
      }
      return cmd_simulate(sim_out, sim_config, records);
    }
    if (sensitivity->parsed()) {
      return cmd_sensitivity(io, solve_opts, sens_lambdas, bootstrap,
                             confidence, target_spec, seed, threads);
    }
  } catch (const poolbal::InfeasibleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const poolbal::ConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const poolbal::OverlapError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const poolbal::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
