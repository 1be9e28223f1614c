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

#include "poolbal/serialize.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace poolbal {

std::string format_double(double v) {
  if (!std::isfinite(v)) {
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  }
  // Shortest representation that round-trips.
  char buf[40];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

Json json_number(double v) {
  if (std::isfinite(v)) return v;
  return format_double(v);  // JSON has no non-finite literals
}

Json vector_json(const Eigen::VectorXd& v) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(json_number(v[i]));
  return arr;
}

}  // namespace

Json weights_json(const WeightSolution& solution, const FeatureMatrix& features,
                  const AnalysisSample& sample, const std::string& method) {
  Json out;
  out["method"] = method;
  out["converged"] = solution.converged;
  out["iterations"] = solution.iterations;
  out["primal_value"] = json_number(solution.primal_value);
  out["dual_value"] = json_number(solution.dual_value);
  if (!solution.diagnostic.empty()) out["diagnostic"] = solution.diagnostic;

  Json strata = Json::array();
  for (int g = 0; g < sample.n_strata(); ++g) {
    Json s;
    s["label"] = sample.stratum_labels()[static_cast<std::size_t>(g)];
    s["n_treated"] = sample.n_treated(g);
    s["n_control"] = sample.n_control(g);
    strata.push_back(std::move(s));
  }
  out["strata"] = std::move(strata);

  Json dropped = Json::array();
  for (const auto& label : sample.drop_report().zero_treated) {
    dropped.push_back(label);
  }
  for (const auto& label : sample.drop_report().zero_control) {
    dropped.push_back(label);
  }
  out["dropped_strata"] = std::move(dropped);

  // Control weights keyed by 0-based row position within the sample.
  Json weights = Json::object();
  for (int g = 0; g < sample.n_strata(); ++g) {
    for (int row : sample.control_rows(g)) {
      weights[std::to_string(row)] = json_number(solution.gamma[row]);
    }
  }
  out["weights"] = std::move(weights);

  if (solution.dual.alpha.size() > 0) {
    Json dual;
    dual["alpha"] = vector_json(solution.dual.alpha);
    Json beta = Json::array();
    for (Eigen::Index g = 0; g < solution.dual.beta.rows(); ++g) {
      beta.push_back(vector_json(solution.dual.beta.row(g)));
    }
    dual["beta"] = std::move(beta);
    dual["mu_beta"] = vector_json(solution.dual.mu_beta);
    out["dual"] = std::move(dual);
  }

  Json global = Json::object();
  const double n1 = static_cast<double>(sample.n_treated());
  for (int j = 0; j < features.p(); ++j) {
    global[features.columns[static_cast<std::size_t>(j)].name] =
        json_number(std::abs(solution.global_imbalance[j]) / n1);
  }
  out["global_imbalance"] = std::move(global);
  return out;
}

Json balance_json(const BalanceReport& report) {
  Json out;
  out["features"] = report.feature_names;
  Json global = Json::array();
  for (std::size_t j = 0; j < report.feature_names.size(); ++j) {
    Json row;
    row["feature"] = report.feature_names[j];
    row["pre"] = json_number(report.global_pre[static_cast<Eigen::Index>(j)]);
    row["post"] = json_number(report.global_post[static_cast<Eigen::Index>(j)]);
    global.push_back(std::move(row));
  }
  out["global"] = std::move(global);
  Json local = Json::array();
  for (std::size_t g = 0; g < report.stratum_labels.size(); ++g) {
    Json s;
    s["stratum"] = report.stratum_labels[g];
    s["pre_norm"] = json_number(report.local_pre_norm[static_cast<Eigen::Index>(g)]);
    s["post_norm"] = json_number(report.local_post_norm[static_cast<Eigen::Index>(g)]);
    Json rows = Json::array();
    for (std::size_t j = 0; j < report.feature_names.size(); ++j) {
      Json row;
      row["feature"] = report.feature_names[j];
      row["pre"] = json_number(report.local_pre(static_cast<Eigen::Index>(g),
                                                static_cast<Eigen::Index>(j)));
      row["post"] = json_number(report.local_post(static_cast<Eigen::Index>(g),
                                                  static_cast<Eigen::Index>(j)));
      rows.push_back(std::move(row));
    }
    s["features"] = std::move(rows);
    local.push_back(std::move(s));
  }
  out["local"] = std::move(local);
  return out;
}

Json overlap_json(const OverlapReport& report) {
  Json out;
  Json strata = Json::array();
  for (std::size_t g = 0; g < report.stratum_labels.size(); ++g) {
    Json s;
    s["stratum"] = report.stratum_labels[g];
    s["ess"] = json_number(report.ess[static_cast<Eigen::Index>(g)]);
    s["fraction_above_threshold"] =
        json_number(report.fraction_above_threshold[static_cast<Eigen::Index>(g)]);
    s["max_normalized_weight"] =
        json_number(report.max_normalized_weight[static_cast<Eigen::Index>(g)]);
    strata.push_back(std::move(s));
  }
  out["strata"] = std::move(strata);
  out["ess_overall"] = json_number(report.ess_overall);
  out["fraction_above_threshold_overall"] =
      json_number(report.fraction_above_threshold_overall);
  Json hist;
  hist["edges"] = report.histogram_edges;
  hist["counts"] = report.histogram_counts;
  hist["zero_weights"] = report.zero_weight_count;
  out["histogram"] = std::move(hist);
  return out;
}

Json estimates_json(const EstimateTable& table) {
  Json rows = Json::array();
  for (const auto& r : table.rows) {
    Json row;
    row["level"] = r.level;
    row["group"] = r.group;
    row["mu1"] = json_number(r.mu1);
    row["mu0"] = json_number(r.mu0);
    row["tau"] = json_number(r.tau);
    row["se"] = json_number(r.se);
    row["n_treated"] = r.n_treated;
    rows.push_back(std::move(row));
  }
  Json out;
  out["estimates"] = std::move(rows);
  return out;
}

Json sweep_json(const std::vector<SweepPoint>& points) {
  Json arr = Json::array();
  for (const auto& point : points) {
    Json row;
    row["lambda"] = json_number(point.lambda);
    row["local_imbalance"] = json_number(point.local_imbalance_norm);
    row["global_imbalance"] = json_number(point.global_imbalance_norm);
    row["ess"] = json_number(point.ess_overall);
    row["converged"] = point.converged;
    arr.push_back(std::move(row));
  }
  Json out;
  out["sweep"] = std::move(arr);
  return out;
}

Json sensitivity_json(const std::vector<SensitivityBounds>& bounds) {
  Json arr = Json::array();
  for (const auto& b : bounds) {
    Json row;
    row["target"] = b.target;
    row["lambda"] = json_number(b.lambda);
    row["tau_min"] = json_number(b.tau_min);
    row["tau_max"] = json_number(b.tau_max);
    row["ci_lower"] = json_number(b.ci_lower);
    row["ci_upper"] = json_number(b.ci_upper);
    row["bootstrap_reps"] = b.bootstrap_reps;
    row["dropped_reps"] = b.dropped_reps;
    arr.push_back(std::move(row));
  }
  Json out;
  out["bounds"] = std::move(arr);
  return out;
}

Json simulation_json(const SimResult& result, bool include_records) {
  Json out;
  Json cfg;
  cfg["n"] = result.config.n;
  cfg["d"] = result.config.d;
  cfg["groups"] = result.config.groups;
  cfg["replicates"] = result.config.replicates;
  cfg["seed"] = result.config.seed;
  cfg["use_raw_covariates"] = result.config.use_raw_covariates;
  out["config"] = std::move(cfg);
  Json metrics = Json::array();
  for (const auto& m : result.metrics) {
    Json row;
    row["estimator"] = m.estimator;
    row["subgroup_mab"] = json_number(m.subgroup_mab);
    row["subgroup_rmse"] = json_number(m.subgroup_rmse);
    row["overall_abs_bias"] = json_number(m.overall_abs_bias);
    row["overall_rmse"] = json_number(m.overall_rmse);
    row["subgroup_coverage"] = json_number(m.subgroup_coverage);
    row["overall_coverage"] = json_number(m.overall_coverage);
    row["failures"] = m.failures;
    metrics.push_back(std::move(row));
  }
  out["metrics"] = std::move(metrics);
  if (include_records) {
    Json records = Json::array();
    for (const auto& rec : result.records) {
      Json row;
      row["replicate"] = rec.replicate;
      row["estimator"] = rec.estimator;
      row["failed"] = rec.failed;
      if (rec.failed) {
        row["failure"] = rec.failure;
      } else {
        row["group_ids"] = rec.group_ids;
        Json est = Json::array(), ses = Json::array(), truths = Json::array();
        for (double v : rec.estimates) est.push_back(json_number(v));
        for (double v : rec.ses) ses.push_back(json_number(v));
        for (double v : rec.truths) truths.push_back(json_number(v));
        row["estimates"] = std::move(est);
        row["ses"] = std::move(ses);
        row["truths"] = std::move(truths);
        row["overall_estimate"] = json_number(rec.overall_estimate);
        row["overall_se"] = json_number(rec.overall_se);
        row["overall_truth"] = json_number(rec.overall_truth);
      }
      records.push_back(std::move(row));
    }
    out["records"] = std::move(records);
  }
  return out;
}

namespace {

void csv_row(std::ostringstream& out, const std::vector<std::string>& cells) {
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (k > 0) out << ',';
    const std::string& cell = cells[k];
    if (cell.find_first_of(",\"\n") != std::string::npos) {
      out << '"';
      for (char c : cell) {
        if (c == '"') out << '"';
        out << c;
      }
      out << '"';
    } else {
      out << cell;
    }
  }
  out << '\n';
}

}  // namespace

std::string estimates_csv(const EstimateTable& table) {
  std::ostringstream out;
  csv_row(out, {"level", "group", "mu1", "mu0", "tau", "se", "n_treated"});
  for (const auto& r : table.rows) {
    csv_row(out, {r.level, r.group, format_double(r.mu1), format_double(r.mu0),
                  format_double(r.tau), format_double(r.se),
                  std::to_string(r.n_treated)});
  }
  return out.str();
}

std::string balance_csv(const BalanceReport& report) {
  std::ostringstream out;
  csv_row(out, {"scope", "feature", "pre", "post"});
  for (std::size_t j = 0; j < report.feature_names.size(); ++j) {
    csv_row(out, {"global", report.feature_names[j],
                  format_double(report.global_pre[static_cast<Eigen::Index>(j)]),
                  format_double(report.global_post[static_cast<Eigen::Index>(j)])});
  }
  for (std::size_t g = 0; g < report.stratum_labels.size(); ++g) {
    for (std::size_t j = 0; j < report.feature_names.size(); ++j) {
      csv_row(out,
              {report.stratum_labels[g], report.feature_names[j],
               format_double(report.local_pre(static_cast<Eigen::Index>(g),
                                              static_cast<Eigen::Index>(j))),
               format_double(report.local_post(static_cast<Eigen::Index>(g),
                                               static_cast<Eigen::Index>(j)))});
    }
  }
  return out.str();
}

std::string overlap_csv(const OverlapReport& report) {
  std::ostringstream out;
  csv_row(out, {"stratum", "ess", "fraction_above_threshold",
                "max_normalized_weight"});
  for (std::size_t g = 0; g < report.stratum_labels.size(); ++g) {
    csv_row(out, {report.stratum_labels[g],
                  format_double(report.ess[static_cast<Eigen::Index>(g)]),
                  format_double(report.fraction_above_threshold[static_cast<Eigen::Index>(g)]),
                  format_double(report.max_normalized_weight[static_cast<Eigen::Index>(g)])});
  }
  csv_row(out, {"overall", format_double(report.ess_overall),
                format_double(report.fraction_above_threshold_overall), ""});
  return out.str();
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream out;
  csv_row(out, {"lambda", "local_imbalance", "global_imbalance", "ess",
                "converged"});
  for (const auto& point : points) {
    csv_row(out, {format_double(point.lambda),
                  format_double(point.local_imbalance_norm),
                  format_double(point.global_imbalance_norm),
                  format_double(point.ess_overall),
                  point.converged ? "1" : "0"});
  }
  return out.str();
}

std::string simulation_csv(const SimResult& result) {
  std::ostringstream out;
  csv_row(out, {"estimator", "subgroup_mab", "subgroup_rmse",
                "overall_abs_bias", "overall_rmse", "subgroup_coverage",
                "overall_coverage", "failures"});
  for (const auto& m : result.metrics) {
    csv_row(out, {m.estimator, format_double(m.subgroup_mab),
                  format_double(m.subgroup_rmse),
                  format_double(m.overall_abs_bias),
                  format_double(m.overall_rmse),
                  format_double(m.subgroup_coverage),
                  format_double(m.overall_coverage),
                  std::to_string(m.failures)});
  }
  return out.str();
}

std::string replicates_csv(const SimResult& result) {
  std::ostringstream out;
  csv_row(out, {"replicate", "estimator", "group", "estimate", "se", "truth"});
  for (const auto& rec : result.records) {
    if (rec.failed) {
      csv_row(out, {std::to_string(rec.replicate), rec.estimator, "failed", "",
                    "", ""});
      continue;
    }
    for (std::size_t k = 0; k < rec.group_ids.size(); ++k) {
      csv_row(out, {std::to_string(rec.replicate), rec.estimator,
                    std::to_string(rec.group_ids[k]),
                    format_double(rec.estimates[k]), format_double(rec.ses[k]),
                    format_double(rec.truths[k])});
    }
    csv_row(out, {std::to_string(rec.replicate), rec.estimator, "overall",
                  format_double(rec.overall_estimate),
                  format_double(rec.overall_se),
                  format_double(rec.overall_truth)});
  }
  return out.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write \"" + path + "\"");
  out << content;
}

}  // namespace poolbal
