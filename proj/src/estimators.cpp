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

#include "poolbal/estimators.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "poolbal/rng.hpp"

namespace poolbal {

namespace {

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Stratum members for each level of a grouping, levels in sorted order.
std::vector<std::pair<std::string, std::vector<int>>> resolve_levels(
    const AnalysisSample& sample, const Grouping& grouping) {
  std::map<std::string, std::vector<int>> members;
  for (int g = 0; g < sample.n_strata(); ++g) {
    const std::string& label = sample.stratum_labels()[static_cast<std::size_t>(g)];
    auto it = grouping.stratum_to_level.find(label);
    if (it == grouping.stratum_to_level.end()) {
      throw ConfigError("grouping \"" + grouping.name +
                        "\" has no level for stratum \"" + label + "\"");
    }
    members[it->second].push_back(g);
  }
  return {members.begin(), members.end()};
}

// Round-robin fold assignment within stratum-by-treatment cells after a
// seeded shuffle, so each training split keeps every cell populated when the
// cell has at least `folds` members.
std::vector<int> stratified_folds(const AnalysisSample& sample,
                                  const std::vector<int>& rows, int folds,
                                  std::uint64_t seed) {
  std::vector<int> fold_of(rows.size());
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const int row = rows[k];
    cells[{sample.stratum(row), sample.treated(row) ? 1 : 0}].push_back(k);
  }
  std::mt19937_64 rng = make_stream(seed, 0, stage::kCrossValidation);
  int next = 0;
  for (auto& [cell, indices] : cells) {
    std::shuffle(indices.begin(), indices.end(), rng);
    for (std::size_t j = 0; j < indices.size(); ++j) {
      fold_of[indices[j]] = next;
      next = (next + 1) % folds;
    }
  }
  return fold_of;
}

}  // namespace

const EstimateRow* EstimateTable::find(const std::string& level,
                                       const std::string& group) const {
  for (const auto& row : rows) {
    if (row.level == level && row.group == group) return &row;
  }
  return nullptr;
}

EstimateTable weighted_means(const WeightSolution& solution,
                             const AnalysisSample& sample,
                             const Eigen::VectorXd& outcomes,
                             const std::vector<Grouping>& groupings) {
  if (outcomes.size() != sample.n()) {
    throw ValidationError("outcome length mismatch");
  }
  const int K = sample.n_strata();
  std::vector<double> mu1(static_cast<std::size_t>(K)), mu0(static_cast<std::size_t>(K));
  EstimateTable table;
  for (int g = 0; g < K; ++g) {
    const double n1g = static_cast<double>(sample.n_treated(g));
    double t = 0.0;
    for (int row : sample.treated_rows(g)) t += outcomes[row];
    double c = 0.0;
    for (int row : sample.control_rows(g)) {
      c += solution.gamma[row] * outcomes[row];
    }
    mu1[static_cast<std::size_t>(g)] = t / n1g;
    mu0[static_cast<std::size_t>(g)] = c / n1g;
    EstimateRow r;
    r.level = "stratum";
    r.group = sample.stratum_labels()[static_cast<std::size_t>(g)];
    r.mu1 = mu1[static_cast<std::size_t>(g)];
    r.mu0 = mu0[static_cast<std::size_t>(g)];
    r.tau = r.mu1 - r.mu0;
    r.n_treated = sample.n_treated(g);
    table.rows.push_back(r);
  }

  auto aggregate = [&](const std::string& level, const std::string& group,
                       const std::vector<int>& strata) {
    double n1 = 0.0;
    for (int g : strata) n1 += static_cast<double>(sample.n_treated(g));
    EstimateRow r;
    r.level = level;
    r.group = group;
    // tau accumulates the per-stratum contrasts directly so the aggregate
    // equals the treated-count weighted sum of stratum effects bit for bit.
    for (int g : strata) {
      const double w = static_cast<double>(sample.n_treated(g)) / n1;
      r.mu1 += w * mu1[static_cast<std::size_t>(g)];
      r.mu0 += w * mu0[static_cast<std::size_t>(g)];
      r.tau += w * (mu1[static_cast<std::size_t>(g)] - mu0[static_cast<std::size_t>(g)]);
      r.n_treated += sample.n_treated(g);
    }
    table.rows.push_back(r);
  };

  for (const auto& grouping : groupings) {
    for (const auto& [level, strata] : resolve_levels(sample, grouping)) {
      aggregate(grouping.name, level, strata);
    }
  }
  std::vector<int> all(static_cast<std::size_t>(K));
  std::iota(all.begin(), all.end(), 0);
  aggregate("overall", "all", all);
  return table;
}

Eigen::VectorXd sandwich_variances(const WeightSolution& solution,
                                   const AnalysisSample& sample,
                                   const Eigen::VectorXd& outcomes,
                                   ResidualSource source,
                                   const OutcomeModel* model,
                                   const FeatureMatrix* features) {
  if (source == ResidualSource::outcome_model && (!model || !features)) {
    throw ConfigError("outcome-model residuals need a model and features");
  }
  const int K = sample.n_strata();
  Eigen::VectorXd variances(K);
  for (int g = 0; g < K; ++g) {
    const double n1g = static_cast<double>(sample.n_treated(g));
    double mu1 = 0.0;
    for (int row : sample.treated_rows(g)) mu1 += outcomes[row];
    mu1 /= n1g;
    double treated_ss = 0.0;
    for (int row : sample.treated_rows(g)) {
      const double e = outcomes[row] - mu1;
      treated_ss += e * e;
    }
    double mu0 = 0.0;
    if (source == ResidualSource::weighted_mean) {
      for (int row : sample.control_rows(g)) {
        mu0 += solution.gamma[row] * outcomes[row];
      }
      mu0 /= n1g;
    }
    double control_ss = 0.0;
    for (int row : sample.control_rows(g)) {
      const double center =
          source == ResidualSource::weighted_mean
              ? mu0
              : model->predict(features->values.row(row), g);
      const double e = outcomes[row] - center;
      control_ss += solution.gamma[row] * solution.gamma[row] * e * e;
    }
    variances[g] = (treated_ss + control_ss) / (n1g * n1g);
  }
  return variances;
}

void apply_sandwich_se(EstimateTable& table, const AnalysisSample& sample,
                       const Eigen::VectorXd& stratum_variances,
                       const std::vector<Grouping>& groupings) {
  std::map<std::string, int> id_of;
  for (int g = 0; g < sample.n_strata(); ++g) {
    id_of[sample.stratum_labels()[static_cast<std::size_t>(g)]] = g;
  }
  std::map<std::pair<std::string, std::string>, std::vector<int>> members;
  for (const auto& grouping : groupings) {
    for (const auto& [level, strata] : resolve_levels(sample, grouping)) {
      members[{grouping.name, level}] = strata;
    }
  }
  std::vector<int> all(static_cast<std::size_t>(sample.n_strata()));
  std::iota(all.begin(), all.end(), 0);
  members[{"overall", "all"}] = all;

  for (auto& row : table.rows) {
    if (row.level == "stratum") {
      row.se = std::sqrt(stratum_variances[id_of.at(row.group)]);
      continue;
    }
    auto it = members.find({row.level, row.group});
    if (it == members.end()) continue;
    double n1 = 0.0;
    for (int g : it->second) n1 += static_cast<double>(sample.n_treated(g));
    double var = 0.0;
    for (int g : it->second) {
      const double w = static_cast<double>(sample.n_treated(g)) / n1;
      var += w * w * stratum_variances[g];
    }
    row.se = std::sqrt(var);
  }
}

double PropensityModel::linear_predictor(const Eigen::RowVectorXd& phi,
                                         int g) const {
  double eta = intercepts[g] + phi.dot(shared_slope);
  if (mode == PropensityMode::full_interaction) {
    eta += phi.dot(deviations.row(g));
  }
  return eta;
}

double PropensityModel::probability(const Eigen::RowVectorXd& phi,
                                    int g) const {
  return sigmoid(linear_predictor(phi, g));
}

namespace {

// Shared machinery for the hierarchical penalized fits. Parameters are laid
// out as [intercepts (K) | shared slope (p) | deviations (K*p, optional)].
struct HierarchicalFit {
  int K = 0;
  int p = 0;
  bool with_deviations = true;

  int dim() const { return K + p + (with_deviations ? K * p : 0); }
  int shared_offset() const { return K; }
  int deviation_offset(int g) const { return K + p + g * p; }
};

// One damped Newton pass for the ridge logistic model. rows lists the
// training units. Returns the penalized mean log-loss at the final iterate.
void logistic_newton(const HierarchicalFit& layout,
                     const FeatureMatrix& features,
                     const AnalysisSample& sample,
                     const std::vector<int>& rows, double penalty,
                     Eigen::VectorXd& params, int max_iterations) {
  const int K = layout.K;
  const int p = layout.p;
  const int q = layout.with_deviations ? 1 + p : 1;  // local block size
  const double n = static_cast<double>(rows.size());

  std::vector<std::vector<int>> by_stratum(static_cast<std::size_t>(K));
  for (int row : rows) {
    by_stratum[static_cast<std::size_t>(sample.stratum(row))].push_back(row);
  }

  auto objective = [&](const Eigen::VectorXd& theta) {
    double obj = 0.0;
    for (int g = 0; g < K; ++g) {
      const double a = theta[g];
      Eigen::VectorXd slope = theta.segment(layout.shared_offset(), p);
      if (layout.with_deviations) {
        slope += theta.segment(layout.deviation_offset(g), p);
      }
      for (int row : by_stratum[static_cast<std::size_t>(g)]) {
        const double eta = a + features.values.row(row).dot(slope);
        const double y = sample.treated(row) ? 1.0 : 0.0;
        obj += softplus(eta) - y * eta;
      }
    }
    obj /= n;
    obj += 0.5 * penalty *
           theta.segment(layout.shared_offset(), p).squaredNorm();
    if (layout.with_deviations) {
      for (int g = 0; g < K; ++g) {
        obj += 0.5 * penalty *
               theta.segment(layout.deviation_offset(g), p).squaredNorm();
      }
    }
    return obj;
  };

  double obj = objective(params);
  Eigen::VectorXd grad(layout.dim());
  std::vector<Eigen::MatrixXd> L(static_cast<std::size_t>(K));
  std::vector<Eigen::MatrixXd> M(static_cast<std::size_t>(K));
  std::vector<Eigen::VectorXd> gloc(static_cast<std::size_t>(K));
  Eigen::MatrixXd H_ss(p, p);
  Eigen::VectorXd delta(layout.dim());

  for (int iter = 0; iter < max_iterations; ++iter) {
    grad.setZero();
    H_ss.setZero();
    auto gs = grad.segment(layout.shared_offset(), p);
    for (int g = 0; g < K; ++g) {
      const double a = params[g];
      Eigen::VectorXd slope = params.segment(layout.shared_offset(), p);
      if (layout.with_deviations) {
        slope += params.segment(layout.deviation_offset(g), p);
      }
      double A = 0.0;
      Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
      Eigen::MatrixXd C = Eigen::MatrixXd::Zero(p, p);
      double ga = 0.0;
      Eigen::VectorXd gslope = Eigen::VectorXd::Zero(p);
      for (int row : by_stratum[static_cast<std::size_t>(g)]) {
        const auto phi = features.values.row(row);
        const double eta = a + phi.dot(slope);
        const double y = sample.treated(row) ? 1.0 : 0.0;
        const double prob = sigmoid(eta);
        const double resid = (prob - y) / n;
        const double w = prob * (1.0 - prob) / n;
        ga += resid;
        gslope += resid * phi.transpose();
        A += w;
        b += w * phi.transpose();
        C.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose(), w);
      }
      C.triangularView<Eigen::StrictlyUpper>() =
          C.transpose().triangularView<Eigen::StrictlyUpper>();
      grad[g] = ga;
      gs += gslope;
      H_ss += C;

      auto& Lg = L[static_cast<std::size_t>(g)];
      auto& Mg = M[static_cast<std::size_t>(g)];
      auto& gg = gloc[static_cast<std::size_t>(g)];
      Lg.resize(q, q);
      Mg.resize(q, p);
      gg.resize(q);
      Lg(0, 0) = A + 1e-12;
      Mg.row(0) = b.transpose();
      gg[0] = ga;
      if (layout.with_deviations) {
        Lg.block(0, 1, 1, p) = b.transpose();
        Lg.block(1, 0, p, 1) = b;
        Lg.block(1, 1, p, p) =
            C + penalty * Eigen::MatrixXd::Identity(p, p);
        Mg.block(1, 0, p, p) = C;
        const auto dev = params.segment(layout.deviation_offset(g), p);
        gg.segment(1, p) = gslope + penalty * dev;
        grad.segment(layout.deviation_offset(g), p) = gg.segment(1, p);
      }
    }
    gs += penalty * params.segment(layout.shared_offset(), p);
    H_ss += penalty * Eigen::MatrixXd::Identity(p, p);

    if (grad.norm() <= 1e-8) return;

    // Schur elimination of the per-stratum blocks.
    Eigen::MatrixXd S = H_ss;
    Eigen::VectorXd rhs = -gs;
    std::vector<Eigen::LDLT<Eigen::MatrixXd>> facts;
    facts.reserve(static_cast<std::size_t>(K));
    for (int g = 0; g < K; ++g) {
      facts.emplace_back(L[static_cast<std::size_t>(g)]);
      const Eigen::MatrixXd LiM = facts.back().solve(M[static_cast<std::size_t>(g)]);
      S.noalias() -= M[static_cast<std::size_t>(g)].transpose() * LiM;
      rhs.noalias() += M[static_cast<std::size_t>(g)].transpose() *
                       facts.back().solve(gloc[static_cast<std::size_t>(g)]);
    }
    Eigen::VectorXd ds = Eigen::LDLT<Eigen::MatrixXd>(S).solve(rhs);
    delta.segment(layout.shared_offset(), p) = ds;
    for (int g = 0; g < K; ++g) {
      Eigen::VectorXd dloc = -facts[static_cast<std::size_t>(g)].solve(
          gloc[static_cast<std::size_t>(g)] + M[static_cast<std::size_t>(g)] * ds);
      delta[g] = dloc[0];
      if (layout.with_deviations) {
        delta.segment(layout.deviation_offset(g), p) = dloc.segment(1, p);
      }
    }

    const double slope = grad.dot(delta);
    double t = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h) {
      const double cand = objective(params + t * delta);
      if (cand <= obj + 1e-4 * t * slope) {
        params += t * delta;
        obj = cand;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) return;
  }
}

double logistic_loss(const HierarchicalFit& layout,
                     const FeatureMatrix& features,
                     const AnalysisSample& sample, const std::vector<int>& rows,
                     const Eigen::VectorXd& params) {
  double loss = 0.0;
  for (int row : rows) {
    const int g = sample.stratum(row);
    double slope_dot = features.values.row(row).dot(
        params.segment(layout.shared_offset(), layout.p));
    if (layout.with_deviations) {
      slope_dot += features.values.row(row).dot(
          params.segment(layout.deviation_offset(g), layout.p));
    }
    const double eta = params[g] + slope_dot;
    const double y = sample.treated(row) ? 1.0 : 0.0;
    loss += softplus(eta) - y * eta;
  }
  return loss / static_cast<double>(rows.size());
}

}  // namespace

PropensityModel fit_propensity(const FeatureMatrix& features,
                               const AnalysisSample& sample,
                               PropensityMode mode,
                               std::vector<double> penalty_grid, int folds,
                               std::uint64_t seed) {
  if (penalty_grid.empty()) {
    penalty_grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  }
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");

  HierarchicalFit layout;
  layout.K = sample.n_strata();
  layout.p = features.p();
  layout.with_deviations = mode == PropensityMode::full_interaction;

  std::vector<int> all_rows(static_cast<std::size_t>(sample.n()));
  std::iota(all_rows.begin(), all_rows.end(), 0);

  double best_penalty = penalty_grid.front();
  if (penalty_grid.size() > 1) {
    const std::vector<int> fold_of =
        stratified_folds(sample, all_rows, folds, seed);
    std::vector<double> scores(penalty_grid.size(), 0.0);
    for (int fold = 0; fold < folds; ++fold) {
      std::vector<int> train, val;
      for (std::size_t k = 0; k < all_rows.size(); ++k) {
        (fold_of[k] == fold ? val : train).push_back(all_rows[k]);
      }
      if (val.empty()) continue;
      Eigen::VectorXd params = Eigen::VectorXd::Zero(layout.dim());
      for (std::size_t pi = 0; pi < penalty_grid.size(); ++pi) {
        logistic_newton(layout, features, sample, train, penalty_grid[pi],
                        params, 60);
        scores[pi] += logistic_loss(layout, features, sample, val, params);
      }
    }
    double best = scores[0];
    for (std::size_t pi = 1; pi < penalty_grid.size(); ++pi) {
      if (scores[pi] < best) {
        best = scores[pi];
        best_penalty = penalty_grid[pi];
      }
    }
  }

  Eigen::VectorXd params = Eigen::VectorXd::Zero(layout.dim());
  logistic_newton(layout, features, sample, all_rows, best_penalty, params,
                  200);

  PropensityModel model;
  model.mode = mode;
  model.penalty = best_penalty;
  model.intercepts = params.head(layout.K);
  model.shared_slope = params.segment(layout.shared_offset(), layout.p);
  model.deviations = Eigen::MatrixXd::Zero(layout.K, layout.p);
  if (layout.with_deviations) {
    for (int g = 0; g < layout.K; ++g) {
      model.deviations.row(g) =
          params.segment(layout.deviation_offset(g), layout.p);
    }
  }
  return model;
}

WeightSolution ipw_weights(const PropensityModel& model,
                           const FeatureMatrix& features,
                           const AnalysisSample& sample, bool hajek) {
  WeightSolution solution;
  solution.gamma = Eigen::VectorXd::Zero(sample.n());
  const int K = sample.n_strata();
  for (int g = 0; g < K; ++g) {
    double sum = 0.0;
    for (int row : sample.control_rows(g)) {
      const double prob = model.probability(features.values.row(row), g);
      if (prob >= 1.0) {
        throw OverlapError("propensity of 1 on control row " +
                           std::to_string(row) + " in stratum \"" +
                           sample.stratum_labels()[static_cast<std::size_t>(g)] +
                           "\"");
      }
      const double odds = prob / (1.0 - prob);
      solution.gamma[row] = odds;
      sum += odds;
    }
    if (hajek) {
      if (sum <= 0.0) {
        throw ValidationError(
            "zero total odds among controls in stratum \"" +
            sample.stratum_labels()[static_cast<std::size_t>(g)] + "\"");
      }
      const double scale = static_cast<double>(sample.n_treated(g)) / sum;
      for (int row : sample.control_rows(g)) solution.gamma[row] *= scale;
    }
  }
  solution.converged = true;

  const int p = features.p();
  solution.local_imbalance.resize(K, p);
  for (int g = 0; g < K; ++g) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(p);
    for (int row : sample.treated_rows(g)) {
      e -= features.values.row(row).transpose();
    }
    for (int row : sample.control_rows(g)) {
      e += solution.gamma[row] * features.values.row(row).transpose();
    }
    solution.local_imbalance.row(g) = e;
  }
  solution.global_imbalance = solution.local_imbalance.colwise().sum();
  return solution;
}

double RidgeOutcomeModel::predict(const Eigen::RowVectorXd& phi, int g) const {
  return intercepts[g] + phi.dot(shared_slope) + phi.dot(deviations.row(g));
}

namespace {

// Closed-form hierarchical ridge on the given control rows. The deviation
// blocks carry the penalty; intercepts and the shared slope do not.
void ridge_solve(const FeatureMatrix& features, const AnalysisSample& sample,
                 const Eigen::VectorXd& outcomes, const std::vector<int>& rows,
                 double penalty, RidgeOutcomeModel& model) {
  const int K = sample.n_strata();
  const int p = features.p();
  const int q = 1 + p;
  const double n = static_cast<double>(rows.size());

  std::vector<std::vector<int>> by_stratum(static_cast<std::size_t>(K));
  for (int row : rows) {
    by_stratum[static_cast<std::size_t>(sample.stratum(row))].push_back(row);
  }

  Eigen::MatrixXd H_ss = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd r_s = Eigen::VectorXd::Zero(p);
  std::vector<Eigen::MatrixXd> L(static_cast<std::size_t>(K));
  std::vector<Eigen::MatrixXd> M(static_cast<std::size_t>(K));
  std::vector<Eigen::VectorXd> r_loc(static_cast<std::size_t>(K));

  for (int g = 0; g < K; ++g) {
    double A = 1e-12;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(p, p);
    double ry = 0.0;
    Eigen::VectorXd rphi = Eigen::VectorXd::Zero(p);
    for (int row : by_stratum[static_cast<std::size_t>(g)]) {
      const auto phi = features.values.row(row);
      const double w = 1.0 / n;
      A += w;
      b += w * phi.transpose();
      C.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose(), w);
      ry += w * outcomes[row];
      rphi += w * outcomes[row] * phi.transpose();
    }
    C.triangularView<Eigen::StrictlyUpper>() =
        C.transpose().triangularView<Eigen::StrictlyUpper>();
    H_ss += C;
    r_s += rphi;
    auto& Lg = L[static_cast<std::size_t>(g)];
    auto& Mg = M[static_cast<std::size_t>(g)];
    auto& rg = r_loc[static_cast<std::size_t>(g)];
    Lg.resize(q, q);
    Mg.resize(q, p);
    rg.resize(q);
    Lg(0, 0) = A;
    Lg.block(0, 1, 1, p) = b.transpose();
    Lg.block(1, 0, p, 1) = b;
    Lg.block(1, 1, p, p) = C + penalty * Eigen::MatrixXd::Identity(p, p);
    Mg.row(0) = b.transpose();
    Mg.block(1, 0, p, p) = C;
    rg[0] = ry;
    rg.segment(1, p) = rphi;
  }
  H_ss += 1e-12 * Eigen::MatrixXd::Identity(p, p);

  Eigen::MatrixXd S = H_ss;
  Eigen::VectorXd rhs = r_s;
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> facts;
  facts.reserve(static_cast<std::size_t>(K));
  for (int g = 0; g < K; ++g) {
    facts.emplace_back(L[static_cast<std::size_t>(g)]);
    S.noalias() -= M[static_cast<std::size_t>(g)].transpose() *
                   facts.back().solve(M[static_cast<std::size_t>(g)]);
    rhs.noalias() -= M[static_cast<std::size_t>(g)].transpose() *
                     facts.back().solve(r_loc[static_cast<std::size_t>(g)]);
  }
  const Eigen::VectorXd s = Eigen::LDLT<Eigen::MatrixXd>(S).solve(rhs);

  model.shared_slope = s;
  model.intercepts.resize(K);
  model.deviations.resize(K, p);
  for (int g = 0; g < K; ++g) {
    const Eigen::VectorXd loc = facts[static_cast<std::size_t>(g)].solve(
        r_loc[static_cast<std::size_t>(g)] - M[static_cast<std::size_t>(g)] * s);
    model.intercepts[g] = loc[0];
    model.deviations.row(g) = loc.segment(1, p);
  }
  model.penalty = penalty;
}

}  // namespace

RidgeOutcomeModel fit_outcome_ridge(const FeatureMatrix& features,
                                    const AnalysisSample& sample,
                                    const Eigen::VectorXd& outcomes,
                                    std::vector<double> penalty_grid, int folds,
                                    std::uint64_t seed) {
  if (penalty_grid.empty()) {
    penalty_grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  }
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");

  std::vector<int> controls;
  for (int i = 0; i < sample.n(); ++i) {
    if (!sample.treated(i)) controls.push_back(i);
  }

  double best_penalty = penalty_grid.front();
  if (penalty_grid.size() > 1) {
    const std::vector<int> fold_of =
        stratified_folds(sample, controls, folds, seed);
    std::vector<double> scores(penalty_grid.size(), 0.0);
    for (int fold = 0; fold < folds; ++fold) {
      std::vector<int> train, val;
      for (std::size_t k = 0; k < controls.size(); ++k) {
        (fold_of[k] == fold ? val : train).push_back(controls[k]);
      }
      if (val.empty() || train.empty()) continue;
      for (std::size_t pi = 0; pi < penalty_grid.size(); ++pi) {
        RidgeOutcomeModel m;
        ridge_solve(features, sample, outcomes, train, penalty_grid[pi], m);
        double mse = 0.0;
        for (int row : val) {
          const double e =
              outcomes[row] - m.predict(features.values.row(row),
                                        sample.stratum(row));
          mse += e * e;
        }
        scores[pi] += mse / static_cast<double>(val.size());
      }
    }
    double best = scores[0];
    for (std::size_t pi = 1; pi < penalty_grid.size(); ++pi) {
      if (scores[pi] < best) {
        best = scores[pi];
        best_penalty = penalty_grid[pi];
      }
    }
  }

  RidgeOutcomeModel model;
  ridge_solve(features, sample, outcomes, controls, best_penalty, model);
  return model;
}

AugmentResult augment(const EstimateTable& estimates,
                      const WeightSolution& solution, const OutcomeModel& model,
                      const FeatureMatrix& features,
                      const AnalysisSample& sample,
                      const Eigen::VectorXd& outcomes,
                      const std::vector<Grouping>& groupings) {
  const int K = sample.n_strata();
  // Shift added to each stratum's imputed control mean: the model-predicted
  // gap between treated units and the weighted controls.
  Eigen::VectorXd shift(K);
  for (int g = 0; g < K; ++g) {
    const double n1g = static_cast<double>(sample.n_treated(g));
    double t = 0.0;
    for (int row : sample.treated_rows(g)) {
      t += model.predict(features.values.row(row), g);
    }
    double c = 0.0;
    for (int row : sample.control_rows(g)) {
      c += solution.gamma[row] * model.predict(features.values.row(row), g);
    }
    shift[g] = (t - c) / n1g;
  }

  std::map<std::string, int> id_of;
  for (int g = 0; g < K; ++g) {
    id_of[sample.stratum_labels()[static_cast<std::size_t>(g)]] = g;
  }

  AugmentResult result;
  result.bias_correction = shift;
  result.table = estimates;
  // Stratum rows take the shift directly; aggregates recombine by treated
  // counts as in weighted_means.
  std::vector<double> mu0(static_cast<std::size_t>(K), 0.0);
  for (auto& row : result.table.rows) {
    if (row.level != "stratum") continue;
    const int g = id_of.at(row.group);
    row.mu0 += shift[g];
    row.tau = row.mu1 - row.mu0;
    mu0[static_cast<std::size_t>(g)] = row.mu0;
  }
  std::map<std::pair<std::string, std::string>, std::vector<int>> members;
  for (const auto& grouping : groupings) {
    for (const auto& [level, strata] : resolve_levels(sample, grouping)) {
      members[{grouping.name, level}] = strata;
    }
  }
  std::vector<int> all(static_cast<std::size_t>(K));
  std::iota(all.begin(), all.end(), 0);
  members[{"overall", "all"}] = all;
  for (auto& row : result.table.rows) {
    if (row.level == "stratum") continue;
    auto it = members.find({row.level, row.group});
    if (it == members.end()) continue;
    double n1 = 0.0;
    for (int g : it->second) n1 += static_cast<double>(sample.n_treated(g));
    double agg = 0.0;
    for (int g : it->second) {
      agg += static_cast<double>(sample.n_treated(g)) / n1 *
             mu0[static_cast<std::size_t>(g)];
    }
    row.mu0 = agg;
    row.tau = row.mu1 - row.mu0;
  }

  const Eigen::VectorXd variances =
      sandwich_variances(solution, sample, outcomes,
                         ResidualSource::outcome_model, &model, &features);
  apply_sandwich_se(result.table, sample, variances, groupings);
  return result;
}

EstimateTable linear_regression_baseline(const FeatureMatrix& features,
                                         const AnalysisSample& sample,
                                         const Eigen::VectorXd& outcomes,
                                         RegressionInteraction interaction,
                                         const Grouping* grouping) {
  const int n = sample.n();
  const int p = features.p();

  std::vector<std::pair<std::string, std::vector<int>>> levels;
  if (interaction == RegressionInteraction::by_grouping) {
    if (grouping) {
      levels = resolve_levels(sample, *grouping);
    } else {
      for (int g = 0; g < sample.n_strata(); ++g) {
        levels.emplace_back(sample.stratum_labels()[static_cast<std::size_t>(g)],
                            std::vector<int>{g});
      }
    }
  }
  const int n_treat_cols =
      interaction == RegressionInteraction::none
          ? 1
          : static_cast<int>(levels.size());
  const int k = 1 + n_treat_cols + p;

  std::vector<int> level_of_stratum(static_cast<std::size_t>(sample.n_strata()), 0);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (int g : levels[l].second) level_of_stratum[static_cast<std::size_t>(g)] = static_cast<int>(l);
  }

  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, k);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    if (sample.treated(i)) {
      const int col = interaction == RegressionInteraction::none
                          ? 1
                          : 1 + level_of_stratum[static_cast<std::size_t>(sample.stratum(i))];
      X(i, col) = 1.0;
    }
    X.block(i, 1 + n_treat_cols, 1, p) = features.values.row(i);
  }

  if (interaction == RegressionInteraction::by_grouping) {
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (X.col(1 + static_cast<Eigen::Index>(l)).sum() == 0.0) {
        throw ValidationError("no treated units in level \"" +
                              levels[l].first +
                              "\"; its effect is not identified");
      }
    }
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < k) {
    throw ValidationError(
        "rank-deficient regression design: a treatment column is collinear "
        "with the covariates");
  }
  const Eigen::VectorXd coef = qr.solve(outcomes);
  const Eigen::VectorXd resid = outcomes - X * coef;

  // Heteroskedasticity-robust covariance with the n/(n-k) small-sample
  // scaling.
  const Eigen::MatrixXd xtx = X.transpose() * X;
  const Eigen::LDLT<Eigen::MatrixXd> bread(xtx);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < n; ++i) {
    meat.selfadjointView<Eigen::Lower>().rankUpdate(X.row(i).transpose(),
                                                    resid[i] * resid[i]);
  }
  meat.triangularView<Eigen::StrictlyUpper>() =
      meat.transpose().triangularView<Eigen::StrictlyUpper>();
  const Eigen::MatrixXd cov =
      bread.solve(meat).transpose();
  const Eigen::MatrixXd vcov =
      bread.solve(cov) * (static_cast<double>(n) / static_cast<double>(n - k));

  EstimateTable table;
  auto treated_mean = [&](const std::vector<int>& strata) {
    double sum = 0.0;
    int count = 0;
    for (int g : strata) {
      for (int row : sample.treated_rows(g)) {
        sum += outcomes[row];
        ++count;
      }
    }
    return std::pair<double, int>{sum / static_cast<double>(count), count};
  };

  if (interaction == RegressionInteraction::none) {
    EstimateRow row;
    row.level = "overall";
    row.group = "all";
    row.tau = coef[1];
    row.se = std::sqrt(vcov(1, 1));
    std::vector<int> all(static_cast<std::size_t>(sample.n_strata()));
    std::iota(all.begin(), all.end(), 0);
    auto [m1, c1] = treated_mean(all);
    row.mu1 = m1;
    row.mu0 = m1 - row.tau;
    row.n_treated = c1;
    table.rows.push_back(row);
    return table;
  }

  double n1 = 0.0;
  for (const auto& [name, strata] : levels) {
    for (int g : strata) n1 += static_cast<double>(sample.n_treated(g));
  }
  Eigen::VectorXd combo = Eigen::VectorXd::Zero(k);
  double overall_tau = 0.0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    EstimateRow row;
    row.level = grouping ? grouping->name : "stratum";
    row.group = levels[l].first;
    row.tau = coef[1 + static_cast<Eigen::Index>(l)];
    row.se = std::sqrt(vcov(1 + static_cast<Eigen::Index>(l),
                            1 + static_cast<Eigen::Index>(l)));
    auto [m1, c1] = treated_mean(levels[l].second);
    row.mu1 = m1;
    row.mu0 = m1 - row.tau;
    row.n_treated = c1;
    table.rows.push_back(row);
    const double w = static_cast<double>(c1) / n1;
    combo[1 + static_cast<Eigen::Index>(l)] = w;
    overall_tau += w * row.tau;
  }
  EstimateRow overall;
  overall.level = "overall";
  overall.group = "all";
  overall.tau = overall_tau;
  overall.se = std::sqrt(combo.dot(vcov * combo));
  std::vector<int> all(static_cast<std::size_t>(sample.n_strata()));
  std::iota(all.begin(), all.end(), 0);
  auto [m1, c1] = treated_mean(all);
  overall.mu1 = m1;
  overall.mu0 = m1 - overall.tau;
  overall.n_treated = c1;
  table.rows.push_back(overall);
  return table;
}

}  // namespace poolbal
