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

#include "poolbal/diagnostics.hpp"

#include <algorithm>
#include <cmath>

namespace poolbal {

BalanceReport balance_report(const WeightSolution& solution,
                             const FeatureMatrix& features,
                             const AnalysisSample& sample) {
  const int K = sample.n_strata();
  const int p = features.p();
  BalanceReport report;
  report.stratum_labels = sample.stratum_labels();
  report.feature_names.reserve(static_cast<std::size_t>(p));
  for (const auto& c : features.columns) report.feature_names.push_back(c.name);

  report.local_pre.resize(K, p);
  report.local_post.resize(K, p);
  report.global_pre = Eigen::VectorXd::Zero(p);
  report.global_post = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd global_pre_raw = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd global_post_raw = Eigen::VectorXd::Zero(p);
  report.local_pre_norm.resize(K);
  report.local_post_norm.resize(K);

  for (int g = 0; g < K; ++g) {
    const double n1g = static_cast<double>(sample.n_treated(g));
    const double n0g = static_cast<double>(sample.n_control(g));
    const double uniform = n1g / n0g;
    Eigen::VectorXd treated_sum = Eigen::VectorXd::Zero(p);
    for (int row : sample.treated_rows(g)) {
      treated_sum += features.values.row(row).transpose();
    }
    Eigen::VectorXd pre = -treated_sum;
    Eigen::VectorXd post = -treated_sum;
    for (int row : sample.control_rows(g)) {
      pre += uniform * features.values.row(row).transpose();
      post += solution.gamma[row] * features.values.row(row).transpose();
    }
    global_pre_raw += pre;
    global_post_raw += post;
    report.local_pre.row(g) = pre.cwiseAbs() / n1g;
    report.local_post.row(g) = post.cwiseAbs() / n1g;
    report.local_pre_norm[g] = report.local_pre.row(g).norm();
    report.local_post_norm[g] = report.local_post.row(g).norm();
  }
  const double n1 = static_cast<double>(sample.n_treated());
  report.global_pre = global_pre_raw.cwiseAbs() / n1;
  report.global_post = global_post_raw.cwiseAbs() / n1;
  return report;
}

OverlapReport ess(const WeightSolution& solution, const AnalysisSample& sample) {
  const int K = sample.n_strata();
  OverlapReport report;
  report.stratum_labels = sample.stratum_labels();
  report.ess.resize(K);
  report.fraction_above_threshold.resize(K);
  report.max_normalized_weight.resize(K);

  std::vector<double> normalized;
  normalized.reserve(static_cast<std::size_t>(sample.n_control()));
  double sum_all = 0.0, sq_all = 0.0;
  int above_all = 0;
  for (int g = 0; g < K; ++g) {
    const double n1g = static_cast<double>(sample.n_treated(g));
    double sum = 0.0, sq = 0.0, maxw = 0.0;
    int above = 0;
    for (int row : sample.control_rows(g)) {
      const double w = solution.gamma[row];
      sum += w;
      sq += w * w;
      const double wn = w / n1g;
      maxw = std::max(maxw, wn);
      if (wn > 0.001) ++above;
      if (w > 0.0) {
        normalized.push_back(wn);
      } else {
        ++report.zero_weight_count;
      }
    }
    if (sq <= 0.0) {
      throw ValidationError(
          "all control weights are zero in stratum \"" +
          sample.stratum_labels()[static_cast<std::size_t>(g)] + "\"");
    }
    report.ess[g] = sum * sum / sq;
    report.fraction_above_threshold[g] =
        static_cast<double>(above) / static_cast<double>(sample.n_control(g));
    report.max_normalized_weight[g] = maxw;
    sum_all += sum;
    sq_all += sq;
    above_all += above;
  }
  report.ess_overall = sum_all * sum_all / sq_all;
  report.fraction_above_threshold_overall =
      static_cast<double>(above_all) / static_cast<double>(sample.n_control());

  constexpr int kBins = 20;
  const double top =
      normalized.empty() ? 1.0
                         : *std::max_element(normalized.begin(), normalized.end());
  const double width = top > 0.0 ? top / kBins : 1.0;
  report.histogram_edges.resize(kBins + 1);
  for (int b = 0; b <= kBins; ++b) {
    report.histogram_edges[static_cast<std::size_t>(b)] = width * b;
  }
  report.histogram_counts.assign(kBins, 0);
  for (double wn : normalized) {
    int b = static_cast<int>(wn / width);
    if (b >= kBins) b = kBins - 1;
    report.histogram_counts[static_cast<std::size_t>(b)] += 1;
  }
  return report;
}

}  // namespace poolbal
