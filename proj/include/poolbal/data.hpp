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
#include <cstdint>
#include <string>
#include <vector>

#include "poolbal/common.hpp"

namespace poolbal {

// Column roles for a rectangular CSV. Any column not named here is treated as
// a numeric covariate unless an explicit covariate list is given.
struct CsvSchema {
  std::string outcome = "y";
  std::string treatment = "w";
  std::string subgroup = "g";
  std::vector<std::string> covariates;  // empty: every remaining column
};

// One row of input data, in file order.
struct UnitRecord {
  double outcome = 0.0;
  bool treated = false;
  std::string subgroup;
  std::vector<double> covariates;
};

// Strata removed during validation, kept so reports can surface them.
struct DropReport {
  std::vector<std::string> zero_treated;  // dropped: nothing to reweight to
  std::vector<std::string> zero_control;  // dropped only under the drop policy
  int dropped_units = 0;
  bool any() const { return !zero_treated.empty() || !zero_control.empty(); }
};

enum class ZeroControlPolicy { error, drop };

// Validated analysis data. Units keep file order; stratum ids are dense
// 0..K-1 ordered by sorted subgroup label.
class AnalysisSample {
 public:
  static AnalysisSample from_records(
      std::vector<UnitRecord> records, std::vector<std::string> covariate_names,
      ZeroControlPolicy policy = ZeroControlPolicy::error);

  int n() const { return static_cast<int>(treated_.size()); }
  int n_strata() const { return static_cast<int>(labels_.size()); }
  int n_covariates() const { return static_cast<int>(covariate_names_.size()); }

  const Eigen::VectorXd& outcomes() const { return outcomes_; }
  bool treated(int i) const { return treated_[static_cast<std::size_t>(i)] != 0; }
  int stratum(int i) const { return stratum_[static_cast<std::size_t>(i)]; }
  const Eigen::MatrixXd& covariates() const { return covariates_; }
  const std::vector<std::string>& covariate_names() const {
    return covariate_names_;
  }
  const std::vector<std::string>& stratum_labels() const { return labels_; }
  const DropReport& drop_report() const { return drops_; }

  int n_treated() const { return n_treated_total_; }
  int n_control() const { return n() - n_treated_total_; }
  int n_treated(int g) const { return static_cast<int>(treated_rows_[static_cast<std::size_t>(g)].size()); }
  int n_control(int g) const { return static_cast<int>(control_rows_[static_cast<std::size_t>(g)].size()); }
  int stratum_size(int g) const { return n_treated(g) + n_control(g); }
  const std::vector<int>& treated_rows(int g) const {
    return treated_rows_[static_cast<std::size_t>(g)];
  }
  const std::vector<int>& control_rows(int g) const {
    return control_rows_[static_cast<std::size_t>(g)];
  }

 private:
  Eigen::VectorXd outcomes_;
  std::vector<std::uint8_t> treated_;
  std::vector<int> stratum_;
  Eigen::MatrixXd covariates_;
  std::vector<std::string> covariate_names_;
  std::vector<std::string> labels_;
  std::vector<std::vector<int>> treated_rows_;
  std::vector<std::vector<int>> control_rows_;
  DropReport drops_;
  int n_treated_total_ = 0;
};

// Strict CSV reader: quoted fields with doubled-quote escapes, one header
// row, "." decimal separator only. Raises ParseError with the 1-based data
// row on any malformed cell and ValidationError for structural problems.
AnalysisSample load_csv(const std::string& path, const CsvSchema& schema,
                        ZeroControlPolicy policy = ZeroControlPolicy::error);

// Same validation rules applied to in-memory columns (used by the simulator
// and by tests).
AnalysisSample make_sample(const Eigen::VectorXd& outcomes,
                           const std::vector<std::uint8_t>& treated,
                           const std::vector<std::string>& subgroups,
                           const Eigen::MatrixXd& covariates,
                           const std::vector<std::string>& covariate_names,
                           ZeroControlPolicy policy = ZeroControlPolicy::error);

}  // namespace poolbal
