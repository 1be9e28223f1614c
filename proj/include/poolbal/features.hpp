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
#include <map>
#include <string>
#include <vector>

#include "poolbal/data.hpp"

namespace poolbal {

// Natural cubic spline expansion of one covariate. knot_count knots are
// placed at equally spaced quantile levels including min and max; the basis
// has knot_count - 1 columns and is linear beyond the boundary knots.
struct SplineSpec {
  std::string column;
  int knot_count = 5;
};

// Covariate-by-group interactions. The grouping maps stratum labels onto
// coarser levels; an empty map means one level per stratum.
struct InteractionSpec {
  std::vector<std::string> columns;
  std::map<std::string, std::string> stratum_to_level;
  std::string name = "stratum";
};

struct FeatureSpec {
  bool include_raw = true;
  bool standardize = true;
  std::vector<SplineSpec> splines;
  std::vector<InteractionSpec> interactions;
};

enum class ColumnKind { raw, spline, interaction };

// Provenance plus the affine standardization applied to one output column.
struct ColumnInfo {
  std::string name;
  ColumnKind kind = ColumnKind::raw;
  std::string source;
  double mean = 0.0;
  double scale = 1.0;
};

struct FeatureMatrix {
  Eigen::MatrixXd values;  // n x p, standardized
  std::vector<ColumnInfo> columns;
  std::vector<std::string> dropped;  // constant columns removed

  int p() const { return static_cast<int>(columns.size()); }
  // Re-applies the stored affine maps to a raw block with the same retained
  // columns; used to verify the transform round-trips.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& raw) const;
};

// Centers and scales each column to mean 0 and population variance 1.
// Constant columns are dropped and reported by name.
FeatureMatrix standardize_columns(const Eigen::MatrixXd& raw,
                                  const std::vector<std::string>& names);

// Knots at quantile levels i/(m-1), i = 0..m-1, of x (type-7 quantiles).
// Raises ValidationError when knots coincide.
Eigen::MatrixXd natural_cubic_basis(const Eigen::VectorXd& x, int knot_count);

// Returns the knot locations used by natural_cubic_basis.
Eigen::VectorXd spline_knots(const Eigen::VectorXd& x, int knot_count);

// Raw columns, spline blocks, then interaction blocks, standardized per spec.
FeatureMatrix build_features(const AnalysisSample& sample,
                             const FeatureSpec& spec);

}  // namespace poolbal
