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

#include "poolbal/features.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace poolbal {

namespace {

// Type-7 quantile: linear interpolation between order statistics.
double quantile7(const std::vector<double>& sorted, double level) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  double h = level * static_cast<double>(n - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo >= n - 1) return sorted[n - 1];
  double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

Eigen::VectorXd spline_knots(const Eigen::VectorXd& x, int knot_count) {
  if (knot_count < 3) {
    throw ConfigError("spline needs at least 3 knots, got " +
                      std::to_string(knot_count));
  }
  if (x.size() < knot_count) {
    throw ValidationError("spline with " + std::to_string(knot_count) +
                          " knots needs at least as many observations");
  }
  std::vector<double> sorted(x.data(), x.data() + x.size());
  std::sort(sorted.begin(), sorted.end());
  Eigen::VectorXd knots(knot_count);
  for (int k = 0; k < knot_count; ++k) {
    knots[k] = quantile7(sorted, static_cast<double>(k) /
                                     static_cast<double>(knot_count - 1));
  }
  for (int k = 1; k < knot_count; ++k) {
    if (!(knots[k] > knots[k - 1])) {
      throw ValidationError(
          "degenerate spline knots: knot " + std::to_string(k) + " and " +
          std::to_string(k + 1) + " coincide at " + std::to_string(knots[k]));
    }
  }
  return knots;
}

// Basis columns: N_1(x) = x and, for j = 1..m-2,
//   N_{j+1}(x) = d_j(x) - d_{m-1}(x),
//   d_j(x) = [(x-k_j)_+^3 - (x-k_m)_+^3] / (k_m - k_j).
// Evaluation expands each basis into per-interval cubic polynomials so the
// hot path is a Horner step after a binary search. The cubic and quadratic
// terms cancel beyond the last knot, which keeps the tails linear.
Eigen::MatrixXd natural_cubic_basis(const Eigen::VectorXd& x, int knot_count) {
  const Eigen::VectorXd knots = spline_knots(x, knot_count);
  const int m = knot_count;
  const int n_basis = m - 1;
  const int n = static_cast<int>(x.size());
  const double k_last = knots[m - 1];
  const double k_prev = knots[m - 2];

  // coef[j](iv, c): coefficient of x^c for basis j+1 on region iv, where
  // region iv holds points with exactly iv knots at or below them. Region 0
  // is left of every knot; region m is right of the last knot.
  std::vector<Eigen::MatrixXd> coef(
      static_cast<std::size_t>(m - 2),
      Eigen::MatrixXd::Zero(m + 1, 4));
  auto add_cubic = [&](int j, double weight, double knot, int first_region) {
    // weight * (x - knot)^3 active on regions >= first_region.
    auto& c = coef[static_cast<std::size_t>(j)];
    for (int iv = first_region; iv <= m; ++iv) {
      c(iv, 0) += weight * (-knot * knot * knot);
      c(iv, 1) += weight * (3.0 * knot * knot);
      c(iv, 2) += weight * (-3.0 * knot);
      c(iv, 3) += weight;
    }
  };
  for (int j = 0; j < m - 2; ++j) {
    const double denom_j = k_last - knots[j];
    const double denom_prev = k_last - k_prev;
    add_cubic(j, 1.0 / denom_j, knots[j], j + 1);
    add_cubic(j, -1.0 / denom_j, k_last, m);
    add_cubic(j, -1.0 / denom_prev, k_prev, m - 1);
    add_cubic(j, 1.0 / denom_prev, k_last, m);
  }
  // Beyond the last knot the cubic and quadratic terms cancel analytically;
  // zero them so rounding noise cannot bend the linear tail.
  for (int j = 0; j < m - 2; ++j) {
    auto& c = coef[static_cast<std::size_t>(j)];
    c(m, 3) = 0.0;
    c(m, 2) = 0.0;
  }

  Eigen::MatrixXd basis(n, n_basis);
  for (int i = 0; i < n; ++i) {
    const double xi = x[i];
    basis(i, 0) = xi;
    int iv = static_cast<int>(std::upper_bound(knots.data(), knots.data() + m,
                                               xi) -
                              knots.data());
    for (int j = 0; j < m - 2; ++j) {
      const auto& c = coef[static_cast<std::size_t>(j)];
      double v = ((c(iv, 3) * xi + c(iv, 2)) * xi + c(iv, 1)) * xi + c(iv, 0);
      basis(i, j + 1) = v;
    }
  }
  return basis;
}

FeatureMatrix standardize_columns(const Eigen::MatrixXd& raw,
                                  const std::vector<std::string>& names) {
  if (raw.cols() != static_cast<Eigen::Index>(names.size())) {
    throw ValidationError("column name count mismatch");
  }
  const int n = static_cast<int>(raw.rows());
  if (n == 0) throw ValidationError("no rows to standardize");
  FeatureMatrix out;
  std::vector<int> keep;
  for (int j = 0; j < raw.cols(); ++j) {
    const double mean = raw.col(j).mean();
    const double var = (raw.col(j).array() - mean).square().sum() /
                       static_cast<double>(n);
    if (var <= 1e-20 + 1e-16 * mean * mean) {
      out.dropped.push_back(names[static_cast<std::size_t>(j)]);
      continue;
    }
    ColumnInfo info;
    info.name = names[static_cast<std::size_t>(j)];
    info.mean = mean;
    info.scale = std::sqrt(var);
    out.columns.push_back(std::move(info));
    keep.push_back(j);
  }
  if (keep.empty()) throw ValidationError("all columns are constant");
  out.values.resize(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto& info = out.columns[k];
    out.values.col(static_cast<Eigen::Index>(k)) =
        (raw.col(keep[k]).array() - info.mean) / info.scale;
  }
  return out;
}

Eigen::MatrixXd FeatureMatrix::apply(const Eigen::MatrixXd& raw) const {
  if (raw.cols() != static_cast<Eigen::Index>(columns.size())) {
    throw ValidationError("column count mismatch in apply");
  }
  Eigen::MatrixXd out(raw.rows(), raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const auto& info = columns[static_cast<std::size_t>(j)];
    out.col(j) = (raw.col(j).array() - info.mean) / info.scale;
  }
  return out;
}

FeatureMatrix build_features(const AnalysisSample& sample,
                             const FeatureSpec& spec) {
  const auto& names = sample.covariate_names();
  const Eigen::MatrixXd& X = sample.covariates();
  const int n = sample.n();

  auto column_index = [&](const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
      throw ConfigError("unknown covariate \"" + name + "\"");
    }
    return static_cast<int>(it - names.begin());
  };

  std::vector<Eigen::VectorXd> cols;
  std::vector<ColumnInfo> infos;
  auto push = [&](Eigen::VectorXd v, std::string name, ColumnKind kind,
                  std::string source) {
    cols.push_back(std::move(v));
    ColumnInfo info;
    info.name = std::move(name);
    info.kind = kind;
    info.source = std::move(source);
    infos.push_back(std::move(info));
  };

  if (spec.include_raw) {
    for (int j = 0; j < X.cols(); ++j) {
      push(X.col(j), names[static_cast<std::size_t>(j)], ColumnKind::raw,
           names[static_cast<std::size_t>(j)]);
    }
  }
  for (const auto& sp : spec.splines) {
    const int j = column_index(sp.column);
    Eigen::MatrixXd basis = natural_cubic_basis(X.col(j), sp.knot_count);
    for (int b = 0; b < basis.cols(); ++b) {
      push(basis.col(b), sp.column + "_ns" + std::to_string(b + 1),
           ColumnKind::spline, sp.column);
    }
  }
  for (const auto& inter : spec.interactions) {
    // Resolve each stratum onto a level; default grouping is the stratum
    // itself.
    std::vector<std::string> level_of(static_cast<std::size_t>(sample.n_strata()));
    std::set<std::string> levels;
    for (int g = 0; g < sample.n_strata(); ++g) {
      const std::string& label = sample.stratum_labels()[static_cast<std::size_t>(g)];
      std::string level = label;
      if (!inter.stratum_to_level.empty()) {
        auto it = inter.stratum_to_level.find(label);
        if (it == inter.stratum_to_level.end()) {
          throw ConfigError("grouping \"" + inter.name +
                            "\" has no level for stratum \"" + label + "\"");
        }
        level = it->second;
      }
      level_of[static_cast<std::size_t>(g)] = level;
      levels.insert(level);
    }
    for (const auto& level : levels) {
      Eigen::VectorXd mask(n);
      for (int i = 0; i < n; ++i) {
        mask[i] = level_of[static_cast<std::size_t>(sample.stratum(i))] == level ? 1.0 : 0.0;
      }
      for (const auto& colname : inter.columns) {
        const int j = column_index(colname);
        push(X.col(j).cwiseProduct(mask),
             colname + ":" + inter.name + "=" + level, ColumnKind::interaction,
             colname);
      }
    }
  }
  if (cols.empty()) throw ConfigError("feature spec produces no columns");

  Eigen::MatrixXd assembled(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    assembled.col(static_cast<Eigen::Index>(k)) = cols[k];
  }

  if (!spec.standardize) {
    FeatureMatrix out;
    out.values = std::move(assembled);
    out.columns = std::move(infos);
    return out;
  }

  std::vector<std::string> assembled_names;
  assembled_names.reserve(infos.size());
  for (const auto& info : infos) assembled_names.push_back(info.name);
  FeatureMatrix out = standardize_columns(assembled, assembled_names);
  // Restore provenance for retained columns.
  std::size_t k = 0;
  for (auto& info : infos) {
    if (k < out.columns.size() && out.columns[k].name == info.name) {
      out.columns[k].kind = info.kind;
      out.columns[k].source = info.source;
      ++k;
    }
  }
  return out;
}

}  // namespace poolbal
