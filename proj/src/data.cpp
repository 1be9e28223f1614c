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

#include "poolbal/data.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace poolbal {

namespace {

// Splits one CSV record. Fields may be quoted; embedded quotes are doubled.
std::vector<std::string> split_csv_line(const std::string& line, int data_row) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  std::size_t i = 0;
  for (;;) {
    if (quoted) {
      if (i >= line.size()) {
        throw ParseError("unterminated quoted field at row " +
                         std::to_string(data_row));
      }
      char c = line[i];
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          i += 2;
        } else {
          quoted = false;
          ++i;
        }
      } else {
        field.push_back(c);
        ++i;
      }
    } else {
      if (i >= line.size()) {
        fields.push_back(std::move(field));
        break;
      }
      char c = line[i];
      if (c == '"' && field.empty()) {
        quoted = true;
        ++i;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
        ++i;
      } else {
        field.push_back(c);
        ++i;
      }
    }
  }
  return fields;
}

double parse_number(const std::string& cell, const std::string& column,
                    int data_row) {
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
  while (end > begin && (end[-1] == ' ' || end[-1] == '\t')) --end;
  if (begin == end) {
    throw ParseError("missing value in column \"" + column + "\" at row " +
                     std::to_string(data_row));
  }
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw ParseError("non-numeric value \"" + cell + "\" in column \"" +
                     column + "\" at row " + std::to_string(data_row));
  }
  return value;
}

}  // namespace

AnalysisSample AnalysisSample::from_records(
    std::vector<UnitRecord> records, std::vector<std::string> covariate_names,
    ZeroControlPolicy policy) {
  if (records.empty()) throw ValidationError("no data rows");

  // First pass: per-label counts in sorted label order.
  std::map<std::string, std::pair<int, int>> counts;  // label -> (n1, n0)
  for (const auto& r : records) {
    if (r.subgroup.empty()) throw ValidationError("empty subgroup label");
    auto& c = counts[r.subgroup];
    (r.treated ? c.first : c.second) += 1;
  }

  AnalysisSample s;
  std::unordered_map<std::string, int> id_of;
  for (const auto& [label, c] : counts) {
    if (c.first == 0) {
      s.drops_.zero_treated.push_back(label);
      s.drops_.dropped_units += c.second;
      continue;
    }
    if (c.second == 0) {
      if (policy == ZeroControlPolicy::error) {
        throw ValidationError("stratum \"" + label +
                              "\" has treated units but no controls");
      }
      s.drops_.zero_control.push_back(label);
      s.drops_.dropped_units += c.first;
      continue;
    }
    id_of.emplace(label, static_cast<int>(s.labels_.size()));
    s.labels_.push_back(label);
  }
  if (s.labels_.empty()) {
    throw ValidationError("no stratum has both treated and control units");
  }

  const int p = static_cast<int>(covariate_names.size());
  int kept = 0;
  for (const auto& r : records) {
    if (id_of.count(r.subgroup)) ++kept;
  }
  s.outcomes_.resize(kept);
  s.covariates_.resize(kept, p);
  s.treated_.reserve(static_cast<std::size_t>(kept));
  s.stratum_.reserve(static_cast<std::size_t>(kept));
  s.treated_rows_.resize(s.labels_.size());
  s.control_rows_.resize(s.labels_.size());

  int row = 0;
  for (const auto& r : records) {
    auto it = id_of.find(r.subgroup);
    if (it == id_of.end()) continue;
    if (static_cast<int>(r.covariates.size()) != p) {
      throw ValidationError("covariate count mismatch in subgroup \"" +
                            r.subgroup + "\"");
    }
    s.outcomes_[row] = r.outcome;
    for (int j = 0; j < p; ++j) s.covariates_(row, j) = r.covariates[static_cast<std::size_t>(j)];
    s.treated_.push_back(r.treated ? 1 : 0);
    s.stratum_.push_back(it->second);
    auto& rows = r.treated ? s.treated_rows_[static_cast<std::size_t>(it->second)]
                           : s.control_rows_[static_cast<std::size_t>(it->second)];
    rows.push_back(row);
    if (r.treated) ++s.n_treated_total_;
    ++row;
  }
  s.covariate_names_ = std::move(covariate_names);
  return s;
}

AnalysisSample load_csv(const std::string& path, const CsvSchema& schema,
                        ZeroControlPolicy policy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open \"" + path + "\"");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  std::string text = buffer.str();

  std::vector<std::string> lines;
  std::string line;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == '\n') {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!(i == text.size() && line.empty())) lines.push_back(line);
      line.clear();
    } else {
      line.push_back(text[i]);
    }
  }
  if (lines.empty()) throw ParseError("\"" + path + "\" is empty");

  std::vector<std::string> header = split_csv_line(lines[0], 0);
  std::unordered_map<std::string, int> col_of;
  for (int j = 0; j < static_cast<int>(header.size()); ++j) {
    if (!col_of.emplace(header[static_cast<std::size_t>(j)], j).second) {
      throw ParseError("duplicate column \"" + header[static_cast<std::size_t>(j)] + "\"");
    }
  }

  auto require = [&](const std::string& name) {
    auto it = col_of.find(name);
    if (it == col_of.end()) {
      throw ParseError("required column \"" + name + "\" not found");
    }
    return it->second;
  };
  const int y_col = require(schema.outcome);
  const int w_col = require(schema.treatment);
  const int g_col = require(schema.subgroup);

  std::vector<std::string> covariate_names;
  std::vector<int> covariate_cols;
  if (schema.covariates.empty()) {
    for (int j = 0; j < static_cast<int>(header.size()); ++j) {
      if (j == y_col || j == w_col || j == g_col) continue;
      covariate_names.push_back(header[static_cast<std::size_t>(j)]);
      covariate_cols.push_back(j);
    }
  } else {
    for (const auto& name : schema.covariates) {
      covariate_cols.push_back(require(name));
      covariate_names.push_back(name);
    }
  }

  std::vector<UnitRecord> records;
  records.reserve(lines.size() - 1);
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const int data_row = static_cast<int>(li);
    std::vector<std::string> fields = split_csv_line(lines[li], data_row);
    if (fields.size() != header.size()) {
      throw ParseError("row " + std::to_string(data_row) + " has " +
                       std::to_string(fields.size()) + " fields, expected " +
                       std::to_string(header.size()));
    }
    UnitRecord r;
    r.outcome = parse_number(fields[static_cast<std::size_t>(y_col)], schema.outcome, data_row);
    double w = parse_number(fields[static_cast<std::size_t>(w_col)], schema.treatment, data_row);
    if (w != 0.0 && w != 1.0) {
      throw ParseError("treatment value \"" + fields[static_cast<std::size_t>(w_col)] +
                       "\" at row " + std::to_string(data_row) +
                       " is not 0 or 1");
    }
    r.treated = w == 1.0;
    r.subgroup = fields[static_cast<std::size_t>(g_col)];
    if (r.subgroup.empty()) {
      throw ParseError("empty subgroup label at row " + std::to_string(data_row));
    }
    r.covariates.reserve(covariate_cols.size());
    for (std::size_t k = 0; k < covariate_cols.size(); ++k) {
      r.covariates.push_back(parse_number(
          fields[static_cast<std::size_t>(covariate_cols[k])], covariate_names[k], data_row));
    }
    records.push_back(std::move(r));
  }
  return AnalysisSample::from_records(std::move(records),
                                      std::move(covariate_names), policy);
}

AnalysisSample make_sample(const Eigen::VectorXd& outcomes,
                           const std::vector<std::uint8_t>& treated,
                           const std::vector<std::string>& subgroups,
                           const Eigen::MatrixXd& covariates,
                           const std::vector<std::string>& covariate_names,
                           ZeroControlPolicy policy) {
  const int n = static_cast<int>(treated.size());
  if (outcomes.size() != n || static_cast<int>(subgroups.size()) != n ||
      covariates.rows() != n) {
    throw ValidationError("column length mismatch");
  }
  std::vector<UnitRecord> records(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& r = records[static_cast<std::size_t>(i)];
    r.outcome = outcomes[i];
    r.treated = treated[static_cast<std::size_t>(i)] != 0;
    r.subgroup = subgroups[static_cast<std::size_t>(i)];
    r.covariates.resize(static_cast<std::size_t>(covariates.cols()));
    for (int j = 0; j < covariates.cols(); ++j) r.covariates[static_cast<std::size_t>(j)] = covariates(i, j);
  }
  return AnalysisSample::from_records(std::move(records), covariate_names,
                                      policy);
}

}  // namespace poolbal
