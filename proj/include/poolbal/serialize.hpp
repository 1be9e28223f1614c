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

#include <string>

#include <json.hpp>

#include "poolbal/diagnostics.hpp"
#include "poolbal/estimators.hpp"
#include "poolbal/sensitivity.hpp"
#include "poolbal/simulation.hpp"
#include "poolbal/solver.hpp"

namespace poolbal {

// Insertion-ordered JSON keeps emission deterministic; reruns on identical
// input produce byte-identical files.
using Json = nlohmann::ordered_json;

Json weights_json(const WeightSolution& solution, const FeatureMatrix& features,
                  const AnalysisSample& sample, const std::string& method);
Json balance_json(const BalanceReport& report);
Json overlap_json(const OverlapReport& report);
Json estimates_json(const EstimateTable& table);
Json sweep_json(const std::vector<SweepPoint>& points);
Json sensitivity_json(const std::vector<SensitivityBounds>& bounds);
Json simulation_json(const SimResult& result, bool include_records);

std::string estimates_csv(const EstimateTable& table);
std::string balance_csv(const BalanceReport& report);
std::string overlap_csv(const OverlapReport& report);
std::string sweep_csv(const std::vector<SweepPoint>& points);
std::string simulation_csv(const SimResult& result);
std::string replicates_csv(const SimResult& result);

// Shortest round-trip decimal form, "%.17g" fallback for non-finite values.
std::string format_double(double v);

void write_file(const std::string& path, const std::string& content);

}  // namespace poolbal
