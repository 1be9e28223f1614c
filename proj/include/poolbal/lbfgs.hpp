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
#include <functional>

namespace poolbal {

struct LbfgsOptions {
  int max_iterations = 20000;
  // Stop when ||grad||_2 <= tolerance * (1 + |f|).
  double gradient_tolerance = 1e-8;
  int history = 10;
  // Declare divergence when the value or the iterate runs away; the caller
  // interprets this as an infeasibility certificate.
  double value_floor = -1e13;
  double iterate_ceiling = 1e10;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  Eigen::VectorXd gradient;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  bool diverged = false;
};

// Objective callback: fills the gradient and returns the value.
using Objective =
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

// Two-loop recursion with strong Wolfe line search (c1 = 1e-4, c2 = 0.9) and
// initial inverse-Hessian scaling s'y / y'y. Suitable for convex C^1
// objectives with piecewise-smooth second derivatives.
LbfgsResult lbfgs_minimize(const Objective& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& options);

}  // namespace poolbal
