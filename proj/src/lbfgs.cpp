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

#include "poolbal/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace poolbal {

namespace {

constexpr double kC1 = 1e-4;  // sufficient decrease
constexpr double kC2 = 0.9;   // curvature

struct LinePoint {
  double step;
  double value;
  double slope;
};

// Strong Wolfe search along direction d from (x0, f0, g0). Returns the
// accepted step and fills x, f, g at that point; step 0 on failure.
double wolfe_search(const Objective& objective, const Eigen::VectorXd& x0,
                    double f0, const Eigen::VectorXd& g0,
                    const Eigen::VectorXd& d, Eigen::VectorXd& x, double& f,
                    Eigen::VectorXd& g) {
  const double slope0 = g0.dot(d);
  if (slope0 >= 0.0) return 0.0;

  auto eval = [&](double step) {
    x = x0 + step * d;
    f = objective(x, g);
    return LinePoint{step, f, g.dot(d)};
  };

  auto zoom = [&](LinePoint lo, LinePoint hi) -> double {
    for (int k = 0; k < 60; ++k) {
      // Minimizer of the quadratic through (lo, lo', hi); bisection when the
      // fit lands too close to either end.
      double step = 0.5 * (lo.step + hi.step);
      const double h = hi.step - lo.step;
      const double curv = hi.value - lo.value - lo.slope * h;
      if (std::abs(curv) > 1e-300) {
        double cand = lo.step - 0.5 * lo.slope * h * h / curv;
        double a = std::min(lo.step, hi.step);
        double b = std::max(lo.step, hi.step);
        double margin = 0.1 * (b - a);
        if (std::isfinite(cand) && cand > a + margin && cand < b - margin) {
          step = cand;
        }
      }
      LinePoint p = eval(step);
      if (p.value > f0 + kC1 * p.step * slope0 || p.value >= lo.value) {
        hi = p;
      } else {
        if (std::abs(p.slope) <= -kC2 * slope0) return p.step;
        if (p.slope * (hi.step - lo.step) >= 0.0) hi = lo;
        lo = p;
      }
      if (std::abs(hi.step - lo.step) <
          1e-16 * std::max(1.0, std::abs(lo.step))) {
        eval(lo.step);
        return lo.step;
      }
    }
    eval(lo.step);
    return lo.step;
  };

  LinePoint prev{0.0, f0, slope0};
  double step = 1.0;
  for (int k = 0; k < 60; ++k) {
    LinePoint p = eval(step);
    if (!std::isfinite(p.value)) {
      step *= 0.5;
      continue;
    }
    if (p.value > f0 + kC1 * p.step * slope0 ||
        (k > 0 && p.value >= prev.value)) {
      return zoom(prev, p);
    }
    if (std::abs(p.slope) <= -kC2 * slope0) return p.step;
    if (p.slope >= 0.0) return zoom(p, prev);
    prev = p;
    step *= 2.0;
  }
  return prev.step > 0.0 ? prev.step : 0.0;
}

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& options) {
  LbfgsResult result;
  const Eigen::Index dim = x0.size();
  Eigen::VectorXd x = std::move(x0);
  Eigen::VectorXd g(dim);
  double f = objective(x, g);

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  Eigen::VectorXd d(dim), x_new(dim), g_new(dim);
  double h0 = 1.0;
  double curvature = 1.0;  // Rayleigh estimate from the latest pair
  int stalled = 0;

  // The best steepest-descent decrease from here is about g^2 / (2L); once
  // that falls below float noise in f, the iterate is stationary to machine
  // precision even if the gradient test has not triggered.
  const auto noise_floor = [&](double gnorm) {
    const double available = 0.5 * gnorm * gnorm / curvature;
    return available <= 32.0 * std::numeric_limits<double>::epsilon() *
                            (1.0 + std::abs(f));
  };

  auto finish = [&](bool converged, bool diverged, int iterations) {
    result.x = std::move(x);
    result.gradient = std::move(g);
    result.value = f;
    result.iterations = iterations;
    result.converged = converged;
    result.diverged = diverged;
    return result;
  };

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    const double gnorm = g.norm();
    if (gnorm <= options.gradient_tolerance * (1.0 + std::abs(f))) {
      return finish(true, false, iter);
    }
    if (f <= options.value_floor ||
        x.cwiseAbs().maxCoeff() >= options.iterate_ceiling) {
      return finish(false, true, iter);
    }

    // Two-loop recursion.
    d = -g;
    const std::size_t hsize = s_hist.size();
    std::vector<double> alpha(hsize);
    for (std::size_t k = hsize; k-- > 0;) {
      alpha[k] = rho_hist[k] * s_hist[k].dot(d);
      d.noalias() -= alpha[k] * y_hist[k];
    }
    d *= h0;
    for (std::size_t k = 0; k < hsize; ++k) {
      double beta = rho_hist[k] * y_hist[k].dot(d);
      d.noalias() += (alpha[k] - beta) * s_hist[k];
    }

    double f_new = f;
    double step =
        wolfe_search(objective, x, f, g, d, x_new, f_new, g_new);
    if (step <= 0.0) {
      // Retry once along steepest descent before giving up.
      d = -g;
      step = wolfe_search(objective, x, f, g, d, x_new, f_new, g_new);
      if (step <= 0.0) return finish(noise_floor(gnorm), false, iter);
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    Eigen::VectorXd s = x_new - x;
    Eigen::VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (static_cast<int>(s_hist.size()) >= options.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      h0 = sy / yv.squaredNorm();
      curvature = yv.squaredNorm() / sy;
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
    }
    const double progress = f - f_new;
    x.swap(x_new);
    g.swap(g_new);
    f = f_new;
    if (progress <=
        32.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(f))) {
      if (++stalled >= 3 && noise_floor(g.norm())) {
        return finish(true, false, iter + 1);
      }
    } else {
      stalled = 0;
    }
  }
  return finish(false, false, options.max_iterations);
}

}  // namespace poolbal
