#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mct/autodiff.hpp"

namespace mct {

struct GradcheckOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many
  // coordinates per parameter tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  // Combine steps h and h/2 as (4 D(h/2) - D(h)) / 3, cancelling the h^2
  // truncation term so larger steps (less roundoff) stay accurate.
  bool richardson = false;
  // Optional fingerprint of the piecewise branch taken by the last loss
  // evaluation (e.g. a sort order). A probe that lands on a different branch
  // than the base point is retried with the step divided by 10.
  std::function<std::uint64_t()> branch;
  std::size_t max_step_reductions = 4;
  // Lower bound of the relative-error denominator.
  double denom_floor = 1e-8;
};

struct GradcheckResult {
  double max_rel_error = 0;
  std::size_t coords_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t reduced_steps = 0;  // coordinates that needed a smaller step
  std::size_t kinks = 0;          // coordinates left unchecked: no step avoided a branch change
};

/// Builds a scalar loss on a fresh graph from parameter leaves.
using LossBuilder =
    std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

namespace detail {

inline double eval_loss(const LossBuilder& f, const std::vector<Tensor<double>>& params) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.constant(p));
  const double v = f(g, vars).value()[0];
  if (!std::isfinite(v)) throw NumericalError("gradcheck: loss is not finite");
  return v;
}

}  // namespace detail

/// Compares reverse-mode gradients with central differences.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, denom_floor).
inline GradcheckResult check_gradients(const LossBuilder& f,
                                       std::vector<Tensor<double>> params,
                                       const GradcheckOptions& opt = {}) {
  std::vector<Tensor<double>> analytic;
  std::uint64_t base_branch = 0;
  {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(g.parameter(p));
    Var<double> loss = f(g, vars);
    if (!std::isfinite(loss.value()[0])) {
      throw NumericalError("gradcheck: loss is not finite at the base point");
    }
    g.backward(loss);
    if (opt.branch) base_branch = opt.branch();
    for (const auto& v : vars) {
      analytic.push_back(g.has_grad(v.id) ? g.grad(v.id) : Tensor<double>(v.shape()));
    }
  }

  std::mt19937_64 rng(opt.seed);
  GradcheckResult res;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> coords(params[t].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double orig = params[t][idx];
      bool same_branch = true;
      auto probe = [&](double x) {
        params[t][idx] = x;
        const double v = detail::eval_loss(f, params);
        if (opt.branch && opt.branch() != base_branch) same_branch = false;
        return v;
      };
      auto central = [&](double h) {
        const double up = probe(orig + h);
        const double down = probe(orig - h);
        params[t][idx] = orig;
        return (up - down) / (2 * h);
      };
      double numeric = 0;
      double h = opt.step;
      std::size_t reductions = 0;
      for (;; ++reductions, h /= 10) {
        same_branch = true;
        const double coarse = central(h);
        numeric = opt.richardson ? (4 * central(h / 2) - coarse) / 3 : coarse;
        if (same_branch || reductions == opt.max_step_reductions) break;
      }
      if (!same_branch) {
        ++res.kinks;
        continue;
      }
      if (reductions > 0) ++res.reduced_steps;
      const double a = analytic[t][idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      const double err = std::abs(a - numeric) / denom;
      ++res.coords_checked;
      if (res.coords_checked == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = t;
        res.worst_index = idx;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace mct
