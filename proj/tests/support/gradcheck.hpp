#pragma once

// Central finite-difference oracle, independent of the backward closures.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "leafseg/autograd/tensor.hpp"

namespace leafseg::testing {

using VarD = ag::Var<double>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares d loss / d inputs[k][i] from backward() against central
/// differences for (up to) `max_per_input` entries of every input.
inline GradCheckResult gradcheck(const std::function<VarD()>& loss_fn, std::vector<VarD> inputs,
                                 double step = 1e-6, int max_per_input = 64, unsigned seed = 7) {
  for (auto& in : inputs) in.zero_grad();
  VarD loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    auto g = in.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(in.size()), 0.0);
  }
  GradCheckResult res;
  std::mt19937 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].values();
    std::vector<std::size_t> idx(vals.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<int>(idx.size()) > max_per_input) idx.resize(static_cast<std::size_t>(max_per_input));
    for (std::size_t i : idx) {
      const double orig = vals[i];
      double up, down;
      {
        ag::NoGradGuard ng;
        vals[i] = orig + step;
        up = loss_fn().item();
        vals[i] = orig - step;
        down = loss_fn().item();
      }
      vals[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double e = std::abs(analytic[k][i] - numeric) < 1e-9 ? 0.0 : rel_err(analytic[k][i], numeric);
      res.max_rel_err = std::max(res.max_rel_err, e);
      ++res.checked;
    }
  }
  return res;
}

inline VarD random_var(ag::Shape shape, std::mt19937& rng, double lo = -1.0, double hi = 1.0,
                       bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(ag::numel(shape)));
  for (auto& x : v) x = u(rng);
  return VarD::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace leafseg::testing
