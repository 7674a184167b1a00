#pragma once

// Central finite differences, used as the independent oracle for tape gradients.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <vector>

#include "hsod/tensor.hpp"

namespace hsod::testing {

inline double central_difference(double& slot, const std::function<double()>& loss, double h = 1e-5) {
  const double saved = slot;
  slot = saved + h;
  const double up = loss();
  slot = saved - h;
  const double down = loss();
  slot = saved;
  return (up - down) / (2.0 * h);
}

// Components far below the gradient's overall scale are compared against that scale
// (floor), since central differences carry an absolute rounding error of ~eps*|loss|/h.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

// Worst relative error over every scalar of every parameter.
// `loss` must run a fresh forward pass with the current parameter values.
inline double max_param_grad_error(std::vector<Parameter*> params,
                                   const std::function<Var(Tape&)>& build, double h = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = build(tape);
    tape.backward(l);
  }
  auto eval = [&]() {
    Tape tape;
    return build(tape).value().item();
  };
  double scale = 0.0;
  for (auto* p : params)
    for (double g : p->grad.data()) scale = std::max(scale, std::fabs(g));
  const double floor = std::max(1e-6, 1e-2 * scale);
  double worst = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double numeric = central_difference(p->value[i], eval, h);
      const double e = relative_error(p->grad[i], numeric, floor);
      if (std::getenv("FD_DEBUG") && e > 1e-6) std::fprintf(stderr, "%s[%zu] a=%.12g n=%.12g e=%g\n", p->name.c_str(), i, p->grad[i], numeric, e);
      worst = std::max(worst, e);
    }
  }
  return worst;
}

// Same as above on `count` randomly drawn scalars across `params`.
inline double sampled_param_grad_error(std::vector<Parameter*> params, const std::function<Var(Tape&)>& build,
                                       std::size_t count, Rng& rng, double h = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = build(tape);
    tape.backward(l);
  }
  auto eval = [&]() {
    Tape tape;
    return build(tape).value().item();
  };
  double scale = 0.0;
  std::size_t total = 0;
  for (auto* p : params) {
    total += p->value.size();
    for (double g : p->grad.data()) scale = std::max(scale, std::fabs(g));
  }
  const double floor = std::max(1e-6, 1e-2 * scale);
  double worst = 0.0;
  for (std::size_t n = 0; n < count; ++n) {
    std::size_t k = rng.index(total);
    std::size_t pi = 0;
    while (k >= params[pi]->value.size()) k -= params[pi++]->value.size();
    auto* p = params[pi];
    const double numeric = central_difference(p->value[k], eval, h);
    const double e = relative_error(p->grad[k], numeric, floor);
    if (std::getenv("FD_DEBUG") && e > 1e-6) std::fprintf(stderr, "%s[%zu] a=%.12g n=%.12g e=%g\n", p->name.c_str(), k, p->grad[k], numeric, e);
    worst = std::max(worst, e);
  }
  return worst;
}

}  // namespace hsod::testing
