#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hran/autodiff.hpp"
#include "hran/error.hpp"

namespace hran {

// Verifies analytic gradients against central finite differences.
//
// `build` must be a deterministic function of the current parameter values that
// constructs a scalar objective on the tape it is given. Returns the maximum over
// all parameter coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1).
// The floor of 1 makes the measure relative for O(1) gradients and absolute below
// that; central differences on a double-precision objective carry ~1e-10 of noise,
// which would swamp a purely relative measure on coordinates whose true gradient
// is zero (for example embedding rows of tokens absent from the example).
template <typename T, typename Build>
double grad_check(Build build, const std::vector<Parameter<T>*>& params, double step = 1e-5) {
  if (params.empty()) throw ContractError("grad_check: no parameters given");

  auto eval = [&]() -> double {
    Tape<T> tape;
    Var<T> r = build(tape);
    if (r.numel() != 1) {
      throw ContractError("grad_check: objective is not scalar-shaped: " + shape_str(r.shape()));
    }
    const double v = static_cast<double>(r.value()[0]);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite objective value");
    return v;
  };

  for (auto* p : params) {
    if (!p->value.all_finite()) {
      throw NumericError("grad_check: parameter " + p->name + " holds non-finite values");
    }
    p->zero_grad();
  }
  {
    Tape<T> tape;
    Var<T> r = build(tape);
    if (r.numel() != 1) {
      throw ContractError("grad_check: objective is not scalar-shaped: " + shape_str(r.shape()));
    }
    tape.backward(r);
    tape.harvest_parameter_grads();
  }

  double worst = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double analytic = static_cast<double>(p->grad[i]);
      if (!std::isfinite(analytic)) {
        throw NumericError("grad_check: non-finite analytic gradient at " + p->name + "[" +
                           std::to_string(i) + "]");
      }
      const T saved = p->value[i];
      p->value[i] = saved + static_cast<T>(step);
      const double fp = eval();
      p->value[i] = saved - static_cast<T>(step);
      const double fm = eval();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      if (!std::isfinite(numeric)) {
        throw NumericError("grad_check: non-finite numeric gradient at " + p->name + "[" +
                           std::to_string(i) + "]");
      }
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1.0});
      worst = std::max(worst, std::fabs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace hran
