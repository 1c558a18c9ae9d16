#pragma once

// Central-difference gradient checking. Test-side oracle: only ever calls the
// supplied loss function, never the analytic backward path it is checking.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dymn/tensor.hpp"

namespace dymn {

struct GradcheckResult {
  double max_rel_err = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::string worst_name;
  std::int64_t worst_index = -1;
};

struct GradcheckTarget {
  std::string name;
  DTensor* value;          // perturbed in place
  const DTensor* analytic; // filled by caller (forward + backward once)
};

// f() re-evaluates the scalar loss from the targets' current values.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
//
// order 2 is the plain (f(x+h) - f(x-h)) / 2h stencil. order 4 is the 5-point
// central difference; deep composite graphs need it because the 3-point
// truncation/roundoff window cannot reach 1e-6 on their smallest gradient
// coordinates in 64-bit.
template <typename F>
GradcheckResult finite_diff_gradcheck(F&& f, std::vector<GradcheckTarget> targets,
                                      double h = 1e-6, int order = 2) {
  if (order != 2 && order != 4)
    throw ConfigError("finite_diff_gradcheck: order must be 2 or 4");
  GradcheckResult res;
  for (auto& tgt : targets) {
    DTensor& v = *tgt.value;
    for (std::int64_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      auto eval_at = [&](double delta) {
        v[i] = orig + delta;
        const double val = f();
        if (!std::isfinite(val))
          throw NumericError("finite_diff_gradcheck: non-finite loss at " + tgt.name);
        return val;
      };
      double numeric;
      if (order == 2) {
        numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
      } else {
        numeric = (-eval_at(2 * h) + 8.0 * eval_at(h) - 8.0 * eval_at(-h) + eval_at(-2 * h)) /
                  (12.0 * h);
      }
      v[i] = orig;
      const double analytic = (*tgt.analytic)[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.analytic_at_worst = analytic;
        res.numeric_at_worst = numeric;
        res.worst_name = tgt.name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace dymn
