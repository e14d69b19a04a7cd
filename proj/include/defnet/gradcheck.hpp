#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "defnet/tensor.hpp"

namespace defnet {

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t argmax_index = 0;  // element with the worst tolerance ratio
  double epsilon = 1e-5;
  bool passed = true;
};

/// Central-difference gradient (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps).
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                                   const Tensor& x, double epsilon) {
  require(epsilon > 0.0, ErrorCode::kInvalidArgument, "epsilon must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + epsilon;
    const double plus = f(probe);
    probe[i] = orig - epsilon;
    const double minus = f(probe);
    probe[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      fail(ErrorCode::kNonFinite,
           "finite_diff_gradient: non-finite f at perturbed index " + std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * epsilon);
  }
  return grad;
}

/// Passes iff every element satisfies |a-n| <= abs_tol + rel_tol*max(|a|,|n|).
inline GradCheckReport compare_gradients(const Tensor& analytic, const Tensor& numeric,
                                         double rel_tol, double abs_tol,
                                         double epsilon = 1e-5) {
  require(analytic.shape() == numeric.shape(), ErrorCode::kShapeMismatch,
          "compare_gradients: shape " + shape_string(analytic.shape()) + " vs " +
              shape_string(numeric.shape()));
  GradCheckReport rep;
  rep.epsilon = epsilon;
  double worst_ratio = -1.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double diff = std::abs(a - n);
    const double scale = std::max(std::abs(a), std::abs(n));
    const double rel = scale > 0.0 ? diff / scale : 0.0;
    rep.max_abs_err = std::max(rep.max_abs_err, diff);
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    const double allowed = abs_tol + rel_tol * scale;
    const double ratio = allowed > 0.0 ? diff / allowed
                                       : (diff > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      rep.argmax_index = i;
    }
    if (!(diff <= allowed)) rep.passed = false;
  }
  return rep;
}

/// Runs the numeric oracle and compares against `analytic` in one call.
inline GradCheckReport check_gradient(const std::function<double(const Tensor&)>& f,
                                      const Tensor& x, const Tensor& analytic,
                                      double epsilon = 1e-5, double rel_tol = 1e-4,
                                      double abs_tol = 1e-7) {
  return compare_gradients(analytic, finite_diff_gradient(f, x, epsilon), rel_tol,
                           abs_tol, epsilon);
}

}  // namespace defnet
