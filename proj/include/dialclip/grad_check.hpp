#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dialclip/tensor.hpp"

namespace dialclip {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  // Location of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckOptions {
  double step = 1e-4;
  double tol = 1e-3;
  // Per tensor, at most this many coordinates are probed (0 = all). Chosen
  // coordinates are spread evenly with a fixed stride.
  std::size_t max_coords_per_param = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// `loss_fn` must rebuild its graph from the current parameter values each
/// call. Analytic gradients can be supplied through `analytic_override` to
/// check a hand-written gradient instead of the tape.
inline GradCheckReport grad_check(
    const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, const GradCheckOptions& opt,
    const std::function<std::vector<std::vector<double>>()>& analytic_override = {}) {
  if (!(opt.step > 0.0)) throw ContractError("grad_check: step must be positive");
  std::vector<std::vector<double>> analytic;
  if (analytic_override) {
    analytic = analytic_override();
  } else {
    for (auto& p : params) p.zero_grad();
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
    backward(loss);
    for (auto& p : params) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else
        analytic.emplace_back(p.numel(), 0.0);
    }
  }
  if (analytic.size() != params.size()) throw ContractError("grad_check: gradient count mismatch");

  GradCheckReport report;
  NoGradGuard guard;
  auto eval = [&] {
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite under perturbation");
    return v;
  };
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_values();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (opt.max_coords_per_param > 0 && n > opt.max_coords_per_param)
      stride = (n + opt.max_coords_per_param - 1) / opt.max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      values[i] = orig + opt.step;
      const double up = eval();
      values[i] = orig - opt.step;
      const double down = eval();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(analytic[pi][i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = analytic[pi][i];
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tol;
  return report;
}

}  // namespace dialclip
