#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "trace/params.hpp"
#include "trace/tensor.hpp"

namespace trace {

// Central-difference gradient verification. The forward callable must be a
// pure function of the parameter store: called repeatedly it rebuilds the
// same computation on a fresh graph and returns the scalar loss node.
// Everything runs in double; the error metric is a scaled relative error
// |a - fd| / max(|a|, |fd|, floor). The floor absorbs the O(h^2) truncation
// noise of the stencil on near-zero gradients, where a pure ratio is
// meaningless.

struct GradCheckOptions {
  double h = 1e-4;
  double floor = 1e-3;
  // Debug knob for the checker's self-test: scales analytic gradients so a
  // deliberately wrong backward pass is observable end to end.
  double fault_scale = 1.0;
  // Restricts the check to selected parameters. Parameters deliberately held
  // constant inside the objective (stop-gradient semantics) must be excluded,
  // since the stencil sees their true partial derivative.
  std::function<bool(const ParameterT<double>&)> select;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;

  bool pass(double tol = 1e-4) const { return checked > 0 && max_rel_err <= tol; }
};

template <typename Forward>
GradCheckReport check_gradients(ParamStoreT<double>& params, Forward&& forward,
                                GradCheckOptions opt = {}) {
  params.zero_grads();
  {
    GraphT<double> g(true);
    auto loss = forward(g);
    g.backward(loss);
  }
  if (opt.fault_scale != 1.0) {
    params.for_each([&](ParameterT<double>& p) {
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] *= opt.fault_scale;
    });
  }

  auto eval_loss = [&]() {
    GraphT<double> g(false);
    auto loss = forward(g);
    return static_cast<double>(g.value(loss).scalar_value());
  };

  GradCheckReport report;
  params.for_each([&](ParameterT<double>& p) {
    if (opt.select && !opt.select(p)) return;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + opt.h;
      const double lp = eval_loss();
      p.value[i] = saved - opt.h;
      const double lm = eval_loss();
      p.value[i] = saved;
      const double fd = (lp - lm) / (2.0 * opt.h);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(fd), opt.floor});
      const double rel = std::abs(analytic - fd) / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = i;
      }
    }
  });
  return report;
}

}  // namespace trace
