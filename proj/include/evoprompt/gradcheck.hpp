#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "evoprompt/tape.hpp"

namespace evoprompt {

/// Builds a scalar loss on the given tape. Parameters must be bound with
/// tape.param() so that backward() reaches them.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_param = 0;  // index into the parameter list
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients with central differences for every
/// scalar in `params`. Error per entry is |g_a - g_fd| / max(1, |g_fd|).
inline GradCheckResult finite_diff_check_detailed(const LossBuilder& f, std::span<Tensor* const> params,
                                                  double h = 1e-5) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_check: step must be positive");
  for (Tensor* p : params) {
    if (!p->requires_grad()) p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.emplace_back(p->grad().begin(), p->grad().end());

  auto eval = [&f] {
    Tape tape;
    return f(tape).item();
  };

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double saved = p[k];
      p[k] = saved + h;
      const double up = eval();
      p[k] = saved - h;
      const double down = eval();
      p[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[pi][k] - fd) / std::max(1.0, std::abs(fd));
      ++res.checked;
      if (res.checked == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_entry = k;
        res.worst_analytic = analytic[pi][k];
        res.worst_numeric = fd;
      }
    }
  }
  for (Tensor* p : params) p->zero_grad();
  return res;
}

inline double finite_diff_check(const LossBuilder& f, std::span<Tensor* const> params, double h = 1e-5) {
  return finite_diff_check_detailed(f, params, h).max_rel_error;
}

}  // namespace evoprompt
