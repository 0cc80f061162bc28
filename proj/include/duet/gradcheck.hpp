#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "duet/tensor.hpp"

namespace duet {

// Verification harness: compares reverse-mode gradients of a scalar-valued
// function against central finite differences (five-point stencil, so the
// step can stay large enough that cancellation noise does not swamp entries
// with tiny true gradients).
//
// Returns max over all input entries of |analytic - numeric| /
// max(1e-8, |analytic| + |numeric|). A NaN in either estimate yields +inf so
// callers treating the result as a failure threshold reject it.
//
// The function must be deterministic; freeze any sampling noise before
// checking a stochastic path.
inline double grad_check(const std::function<Tensor(std::span<const Tensor>)>& fn,
                         std::span<Tensor> inputs, double step = 1e-3) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }

  {
    Tape tape;
    Tensor loss = fn(inputs);
    if (!loss.is_scalar()) throw ContractError("grad_check needs a scalar-valued function");
    tape.backward(loss);
  }

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto vals = inputs[t].values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      auto eval_at = [&](double x) {
        vals[i] = x;
        return fn(inputs).value();
      };
      const double up1 = eval_at(saved + step);
      const double up2 = eval_at(saved + 2.0 * step);
      const double down1 = eval_at(saved - step);
      const double down2 = eval_at(saved - 2.0 * step);
      vals[i] = saved;

      const double numeric = (down2 - 8.0 * down1 + 8.0 * up1 - up2) / (12.0 * step);
      const double a = analytic[t][i];
      if (std::isnan(a) || std::isnan(numeric)) return std::numeric_limits<double>::infinity();
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace duet
