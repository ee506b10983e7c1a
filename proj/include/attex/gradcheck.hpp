#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "attex/tensor.hpp"

namespace attex {

// Central-difference gradient verification: (f(p+h) - f(p-h)) / 2h per scalar
// parameter against one analytic backward pass. Returns the max relative
// error |analytic - numeric| / max(1, |analytic| + |numeric|). Meant to run
// with S = double; at float precision the difference quotient drowns in
// rounding noise.
template <typename S>
double grad_check(const std::function<Tensor<S>()>& fn, std::vector<Tensor<S>> params, S h) {
  for (auto& p : params) p.zero_grad();

  Tape<S> tape;
  Tensor<S> loss;
  {
    TapeScope<S> scope(tape);
    loss = fn();
  }
  backward(tape, loss);

  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const S saved = vals[i];
      vals[i] = saved + h;
      const double fp = static_cast<double>(fn().item());
      vals[i] = saved - h;
      const double fm = static_cast<double>(fn().item());
      vals[i] = saved;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[pi][i]);
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a) + std::abs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace attex
