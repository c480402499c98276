#pragma once

// Central finite-difference oracle for the autodiff engine. Test-only: it
// reads and perturbs leaf values directly and never calls backward itself
// for the numeric side.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mmformer/rng.hpp"
#include "mmformer/tensor.hpp"

namespace mmformer::testing {

struct InputError {
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double difference_norm = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  // ||analytic - numeric|| / max(||analytic||, ||numeric||) over all inputs as one vector.
  double global_relative_error = 0.0;
  std::vector<InputError> inputs;
};

// Relative error per input tensor: ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
// The floor keeps inputs whose true gradient is zero (e.g. key biases under
// softmax shift invariance) from turning rounding noise into a large ratio.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                  double step = 1e-5, double floor = 1e-4) {
  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = loss_fn();
  backward(loss);

  GradCheckResult result;
  double total_diff = 0.0, total_na = 0.0, total_nn = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const auto analytic = t.grad();
    auto values = t.mutable_data();
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + step;
      const double up = loss_fn().item();
      values[i] = keep - step;
      const double down = loss_fn().item();
      values[i] = keep;
      numeric[i] = (up - down) / (2.0 * step);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    total_diff += diff;
    total_na += na;
    total_nn += nn;
    result.inputs.push_back({std::sqrt(na), std::sqrt(nn), std::sqrt(diff)});
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_input = k;
    }
  }
  result.global_relative_error =
      std::sqrt(total_diff) / std::max({std::sqrt(total_na), std::sqrt(total_nn), floor});
  return result;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace mmformer::testing
