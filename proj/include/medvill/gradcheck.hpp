#pragma once

#include "medvill/autodiff.hpp"
#include "medvill/params.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace medvill {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares tape gradients with central differences over every coordinate
/// of every tensor. The relative error of one coordinate is
/// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero by
/// construction (e.g. attention key biases) from being judged on rounding
/// noise alone.
inline GradCheckResult grad_check(const std::function<Var<double>(Tape<double>&, const ModelParams<double>&)>& loss_fn,
                                  ModelParams<double> params, double step = 1e-5, double floor = 1e-5) {
  Tape<double> tape;
  tape.backward(loss_fn(tape, params));
  const auto analytic = tape.parameter_gradients();
  auto evaluate = [&](const ModelParams<double>& p) {
    Tape<double> t(false);
    return loss_fn(t, p).value()(0, 0);
  };
  GradCheckResult result;
  for (auto& [name, tensor] : params.tensors) {
    auto it = analytic.find(name);
    for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
      for (Eigen::Index c = 0; c < tensor.cols(); ++c) {
        const double original = tensor(r, c);
        tensor(r, c) = original + step;
        const double up = evaluate(params);
        tensor(r, c) = original - step;
        const double down = evaluate(params);
        tensor(r, c) = original;
        const double numeric = (up - down) / (2.0 * step);
        const double a = it == analytic.end() ? 0.0 : it->second(r, c);
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        ++result.coordinates;
        if (err > result.max_relative_error || result.worst_tensor.empty()) {
          result.max_relative_error = err;
          result.worst_tensor = name;
          result.worst_row = r;
          result.worst_col = c;
          result.worst_analytic = a;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace medvill
