#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fbdebias/tensor.hpp"

namespace fbd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coefficient of l2 * ||theta||^2; its gradient 2 * l2 * theta is added
  /// to the supplied gradient.
  double l2 = 0.0;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  long step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, const ParameterSet& params);
};

void adam_step(ParameterSet& params, const std::vector<Tensor>& grads, AdamState& state);

/// Value of the objective; when `grads` is non-null it is filled with the
/// analytic gradient (same layout as params.zero_gradients()).
using Objective = std::function<double(const ParameterSet& params, std::vector<Tensor>* grads)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t parameter = 0;
  std::size_t element = 0;
  std::string parameter_name;
  bool passed = true;
};

/// Compares the analytic gradient against central differences on every
/// element. Relative error is |a - n| / max(|a|, |n|, 1e-4) so that entries
/// that are zero up to rounding do not dominate.
GradCheckResult grad_check(const Objective& f, ParameterSet params, double eps = 1e-5, double tol = 1e-4);

}  // namespace fbd
