#include "fbdebias/optim.hpp"

#include <algorithm>
#include <cmath>

#include "fbdebias/error.hpp"

namespace fbd {

AdamState::AdamState(AdamConfig cfg, const ParameterSet& params)
    : config(cfg), first_moment(params.zero_gradients()), second_moment(params.zero_gradients()) {}

void adam_step(ParameterSet& params, const std::vector<Tensor>& grads, AdamState& state) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size())
    fail(ErrorCode::ShapeMismatch, "adam_step: parameter, gradient and state counts differ");
  const AdamConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double step_size = c.lr / bc1;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = params.values[p];
    const Tensor& g = grads[p];
    if (g.shape() != theta.shape())
      fail(ErrorCode::ShapeMismatch, "adam_step: gradient shape mismatch for '" + params.names[p] + "'");
    double* m = state.first_moment[p].data();
    double* v = state.second_moment[p].data();
    double* th = theta.data();
    const double* gr = g.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = gr[i] + 2.0 * c.l2 * th[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      th[i] -= step_size * m[i] / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
}

GradCheckResult grad_check(const Objective& f, ParameterSet params, double eps, double tol) {
  std::vector<Tensor> analytic = params.zero_gradients();
  f(params, &analytic);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params.values[p].size(); ++i) {
      double& x = params.values[p][i];
      const double saved = x;
      x = saved + eps;
      const double up = f(params, nullptr);
      x = saved - eps;
      const double down = f(params, nullptr);
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.parameter = p;
        result.element = i;
        result.parameter_name = params.names[p];
      }
    }
  }
  result.passed = result.max_relative_error < tol;
  return result;
}

}  // namespace fbd
