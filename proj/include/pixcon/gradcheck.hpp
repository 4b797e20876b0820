#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pixcon/tensor.hpp"

namespace pixcon {

/// Compares the autodiff gradient of a scalar function with central finite
/// differences. Returns max over coordinates of
/// |autodiff - central| / max(1, |central|).
/// Throws PreconditionError for eps <= 0 and NumericDomainError when f(x)
/// is not finite.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-6);

struct LossGradCheck {
  std::string loss;
  double max_rel_error = 0.0;
};

/// grad_check of every training loss (the three contrastive variants, CE and
/// joint) on `trials` random small inputs each, at tau 0.07. Reports the worst
/// error per loss.
std::vector<LossGradCheck> check_loss_gradients(std::uint64_t seed, std::size_t trials = 3);

}  // namespace pixcon
