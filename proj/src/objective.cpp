#include "pixcon/objective.hpp"

#include <cmath>

#include "pixcon/errors.hpp"

namespace pixcon {

void JointConfig::validate() const {
  if (!std::isfinite(lambda_contrast) || lambda_contrast < 0.0) {
    throw PreconditionError("lambda_contrast must be finite and >= 0");
  }
}

Tensor cross_entropy(const Tensor& logits, const LabelMap& labels) {
  if (logits.rank() != 3 || logits.dim(0) != labels.height || logits.dim(1) != labels.width) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " vs labels " +
                         std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
  const std::size_t c = logits.dim(2);
  if (c < 2) throw PreconditionError("cross_entropy: need at least two classes");
  const std::size_t npix = labels.ids.size();
  auto x = logits.values();

  // Per-pixel log-partition, kept for the backward pass.
  auto lse = std::make_shared<std::vector<double>>(npix, 0.0);
  std::vector<double> terms;
  terms.reserve(npix);
  for (std::size_t i = 0; i < npix; ++i) {
    const std::uint8_t y = labels.ids[i];
    if (y == kIgnore) continue;
    if (y >= c) throw ContractError("cross_entropy: label " + std::to_string(y) + " >= class count");
    const double* row = &x[i * c];
    double mx = row[0];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(row[k] - mx);
    (*lse)[i] = mx + std::log(z);
    terms.push_back((*lse)[i] - row[y]);
  }
  if (terms.empty()) throw EmptyError("cross_entropy: every pixel is IGNORE");
  const double count = static_cast<double>(terms.size());
  const double value = pairwise_sum(terms) / count;

  return make_result("cross_entropy", {1}, {value}, {logits}, [logits, labels, lse, c, count](const TensorImpl& o) {
    auto& g = logits.impl().grad_buffer();
    auto x = logits.values();
    const double scale = o.grad[0] / count;
    for (std::size_t i = 0; i < labels.ids.size(); ++i) {
      const std::uint8_t y = labels.ids[i];
      if (y == kIgnore) continue;
      for (std::size_t k = 0; k < c; ++k) {
        const double p = std::exp(x[i * c + k] - (*lse)[i]);
        g[i * c + k] += scale * (p - (k == y ? 1.0 : 0.0));
      }
    }
  });
}

Tensor joint_loss(const Tensor& ce, const Tensor& contrast, const JointConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(ce.item()) || !std::isfinite(contrast.item())) {
    throw NumericDomainError("joint_loss: non-finite component");
  }
  return add(ce, scale(contrast, cfg.lambda_contrast));
}

}  // namespace pixcon
