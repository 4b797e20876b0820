#pragma once

#include "pixcon/imageops.hpp"
#include "pixcon/tensor.hpp"

namespace pixcon {

struct JointConfig {
  /// Weight on the contrastive term. The grid-searched value used for the
  /// published ablation is unknown, so 1.0 is only a starting point.
  double lambda_contrast = 1.0;

  void validate() const;
};

/// Mean over non-IGNORE pixels of -log softmax(logits)[label].
/// `logits` is H×W×C, C >= 2. Throws EmptyError when all pixels are IGNORE.
Tensor cross_entropy(const Tensor& logits, const LabelMap& labels);

/// ce + lambda_contrast * contrast.
Tensor joint_loss(const Tensor& ce, const Tensor& contrast, const JointConfig& cfg);

}  // namespace pixcon
