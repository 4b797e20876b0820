#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pixcon/rng.hpp"
#include "pixcon/tensor.hpp"

namespace pixcon {

/// Label value excluded from every loss, bag and metric.
inline constexpr std::uint8_t kIgnore = 255;

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> ids;  // row-major

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), ids(h * w, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return ids[y * width + x]; }
  std::size_t size() const { return ids.size(); }
  bool operator==(const LabelMap&) const = default;
};

/// RGB image (H×W×3 tensor, values in [0,1]) with its per-pixel labels.
struct LabeledImage {
  Tensor pixels;
  LabelMap labels;
  std::string id;

  std::size_t height() const { return labels.height; }
  std::size_t width() const { return labels.width; }
};

/// Throws ContractError when pixels/labels disagree in size or a label is >= num_classes.
void validate_image(const LabeledImage& image, std::size_t num_classes);

struct DistortedPair {
  LabeledImage original;
  LabeledImage distorted;
  bool was_distorted = false;
};

struct AugmentConfig {
  double distort_probability = 0.8;
  bool flip = true;
  double flip_probability = 0.5;
  double scale_lo = 0.5;
  double scale_hi = 2.0;
  std::size_t crop_size = 65;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;

  void validate() const;
};

/// Full color jitter used for contrastive pretraining.
AugmentConfig pretrain_augment();
/// Brightness/contrast-only jitter used while training the softmax classifier.
AugmentConfig finetune_augment();

/// Aligned-corners bilinear resize of an H×W×D tensor. Differentiable.
Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w);

/// Nearest-neighbour resampling of a label map under the aligned-corners
/// coordinate mapping (ties round toward the higher index).
LabelMap nearest_downsample_labels(const LabelMap& labels, std::size_t out_h, std::size_t out_w);

/// With probability cfg.distort_probability applies brightness, contrast,
/// saturation and hue jitter (in that order); geometry is untouched.
DistortedPair distort(const LabeledImage& image, const AugmentConfig& cfg, Rng& rng);

/// Random left-right flip, random rescale and a crop_size×crop_size crop.
/// Images smaller than the crop are padded (pixels 0, labels IGNORE) at the
/// bottom/right before cropping.
LabeledImage geometric_augment(const LabeledImage& image, const AugmentConfig& cfg, Rng& rng);

LabeledImage flip_horizontal(const LabeledImage& image);

}  // namespace pixcon
