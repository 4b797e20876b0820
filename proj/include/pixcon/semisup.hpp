#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "pixcon/trainer.hpp"

namespace pixcon {

struct PseudoLabelConfig {
  double threshold_default = 0.8;
  std::map<std::uint8_t, double> overrides;
  std::optional<std::uint8_t> background_class;
  double background_threshold = 0.97;

  /// Override if present, else the background threshold for the background
  /// class, else the default.
  double threshold_for(std::uint8_t cls) const;
  void validate() const;
};

/// Thresholds per-pixel class probabilities (H×W×C): the argmax class c
/// (lowest index on ties) is kept iff prob(c) >= threshold(c), else IGNORE.
LabelMap threshold_scores(const Tensor& probabilities, const PseudoLabelConfig& cfg);

/// Runs the model at native resolution, softmax over classes, then thresholds.
LabelMap pseudo_label(const ModelParams& params, const EncoderSpec& spec, const Tensor& pixels,
                      const PseudoLabelConfig& cfg);

/// Fraction of non-IGNORE pixels over all maps.
double pseudo_coverage(std::span<const LabelMap> maps);

struct SemisupResult {
  PipelineResult round1;
  PipelineResult round2;
  std::vector<LabeledImage> pseudo_labeled;
  double coverage = 0.0;
};

/// Trains on the labeled set, pseudo-labels the unlabeled set with that
/// model, then reruns the same pipeline from scratch on the union. When the
/// unlabeled set is empty, round 2 is round 1 and a warning is printed.
SemisupResult semisup_train(std::span<const LabeledImage> labeled, std::span<const LabeledImage> unlabeled,
                            std::span<const LabeledImage> val, const PipelineConfig& pipeline,
                            const PseudoLabelConfig& pseudo);

/// Writes each pseudo-label map to `dir`/<id>.pgm.
void write_pseudo_labels(const std::filesystem::path& dir, std::span<const LabeledImage> items);

}  // namespace pixcon
