#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pixcon/contrastive.hpp"
#include "pixcon/datamet.hpp"
#include "pixcon/model.hpp"
#include "pixcon/objective.hpp"

namespace pixcon {

enum class Stage { pretrain, finetune, joint, ce_only };

const char* to_string(Stage stage);

/// lr0 · 0.5 · (1 + cos(pi·t/T)). Requires T >= 1 and t <= T.
double cosine_lr(double lr0, std::size_t t, std::size_t total);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 4e-5;
};

struct OptimizerState {
  std::map<std::string, std::vector<double>> velocity;
  std::size_t step = 0;
};

/// g = grad + wd·param (weights only), v = momentum·v + g, param -= lr·v.
/// Tensors whose name ends in ".bias" get no weight decay. Throws
/// NonFiniteGradientError naming the tensor if any gradient is not finite.
void sgd_step(ModelParams& params, OptimizerState& state, double lr, const SgdConfig& cfg);

struct TrainConfig {
  Stage stage = Stage::pretrain;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr0 = 0.1;
  SgdConfig sgd;
  std::uint64_t seed = 0;
  /// Log (and, for stages with a classifier, evaluate) every this many steps; 0 = final step only.
  std::size_t eval_every = 100;
  ContrastConfig contrast;
  JointConfig joint;
  /// Geometric and color augmentation of this stage. For the joint stage the
  /// distortion producing the contrastive partner uses `partner_augment`.
  AugmentConfig augment = pretrain_augment();
  AugmentConfig partner_augment = pretrain_augment();
  ModelSpec model;
  bool verbose = false;

  void validate() const;
};

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> log;
  std::optional<Metrics> final_metrics;
};

/// Contrastive pretraining of encoder + projection head from scratch.
TrainResult pretrain(std::span<const LabeledImage> train, const TrainConfig& cfg);

/// Drops the projection head, adds a fresh classifier and trains every
/// parameter with pixel-wise cross-entropy. Throws FormatError if the
/// checkpoint lacks encoder tensors.
TrainResult finetune(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                     const ModelParams& checkpoint, const TrainConfig& cfg);

/// Cross-entropy training of encoder + classifier from scratch.
TrainResult train_ce_only(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                          const TrainConfig& cfg);

/// Single-stage cross-entropy + lambda·contrastive training with both heads.
TrainResult train_joint(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                        const TrainConfig& cfg);

/// Detached copies of the parameters for inference (no graph is recorded).
ModelParams frozen(const ModelParams& params);

/// Class logits at the input resolution (fully convolutional inference).
Tensor predict_logits(const ModelParams& params, const EncoderSpec& spec, const Tensor& pixels);

/// Per-pixel argmax of logits, ties to the lowest class index.
LabelMap argmax_labels(const Tensor& logits);

Metrics evaluate(const ModelParams& params, const EncoderSpec& spec, std::span<const LabeledImage> split,
                 std::size_t num_classes);

/// Projection-head embeddings of each image of `split` at the contrast
/// resolution, one bag per image. Images left without a labelled pixel after
/// downsampling are skipped. Requires projection tensors.
std::vector<PixelBag> embedding_bags(const ModelParams& params, const EncoderSpec& spec,
                                     std::span<const LabeledImage> split);

// ---------------------------------------------------------------------------
// Whole pipelines

/// Supervised recipe: CE-only from scratch, or contrastive pretraining with
/// the named variant followed by fine-tuning.
enum class Method { ce_only, within, cross, batch };

const char* to_string(Method method);
Method parse_method(const std::string& text);

struct PipelineConfig {
  Method method = Method::within;
  TrainConfig pretrain;
  TrainConfig finetune;
  TrainConfig ce_only;
};

struct PipelineResult {
  ModelParams params;
  std::optional<ModelParams> pretrained;
  std::vector<MetricsRow> log;
  Metrics metrics;
};

PipelineResult run_pipeline(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                            const PipelineConfig& cfg);

}  // namespace pixcon
