#include "pixcon/trainer.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

#include "pixcon/errors.hpp"

namespace pixcon {

namespace {

// Stream purposes. Every random decision of a step draws from its own
// stream derived from (seed, purpose, step, slot), so stages that share a
// prefix of decisions (ce_only and joint) see identical draws.
enum Purpose : std::uint64_t {
  kOrder = 1,
  kGeometry = 2,
  kColor = 3,
  kPartner = 4,
  kPairing = 5,
  kSampling = 6,
  kInit = 7,
  kClassifierInit = 8,
};

// Epoch-style sampler: walks a fresh permutation of the dataset, reshuffling
// whenever it runs out.
class BatchOrder {
 public:
  BatchOrder(std::size_t n, std::uint64_t seed) : n_(n), rng_(derive_seed(seed, {kOrder})) {}

  std::size_t next() {
    if (pos_ == perm_.size()) {
      perm_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
      rng_.shuffle(std::span<std::size_t>(perm_));
      pos_ = 0;
    }
    return perm_[pos_++];
  }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t pos_ = 0;
};

Rng stream(std::uint64_t seed, Purpose purpose, std::size_t step, std::size_t slot = 0) {
  return Rng(derive_seed(seed, {purpose, step, slot}));
}

Tensor mean_of(const std::vector<Tensor>& terms) {
  if (terms.size() == 1) return terms.front();
  return scale(sum(concat(terms, 0)), 1.0 / static_cast<double>(terms.size()));
}

bool all_ignore(const LabelMap& labels) {
  for (std::uint8_t id : labels.ids) {
    if (id != kIgnore) return false;
  }
  return true;
}

struct BagPair {
  PixelBag orig;
  PixelBag dist;
};

// Encodes a view and its distorted partner, resizes features to the contrast
// resolution (half the feature map, rounded up), projects them and builds
// both bags. Returns nullopt when no labelled pixel survives downsampling.
std::optional<BagPair> contrast_bags(const ModelParams& params, const EncoderSpec& spec, const LabeledImage& view,
                                     const DistortedPair& pair, const Tensor* view_features, std::size_t index) {
  Tensor fo = view_features ? *view_features : encode(params, spec, view.pixels);
  const std::size_t rh = (fo.dim(0) + 1) / 2, rw = (fo.dim(1) + 1) / 2;
  LabelMap small = nearest_downsample_labels(view.labels, rh, rw);
  if (all_ignore(small)) return std::nullopt;
  Tensor po = project(params, bilinear_resize(fo, rh, rw));
  Tensor pd = po;
  if (pair.was_distorted) {
    Tensor fd = encode(params, spec, pair.distorted.pixels);
    pd = project(params, bilinear_resize(fd, rh, rw));
  }
  return BagPair{build_bag(po, small, {BagKind::original, index}), build_bag(pd, small, {BagKind::distorted, index})};
}

Tensor contrastive_objective(const std::vector<BagPair>& bags, const ContrastConfig& cfg, std::uint64_t seed,
                             std::size_t step) {
  std::vector<Tensor> terms;
  switch (cfg.variant) {
    case ContrastVariant::within:
      for (const auto& b : bags) terms.push_back(within_image_loss(b.orig, b.dist, cfg));
      return mean_of(terms);
    case ContrastVariant::cross: {
      if (bags.size() < 2) {
        for (const auto& b : bags) terms.push_back(within_image_loss(b.orig, b.dist, cfg));
        return mean_of(terms);
      }
      Rng rng = stream(seed, kPairing, step);
      const auto partner = derangement(bags.size(), rng);
      for (std::size_t i = 0; i < bags.size(); ++i) {
        terms.push_back(cross_image_loss(bags[i].orig, bags[i].dist, bags[partner[i]].dist, cfg));
      }
      return mean_of(terms);
    }
    case ContrastVariant::batch: {
      std::vector<PixelBag> pooled;
      for (const auto& b : bags) {
        pooled.push_back(b.orig);
        pooled.push_back(b.dist);
      }
      Rng rng(derive_seed(seed ^ cfg.batch_sample_seed, {kSampling, step}));
      return batch_loss(pooled, cfg, rng);
    }
  }
  throw ContractError("unknown contrastive variant");
}

void log_progress(const TrainConfig& cfg, const MetricsRow& row) {
  if (!cfg.verbose) return;
  std::cerr << to_string(cfg.stage) << " step " << row.step << "/" << cfg.steps << " loss " << row.loss;
  if (row.metrics) std::cerr << " miou " << row.metrics->miou();
  std::cerr << '\n';
}

bool should_log(const TrainConfig& cfg, std::size_t step) {
  return step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
}

struct StepLosses {
  Tensor total;
  std::optional<double> ce;
  std::optional<double> contrast;
};

// Shared loop: `step_loss` builds the loss of one minibatch (or returns an
// undefined tensor when every sample was fully IGNORE).
template <typename StepFn>
TrainResult run_loop(ModelParams params, std::span<const LabeledImage> val, const TrainConfig& cfg, StepFn step_loss) {
  TrainResult result;
  OptimizerState state;
  const bool has_classifier = params.has_prefix(kClassifierPrefix);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    StepLosses losses = step_loss(params, t);
    const double lr = cosine_lr(cfg.lr0, t, cfg.steps);
    double loss_value = 0.0;
    params.zero_grad();
    if (losses.total.defined()) {
      loss_value = losses.total.item();
      losses.total.backward();
    }
    losses.total = Tensor();
    sgd_step(params, state, lr, cfg.sgd);

    const std::size_t step = t + 1;
    if (should_log(cfg, step)) {
      MetricsRow row{step, to_string(cfg.stage), loss_value, losses.ce, losses.contrast, std::nullopt};
      if (has_classifier && !val.empty()) {
        row.metrics = evaluate(params, cfg.model.encoder, val, cfg.model.head.num_classes);
        result.final_metrics = row.metrics;
      }
      log_progress(cfg, row);
      result.log.push_back(std::move(row));
    }
  }
  params.zero_grad();
  result.params = std::move(params);
  return result;
}

void require_nonempty(std::span<const LabeledImage> train, const char* who) {
  if (train.empty()) throw ContractError(std::string(who) + ": training set is empty");
}

// Cross-entropy on one augmented sample; nullopt when every label is IGNORE.
struct CeSample {
  LabeledImage view;
  Tensor features;
  Tensor ce;
};

std::optional<CeSample> ce_sample(const ModelParams& params, const TrainConfig& cfg, const LabeledImage& image,
                                  std::size_t step, std::size_t slot) {
  Rng geo = stream(cfg.seed, kGeometry, step, slot);
  LabeledImage view = geometric_augment(image, cfg.augment, geo);
  Rng color = stream(cfg.seed, kColor, step, slot);
  view = distort(view, cfg.augment, color).distorted;
  if (all_ignore(view.labels)) return std::nullopt;
  Tensor f = encode(params, cfg.model.encoder, view.pixels);
  Tensor ce = cross_entropy(classify(params, f, view.height(), view.width()), view.labels);
  return CeSample{std::move(view), std::move(f), std::move(ce)};
}

TrainResult train_softmax(ModelParams params, std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                          const TrainConfig& cfg) {
  BatchOrder order(train.size(), cfg.seed);
  return run_loop(std::move(params), val, cfg, [&](const ModelParams& p, std::size_t t) {
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      auto s = ce_sample(p, cfg, train[order.next()], t, i);
      if (s) terms.push_back(s->ce);
    }
    StepLosses out;
    if (!terms.empty()) {
      out.total = mean_of(terms);
      out.ce = out.total.item();
    }
    return out;
  });
}

}  // namespace

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::pretrain: return "pretrain";
    case Stage::finetune: return "finetune";
    case Stage::joint: return "joint";
    case Stage::ce_only: return "ce_only";
  }
  return "?";
}

double cosine_lr(double lr0, std::size_t t, std::size_t total) {
  if (total < 1) throw PreconditionError("cosine_lr: total steps must be >= 1");
  if (t > total) throw ContractError("cosine_lr: step beyond schedule");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

void sgd_step(ModelParams& params, OptimizerState& state, double lr, const SgdConfig& cfg) {
  for (auto& [name, tensor] : params) {
    const std::vector<double> grad = tensor.grad();
    for (double g : grad) {
      if (!std::isfinite(g)) {
        throw NonFiniteGradientError("non-finite gradient in " + name + " at optimizer step " +
                                     std::to_string(state.step));
      }
    }
    const bool decay = name.ends_with(".weight") && cfg.weight_decay != 0.0;
    auto& v = state.velocity[name];
    if (v.size() != grad.size()) v.assign(grad.size(), 0.0);
    auto values = tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = decay ? grad[i] + cfg.weight_decay * values[i] : grad[i];
      v[i] = cfg.momentum * v[i] + g;
      values[i] -= lr * v[i];
    }
  }
  ++state.step;
}

void TrainConfig::validate() const {
  if (steps < 1) throw PreconditionError("steps must be >= 1");
  if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
  if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw PreconditionError("lr0 must be finite and >= 0");
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw PreconditionError("momentum must lie in [0,1)");
  if (sgd.weight_decay < 0.0) throw PreconditionError("weight_decay must be >= 0");
  contrast.validate();
  joint.validate();
  augment.validate();
  partner_augment.validate();
  model.encoder.validate();
  if (model.head.num_classes < 2) throw PreconditionError("need at least two classes");
}

TrainResult pretrain(std::span<const LabeledImage> train, const TrainConfig& cfg) {
  cfg.validate();
  require_nonempty(train, "pretrain");
  Rng init(derive_seed(cfg.seed, {kInit}));
  ModelParams params = init_params(cfg.model, init, /*with_projection=*/true, /*with_classifier=*/false);
  BatchOrder order(train.size(), cfg.seed);
  return run_loop(std::move(params), {}, cfg, [&](const ModelParams& p, std::size_t t) {
    std::vector<BagPair> bags;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const LabeledImage& image = train[order.next()];
      Rng geo = stream(cfg.seed, kGeometry, t, i);
      LabeledImage view = geometric_augment(image, cfg.augment, geo);
      Rng color = stream(cfg.seed, kColor, t, i);
      DistortedPair pair = distort(view, cfg.augment, color);
      if (auto b = contrast_bags(p, cfg.model.encoder, view, pair, nullptr, i)) bags.push_back(std::move(*b));
    }
    StepLosses out;
    if (!bags.empty()) {
      out.total = contrastive_objective(bags, cfg.contrast, cfg.seed, t);
      out.contrast = out.total.item();
    }
    return out;
  });
}

TrainResult finetune(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                     const ModelParams& checkpoint, const TrainConfig& cfg) {
  cfg.validate();
  require_nonempty(train, "finetune");
  check_encoder(checkpoint, cfg.model.encoder);
  ModelParams params = checkpoint.clone();
  params.erase_prefix(kProjectionPrefix);
  for (auto& [_, t] : params) t.set_requires_grad(true);
  Rng init(derive_seed(cfg.seed, {kClassifierInit}));
  init_classifier(params, cfg.model, init);
  return train_softmax(std::move(params), train, val, cfg);
}

TrainResult train_ce_only(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                          const TrainConfig& cfg) {
  cfg.validate();
  require_nonempty(train, "train_ce_only");
  Rng init(derive_seed(cfg.seed, {kInit}));
  return train_softmax(init_params(cfg.model, init, false, true), train, val, cfg);
}

TrainResult train_joint(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                        const TrainConfig& cfg) {
  cfg.validate();
  require_nonempty(train, "train_joint");
  Rng init(derive_seed(cfg.seed, {kInit}));
  ModelParams params = init_params(cfg.model, init, true, true);
  BatchOrder order(train.size(), cfg.seed);
  return run_loop(std::move(params), val, cfg, [&](const ModelParams& p, std::size_t t) {
    std::vector<Tensor> ce_terms;
    std::vector<BagPair> bags;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      auto s = ce_sample(p, cfg, train[order.next()], t, i);
      if (!s) continue;
      ce_terms.push_back(s->ce);
      Rng partner = stream(cfg.seed, kPartner, t, i);
      DistortedPair pair = distort(s->view, cfg.partner_augment, partner);
      if (auto b = contrast_bags(p, cfg.model.encoder, s->view, pair, &s->features, i)) bags.push_back(std::move(*b));
    }
    StepLosses out;
    if (ce_terms.empty()) return out;
    Tensor ce = mean_of(ce_terms);
    out.ce = ce.item();
    if (bags.empty()) {
      out.total = ce;
      out.contrast = 0.0;
      return out;
    }
    Tensor contrast = contrastive_objective(bags, cfg.contrast, cfg.seed, t);
    out.contrast = contrast.item();
    out.total = joint_loss(ce, contrast, cfg.joint);
    return out;
  });
}

ModelParams frozen(const ModelParams& params) {
  ModelParams out;
  for (const auto& [name, t] : params) out.set(name, t.detach());
  return out;
}

Tensor predict_logits(const ModelParams& params, const EncoderSpec& spec, const Tensor& pixels) {
  return classify(params, encode(params, spec, pixels), pixels.dim(0), pixels.dim(1));
}

LabelMap argmax_labels(const Tensor& logits) {
  const std::size_t h = logits.dim(0), w = logits.dim(1), c = logits.dim(2);
  LabelMap out(h, w);
  auto x = logits.values();
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (x[i * c + k] > x[i * c + best]) best = k;
    }
    out.ids[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Metrics evaluate(const ModelParams& params, const EncoderSpec& spec, std::span<const LabeledImage> split,
                 std::size_t num_classes) {
  const ModelParams inference = frozen(params);
  Metrics metrics(num_classes);
  for (const auto& item : split) {
    metrics.accumulate(argmax_labels(predict_logits(inference, spec, item.pixels)), item.labels);
  }
  return metrics;
}

std::vector<PixelBag> embedding_bags(const ModelParams& params, const EncoderSpec& spec,
                                     std::span<const LabeledImage> split) {
  const ModelParams inference = frozen(params);
  std::vector<PixelBag> bags;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const LabeledImage& item = split[i];
    Tensor f = encode(inference, spec, item.pixels);
    const std::size_t rh = (f.dim(0) + 1) / 2, rw = (f.dim(1) + 1) / 2;
    LabelMap small = nearest_downsample_labels(item.labels, rh, rw);
    if (all_ignore(small)) continue;
    bags.push_back(build_bag(project(inference, bilinear_resize(f, rh, rw)), small, {BagKind::original, i}));
  }
  return bags;
}

const char* to_string(Method method) {
  switch (method) {
    case Method::ce_only: return "ce_only";
    case Method::within: return "within";
    case Method::cross: return "cross";
    case Method::batch: return "batch";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "ce_only") return Method::ce_only;
  if (text == "within") return Method::within;
  if (text == "cross") return Method::cross;
  if (text == "batch") return Method::batch;
  throw PreconditionError("unknown method: " + text + " (expected ce_only|within|cross|batch)");
}

PipelineResult run_pipeline(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                            const PipelineConfig& cfg) {
  PipelineResult out;
  if (cfg.method == Method::ce_only) {
    TrainResult r = train_ce_only(train, val, cfg.ce_only);
    out.params = std::move(r.params);
    out.log = std::move(r.log);
    out.metrics = r.final_metrics.value_or(Metrics(cfg.ce_only.model.head.num_classes));
    return out;
  }
  TrainConfig pre = cfg.pretrain;
  pre.contrast.variant = parse_contrast_variant(to_string(cfg.method));
  TrainResult stage1 = pretrain(train, pre);
  TrainResult stage2 = finetune(train, val, stage1.params, cfg.finetune);
  out.pretrained = std::move(stage1.params);
  out.params = std::move(stage2.params);
  out.log = std::move(stage1.log);
  out.log.insert(out.log.end(), stage2.log.begin(), stage2.log.end());
  out.metrics = stage2.final_metrics.value_or(Metrics(cfg.finetune.model.head.num_classes));
  return out;
}

}  // namespace pixcon
