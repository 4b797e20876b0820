#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "pixcon/errors.hpp"
#include "pixcon/trainer.hpp"

using namespace pixcon;

namespace {

ModelSpec tiny_model() {
  ModelSpec m;
  m.encoder.channels = {4, 8, 8, 8};
  m.encoder.feature_dim = 8;
  m.head.projection_width = 16;
  m.head.num_classes = 4;
  return m;
}

Dataset tiny_data(std::uint64_t seed = 1, std::size_t n = 4, std::size_t n_val = 2) {
  SynthConfig s;
  s.image_size = 20;
  s.num_classes = 4;
  s.min_radius = 3.0;
  s.max_radius = 6.0;
  s.seed = seed;
  return generate_synthetic_dataset(s, n, n_val);
}

TrainConfig tiny_config(Stage stage, std::size_t steps) {
  TrainConfig c;
  c.stage = stage;
  c.steps = steps;
  c.batch_size = 2;
  c.lr0 = stage == Stage::pretrain ? 0.02 : 0.01;
  c.eval_every = 5;
  c.model = tiny_model();
  c.augment.crop_size = 17;
  c.partner_augment.crop_size = 17;
  if (stage != Stage::pretrain) c.augment = finetune_augment(), c.augment.crop_size = 17;
  return c;
}

std::string checkpoint_bytes(const ModelParams& p) {
  std::ostringstream out;
  write_checkpoint(out, p);
  return out.str();
}

std::string csv_bytes(const std::vector<MetricsRow>& rows, std::size_t classes) {
  std::ostringstream out;
  write_metrics_csv(out, rows, classes);
  return out.str();
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0.1, 0, 100) == 0.1);
  CHECK(std::abs(cosine_lr(0.1, 100, 100)) < 1e-18);
  CHECK(cosine_lr(0.1, 50, 100) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK_THROWS_AS(cosine_lr(0.1, 101, 100), ContractError);
  CHECK_THROWS_AS(cosine_lr(0.1, 0, 0), PreconditionError);
  for (std::size_t t = 1; t <= 20; ++t) CHECK(cosine_lr(1.0, t, 20) <= cosine_lr(1.0, t - 1, 20));
}

TEST_CASE("sgd step reduces to plain descent and follows the momentum recurrence") {
  ModelParams p;
  p.set("layer.weight", Tensor::from({2}, {1.0, -2.0}, true));
  p.set("layer.bias", Tensor::from({1}, {0.0}, true));
  OptimizerState state;
  SgdConfig plain{0.0, 0.0};

  p.zero_grad();
  sgd_step(p, state, 0.5, plain);
  CHECK(p.get("layer.weight").values()[0] == 1.0);

  p.get("layer.weight").impl().grad_buffer() = {0.2, 0.4};
  sgd_step(p, state, 0.5, plain);
  CHECK(p.get("layer.weight").values()[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(p.get("layer.weight").values()[1] == doctest::Approx(-2.2).epsilon(1e-15));

  // f(w) = 0.5·a·w², two steps with momentum and decay against the hand recurrence.
  const double a = 3.0, lr = 0.1, mu = 0.9, wd = 0.01;
  ModelParams q;
  q.set("x.weight", Tensor::from({1}, {2.0}, true));
  OptimizerState st;
  double w = 2.0, v = 0.0;
  for (int step = 0; step < 2; ++step) {
    q.get("x.weight").impl().grad_buffer() = {a * q.get("x.weight").values()[0]};
    sgd_step(q, st, lr, {mu, wd});
    const double g = a * w + wd * w;
    v = mu * v + g;
    w -= lr * v;
    CHECK(q.get("x.weight").values()[0] == doctest::Approx(w).epsilon(1e-15));
  }
  CHECK(st.step == 2);

  // Biases are not decayed: zero gradient keeps them at zero.
  OptimizerState sb;
  p.zero_grad();
  for (int i = 0; i < 3; ++i) sgd_step(p, sb, 1.0, {0.9, 0.5});
  CHECK(p.get("layer.bias").values()[0] == 0.0);

  p.get("layer.bias").impl().grad_buffer() = {std::nan("")};
  try {
    sgd_step(p, sb, 1.0, plain);
    FAIL("expected NonFiniteGradientError");
  } catch (const NonFiniteGradientError& e) {
    CHECK(std::string(e.what()).find("layer.bias") != std::string::npos);
  }
}

TEST_CASE("pretrain keeps stage isolation and yields a loadable checkpoint") {
  Dataset ds = tiny_data();
  TrainResult r = pretrain(ds.train, tiny_config(Stage::pretrain, 1));
  CHECK(r.params.has_prefix(kEncoderPrefix));
  CHECK(r.params.has_prefix(kProjectionPrefix));
  CHECK_FALSE(r.params.has_prefix(kClassifierPrefix));
  std::istringstream in(checkpoint_bytes(r.params));
  CHECK_NOTHROW(check_encoder(read_checkpoint(in), tiny_model().encoder));
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].contrast_loss.has_value());
  CHECK(*r.log[0].contrast_loss > 0.0);
  CHECK_THROWS_AS(pretrain({}, tiny_config(Stage::pretrain, 1)), ContractError);
}

TEST_CASE("training is bitwise deterministic") {
  Dataset ds = tiny_data(2);
  for (auto variant : {ContrastVariant::within, ContrastVariant::cross, ContrastVariant::batch}) {
    TrainConfig cfg = tiny_config(Stage::pretrain, 10);
    cfg.contrast.variant = variant;
    cfg.contrast.batch_sample_count = 40;
    TrainResult a = pretrain(ds.train, cfg), b = pretrain(ds.train, cfg);
    CHECK(checkpoint_bytes(a.params) == checkpoint_bytes(b.params));
    CHECK(csv_bytes(a.log, 4) == csv_bytes(b.log, 4));
  }
  TrainConfig ft = tiny_config(Stage::finetune, 6);
  TrainResult pre = pretrain(ds.train, tiny_config(Stage::pretrain, 3));
  TrainResult f1 = finetune(ds.train, ds.val, pre.params, ft), f2 = finetune(ds.train, ds.val, pre.params, ft);
  CHECK(checkpoint_bytes(f1.params) == checkpoint_bytes(f2.params));
  CHECK(csv_bytes(f1.log, 4) == csv_bytes(f2.log, 4));
}

TEST_CASE("fine-tuning discards the projection head and updates every encoder tensor") {
  Dataset ds = tiny_data(3);
  TrainResult pre = pretrain(ds.train, tiny_config(Stage::pretrain, 2));
  TrainResult ft = finetune(ds.train, ds.val, pre.params, tiny_config(Stage::finetune, 1));
  CHECK_FALSE(ft.params.has_prefix(kProjectionPrefix));
  CHECK(ft.params.has_prefix(kClassifierPrefix));
  for (const auto& name : ft.params.names()) {
    if (!name.starts_with(kEncoderPrefix) || name.ends_with(".bias")) continue;
    const auto& before = pre.params.get(name).values();
    const auto& after = ft.params.get(name).values();
    CHECK_FALSE(std::equal(before.begin(), before.end(), after.begin()));
  }
  REQUIRE(ft.final_metrics.has_value());

  ModelParams bad = pre.params.clone();
  bad.erase_prefix("encoder.conv1.");
  CHECK_THROWS_AS(finetune(ds.train, ds.val, bad, tiny_config(Stage::finetune, 1)), FormatError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  Dataset ds = tiny_data(4);
  TrainResult pre = pretrain(ds.train, tiny_config(Stage::pretrain, 1));
  TrainConfig cfg = tiny_config(Stage::finetune, 1);
  cfg.lr0 = 0.0;
  TrainResult ft = finetune(ds.train, ds.val, pre.params, cfg);
  for (const auto& name : ft.params.names()) {
    if (!name.starts_with(kEncoderPrefix)) continue;
    const auto& before = pre.params.get(name).values();
    CHECK(std::equal(before.begin(), before.end(), ft.params.get(name).values().begin()));
  }
  CHECK(*ft.final_metrics == evaluate(ft.params, cfg.model.encoder, ds.val, 4));
}

TEST_CASE("joint training with lambda 0 reproduces the CE-only trajectory") {
  Dataset ds = tiny_data(5);
  TrainConfig ce = tiny_config(Stage::ce_only, 6);
  TrainConfig joint = ce;
  joint.stage = Stage::joint;
  joint.joint.lambda_contrast = 0.0;
  TrainResult a = train_ce_only(ds.train, ds.val, ce);
  TrainResult b = train_joint(ds.train, ds.val, joint);
  for (const auto& name : a.params.names()) {
    const auto& x = a.params.get(name).values();
    CHECK(std::equal(x.begin(), x.end(), b.params.get(name).values().begin()));
  }
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].ce_loss == b.log[i].ce_loss);
    CHECK(b.log[i].contrast_loss.has_value());
  }
  CHECK(b.params.has_prefix(kProjectionPrefix));
}

TEST_CASE("losses stay finite over the first fifty steps") {
  Dataset ds = tiny_data(6);
  TrainConfig cfg = tiny_config(Stage::joint, 50);
  cfg.eval_every = 1;
  TrainResult r = train_joint(ds.train, ds.val, cfg);
  CHECK(r.log.size() == 50);
  for (const auto& row : r.log) CHECK(std::isfinite(row.loss));
}

TEST_CASE("evaluation: perfect predictions and IGNORE masking") {
  ModelSpec spec = tiny_model();
  Rng rng(7);
  ModelParams p = init_params(spec, rng, false, true);
  Dataset ds = tiny_data(8, 1, 3);
  // Make ground truth equal the model's own predictions.
  std::vector<LabeledImage> split = ds.val;
  for (auto& item : split) item.labels = argmax_labels(predict_logits(frozen(p), spec.encoder, item.pixels));
  CHECK(evaluate(p, spec.encoder, split, 4).miou() == 1.0);

  // Corrupting predictions only where ground truth is IGNORE leaves mIoU unchanged.
  Metrics clean(4), corrupted(4);
  for (const auto& item : ds.val) {
    LabelMap pred = argmax_labels(predict_logits(frozen(p), spec.encoder, item.pixels));
    LabelMap gt = item.labels;
    LabelMap noisy = pred;
    for (std::size_t i = 0; i < gt.size(); i += 3) {
      gt.ids[i] = kIgnore;
      noisy.ids[i] = static_cast<std::uint8_t>((pred.ids[i] + 1) % 4);
    }
    clean.accumulate(pred, gt);
    corrupted.accumulate(noisy, gt);
  }
  CHECK(clean == corrupted);
  CHECK(clean.miou() == corrupted.miou());

  Tensor ties = Tensor::full({1, 2, 3}, 1.0);
  CHECK(argmax_labels(ties).ids == std::vector<std::uint8_t>{0, 0});
}

TEST_CASE("pipeline and method names") {
  for (auto m : {Method::ce_only, Method::within, Method::cross, Method::batch}) CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS_AS(parse_method("joint"), PreconditionError);

  Dataset ds = tiny_data(9);
  PipelineConfig pc;
  pc.method = Method::cross;
  pc.pretrain = tiny_config(Stage::pretrain, 2);
  pc.finetune = tiny_config(Stage::finetune, 2);
  pc.ce_only = tiny_config(Stage::ce_only, 2);
  PipelineResult r = run_pipeline(ds.train, ds.val, pc);
  CHECK(r.pretrained.has_value());
  CHECK(r.log.size() == 2);
  pc.method = Method::ce_only;
  PipelineResult c = run_pipeline(ds.train, ds.val, pc);
  CHECK_FALSE(c.pretrained.has_value());
}

TEST_CASE("embedding bags use the projection head at the contrast resolution") {
  Dataset ds = tiny_data(10, 1, 2);
  ModelSpec spec = tiny_model();
  Rng rng(3);
  ModelParams p = init_params(spec, rng, true, false);
  auto bags = embedding_bags(p, spec.encoder, ds.val);
  REQUIRE(bags.size() == 2);
  // 20 px -> 5 feature cells -> 3 contrast cells per side.
  CHECK(bags[0].size() <= 9);
  CHECK(bags[0].features.dim(1) == 16);
  PixelBag pooled = pool_bags(bags);
  CHECK(pooled.size() == bags[0].size() + bags[1].size());
}
