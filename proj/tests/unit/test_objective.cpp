#include <doctest.h>

#include <cmath>

#include "../support/oracles.hpp"
#include "pixcon/errors.hpp"
#include "pixcon/gradcheck.hpp"
#include "pixcon/objective.hpp"

using namespace pixcon;

namespace {

Tensor random_logits(Rng& rng, std::size_t h, std::size_t w, std::size_t c, double spread = 1.0) {
  std::vector<double> v(h * w * c);
  for (auto& x : v) x = spread * rng.normal();
  return Tensor::from({h, w, c}, std::move(v));
}

LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t c, double ignore = 0.2) {
  LabelMap l(h, w);
  for (auto& id : l.ids) id = rng.bernoulli(ignore) ? kIgnore : static_cast<std::uint8_t>(rng.below(c));
  if (std::all_of(l.ids.begin(), l.ids.end(), [](auto v) { return v == kIgnore; })) l.ids[0] = 0;
  return l;
}

double naive_ce(const Tensor& logits, const LabelMap& labels) {
  const std::size_t c = logits.dim(2);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.ids[i] == kIgnore) continue;
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits.values()[i * c + k]);
    total -= std::log(std::exp(logits.values()[i * c + labels.ids[i]]) / z);
    ++n;
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("cross entropy closed forms") {
  for (std::size_t c : {2u, 6u, 21u}) {
    CHECK(cross_entropy(Tensor::full({3, 2, c}, 0.7), LabelMap(3, 2, 1)).item() ==
          doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-14));
  }
  std::vector<double> v(4 * 3, 0.0);
  for (std::size_t i = 0; i < 4; ++i) v[i * 3 + 2] = 50.0;
  CHECK(cross_entropy(Tensor::from({2, 2, 3}, v), LabelMap(2, 2, 2)).item() < 1e-20);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 2, 3}), LabelMap(2, 2, kIgnore)), EmptyError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 2, 3}), LabelMap(2, 3, 0)), DimensionError);
}

TEST_CASE("cross entropy against the naive formula, and masking") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 1 + rng.below(5), w = 1 + rng.below(5), c = 2 + rng.below(5);
    Tensor logits = random_logits(rng, h, w, c, 3.0);
    LabelMap labels = random_labels(rng, h, w, c);
    CHECK(oracle::rel_err(cross_entropy(logits, labels).item(), naive_ce(logits, labels)) < 1e-12);
  }

  // Half ignored equals CE on the other half alone.
  Tensor logits = random_logits(rng, 2, 4, 3);
  LabelMap half(2, 4);
  half.ids = {0, 1, 2, 0, kIgnore, kIgnore, kIgnore, kIgnore};
  Tensor top = slice(logits, 0, 0, 1);
  LabelMap top_labels(1, 4);
  top_labels.ids = {0, 1, 2, 0};
  CHECK(cross_entropy(logits, half).item() == doctest::Approx(cross_entropy(top, top_labels).item()).epsilon(1e-14));
}

TEST_CASE("cross entropy gradient: finite differences, zero class-sum, shift invariance") {
  Rng rng(2);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4), c = 2 + rng.below(4);
    Tensor logits = random_logits(rng, h, w, c);
    LabelMap labels = random_labels(rng, h, w, c);
    CHECK(grad_check([&](const Tensor& x) { return cross_entropy(x, labels); }, logits) < 1e-4);

    Tensor leaf = Tensor::from(logits.shape(), std::vector<double>(logits.values().begin(), logits.values().end()), true);
    cross_entropy(leaf, labels).backward();
    const auto g = leaf.grad();
    for (std::size_t i = 0; i < h * w; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += g[i * c + k];
      CHECK(std::abs(s) < 1e-9);
      if (labels.ids[i] == kIgnore) {
        for (std::size_t k = 0; k < c; ++k) CHECK(g[i * c + k] == 0.0);
      }
    }

    std::vector<double> shifted(logits.values().begin(), logits.values().end());
    for (std::size_t i = 0; i < h * w; ++i) {
      const double delta = 10.0 * rng.normal();
      for (std::size_t k = 0; k < c; ++k) shifted[i * c + k] += delta;
    }
    CHECK(cross_entropy(Tensor::from(logits.shape(), shifted), labels).item() ==
          doctest::Approx(cross_entropy(logits, labels).item()).epsilon(1e-9));
  }
}

TEST_CASE("joint loss arithmetic, reduction and linearity of gradients") {
  JointConfig one;
  CHECK(joint_loss(Tensor::scalar(0.5), Tensor::scalar(2.0), one).item() == 2.5);
  JointConfig zero;
  zero.lambda_contrast = 0.0;
  CHECK(joint_loss(Tensor::scalar(0.5), Tensor::scalar(2.0), zero).item() == 0.5);
  JointConfig bad;
  bad.lambda_contrast = -1.0;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);

  Rng rng(3);
  Tensor logits = random_logits(rng, 2, 3, 3);
  LabelMap labels = random_labels(rng, 2, 3, 3, 0.0);
  PixelBag like = oracle::random_bag(rng, 6, 3, 2);
  JointConfig cfg;
  cfg.lambda_contrast = 0.37;
  ContrastConfig cc;
  cc.tau = 0.3;

  // Logits double as a 6×3 feature map for the contrastive term.
  auto contrast_of = [&](const Tensor& x) {
    return within_image_loss(make_bag(l2_normalize(reshape(x, {6, 3})), like.labels),
                             make_bag(l2_normalize(reshape(x, {6, 3})), like.labels), cc);
  };
  auto grad_of = [&](auto fn) {
    Tensor leaf = Tensor::from(logits.shape(), std::vector<double>(logits.values().begin(), logits.values().end()), true);
    fn(leaf).backward();
    return leaf.grad();
  };
  const auto gj = grad_of([&](const Tensor& x) { return joint_loss(cross_entropy(x, labels), contrast_of(x), cfg); });
  const auto gc = grad_of([&](const Tensor& x) { return cross_entropy(x, labels); });
  const auto gk = grad_of([&](const Tensor& x) { return contrast_of(x); });
  for (std::size_t i = 0; i < gj.size(); ++i) CHECK(gj[i] == doctest::Approx(gc[i] + 0.37 * gk[i]).epsilon(1e-12));
  CHECK(grad_check([&](const Tensor& x) { return joint_loss(cross_entropy(x, labels), contrast_of(x), cfg); }, logits) <
        1e-4);
}
