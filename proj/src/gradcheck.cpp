#include "pixcon/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pixcon/contrastive.hpp"
#include "pixcon/errors.hpp"
#include "pixcon/objective.hpp"
#include "pixcon/rng.hpp"

namespace pixcon {

namespace {

double evaluate(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const double v = f(x).item();
  if (!std::isfinite(v)) throw NumericDomainError("grad_check: function value is not finite");
  return v;
}

Tensor gaussian(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t classes) {
  LabelMap l(h, w);
  for (auto& id : l.ids) id = static_cast<std::uint8_t>(rng.below(classes));
  // At least one class repeated, so the batch loss always has a positive pair.
  l.ids[1] = l.ids[0];
  return l;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("grad_check: eps must be positive");

  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  Tensor out = f(leaf);
  if (!std::isfinite(out.item())) throw NumericDomainError("grad_check: function value is not finite");
  out.backward();
  const std::vector<double> analytic = leaf.grad();

  double worst = 0.0;
  Tensor probe = x.detach();
  auto values = probe.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = evaluate(f, probe);
    values[i] = saved - eps;
    const double down = evaluate(f, probe);
    values[i] = saved;
    const double central = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
  }
  return worst;
}

std::vector<LossGradCheck> check_loss_gradients(std::uint64_t seed, std::size_t trials) {
  std::vector<LossGradCheck> out{{"within", 0.0}, {"cross", 0.0}, {"batch", 0.0}, {"ce", 0.0}, {"joint", 0.0}};
  Rng rng(seed);
  ContrastConfig cc;
  JointConfig jc;
  jc.lambda_contrast = 0.5;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t h = 2 + rng.below(2), w = 2 + rng.below(3), d = 4 + rng.below(3), c = 2 + rng.below(3);
    const LabelMap la = random_labels(rng, h, w, c), lb = random_labels(rng, h, w, c),
                   lo = random_labels(rng, h, w, c);
    const Tensor x = gaussian(rng, {h, w, d});
    const Tensor dist = gaussian(rng, {h, w, d});
    const Tensor other = gaussian(rng, {h, w, d});
    auto bag = [](const Tensor& f, const LabelMap& l) { return build_bag(l2_normalize(f), l); };

    // The probed tensor feeds both the anchors and the distorted view so both
    // gradient paths are exercised.
    const double errs[] = {
        grad_check([&](const Tensor& v) { return within_image_loss(bag(v, la), bag(add(v, dist), la), cc); }, x),
        grad_check([&](const Tensor& v) {
          return cross_image_loss(bag(v, la), bag(add(v, dist), la), bag(add(v, other), lo), cc);
        }, x),
        grad_check([&](const Tensor& v) {
          Rng sampler(seed + t);
          return batch_loss({bag(v, la), bag(add(v, dist), lb)}, cc, sampler);
        }, x),
        grad_check([&](const Tensor& v) { return cross_entropy(v, lo); }, x),
        grad_check([&](const Tensor& v) {
          return joint_loss(cross_entropy(v, lo), within_image_loss(bag(v, la), bag(add(v, dist), la), cc), jc);
        }, x),
    };
    for (std::size_t i = 0; i < out.size(); ++i) out[i].max_rel_error = std::max(out[i].max_rel_error, errs[i]);
  }
  return out;
}

}  // namespace pixcon
