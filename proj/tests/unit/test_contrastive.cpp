#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "../support/oracles.hpp"
#include "pixcon/contrastive.hpp"
#include "pixcon/errors.hpp"
#include "pixcon/gradcheck.hpp"

using namespace pixcon;

namespace {

ContrastConfig config(double tau = 0.07) {
  ContrastConfig c;
  c.tau = tau;
  return c;
}

// M copies of the same unit vector, all labelled `cls`.
PixelBag identical_bag(std::size_t m, std::size_t d, std::uint8_t cls) {
  std::vector<double> f(m * d, 0.0);
  for (std::size_t p = 0; p < m; ++p) f[p * d] = 1.0;
  return make_bag(Tensor::from({m, d}, f), std::vector<std::uint8_t>(m, cls));
}

PixelBag permuted(const PixelBag& bag, const std::vector<std::size_t>& perm) {
  const std::size_t d = bag.features.dim(1);
  std::vector<double> f(bag.size() * d);
  std::vector<std::uint8_t> y(bag.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(bag.features.values().begin() + static_cast<std::ptrdiff_t>(perm[i] * d), d, f.begin() + static_cast<std::ptrdiff_t>(i * d));
    y[i] = bag.labels[perm[i]];
  }
  return make_bag(Tensor::from({bag.size(), d}, f), y);
}

}  // namespace

TEST_CASE("build_bag drops IGNORE, counts classes and keeps row-major order") {
  std::vector<double> f{1, 0, 0, 1, 1, 0, 0, 1};
  LabelMap labels(2, 2);
  labels.ids = {0, 0, 1, kIgnore};
  PixelBag bag = build_bag(Tensor::from({2, 2, 2}, f), labels);
  CHECK(bag.size() == 3);
  CHECK(bag.count(0) == 2);
  CHECK(bag.count(1) == 1);

  Rng rng(1);
  const std::size_t h = 3, w = 4, d = 3;
  std::vector<double> g(h * w * d);
  for (std::size_t i = 0; i < h * w; ++i) {
    g[i * d + i % d] = 1.0;
  }
  LabelMap l(h, w);
  for (auto& id : l.ids) id = rng.bernoulli(0.3) ? kIgnore : static_cast<std::uint8_t>(rng.below(3));
  PixelBag b = build_bag(Tensor::from({h, w, d}, g), l);
  std::size_t row = 0;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (l.ids[i] == kIgnore) continue;
    CHECK(b.labels[row] == l.ids[i]);
    CHECK(b.features.values()[row * d + i % d] == 1.0);
    ++row;
  }
  CHECK(row == b.size());

  CHECK_THROWS_AS(build_bag(Tensor::from({1, 1, 2}, {1, 0}), LabelMap(1, 1, kIgnore)), EmptyError);
  CHECK_THROWS_AS(build_bag(Tensor::from({1, 1, 2}, {1, 1}), LabelMap(1, 1, 0)), ContractError);
}

TEST_CASE("pair_terms against the double loop, plus the closed-form entries") {
  Rng rng(2);
  PixelBag a = oracle::random_bag(rng, 7, 5, 3), b = oracle::random_bag(rng, 6, 5, 3);
  PairTermTable t = pair_terms(a, b, 0.07);
  auto ra = oracle::raw(a), rb = oracle::raw(b);
  for (std::size_t p = 0; p < 7; ++p) {
    for (std::size_t k = 0; k < 6; ++k) {
      CHECK(oracle::rel_err(t.at(p, k), oracle::e(ra, p, rb, k, 0.07)) <= 1e-12);
      CHECK(t.same(p, k) == (a.labels[p] == b.labels[k]));
      CHECK(t.at(p, k) > 0.0);
      CHECK(t.at(p, k) <= std::exp(1.0 / 0.07) * (1 + 1e-12));
    }
  }
  PixelBag one = make_bag(Tensor::from({2, 2}, {1, 0, 0, 1}), {0, 1});
  PairTermTable u = pair_terms(one, one, 0.07);
  CHECK(u.at(0, 0) == doctest::Approx(std::exp(1.0 / 0.07)).epsilon(1e-14));
  CHECK(u.at(0, 1) == 1.0);
  CHECK(u.same(0, 1) == u.same(1, 0));
  CHECK_THROWS_AS(pair_terms(one, one, 0.0), PreconditionError);
}

TEST_CASE("losses equal brute-force summation on random bags") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(16), classes = 1 + rng.below(4), d = 2 + rng.below(6);
    const double tau = trial % 2 == 0 ? 0.07 : 0.1 + rng.uniform();
    PixelBag I = oracle::random_bag(rng, n, d, classes);
    PixelBag Ih = oracle::relabel_like(rng, I, d);
    PixelBag Jh = oracle::random_bag(rng, 1 + rng.below(16), d, classes);
    const auto rI = oracle::raw(I), rIh = oracle::raw(Ih), rJh = oracle::raw(Jh);

    CHECK(oracle::rel_err(within_image_loss(I, Ih, config(tau)).item(), oracle::within(rI, rIh, tau)) <= 1e-10);
    CHECK(oracle::rel_err(cross_image_loss(I, Ih, Jh, config(tau)).item(), oracle::cross(rI, rIh, rJh, tau)) <= 1e-10);

    const auto pooled = oracle::concat({rI, rIh, rJh});
    bool has_anchor = false;
    for (std::size_t p = 0; p < pooled.n && !has_anchor; ++p) {
      for (std::size_t q = 0; q < pooled.n; ++q) has_anchor |= q != p && pooled.y[q] == pooled.y[p];
    }
    if (has_anchor) {
      Rng sampler(trial);
      const double got = batch_loss({I, Ih, Jh}, config(tau), sampler).item();
      CHECK(oracle::rel_err(got, oracle::batch(pooled, tau)) <= 1e-10);
    }
  }
}

TEST_CASE("closed-form values") {
  for (std::size_t m : {1u, 2u, 5u, 16u}) {
    PixelBag b = identical_bag(m, 4, 2);
    CHECK(within_image_loss(b, b, config()).item() == doctest::Approx(std::log(static_cast<double>(m))).epsilon(1e-9));
    if (m >= 2) {
      Rng r(1);
      CHECK(batch_loss({b}, config(), r).item() == doctest::Approx(std::log(static_cast<double>(m - 1))).epsilon(1e-9));
    }
  }
  PixelBag one = identical_bag(1, 3, 0);
  CHECK(within_image_loss(one, one, config()).item() == 0.0);
  CHECK(cross_image_loss(one, one, one, config()).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cross-image loss with a class-disjoint partner is bitwise the within loss") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 3 + rng.below(4);
    PixelBag I = oracle::random_bag(rng, 1 + rng.below(12), d, 3);
    PixelBag Ih = oracle::relabel_like(rng, I, d);
    PixelBag J = oracle::random_bag(rng, 1 + rng.below(12), d, 2);
    std::vector<std::uint8_t> shifted(J.labels);
    for (auto& y : shifted) y = static_cast<std::uint8_t>(y + 3);
    J = make_bag(J.features, shifted);
    CHECK(cross_image_loss(I, Ih, J, config()).item() == within_image_loss(I, Ih, config()).item());
  }
}

TEST_CASE("losses are nonnegative and permutation invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(14), d = 4;
    PixelBag I = oracle::random_bag(rng, n, d, 3);
    PixelBag Ih = oracle::relabel_like(rng, I, d);
    PixelBag J = oracle::random_bag(rng, 2 + rng.below(10), d, 3);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));

    const double w = within_image_loss(I, Ih, config()).item();
    const double c = cross_image_loss(I, Ih, J, config()).item();
    CHECK(w >= 0.0);
    CHECK(c >= 0.0);
    CHECK(within_image_loss(permuted(I, perm), permuted(Ih, perm), config()).item() == doctest::Approx(w).epsilon(1e-12));
    CHECK(cross_image_loss(permuted(I, perm), permuted(Ih, perm), J, config()).item() == doctest::Approx(c).epsilon(1e-12));

    ContrastConfig all = config();
    all.batch_sample_count = 1000;
    try {
      Rng s1(1), s2(1);
      const double b = batch_loss({I, Ih}, all, s1).item();
      CHECK(b >= 0.0);
      CHECK(batch_loss({permuted(I, perm), permuted(Ih, perm)}, all, s2).item() == doctest::Approx(b).epsilon(1e-12));
    } catch (const DegenerateBatchError&) {
    }
  }
}

TEST_CASE("lower temperature lowers the loss at the ideal configuration") {
  // Same-class similarity 1, cross-class similarity -1.
  std::vector<double> f{1, 0, 1, 0, -1, 0, -1, 0};
  PixelBag b = make_bag(Tensor::from({4, 2}, f), {0, 0, 1, 1});
  double prev = 1e300;
  for (double tau : {1.0, 0.5, 0.2, 0.07, 0.03}) {
    const double v = within_image_loss(b, b, config(tau)).item();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("every contrastive loss passes the finite-difference check") {
  Rng rng(6);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t n = 2 + rng.below(14), d = 3 + rng.below(3);
    PixelBag I = oracle::random_bag(rng, n, d, 3);
    PixelBag Ih = oracle::relabel_like(rng, I, d);
    PixelBag J = oracle::random_bag(rng, 2 + rng.below(10), d, 3);
    auto as_bag = [&](const Tensor& raw, const PixelBag& like) { return make_bag(l2_normalize(raw), like.labels); };
    const double tau = 0.2;
    CHECK(grad_check([&](const Tensor& x) { return within_image_loss(as_bag(x, I), Ih, config(tau)); }, I.features) < 1e-4);
    CHECK(grad_check([&](const Tensor& x) { return within_image_loss(I, as_bag(x, Ih), config(tau)); }, Ih.features) < 1e-4);
    CHECK(grad_check([&](const Tensor& x) { return cross_image_loss(I, Ih, as_bag(x, J), config(tau)); }, J.features) < 1e-4);
    CHECK(grad_check([&](const Tensor& x) { auto b = as_bag(x, I); return cross_image_loss(b, b, J, config(tau)); },
                     I.features) < 1e-4);
    try {
      CHECK(grad_check([&](const Tensor& x) { Rng s(3); return batch_loss({as_bag(x, I), Ih}, config(tau), s); },
                       I.features) < 1e-4);
    } catch (const DegenerateBatchError&) {
    }
  }
}

TEST_CASE("batch loss sampling and degenerate cases") {
  Rng rng(7);
  PixelBag a = oracle::random_bag(rng, 12, 4, 3), b = oracle::random_bag(rng, 12, 4, 3);
  ContrastConfig few = config();
  few.batch_sample_count = 9;
  Rng s1(5), s2(5);
  CHECK(batch_loss({a, b}, few, s1).item() == batch_loss({a, b}, few, s2).item());

  PixelBag distinct = make_bag(Tensor::from({3, 2}, {1, 0, 0, 1, 1, 0}), {0, 1, 2});
  Rng s3(1);
  CHECK_THROWS_AS(batch_loss({distinct}, config(), s3), DegenerateBatchError);
}

TEST_CASE("embedding_stats definition and oracle") {
  PixelBag same = identical_bag(4, 3, 0);
  std::vector<std::uint8_t> two{0, 0, 1, 1};
  PixelBag same2 = make_bag(same.features, two);
  auto s = embedding_stats(same2);
  CHECK(s.intra == doctest::Approx(1.0));
  CHECK(s.inter == doctest::Approx(1.0));

  PixelBag ortho = make_bag(Tensor::from({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1}), two);
  auto o = embedding_stats(ortho);
  CHECK(o.intra == 1.0);
  CHECK(o.inter == 0.0);

  Rng rng(8);
  PixelBag r = oracle::random_bag(rng, 30, 5, 3);
  auto raw = oracle::raw(r);
  double intra = 0, inter = 0;
  std::size_t ni = 0, ne = 0;
  for (std::size_t p = 0; p < raw.n; ++p) {
    for (std::size_t q = 0; q < raw.n; ++q) {
      if (p == q) continue;
      const double v = oracle::dot(raw, p, raw, q);
      if (raw.y[p] == raw.y[q]) {
        intra += v;
        ++ni;
      } else {
        inter += v;
        ++ne;
      }
    }
  }
  auto st = embedding_stats(r);
  CHECK(st.intra == doctest::Approx(intra / static_cast<double>(ni)).epsilon(1e-12));
  CHECK(st.inter == doctest::Approx(inter / static_cast<double>(ne)).epsilon(1e-12));

  CHECK_THROWS_AS(embedding_stats(identical_bag(5, 3, 1)), ContractError);
}

TEST_CASE("derangement never fixes a point; embedding CSV layout") {
  Rng rng(9);
  for (std::size_t n = 2; n < 12; ++n) {
    auto perm = derangement(n, rng);
    std::vector<std::size_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(perm[i] != i);
      CHECK(sorted[i] == i);
    }
  }
  CHECK_THROWS_AS(derangement(1, rng), PreconditionError);

  std::ostringstream out;
  write_embedding_csv(out, {make_bag(Tensor::from({2, 2}, {1, 0, 0, 1}), {3, 4})});
  std::istringstream in(out.str());
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "pixel_index,class_id,f0,f1");
  CHECK(row == "0,3,1,0");
}

TEST_CASE("variant names round trip") {
  for (auto v : {ContrastVariant::within, ContrastVariant::cross, ContrastVariant::batch}) {
    CHECK(parse_contrast_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_contrast_variant("pairs"), PreconditionError);
  ContrastConfig bad;
  bad.tau = 0.0;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);
}
