#include <doctest.h>

#include <cmath>
#include <numeric>

#include "pixcon/errors.hpp"
#include "pixcon/gradcheck.hpp"
#include "pixcon/rng.hpp"
#include "pixcon/tensor.hpp"

using namespace pixcon;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Direct convolution with TF-style same padding, used as the oracle for conv2d.
std::vector<double> naive_conv(const Tensor& in, const Tensor& k, const Tensor& b, std::size_t stride) {
  const std::size_t h = in.dim(0), w = in.dim(1), ci = in.dim(2);
  const std::size_t kh = k.dim(0), kw = k.dim(1), co = k.dim(3);
  const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  const long pad_h = static_cast<long>(std::max<long>(0, static_cast<long>((oh - 1) * stride + kh) - static_cast<long>(h)));
  const long pad_w = static_cast<long>(std::max<long>(0, static_cast<long>((ow - 1) * stride + kw) - static_cast<long>(w)));
  const long top = pad_h / 2, left = pad_w / 2;
  std::vector<double> out(oh * ow * co, 0.0);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t o = 0; o < co; ++o) {
        double s = b.defined() ? b.values()[o] : 0.0;
        for (std::size_t dy = 0; dy < kh; ++dy) {
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const long y = static_cast<long>(oy * stride + dy) - top;
            const long x = static_cast<long>(ox * stride + dx) - left;
            if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
            for (std::size_t c = 0; c < ci; ++c) {
              s += in.values()[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * ci + c] *
                   k.values()[((dy * kw + dx) * ci + c) * co + o];
            }
          }
        }
        out[(oy * ow + ox) * co + o] = s;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("relu, l2_normalize and softmax on their definitions") {
  Tensor r = relu(Tensor::from({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{0, 0, 2});

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor v = random_tensor(rng, {1 + rng.below(4), 1 + rng.below(9)});
    Tensor n = l2_normalize(v);
    for (std::size_t i = 0; i < v.dim(0); ++i) {
      double s = 0.0, raw = 0.0;
      for (std::size_t j = 0; j < v.dim(1); ++j) {
        s += n.values()[i * v.dim(1) + j] * n.values()[i * v.dim(1) + j];
        raw += v.values()[i * v.dim(1) + j] * v.values()[i * v.dim(1) + j];
      }
      // The stabilizing epsilon sits in the denominator, so short rows land a hair under 1.
      const double expected = std::sqrt(raw) / (std::sqrt(raw) + 1e-12);
      CHECK(std::abs(std::sqrt(s) - expected) < 1e-12);
    }
  }

  for (std::size_t c : {2u, 3u, 7u}) {
    Tensor s = softmax(Tensor::full({2, c}, 3.5), 1);
    for (double x : s.values()) CHECK(x == doctest::Approx(1.0 / static_cast<double>(c)).epsilon(1e-15));
  }
}

TEST_CASE("backward of sum(x^2) and of an unrelated leaf") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = Tensor::from({2}, {5, -3}, true);
  Tensor loss = sum(square(x));
  loss.backward();
  CHECK(x.grad() == std::vector<double>{2, 4});
  CHECK(y.grad() == std::vector<double>{0, 0});
}

TEST_CASE("log-softmax gradient matches central differences") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor(rng, {1, 2 + rng.below(6)});
    const double err = grad_check([](const Tensor& t) { return slice(log_softmax(t, 1), 1, 0, 1); }, x);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("grad_check is exact on a linear function and validates its inputs") {
  Rng rng(4);
  // Dyadic inputs and a power-of-two step keep every finite difference exact.
  std::vector<double> dyadic(12);
  for (auto& v : dyadic) v = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 8.0;
  Tensor x = Tensor::from({3, 4}, dyadic);
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, x, 1.0 / 1024.0) == 0.0);
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(t); }, x, 0.0), PreconditionError);
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(log(scale(t, 0.0))); }, x), NumericDomainError);
}

TEST_CASE("shape and domain errors") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(log(a), NumericDomainError);
  CHECK_THROWS_AS(div(Tensor::full({2}, 1.0), Tensor::zeros({2})), NumericDomainError);
  Tensor x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(square(x).backward(), ContractError);
}

TEST_CASE("matmul agrees with the triple loop on random shapes") {
  Rng rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6);
    Tensor a = random_tensor(rng, {n, k});
    Tensor b = random_tensor(rng, {k, m});
    Tensor bt = random_tensor(rng, {m, k});
    Tensor c = matmul(a, b);
    Tensor ct = matmul(a, bt, true);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0, st = 0.0;
        for (std::size_t l = 0; l < k; ++l) {
          s += a.values()[i * k + l] * b.values()[l * m + j];
          st += a.values()[i * k + l] * bt.values()[j * k + l];
        }
        CHECK(c.values()[i * m + j] == doctest::Approx(s).epsilon(1e-12));
        CHECK(ct.values()[i * m + j] == doctest::Approx(st).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d matches direct same-padded convolution, forward and backward") {
  Rng rng(6);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t h = 2 + rng.below(8), w = 2 + rng.below(8), ci = 1 + rng.below(3), co = 1 + rng.below(3);
    const std::size_t kk = rng.bernoulli(0.5) ? 3 : 1, stride = 1 + rng.below(2);
    Tensor in = random_tensor(rng, {h, w, ci});
    Tensor k = random_tensor(rng, {kk, kk, ci, co});
    Tensor b = random_tensor(rng, {co});
    Tensor out = conv2d(in, k, b, stride);
    CHECK(out.dim(0) == (h + stride - 1) / stride);
    CHECK(out.dim(1) == (w + stride - 1) / stride);
    const auto ref = naive_conv(in, k, b, stride);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    auto loss_in = [&](const Tensor& t) { return sum(square(conv2d(t, k, b, stride))); };
    auto loss_k = [&](const Tensor& t) { return sum(square(conv2d(in, t, b, stride))); };
    auto loss_b = [&](const Tensor& t) { return sum(square(conv2d(in, k, t, stride))); };
    CHECK(grad_check(loss_in, in) < 1e-6);
    CHECK(grad_check(loss_k, k) < 1e-6);
    CHECK(grad_check(loss_b, b) < 1e-6);
  }
}

TEST_CASE("gradients of the elementwise, reduction and reshaping ops") {
  Rng rng(7);
  Tensor x = random_tensor(rng, {3, 4});
  Tensor y = random_tensor(rng, {3, 4});
  Tensor pos = Tensor::from({3, 4}, [&] {
    std::vector<double> v(12);
    for (auto& e : v) e = 0.5 + rng.uniform();
    return v;
  }());
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(add(t, y), sub(t, y))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(div(y, t)); }, pos) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(log(t)); }, pos) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(exp(scale(t, 0.5))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(softmax(t, 0))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(mean(t, 1))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(sum(t, 0))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return mean(square(l2_normalize(t))) + sum(mul(l2_normalize(t), y)); }, x) <
        1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(reshape(t, {4, 3}))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(concat({t, y}, 1), concat({y, t}, 1))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(concat({t, y}, 0), concat({y, t}, 0))); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(square(slice(t, 1, 1, 3))); }, x) < 1e-6);
  const std::vector<std::size_t> rows{2, 0, 2};
  CHECK(grad_check([&](const Tensor& t) { return sum(square(gather_rows(t, rows))); }, x) < 1e-6);
  Tensor bias = random_tensor(rng, {4});
  CHECK(grad_check([&](const Tensor& t) { return sum(square(add_bias(x, t))); }, bias) < 1e-6);
}

TEST_CASE("concat then slice recovers the parts") {
  Rng rng(8);
  Tensor a = random_tensor(rng, {2, 3, 2});
  Tensor b = random_tensor(rng, {2, 1, 2});
  Tensor c = concat({a, b}, 1);
  Tensor a2 = slice(c, 1, 0, 3), b2 = slice(c, 1, 3, 4);
  CHECK(std::equal(a.values().begin(), a.values().end(), a2.values().begin()));
  CHECK(std::equal(b.values().begin(), b.values().end(), b2.values().begin()));
}

TEST_CASE("pairwise_sum matches a long double reference") {
  Rng rng(9);
  for (std::size_t n : {1u, 5u, 16u, 17u, 1000u}) {
    std::vector<double> v(n);
    long double ref = 0.0L;
    for (auto& x : v) {
      x = rng.normal();
      ref += x;
    }
    CHECK(pairwise_sum(v) == doctest::Approx(static_cast<double>(ref)).epsilon(1e-12));
  }
}

TEST_CASE("Rng streams are reproducible and well behaved") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));

  Rng r(5);
  double mean_u = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mean_u += u / 20000.0;
  }
  CHECK(mean_u == doctest::Approx(0.5).epsilon(0.02));

  auto s = r.sample_without_replacement(20, 7);
  std::sort(s.begin(), s.end());
  CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
  CHECK(s.back() < 20);

  std::vector<int> items(10);
  std::iota(items.begin(), items.end(), 0);
  r.shuffle(std::span<int>(items));
  std::sort(items.begin(), items.end());
  for (int i = 0; i < 10; ++i) CHECK(items[static_cast<std::size_t>(i)] == i);
}
