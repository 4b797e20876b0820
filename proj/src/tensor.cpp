#include "pixcon/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pixcon/errors.hpp"

namespace pixcon {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap cmap(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Eigen picks kernels by pointer alignment, and std::vector only promises 16 bytes, so identical
// products could round differently from run to run. Products go through owned matrices instead.
RowMat owned(const std::vector<double>& v, std::size_t rows, std::size_t cols) { return cmap(v, rows, cols); }

void store(const RowMat& m, std::vector<double>& out) { std::copy(m.data(), m.data() + m.size(), out.begin()); }

void accumulate(const RowMat& m, std::vector<double>& out) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) out[static_cast<std::size_t>(i)] += src[i];
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_axis(const char* op, const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_string(a.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [a, deriv](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    auto x = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(x[i], o.values[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("Tensor: zero-sized dimension in " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                         shape_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("Tensor: use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("Tensor::dim: axis out of range");
  return impl().shape[axis];
}

std::size_t Tensor::numel() const { return impl().values.size(); }

std::span<const double> Tensor::values() const { return impl().values; }

std::span<double> Tensor::mutable_values() {
  if (impl().node) throw ContractError("Tensor: cannot mutate a non-leaf tensor");
  return impl().values;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("Tensor::item on tensor of shape " + shape_string(shape()));
  return impl().values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { impl().requires_grad = flag; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->values.size(); }

std::vector<double> Tensor::grad() const {
  if (has_grad()) return impl().grad;
  return std::vector<double>(numel(), 0.0);
}

void Tensor::zero_grad() { impl().grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), impl().values, false); }

Tensor Tensor::clone() const { return from(shape(), impl().values, requires_grad()); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = &node->node->inputs[next++].impl();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->node && t->grad.size() == t->values.size()) t->node->backward(*t);
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericDomainError(std::string(op) + ": non-finite output");
  }
  Tensor out = Tensor::from(std::move(shape), std::move(values), false);
  const bool track = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return wants_grad(t); });
  if (track) {
    out.impl().requires_grad = true;
    out.impl().node = std::make_shared<GradNode>(GradNode{std::move(inputs), std::move(backward)});
  }
  return out;
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 16) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    for (const Tensor* t : {&a, &b}) {
      if (!wants_grad(*t)) continue;
      auto& g = t->impl().grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    if (wants_grad(a)) {
      auto& g = a.impl().grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(b)) {
      auto& g = b.impl().grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    if (wants_grad(a)) {
      auto& g = a.impl().grad_buffer();
      auto y = b.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * y[i];
    }
    if (wants_grad(b)) {
      auto& g = b.impl().grad_buffer();
      auto x = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * x[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_result("div", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    auto y = b.values();
    if (wants_grad(a)) {
      auto& g = a.impl().grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / y[i];
    }
    if (wants_grad(b)) {
      auto& g = b.impl().grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * o.values[i] / y[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; },
               [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: operands must be 2-D");
  const std::size_t n = a.dim(0), k = a.dim(1);
  const std::size_t m = transpose_b ? b.dim(0) : b.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  std::vector<double> out(n * m);
  {
    const RowMat A = owned(a.impl().values, n, k);
    const RowMat C = transpose_b ? RowMat(A * owned(b.impl().values, m, k).transpose())
                                 : RowMat(A * owned(b.impl().values, k, m));
    store(C, out);
  }
  return make_result("matmul", {n, m}, std::move(out), {a, b},
                     [a, b, n, k, m, transpose_b](const TensorImpl& o) {
    const RowMat G = owned(o.grad, n, m);
    if (wants_grad(a)) {
      const RowMat B = transpose_b ? owned(b.impl().values, m, k) : owned(b.impl().values, k, m);
      const RowMat dA = transpose_b ? RowMat(G * B) : RowMat(G * B.transpose());
      accumulate(dA, a.impl().grad_buffer());
    }
    if (wants_grad(b)) {
      const RowMat A = owned(a.impl().values, n, k);
      const RowMat dB = transpose_b ? RowMat(G.transpose() * A) : RowMat(A.transpose() * G);
      accumulate(dB, b.impl().grad_buffer());
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rank() != 1 || a.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(a.shape()));
  }
  const std::size_t c = bias.dim(0);
  const std::size_t rows = a.numel() / c;
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bv[j];
  }
  return make_result("add_bias", a.shape(), std::move(out), {a, bias}, [a, bias, rows, c](const TensorImpl& o) {
    if (wants_grad(a)) {
      auto& g = a.impl().grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(bias)) {
      auto& g = bias.impl().grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[r * c + j];
      }
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw DimensionError("conv2d: expected H×W×C input and kh×kw×Cin×Cout kernel");
  }
  if (stride == 0) throw PreconditionError("conv2d: stride must be positive");
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  if (kernel.dim(2) != cin) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) + " does not accept " +
                         std::to_string(cin) + " input channels");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias shape " + shape_string(bias.shape()));
  }
  const std::size_t oh = (h + stride - 1) / stride;
  const std::size_t ow = (w + stride - 1) / stride;
  const std::size_t pad_h = std::max<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>((oh - 1) * stride + kh) - static_cast<std::ptrdiff_t>(h), 0);
  const std::size_t pad_w = std::max<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>((ow - 1) * stride + kw) - static_cast<std::ptrdiff_t>(w), 0);
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(pad_h / 2);
  const std::ptrdiff_t left = static_cast<std::ptrdiff_t>(pad_w / 2);
  const std::size_t patch = kh * kw * cin;
  const std::size_t npix = oh * ow;

  // im2col: one row per output pixel, columns ordered (ky, kx, c) to match the kernel layout.
  auto cols = std::make_shared<RowMat>(RowMat::Zero(static_cast<Eigen::Index>(npix), static_cast<Eigen::Index>(patch)));
  auto x = input.values();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* row = cols->data() + (oy * ow + ox) * patch;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - top;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - left;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const double* src = x.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          std::copy(src, src + cin, row + (ky * kw + kx) * cin);
        }
      }
    }
  }

  std::vector<double> out(npix * cout);
  store(RowMat(*cols * owned(kernel.impl().values, patch, cout)), out);
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t p = 0; p < npix; ++p) {
      for (std::size_t j = 0; j < cout; ++j) out[p * cout + j] += bv[j];
    }
  }

  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("conv2d", {oh, ow, cout}, std::move(out), std::move(inputs),
                     [=](const TensorImpl& o) {
    const RowMat G = owned(o.grad, npix, cout);
    if (wants_grad(kernel)) accumulate(RowMat(cols->transpose() * G), kernel.impl().grad_buffer());
    if (bias.defined() && wants_grad(bias)) {
      auto& gb = bias.impl().grad_buffer();
      for (std::size_t p = 0; p < npix; ++p) {
        for (std::size_t j = 0; j < cout; ++j) gb[j] += o.grad[p * cout + j];
      }
    }
    if (wants_grad(input)) {
      const RowMat dcols = G * owned(kernel.impl().values, patch, cout).transpose();
      auto& gx = input.impl().grad_buffer();
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double* row = dcols.data() + (oy * ow + ox) * patch;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - top;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - left;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              double* dst = gx.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
              const double* src = row + (ky * kw + kx) * cin;
              for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_axis("softmax", a, axis);
  const AxisSplit s = split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      double mx = x[base];
      for (std::size_t k = 1; k < s.length; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.length; ++k) {
        out[base + k * s.inner] = std::exp(x[base + k * s.inner] - mx);
        z += out[base + k * s.inner];
      }
      for (std::size_t k = 0; k < s.length; ++k) out[base + k * s.inner] /= z;
    }
  }
  return make_result("softmax", a.shape(), std::move(out), {a}, [a, s](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = ou * s.length * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.length; ++k) dot += o.grad[base + k * s.inner] * o.values[base + k * s.inner];
        for (std::size_t k = 0; k < s.length; ++k) {
          const std::size_t idx = base + k * s.inner;
          g[idx] += o.values[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  require_axis("log_softmax", a, axis);
  const AxisSplit s = split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.length * s.inner + i;
      double mx = x[base];
      for (std::size_t k = 1; k < s.length; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.length; ++k) z += std::exp(x[base + k * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.length; ++k) out[base + k * s.inner] = x[base + k * s.inner] - lse;
    }
  }
  return make_result("log_softmax", a.shape(), std::move(out), {a}, [a, s](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = ou * s.length * s.inner + i;
        double total = 0.0;
        for (std::size_t k = 0; k < s.length; ++k) total += o.grad[base + k * s.inner];
        for (std::size_t k = 0; k < s.length; ++k) {
          const std::size_t idx = base + k * s.inner;
          g[idx] += o.grad[idx] - std::exp(o.values[idx]) * total;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  return make_result("sum", {1}, {pairwise_sum(a.values())}, {a}, [a](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  return make_result("mean", {1}, {pairwise_sum(a.values()) / n}, {a}, [a, n](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (double& v : g) v += o.grad[0] / n;
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  require_axis("sum", a, axis);
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.length; ++k) {
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.length + k) * s.inner + i];
    }
  }
  return make_result("sum_axis", std::move(shape), std::move(out), {a}, [a, s](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t k = 0; k < s.length; ++k) {
        for (std::size_t i = 0; i < s.inner; ++i) g[(ou * s.length + k) * s.inner + i] += o.grad[ou * s.inner + i];
      }
    }
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  require_axis("mean", a, axis);
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor l2_normalize(const Tensor& a, double eps) {
  if (a.rank() == 0) throw DimensionError("l2_normalize: empty shape");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(a.numel());
  auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
    const double n = std::sqrt(ss);
    (*norms)[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] / (n + eps);
  }
  return make_result("l2_normalize", a.shape(), std::move(out), {a}, [a, norms, d, rows, eps](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    auto x = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = (*norms)[r];
      const double denom = n + eps;
      double gx = 0.0;
      for (std::size_t j = 0; j < d; ++j) gx += o.grad[r * d + j] * x[r * d + j];
      const double coef = n > 0.0 ? gx / (denom * denom * n) : 0.0;
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.grad[r * d + j] / denom - coef * x[r * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [a](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw PreconditionError("concat: no inputs");
  require_axis("concat", parts[0], axis);
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.dim(i) != shape[i]) {
        throw DimensionError("concat: " + shape_string(p.shape()) + " vs " + shape_string(shape));
      }
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.dim(axis);
    auto x = p.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.data() + o * len * s.inner, len * s.inner,
                  out.data() + (o * s.length + offset) * s.inner);
    }
    offset += len;
  }
  return make_result("concat", shape, std::move(out), parts, [parts, s, axis](const TensorImpl& o) {
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      const std::size_t len = p.dim(axis);
      if (wants_grad(p)) {
        auto& g = p.impl().grad_buffer();
        for (std::size_t ou = 0; ou < s.outer; ++ou) {
          const double* src = o.grad.data() + (ou * s.length + off) * s.inner;
          double* dst = g.data() + ou * len * s.inner;
          for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
        }
      }
      off += len;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_axis("slice", a, axis);
  if (begin >= end || end > a.dim(axis)) {
    throw DimensionError("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on " + shape_string(a.shape()));
  }
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(shape_numel(shape));
  auto x = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + (o * s.length + begin) * s.inner, len * s.inner, out.data() + o * len * s.inner);
  }
  return make_result("slice", std::move(shape), std::move(out), {a}, [a, s, begin, len](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      const double* src = o.grad.data() + ou * len * s.inner;
      double* dst = g.data() + (ou * s.length + begin) * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() != 2) throw DimensionError("gather_rows: expected 2-D tensor");
  if (rows.empty()) throw PreconditionError("gather_rows: empty row list");
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(rows.size() * d);
  auto x = a.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result("gather_rows", {rows.size(), d}, std::move(out), {a}, [a, idx, d](const TensorImpl& o) {
    auto& g = a.impl().grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
    }
  });
}

}  // namespace pixcon
