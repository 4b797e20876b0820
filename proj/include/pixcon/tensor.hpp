#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle: copies alias the same storage and gradient
// slot, the way autograd tensors usually behave. Every forward op returns a
// fresh tensor; when any input requires a gradient, the result records a
// node that knows how to push its output gradient back to its inputs.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pixcon {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;
struct TensorImpl;

/// Pushes the gradient held in `out.grad` back into the inputs' grad slots.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct GradNode {
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<GradNode> node;

  /// Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct write access. Only leaves may be mutated (optimizer updates).
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient slot; zeros when nothing has been accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  /// Reverse pass from a scalar; accumulates into every reachable grad slot.
  void backward() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;
  /// Deep copy (values and requires_grad flag, no graph).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl& impl() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Builds an op result. When any input requires grad, `backward` is attached.
/// Non-finite output values raise NumericDomainError naming `op`.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Accumulates into an input's grad slot only when it participates in autodiff.
inline bool wants_grad(const Tensor& t) { return t.requires_grad(); }

/// Sum with pairwise (cascade) reduction in fixed index order.
double pairwise_sum(std::span<const double> values);

// Elementwise arithmetic, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

/// (n×k)·(k×m). `transpose_b` multiplies by bᵀ with b of shape m×k.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// Adds a bias vector along the last axis.
Tensor add_bias(const Tensor& a, const Tensor& bias);

/// 2-D convolution of an H×W×Cin map with a kh×kw×Cin×Cout kernel, "same"
/// zero padding, output size ceil(in/stride). `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

/// Divides each vector along the last axis by (norm + eps).
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Selects rows of a 2-D tensor (repeats allowed).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

}  // namespace pixcon
