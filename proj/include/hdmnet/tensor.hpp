#pragma once

// Dense row-major double tensors with define-by-run reverse-mode gradients.
//
// Ops record a backward closure on the thread's active GradTape when one is
// installed (see TapeScope) and at least one input requires a gradient.
// Without an active tape ops are pure value computations, which is what the
// finite-difference harness and inference use.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hdmnet/error.hpp"

namespace hdmnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::span<double> ensure_grad();
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place access for parameter updates and test setup. Not for use on
  // tensors that already feed a recorded graph.
  std::span<double> mutable_data();

  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool requires_grad() const;
  void set_requires_grad(bool on);

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  // Fresh leaf holding a copy of the values.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed ops. backward() walks it once, newest first.
class GradTape {
 public:
  void record(std::string op, std::function<void()> backward);
  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be a scalar.
  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<std::string>& op_names() const { return names_; }

 private:
  std::vector<std::function<void()>> entries_;
  std::vector<std::string> names_;
  bool consumed_ = false;
};

// Installs a tape as the thread's active tape for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

// Suspends recording (teacher detachment, metrics, priors).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* active_tape();

// ---------------------------------------------------------------------------
// Ops

// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// 2-D transpose.
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
// x[m x n] + bias[n] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);

enum class ZeroRowPolicy {
  kError,    // zero row is a NumericalError
  kZeroOut,  // zero row stays zero (its cosine against anything is 0)
};
// Each row of x[m x n] divided by its L2 norm.
Tensor l2_normalize_rows(const Tensor& x, ZeroRowPolicy policy = ZeroRowPolicy::kError);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Per-row layer normalization of x[m x n] with learnable gamma[n], beta[n].
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

// [c x h x w] -> [c x h/2 x w/2]
Tensor avg_pool2x2(const Tensor& x);

// [c x h x w] -> [c x out_h x out_w], half-pixel centers (align_corners=false),
// edge-clamped.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Mean over positions of -log softmax(logits[:, p])[labels[p]] for logits
// [classes x positions].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// sum_i teacher_i * log(teacher_i / max(student_i, floor)). The teacher is a
// constant; gradient flows to the student only. Terms with teacher_i == 0
// contribute 0.
Tensor kl_divergence(std::span<const double> teacher, const Tensor& student,
                     double floor = 1e-12);

// Weighted reduction sum_i w_i x_i for a constant weight vector.
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);

// Composites.

// Token-major view of a feature map: [c x h x w] -> [hw x c].
Tensor to_tokens(const Tensor& feature_map);
// Inverse of to_tokens: [hw x c] -> [c x h x w].
Tensor from_tokens(const Tensor& tokens, std::size_t h, std::size_t w);
// x[m x in] * weight[out x in]^T (+ bias[out] when defined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

}  // namespace hdmnet
