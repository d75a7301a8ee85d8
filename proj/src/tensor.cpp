#include "hdmnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "hdmnet/kernels.hpp"

namespace hdmnet {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> detail::TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

namespace {

thread_local GradTape* g_tape = nullptr;

void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("tensor values must be finite");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

// Result of an op: finiteness is part of every op's contract.
Tensor finish(const char* op, Shape shape, std::vector<double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + " produced a non-finite value");
  }
  return make_leaf(std::move(shape), std::move(values), false);
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

template <class Fn>
void record(const char* op, Tensor& out, Fn&& fn) {
  out.impl()->requires_grad = true;
  g_tape->record(op, std::forward<Fn>(fn));
}

const kernels::KernelTable& K() { return kernels::active(); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw InvalidArgument(std::string(op) + ": undefined tensor");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Per output index along one axis: two source taps and the weight of the second.
struct LinearTaps {
  std::vector<std::size_t> lo;
  std::vector<std::size_t> hi;
  std::vector<double> frac;
};

LinearTaps half_pixel_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    t.lo[d] = i0;
    t.hi[d] = std::min(i0 + 1, in - 1);
    t.frac[d] = src - static_cast<double>(i0);
    if (t.hi[d] == i0) t.frac[d] = 0.0;
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) { return make_leaf({1}, {value}, false); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->value.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->value;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return impl_->value;
}

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  impl_->requires_grad = on;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw ShapeError("at(): index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->value[flat];
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return make_leaf(impl_->shape, impl_->value, false);
}

// ---------------------------------------------------------------------------
// Tape

void GradTape::record(std::string op, std::function<void()> backward) {
  if (consumed_) throw Error("GradTape: cannot record after backward()");
  entries_.push_back(std::move(backward));
  names_.push_back(std::move(op));
}

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw Error("GradTape: backward() already ran on this tape");
  if (!loss.defined() || loss.numel() != 1) throw ShapeError("backward() needs a scalar loss");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

TapeScope::TapeScope(GradTape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = previous_; }

GradTape* active_tape() { return g_tape; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  K().gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  Tensor y = finish("matmul", {m, n}, std::move(out));
  if (tracking({&a, &b})) {
    record("matmul", y, [ai = a.impl(), bi = b.impl(), yi = y.impl(), m, n, k] {
      if (yi->grad.empty()) return;
      const double* g = yi->grad.data();
      if (ai->requires_grad) K().gemm_nt(m, k, n, g, bi->value.data(), ai->ensure_grad().data());
      if (bi->requires_grad) K().gemm_tn(k, n, m, ai->value.data(), g, bi->ensure_grad().data());
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  K().gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data());
  Tensor y = finish("matmul_nt", {m, n}, std::move(out));
  if (tracking({&a, &b})) {
    record("matmul_nt", y, [ai = a.impl(), bi = b.impl(), yi = y.impl(), m, n, k] {
      if (yi->grad.empty()) return;
      const double* g = yi->grad.data();
      // dA = G * B, dB = G^T * A
      if (ai->requires_grad) K().gemm_nn(m, k, n, g, bi->value.data(), ai->ensure_grad().data());
      if (bi->requires_grad) K().gemm_tn(n, k, m, g, ai->value.data(), bi->ensure_grad().data());
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  Tensor y = finish("transpose", {n, m}, std::move(out));
  if (tracking({&a})) {
    record("transpose", y, [ai = a.impl(), yi = y.impl(), m, n] {
      if (yi->grad.empty()) return;
      auto ga = ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += yi->grad[j * m + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), z = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + z[i];
  Tensor y = finish("add", a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    record("add", y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const std::size_t n = yi->grad.size();
      if (ai->requires_grad) K().axpy(1.0, yi->grad.data(), ai->ensure_grad().data(), n);
      if (bi->requires_grad) K().axpy(1.0, yi->grad.data(), bi->ensure_grad().data(), n);
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), z = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - z[i];
  Tensor y = finish("sub", a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    record("sub", y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const std::size_t n = yi->grad.size();
      if (ai->requires_grad) K().axpy(1.0, yi->grad.data(), ai->ensure_grad().data(), n);
      if (bi->requires_grad) K().axpy(-1.0, yi->grad.data(), bi->ensure_grad().data(), n);
    });
  }
  return y;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.numel());
  const auto x = a.data(), z = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * z[i];
  Tensor y = finish("hadamard", a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    record("hadamard", y, [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        auto ga = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->value[i];
      }
      if (bi->requires_grad) {
        auto gb = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->value[i];
      }
    });
  }
  return y;
}

Tensor scalar_mul(const Tensor& a, double s) {
  require_defined(a, "scalar_mul");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  Tensor y = finish("scalar_mul", a.shape(), std::move(out));
  if (tracking({&a})) {
    record("scalar_mul", y, [ai = a.impl(), yi = y.impl(), s] {
      if (yi->grad.empty()) return;
      K().axpy(s, yi->grad.data(), ai->ensure_grad().data(), yi->grad.size());
    });
  }
  return y;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n) throw ShapeError("add_row_bias: bias length does not match columns");
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  Tensor y = finish("add_row_bias", x.shape(), std::move(out));
  if (tracking({&x, &bias})) {
    record("add_row_bias", y, [xi = x.impl(), bi = bias.impl(), yi = y.impl(), m, n] {
      if (yi->grad.empty()) return;
      if (xi->requires_grad) K().axpy(1.0, yi->grad.data(), xi->ensure_grad().data(), m * n);
      if (bi->requires_grad) {
        auto gb = bi->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += yi->grad[i * n + j];
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  Tensor y = finish("relu", x.shape(), std::move(out));
  if (tracking({&x})) {
    record("relu", y, [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      // subgradient at exactly 0 is 0
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xi->value[i] > 0.0) gx[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor exp(const Tensor& x) {
  require_defined(x, "exp");
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(v[i]);
  Tensor y = finish("exp", x.shape(), std::move(out));
  if (tracking({&x})) {
    record("exp", y, [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i] * yi->value[i];
    });
  }
  return y;
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(v[i]);
  Tensor y = finish("log", x.shape(), std::move(out));
  if (tracking({&x})) {
    record("log", y, [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i] / xi->value[i];
    });
  }
  return y;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const AxisSplit s = split_axis(x.shape(), axis);
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = v[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, v[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(v[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= z;
    }
  }
  Tensor y = finish("softmax", x.shape(), std::move(out));
  if (tracking({&x})) {
    record("softmax", y, [xi = x.impl(), yi = y.impl(), s] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      const auto& g = yi->grad;
      const auto& p = yi->value;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          double dotgp = 0.0;
          for (std::size_t i = 0; i < s.len; ++i) {
            const std::size_t idx = base + i * s.inner;
            dotgp += g[idx] * p[idx];
          }
          for (std::size_t i = 0; i < s.len; ++i) {
            const std::size_t idx = base + i * s.inner;
            gx[idx] += p[idx] * (g[idx] - dotgp);
          }
        }
      }
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& sh = p.shape();
    if (sh.size() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < sh.size(); ++d) {
      if (d != axis && sh[d] != ref[d]) {
        throw ShapeError("concat: extents differ off-axis " + shape_str(sh) + " vs " +
                         shape_str(ref));
      }
    }
    out_shape[axis] += sh[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;  // along axis, in units of inner
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * os.inner;
    const auto v = p.data();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * os.len * os.inner + offset * os.inner));
    }
    offset += p.dim(axis);
  }
  Tensor y = finish("concat", out_shape, std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (g_tape != nullptr && any) {
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    record("concat", y, [impls, offsets, yi = y.impl(), os, axis] {
      if (yi->grad.empty()) return;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        auto& pi = impls[k];
        if (!pi->requires_grad) continue;
        auto gp = pi->ensure_grad();
        const std::size_t chunk = pi->shape[axis] * os.inner;
        for (std::size_t o = 0; o < os.outer; ++o) {
          const double* src = yi->grad.data() + o * os.len * os.inner + offsets[k] * os.inner;
          K().axpy(1.0, src, gp.data() + o * chunk, chunk);
        }
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  validate_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  Tensor y = finish("reshape", std::move(shape), std::move(out));
  if (tracking({&x})) {
    record("reshape", y, [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      K().axpy(1.0, yi->grad.data(), xi->ensure_grad().data(), yi->grad.size());
    });
  }
  return y;
}

Tensor l2_normalize_rows(const Tensor& x, ZeroRowPolicy policy) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto v = x.data();
  std::vector<double> out(m * n, 0.0);
  std::vector<double> norms(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double r = std::sqrt(K().dot(v.data() + i * n, v.data() + i * n, n));
    norms[i] = r;
    if (r == 0.0) {
      if (policy == ZeroRowPolicy::kError) {
        throw NumericalError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
      }
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v[i * n + j] / r;
  }
  Tensor y = finish("l2_normalize_rows", x.shape(), std::move(out));
  if (tracking({&x})) {
    record("l2_normalize_rows", y, [xi = x.impl(), yi = y.impl(), norms = std::move(norms), m, n] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        if (norms[i] == 0.0) continue;
        const double* g = yi->grad.data() + i * n;
        const double* u = yi->value.data() + i * n;
        const double gu = K().dot(g, u, n);
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (g[j] - u[j] * gu) / norms[i];
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = finish("sum", {1}, {s});
  if (tracking({&x})) {
    record("sum", y, [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const double g = yi->grad[0];
      for (double& gx : xi->ensure_grad()) gx += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  return scalar_mul(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  require_rank(gamma, 1, "layer_norm_rows");
  require_rank(beta, 1, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.dim(0) != n || beta.dim(0) != n) {
    throw ShapeError("layer_norm_rows: gamma/beta length must equal columns");
  }
  const auto v = x.data(), ga = gamma.data(), be = beta.data();
  std::vector<double> xhat(m * n), out(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += v[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = v[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (v[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = ga[j] * xhat[i * n + j] + be[j];
    }
  }
  Tensor y = finish("layer_norm_rows", x.shape(), std::move(out));
  if (tracking({&x, &gamma, &beta})) {
    record("layer_norm_rows", y,
           [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl(),
            xhat = std::move(xhat), inv_std = std::move(inv_std), m, n] {
             if (yi->grad.empty()) return;
             const auto& g = yi->grad;
             if (gi->requires_grad) {
               auto gg = gi->ensure_grad();
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
             }
             if (bi->requires_grad) {
               auto gb = bi->ensure_grad();
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
             }
             if (xi->requires_grad) {
               auto gx = xi->ensure_grad();
               const double inv_n = 1.0 / static_cast<double>(n);
               for (std::size_t i = 0; i < m; ++i) {
                 double mean_d = 0.0, mean_dx = 0.0;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double d = g[i * n + j] * gi->value[j];
                   mean_d += d;
                   mean_dx += d * xhat[i * n + j];
                 }
                 mean_d *= inv_n;
                 mean_dx *= inv_n;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double d = g[i * n + j] * gi->value[j];
                   gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                 }
               }
             }
           });
  }
  return y;
}

Tensor avg_pool2x2(const Tensor& x) {
  require_rank(x, 3, "avg_pool2x2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("avg_pool2x2: spatial extents must be even, got " + shape_str(x.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  const auto v = x.data();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* p = v.data() + ch * h * w + 2 * i * w + 2 * j;
        out[(ch * oh + i) * ow + j] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  Tensor y = finish("avg_pool2x2", {c, oh, ow}, std::move(out));
  if (tracking({&x})) {
    record("avg_pool2x2", y, [xi = x.impl(), yi = y.impl(), c, h, w, oh, ow] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double g = 0.25 * yi->grad[(ch * oh + i) * ow + j];
            double* p = gx.data() + ch * h * w + 2 * i * w + 2 * j;
            p[0] += g;
            p[1] += g;
            p[w] += g;
            p[w + 1] += g;
          }
    });
  }
  return y;
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: target extents must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const LinearTaps ty = half_pixel_taps(h, out_h);
  const LinearTaps tx = half_pixel_taps(w, out_w);
  const auto v = x.data();
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = v.data() + ch * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double fy = ty.frac[i];
      const double* r0 = src + ty.lo[i] * w;
      const double* r1 = src + ty.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double fx = tx.frac[j];
        const double top = (1.0 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
        const double bot = (1.0 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
        out[(ch * out_h + i) * out_w + j] = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  Tensor y = finish("bilinear_resize", {c, out_h, out_w}, std::move(out));
  if (tracking({&x})) {
    record("bilinear_resize", y, [xi = x.impl(), yi = y.impl(), ty, tx, c, h, w, out_h, out_w] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* dst = gx.data() + ch * h * w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const double fy = ty.frac[i];
          double* r0 = dst + ty.lo[i] * w;
          double* r1 = dst + ty.hi[i] * w;
          for (std::size_t j = 0; j < out_w; ++j) {
            const double g = yi->grad[(ch * out_h + i) * out_w + j];
            const double fx = tx.frac[j];
            r0[tx.lo[j]] += (1.0 - fy) * (1.0 - fx) * g;
            r0[tx.hi[j]] += (1.0 - fy) * fx * g;
            r1[tx.lo[j]] += fy * (1.0 - fx) * g;
            r1[tx.hi[j]] += fy * fx * g;
          }
        }
      }
    });
  }
  return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t classes = logits.dim(0), positions = logits.dim(1);
  if (labels.size() != positions) throw ShapeError("softmax_cross_entropy: label count mismatch");
  const auto z = logits.data();
  std::vector<double> prob(classes * positions);
  double total = 0.0;
  for (std::size_t p = 0; p < positions; ++p) {
    const int label = labels[p];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InvalidArgument("softmax_cross_entropy: label out of range");
    }
    double mx = z[p];
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, z[k * positions + p]);
    double norm = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double e = std::exp(z[k * positions + p] - mx);
      prob[k * positions + p] = e;
      norm += e;
    }
    for (std::size_t k = 0; k < classes; ++k) prob[k * positions + p] /= norm;
    total += std::log(norm) + mx - z[static_cast<std::size_t>(label) * positions + p];
  }
  Tensor y = finish("softmax_cross_entropy", {1}, {total / static_cast<double>(positions)});
  if (tracking({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    record("softmax_cross_entropy", y,
           [li = logits.impl(), yi = y.impl(), prob = std::move(prob), lab = std::move(lab),
            classes, positions] {
             if (yi->grad.empty()) return;
             const double g = yi->grad[0] / static_cast<double>(positions);
             auto gl = li->ensure_grad();
             for (std::size_t k = 0; k < classes; ++k)
               for (std::size_t p = 0; p < positions; ++p) {
                 const double onehot = static_cast<std::size_t>(lab[p]) == k ? 1.0 : 0.0;
                 gl[k * positions + p] += g * (prob[k * positions + p] - onehot);
               }
           });
  }
  return y;
}

Tensor kl_divergence(std::span<const double> teacher, const Tensor& student, double floor) {
  require_defined(student, "kl_divergence");
  if (teacher.size() != student.numel()) throw ShapeError("kl_divergence: size mismatch");
  const auto s = student.data();
  double total = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i] < 0.0) throw InvalidArgument("kl_divergence: negative teacher probability");
    if (teacher[i] == 0.0) continue;
    total += teacher[i] * (std::log(teacher[i]) - std::log(std::max(s[i], floor)));
  }
  Tensor y = finish("kl_divergence", {1}, {total});
  if (tracking({&student})) {
    std::vector<double> t(teacher.begin(), teacher.end());
    record("kl_divergence", y, [si = student.impl(), yi = y.impl(), t = std::move(t), floor] {
      if (yi->grad.empty()) return;
      const double g = yi->grad[0];
      auto gs = si->ensure_grad();
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == 0.0 || si->value[i] <= floor) continue;
        gs[i] -= g * t[i] / si->value[i];
      }
    });
  }
  return y;
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  require_defined(x, "weighted_sum");
  if (weights.size() != x.numel()) throw ShapeError("weighted_sum: size mismatch");
  const double s = K().dot(x.data().data(), weights.data(), weights.size());
  Tensor y = finish("weighted_sum", {1}, {s});
  if (tracking({&x})) {
    std::vector<double> w(weights.begin(), weights.end());
    record("weighted_sum", y, [xi = x.impl(), yi = y.impl(), w = std::move(w)] {
      if (yi->grad.empty()) return;
      K().axpy(yi->grad[0], w.data(), xi->ensure_grad().data(), w.size());
    });
  }
  return y;
}

Tensor to_tokens(const Tensor& feature_map) {
  require_rank(feature_map, 3, "to_tokens");
  const std::size_t c = feature_map.dim(0), hw = feature_map.dim(1) * feature_map.dim(2);
  return transpose(reshape(feature_map, {c, hw}));
}

Tensor from_tokens(const Tensor& tokens, std::size_t h, std::size_t w) {
  require_rank(tokens, 2, "from_tokens");
  if (tokens.dim(0) != h * w) throw ShapeError("from_tokens: token count does not match h*w");
  const std::size_t c = tokens.dim(1);
  return reshape(transpose(tokens), {c, h, w});
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul_nt(x, weight);
  return bias.defined() ? add_row_bias(y, bias) : y;
}

}  // namespace hdmnet
