#include "hdmnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hdmnet {

GradCheckReport grad_check(const std::function<Tensor()>& loss,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  std::vector<std::vector<double>> analytic;
  {
    for (const NamedTensor& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
      t.set_requires_grad(true);
    }
    GradTape tape;
    Tensor value;
    {
      TapeScope scope(tape);
      value = loss();
    }
    if (!std::isfinite(value.item())) throw NumericalError("grad_check: non-finite loss");
    tape.backward(value);
    for (const NamedTensor& p : params) {
      const auto g = p.tensor.grad();
      if (g.empty()) {
        analytic.emplace_back(p.tensor.numel(), 0.0);
      } else {
        analytic.emplace_back(g.begin(), g.end());
      }
    }
  }

  GradCheckReport report;
  NoGradScope no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto values = t.mutable_data();
    std::size_t stride = 1;
    if (options.max_entries_per_tensor > 0 && values.size() > options.max_entries_per_tensor) {
      stride = (values.size() + options.max_entries_per_tensor - 1) / options.max_entries_per_tensor;
    }
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = loss().item();
      values[i] = saved - options.step;
      const double down = loss().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError("grad_check: non-finite loss under perturbation");
      }
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = abs_err / denom;
      ++report.entries_checked;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = params[k].name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

namespace testing_ops {

Tensor faulty_square(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * v[i];
  Tensor y = Tensor::from(x.shape(), std::move(out));
  if (GradTape* tape = active_tape(); tape != nullptr && x.requires_grad()) {
    y.set_requires_grad(true);
    tape->record("faulty_square", [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= 2.0 * xi->value[i] * yi->grad[i];
    });
  }
  return y;
}

}  // namespace testing_ops
}  // namespace hdmnet
