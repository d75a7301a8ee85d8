#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hdmnet/tensor.hpp"

namespace hdmnet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // Check at most this many entries per tensor (evenly strided); 0 = all.
  std::size_t max_entries_per_tensor = 0;
};

// Compares the reverse-mode gradient of a scalar loss against central
// differences (f(x+h) - f(x-h)) / 2h for every entry of every listed tensor.
// `loss` must be deterministic and rebuild its graph on each call.
GradCheckReport grad_check(const std::function<Tensor()>& loss,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

namespace testing_ops {
// x^2 elementwise with a deliberately wrong-signed gradient; exists so the
// harness can prove it detects bugs.
Tensor faulty_square(const Tensor& x);
}  // namespace testing_ops

}  // namespace hdmnet
