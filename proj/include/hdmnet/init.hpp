#pragma once

#include <cmath>

#include "hdmnet/rng.hpp"
#include "hdmnet/tensor.hpp"

namespace hdmnet {

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), for a [out x in] weight.
inline Tensor xavier_uniform(std::size_t out, std::size_t in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> v(out * in);
  for (double& x : v) x = rng.uniform(-a, a);
  return Tensor::from({out, in}, std::move(v), true);
}

inline Tensor learnable_full(std::size_t n, double value) {
  return Tensor::full({n}, value, true);
}

}  // namespace hdmnet
