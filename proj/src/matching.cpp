#include "hdmnet/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hdmnet/feature_pyramid.hpp"
#include "hdmnet/init.hpp"

namespace hdmnet {
namespace {

void require_binary(const Tensor& mask, const char* op) {
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw InvalidArgument(std::string(op) + ": mask must be binary");
  }
}

void require_feature_map(const Tensor& f, std::size_t channels, const char* op) {
  if (f.rank() != 3 || f.dim(0) != channels) {
    throw ShapeError(std::string(op) + ": expected [" + std::to_string(channels) +
                     " x h x w], got " + shape_str(f.shape()));
  }
}

// Mask [h x w] replicated over channels as a constant [c x h x w].
Tensor broadcast_mask(const Tensor& mask, std::size_t channels) {
  const auto m = mask.data();
  std::vector<double> v(channels * m.size());
  for (std::size_t c = 0; c < channels; ++c) std::copy(m.begin(), m.end(), v.begin() + static_cast<std::ptrdiff_t>(c * m.size()));
  return Tensor::from({channels, mask.dim(0), mask.dim(1)}, std::move(v));
}

Tensor prior_column(const Tensor& prior, std::size_t hq, std::size_t wq) {
  if (prior.rank() != 2 || prior.dim(0) != hq || prior.dim(1) != wq) {
    throw ShapeError("match: prior must be [" + std::to_string(hq) + " x " + std::to_string(wq) +
                     "], got " + shape_str(prior.shape()));
  }
  return reshape(prior, {hq * wq, 1});
}

MatchResult finish_match(const Tensor& retrieved, const Tensor& prior, CorrelationMap map,
                         const MatchingParams& params, std::size_t hq, std::size_t wq) {
  Tensor fused = concat({retrieved, prior_column(prior, hq, wq)}, 1);
  Tensor out = from_tokens(linear(fused, params.wo), hq, wq);
  return MatchResult{out, retrieved, std::move(map)};
}

}  // namespace

MatchingParams MatchingParams::init(std::size_t channels, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw InvalidArgument("MatchingParams: temperature must be > 0");
  MatchingParams p;
  p.channels = channels;
  p.temperature = temperature;
  p.wq = xavier_uniform(channels, channels, rng);
  p.wk = xavier_uniform(channels, channels, rng);
  p.wv = xavier_uniform(channels, channels, rng);
  p.wo = xavier_uniform(channels, channels + 1, rng);
  return p;
}

void MatchingParams::append_named(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".wq", wq});
  out.push_back({prefix + ".wk", wk});
  out.push_back({prefix + ".wv", wv});
  out.push_back({prefix + ".wo", wo});
}

TransformedFeatures transform_features(const Tensor& query_features, const Tensor& support_features,
                                       const Tensor& support_mask) {
  if (query_features.rank() != 3 || support_features.rank() != 3) {
    throw ShapeError("transform_features: features must be [c x h x w]");
  }
  if (query_features.dim(0) != support_features.dim(0)) {
    throw ShapeError("transform_features: channel counts differ");
  }
  if (support_mask.rank() != 2 || support_mask.dim(0) != support_features.dim(1) ||
      support_mask.dim(1) != support_features.dim(2)) {
    throw ShapeError("transform_features: mask " + shape_str(support_mask.shape()) +
                     " does not match support features " + shape_str(support_features.shape()));
  }
  require_binary(support_mask, "transform_features");
  Tensor masked = hadamard(support_features, broadcast_mask(support_mask, support_features.dim(0)));
  return TransformedFeatures{to_tokens(query_features), to_tokens(masked)};
}

CorrelationMap correlation(const Tensor& query_tokens, const Tensor& support_tokens,
                           const MatchingParams& params) {
  if (query_tokens.rank() != 2 || support_tokens.rank() != 2 ||
      query_tokens.dim(1) != params.channels || support_tokens.dim(1) != params.channels) {
    throw ShapeError("correlation: token matrices must be [n x " + std::to_string(params.channels) +
                     "]");
  }
  Tensor q = l2_normalize_rows(linear(query_tokens, params.wq), ZeroRowPolicy::kError);
  Tensor k = l2_normalize_rows(linear(support_tokens, params.wk), ZeroRowPolicy::kZeroOut);
  CorrelationMap map;
  map.values = scalar_mul(matmul_nt(q, k), 1.0 / params.temperature);
  return map;
}

Tensor inverse_softmax(const CorrelationMap& map) { return softmax(map.values, 0); }

Tensor prior_mask(const Tensor& query_features, const Tensor& support_features,
                  const Tensor& support_mask) {
  NoGradScope no_grad;
  const std::size_t c = query_features.dim(0);
  require_feature_map(support_features, c, "prior_mask");
  if (support_mask.rank() != 2 || support_mask.dim(0) != support_features.dim(1) ||
      support_mask.dim(1) != support_features.dim(2)) {
    throw ShapeError("prior_mask: mask does not match support features");
  }
  const std::size_t hq = query_features.dim(1), wq = query_features.dim(2);
  const std::size_t nq = hq * wq, ns = support_features.dim(1) * support_features.dim(2);
  const auto fq = query_features.data(), fs = support_features.data(), m = support_mask.data();

  auto unit_rows = [c](std::span<const double> f, std::size_t n) {
    std::vector<double> u(n * c);
    std::vector<bool> zero(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) r += f[ch * n + i] * f[ch * n + i];
      r = std::sqrt(r);
      zero[i] = r == 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) u[i * c + ch] = zero[i] ? 0.0 : f[ch * n + i] / r;
    }
    return u;
  };
  const std::vector<double> uq = unit_rows(fq, nq);
  const std::vector<double> us = unit_rows(fs, ns);

  std::vector<std::size_t> fg;
  for (std::size_t j = 0; j < ns; ++j)
    if (m[j] > 0.0) fg.push_back(j);
  if (fg.empty()) throw InvalidArgument("prior_mask: support mask has no foreground");

  std::vector<double> best(nq, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j : fg) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) s += uq[i * c + ch] * us[j * c + ch];
      best[i] = std::max(best[i], s);
    }
  }
  const auto [lo, hi] = std::minmax_element(best.begin(), best.end());
  const double mn = *lo, mx = *hi;
  std::vector<double> out(nq, 0.0);
  if (mx > mn) {
    for (std::size_t i = 0; i < nq; ++i) out[i] = (best[i] - mn) / (mx - mn);
  }
  return Tensor::from({hq, wq}, std::move(out));
}

MatchResult match(const Tensor& query_features, const Tensor& support_features,
                  const Tensor& support_mask, const Tensor& prior, const MatchingParams& params,
                  CorrelationNorm norm) {
  require_feature_map(query_features, params.channels, "match");
  const std::size_t hq = query_features.dim(1), wq = query_features.dim(2);
  TransformedFeatures t = transform_features(query_features, support_features, support_mask);
  CorrelationMap map = correlation(t.query, t.support, params);
  map.query_h = hq;
  map.query_w = wq;
  Tensor weights;
  switch (norm) {
    case CorrelationNorm::kInverseSoftmax:
      weights = inverse_softmax(map);
      break;
    case CorrelationNorm::kSoftmax:
      weights = softmax(map.values, 1);
      break;
    case CorrelationNorm::kNone:
      weights = map.values;
      break;
  }
  Tensor retrieved = matmul(weights, linear(t.support, params.wv));
  return finish_match(retrieved, prior, std::move(map), params, hq, wq);
}

MatchResult cross_attention_match(const Tensor& query_features, const Tensor& support_features,
                                  const Tensor& support_mask, const Tensor& prior,
                                  const MatchingParams& params) {
  require_feature_map(query_features, params.channels, "cross_attention_match");
  const std::size_t hq = query_features.dim(1), wq = query_features.dim(2);
  TransformedFeatures t = transform_features(query_features, support_features, support_mask);
  Tensor q = linear(t.query, params.wq);
  Tensor k = linear(t.support, params.wk);
  Tensor v = linear(t.support, params.wv);
  CorrelationMap map;
  map.values = scalar_mul(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(params.channels)));
  map.query_h = hq;
  map.query_w = wq;
  Tensor retrieved = matmul(softmax(map.values, 1), v);
  return finish_match(retrieved, prior, std::move(map), params, hq, wq);
}

Tensor nearest_resize_mask(const Tensor& mask, std::size_t out_h, std::size_t out_w) {
  if (mask.rank() != 2) throw ShapeError("nearest_resize_mask: mask must be [h x w]");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  const auto m = mask.data();
  auto src_index = [](std::size_t d, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out);
    return std::min(static_cast<std::size_t>(std::floor(s)), in - 1);
  };
  std::vector<double> out(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const std::size_t si = src_index(i, h, out_h);
    for (std::size_t j = 0; j < out_w; ++j) {
      out[i * out_w + j] = m[si * w + src_index(j, w, out_w)] > 0.0 ? 1.0 : 0.0;
    }
  }
  return Tensor::from({out_h, out_w}, std::move(out));
}

}  // namespace hdmnet
