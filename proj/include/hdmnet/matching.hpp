#pragma once

// Query/support matching: masked support transform, cosine correlation with
// temperature, inverse softmax over the query axis, support-feature retrieval
// and fusion with the prior mask. The cross-attention variant is kept as the
// baseline the correlation path is compared against.

#include <string>
#include <vector>

#include "hdmnet/gradcheck.hpp"
#include "hdmnet/rng.hpp"
#include "hdmnet/tensor.hpp"

namespace hdmnet {

struct MatchingParams {
  std::size_t channels = 0;
  Tensor wq, wk, wv;  // [c x c]
  Tensor wo;          // [c x (c+1)]
  double temperature = 0.1;

  static MatchingParams init(std::size_t channels, double temperature, Rng& rng);
  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// values: [hq*wq x hs*ws]. For the correlation path every entry lies in
// [-1/t, 1/t].
struct CorrelationMap {
  Tensor values;
  std::size_t stage = 0;
  std::size_t query_h = 0;
  std::size_t query_w = 0;
};

enum class MatchingKind { kCorrelation, kCrossAttention };
enum class CorrelationNorm { kInverseSoftmax, kSoftmax, kNone };

struct TransformedFeatures {
  Tensor query;    // [hq*wq x c]
  Tensor support;  // [hs*ws x c], zero rows outside the mask
};

// Requires a binary {0,1} support mask already at [hs x ws].
TransformedFeatures transform_features(const Tensor& query_features, const Tensor& support_features,
                                       const Tensor& support_mask);

// Cosine similarity of W^q-projected query tokens and W^k-projected support
// tokens, divided by t. A support row that projects to exactly zero (masked
// out) correlates 0 with every query; a zero query projection is an error.
CorrelationMap correlation(const Tensor& query_tokens, const Tensor& support_tokens,
                           const MatchingParams& params);

// Normalizes each column (fixed support position) over the query positions.
Tensor inverse_softmax(const CorrelationMap& map);

// Max cosine similarity of each query pixel to the masked support pixels,
// min-max normalized to [0, 1] over the query map (all zeros if constant).
// Not differentiated. Returns [hq x wq].
Tensor prior_mask(const Tensor& query_features, const Tensor& support_features,
                  const Tensor& support_mask);

struct MatchResult {
  Tensor output;     // [c x hq x wq]
  Tensor retrieved;  // [hq*wq x c], before prior concat and W^o
  CorrelationMap map;
};

// prior: [hq x wq].
MatchResult match(const Tensor& query_features, const Tensor& support_features,
                  const Tensor& support_mask, const Tensor& prior, const MatchingParams& params,
                  CorrelationNorm norm = CorrelationNorm::kInverseSoftmax);

// softmax(Q K^T / sqrt(c)) V with Q from the query and K, V from the masked
// support, fused with the prior through the same W^o. The returned map holds
// the scaled attention logits.
MatchResult cross_attention_match(const Tensor& query_features, const Tensor& support_features,
                                  const Tensor& support_mask, const Tensor& prior,
                                  const MatchingParams& params);

// Nearest-neighbour (half-pixel centres) resize of a mask, thresholded at > 0.
Tensor nearest_resize_mask(const Tensor& mask, std::size_t out_h, std::size_t out_w);

}  // namespace hdmnet
