#pragma once

// Fixed random encoder and the hierarchically decoupled self-attention
// pyramid. Query and support images go through the same blocks separately;
// nothing here ever mixes the two.

#include <cstdint>
#include <span>
#include <vector>

#include "hdmnet/gradcheck.hpp"
#include "hdmnet/rng.hpp"
#include "hdmnet/tensor.hpp"

namespace hdmnet {

// Two stride-2 3x3 convolutions (ReLU between): [3 x H x W] -> [c x H/4 x W/4].
// Never trained; rebuilt bit-identically from its seed.
struct EncoderParams {
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::vector<double> conv1_weight;  // [mid x 3 x 3 x 3]
  std::vector<double> conv1_bias;    // [mid]
  std::vector<double> conv2_weight;  // [out x mid x 3 x 3]
  std::vector<double> conv2_bias;    // [out]

  static EncoderParams random(std::size_t mid_channels, std::size_t out_channels,
                              std::uint64_t seed);
};

// `stages` is the pyramid depth the features will feed; H and W must be
// divisible by 2^(stages+2).
Tensor encode(const Tensor& image, const EncoderParams& params, std::size_t stages);

struct StageBlockParams {
  std::size_t channels = 0;
  // 1x1 channel expansion applied after 2x2 pooling, [c_l x c_{l-1}].
  // Undefined for the first stage.
  Tensor expand;
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;  // [c x c]
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1;  // [2c x c], [2c]
  Tensor mlp_w2, mlp_b2;  // [c x 2c], [c]

  // prev_channels == 0 for the first stage.
  static StageBlockParams init(std::size_t channels, std::size_t prev_channels, Rng& rng);
  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// softmax(q k^T / sqrt(d)) v over token matrices q[n x d], k[m x d], v[m x d'].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Pre-norm transformer block over the h*w spatial tokens of f[c x h x w]:
// x + attn(LN(x)), then + MLP(LN(.)). Single head, no positional encoding.
Tensor self_attention_block(const Tensor& f, const StageBlockParams& params);

struct FeaturePyramid {
  std::vector<Tensor> stages;  // stage l: [c_l x h_l x w_l], h_{l+1} = h_l / 2
};

// Stage 1 = block(base); stage l+1 = block(expand(avgpool2x2(stage l))).
FeaturePyramid build_pyramid(const Tensor& base, std::span<const StageBlockParams> blocks,
                             std::size_t stages);

}  // namespace hdmnet
