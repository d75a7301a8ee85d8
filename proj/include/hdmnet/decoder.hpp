#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdmnet/gradcheck.hpp"
#include "hdmnet/rng.hpp"
#include "hdmnet/tensor.hpp"

namespace hdmnet {

struct DecoderStageParams {
  std::size_t channels = 0;
  // [c_l x c_{l+1}] projection of the coarser stage, no bias. Undefined for
  // the deepest stage, which has no coarser input.
  Tensor project;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // c -> c -> c
  // Optional per-token layer norm ahead of the MLP.
  Tensor norm_gamma, norm_beta;
};

struct DecoderParams {
  std::vector<DecoderStageParams> stages;
  Tensor head_weight;  // [2 x c_1]
  Tensor head_bias;    // [2]

  static DecoderParams init(const std::vector<std::size_t>& channels, bool use_norm, Rng& rng);
  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// X'_l = ReLU(MLP(X_l + up)) + up, up = bilinear(project(X'_{l+1})) at the
// resolution of X_l. An undefined `coarse` means X'_{L+1} = 0.
Tensor fuse_stage(const Tensor& matched, const Tensor& coarse, const DecoderStageParams& params);

// Runs fuse_stage from the deepest stage up; returns X'_1.
Tensor decode(const std::vector<Tensor>& matched, const DecoderParams& params);

// 1x1 conv to 2 logits, then bilinear upsample to [2 x H x W].
Tensor predict_mask(const Tensor& fused, const DecoderParams& params, std::size_t out_h,
                    std::size_t out_w);

// Per-pixel argmax of [2 x H x W] logits; ties go to background.
std::vector<std::uint8_t> hard_mask(const Tensor& logits);

}  // namespace hdmnet
