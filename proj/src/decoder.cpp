#include "hdmnet/decoder.hpp"

#include "hdmnet/init.hpp"

namespace hdmnet {

DecoderParams DecoderParams::init(const std::vector<std::size_t>& channels, bool use_norm, Rng& rng) {
  if (channels.empty()) throw InvalidArgument("DecoderParams: no stages");
  DecoderParams p;
  for (std::size_t l = 0; l < channels.size(); ++l) {
    DecoderStageParams s;
    const std::size_t c = channels[l];
    s.channels = c;
    if (l + 1 < channels.size()) s.project = xavier_uniform(c, channels[l + 1], rng);
    s.mlp_w1 = xavier_uniform(c, c, rng);
    s.mlp_b1 = learnable_full(c, 0.0);
    s.mlp_w2 = xavier_uniform(c, c, rng);
    s.mlp_b2 = learnable_full(c, 0.0);
    if (use_norm) {
      s.norm_gamma = learnable_full(c, 1.0);
      s.norm_beta = learnable_full(c, 0.0);
    }
    p.stages.push_back(std::move(s));
  }
  p.head_weight = xavier_uniform(2, channels.front(), rng);
  p.head_bias = learnable_full(2, 0.0);
  return p;
}

void DecoderParams::append_named(const std::string& prefix, std::vector<NamedTensor>& out) const {
  for (std::size_t l = 0; l < stages.size(); ++l) {
    const std::string sp = prefix + ".stage" + std::to_string(l + 1);
    const DecoderStageParams& s = stages[l];
    if (s.project.defined()) out.push_back({sp + ".project", s.project});
    if (s.norm_gamma.defined()) {
      out.push_back({sp + ".norm.gamma", s.norm_gamma});
      out.push_back({sp + ".norm.beta", s.norm_beta});
    }
    out.push_back({sp + ".mlp.w1", s.mlp_w1});
    out.push_back({sp + ".mlp.b1", s.mlp_b1});
    out.push_back({sp + ".mlp.w2", s.mlp_w2});
    out.push_back({sp + ".mlp.b2", s.mlp_b2});
  }
  out.push_back({prefix + ".head.weight", head_weight});
  out.push_back({prefix + ".head.bias", head_bias});
}

Tensor fuse_stage(const Tensor& matched, const Tensor& coarse, const DecoderStageParams& params) {
  if (matched.rank() != 3 || matched.dim(0) != params.channels) {
    throw ShapeError("fuse_stage: expected [" + std::to_string(params.channels) +
                     " x h x w], got " + shape_str(matched.shape()));
  }
  const std::size_t h = matched.dim(1), w = matched.dim(2);
  Tensor x = to_tokens(matched);
  Tensor up;
  if (coarse.defined()) {
    if (!params.project.defined()) throw InvalidArgument("fuse_stage: deepest stage has no projection");
    Tensor projected =
        from_tokens(linear(to_tokens(coarse), params.project), coarse.dim(1), coarse.dim(2));
    if (coarse.dim(1) != h || coarse.dim(2) != w) projected = bilinear_resize(projected, h, w);
    up = to_tokens(projected);
    x = add(x, up);
  }
  if (params.norm_gamma.defined()) x = layer_norm_rows(x, params.norm_gamma, params.norm_beta);
  Tensor y = relu(linear(relu(linear(x, params.mlp_w1, params.mlp_b1)), params.mlp_w2, params.mlp_b2));
  if (up.defined()) y = add(y, up);
  return from_tokens(y, h, w);
}

Tensor decode(const std::vector<Tensor>& matched, const DecoderParams& params) {
  if (matched.empty() || matched.size() != params.stages.size()) {
    throw InvalidArgument("decode: need one matched feature map per decoder stage");
  }
  Tensor current;
  for (std::size_t l = matched.size(); l-- > 0;) {
    current = fuse_stage(matched[l], current, params.stages[l]);
  }
  return current;
}

Tensor predict_mask(const Tensor& fused, const DecoderParams& params, std::size_t out_h,
                    std::size_t out_w) {
  const std::size_t h = fused.dim(1), w = fused.dim(2);
  Tensor logits = from_tokens(linear(to_tokens(fused), params.head_weight, params.head_bias), h, w);
  if (h == out_h && w == out_w) return logits;
  return bilinear_resize(logits, out_h, out_w);
}

std::vector<std::uint8_t> hard_mask(const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(0) != 2) throw ShapeError("hard_mask: expected [2 x H x W]");
  const std::size_t n = logits.dim(1) * logits.dim(2);
  const auto z = logits.data();
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = z[n + i] > z[i] ? 1 : 0;
  return out;
}

}  // namespace hdmnet
