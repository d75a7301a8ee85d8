#include "hdmnet/feature_pyramid.hpp"

#include <cmath>
#include <string>

#include "hdmnet/init.hpp"

namespace hdmnet {
namespace {

// 3x3 convolution, stride 2, zero padding 1: [cin x h x w] -> [cout x h/2 x w/2].
std::vector<double> conv3x3_s2(const std::vector<double>& in, std::size_t cin, std::size_t h,
                               std::size_t w, const std::vector<double>& weight,
                               const std::vector<double>& bias, std::size_t cout) {
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(cout * oh * ow);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = bias[o];
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const long iy = static_cast<long>(2 * y + ky) - 1;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long ix = static_cast<long>(2 * x + kx) - 1;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += weight[((o * cin + ci) * 3 + ky) * 3 + kx] *
                     in[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
            }
          }
        }
        out[(o * oh + y) * ow + x] = acc;
      }
    }
  }
  return out;
}

}  // namespace

EncoderParams EncoderParams::random(std::size_t mid_channels, std::size_t out_channels,
                                    std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams p;
  p.mid_channels = mid_channels;
  p.out_channels = out_channels;
  const double s1 = std::sqrt(2.0 / 27.0);
  const double s2 = std::sqrt(2.0 / static_cast<double>(mid_channels * 9));
  p.conv1_weight.resize(mid_channels * 27);
  for (double& v : p.conv1_weight) v = s1 * rng.normal();
  p.conv1_bias.resize(mid_channels);
  for (double& v : p.conv1_bias) v = 0.1 * rng.normal();
  p.conv2_weight.resize(out_channels * mid_channels * 9);
  for (double& v : p.conv2_weight) v = s2 * rng.normal();
  p.conv2_bias.resize(out_channels);
  for (double& v : p.conv2_bias) v = 0.1 * rng.normal();
  return p;
}

Tensor encode(const Tensor& image, const EncoderParams& params, std::size_t stages) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("encode: expected image [3 x H x W], got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t divisor = std::size_t{1} << (stages + 2);
  if (h % divisor != 0 || w % divisor != 0) {
    throw InvalidArgument("encode: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by " + std::to_string(divisor));
  }
  std::vector<double> x(image.data().begin(), image.data().end());
  for (double& v : x) v -= 0.5;
  std::vector<double> mid =
      conv3x3_s2(x, 3, h, w, params.conv1_weight, params.conv1_bias, params.mid_channels);
  for (double& v : mid) v = v > 0.0 ? v : 0.0;
  std::vector<double> out = conv3x3_s2(mid, params.mid_channels, h / 2, w / 2,
                                       params.conv2_weight, params.conv2_bias, params.out_channels);
  return Tensor::from({params.out_channels, h / 4, w / 4}, std::move(out));
}

StageBlockParams StageBlockParams::init(std::size_t channels, std::size_t prev_channels, Rng& rng) {
  StageBlockParams p;
  p.channels = channels;
  if (prev_channels > 0) p.expand = xavier_uniform(channels, prev_channels, rng);
  p.ln1_gamma = learnable_full(channels, 1.0);
  p.ln1_beta = learnable_full(channels, 0.0);
  p.wq = xavier_uniform(channels, channels, rng);
  p.wk = xavier_uniform(channels, channels, rng);
  p.wv = xavier_uniform(channels, channels, rng);
  p.wo = xavier_uniform(channels, channels, rng);
  p.ln2_gamma = learnable_full(channels, 1.0);
  p.ln2_beta = learnable_full(channels, 0.0);
  p.mlp_w1 = xavier_uniform(2 * channels, channels, rng);
  p.mlp_b1 = learnable_full(2 * channels, 0.0);
  p.mlp_w2 = xavier_uniform(channels, 2 * channels, rng);
  p.mlp_b2 = learnable_full(channels, 0.0);
  return p;
}

void StageBlockParams::append_named(const std::string& prefix, std::vector<NamedTensor>& out) const {
  if (expand.defined()) out.push_back({prefix + ".expand", expand});
  out.push_back({prefix + ".ln1.gamma", ln1_gamma});
  out.push_back({prefix + ".ln1.beta", ln1_beta});
  out.push_back({prefix + ".attn.wq", wq});
  out.push_back({prefix + ".attn.wk", wk});
  out.push_back({prefix + ".attn.wv", wv});
  out.push_back({prefix + ".attn.wo", wo});
  out.push_back({prefix + ".ln2.gamma", ln2_gamma});
  out.push_back({prefix + ".ln2.beta", ln2_beta});
  out.push_back({prefix + ".mlp.w1", mlp_w1});
  out.push_back({prefix + ".mlp.b1", mlp_b1});
  out.push_back({prefix + ".mlp.w2", mlp_w2});
  out.push_back({prefix + ".mlp.b2", mlp_b2});
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores = scalar_mul(matmul_nt(q, k), scale);
  return matmul(softmax(scores, 1), v);
}

Tensor self_attention_block(const Tensor& f, const StageBlockParams& params) {
  if (f.rank() != 3 || f.dim(0) != params.channels) {
    throw ShapeError("self_attention_block: expected [" + std::to_string(params.channels) +
                     " x h x w], got " + shape_str(f.shape()));
  }
  const std::size_t h = f.dim(1), w = f.dim(2);
  Tensor x = to_tokens(f);
  Tensor y = layer_norm_rows(x, params.ln1_gamma, params.ln1_beta);
  Tensor attn = attention(linear(y, params.wq), linear(y, params.wk), linear(y, params.wv));
  x = add(x, linear(attn, params.wo));
  Tensor z = layer_norm_rows(x, params.ln2_gamma, params.ln2_beta);
  z = linear(relu(linear(z, params.mlp_w1, params.mlp_b1)), params.mlp_w2, params.mlp_b2);
  return from_tokens(add(x, z), h, w);
}

FeaturePyramid build_pyramid(const Tensor& base, std::span<const StageBlockParams> blocks,
                             std::size_t stages) {
  if (stages == 0) throw InvalidArgument("build_pyramid: need at least one stage");
  if (blocks.size() < stages) throw InvalidArgument("build_pyramid: fewer blocks than stages");
  if (base.rank() != 3) throw ShapeError("build_pyramid: base must be [c x h x w]");
  const std::size_t divisor = std::size_t{1} << (stages - 1);
  if (base.dim(1) % divisor != 0 || base.dim(2) % divisor != 0) {
    throw InvalidArgument("build_pyramid: base " + shape_str(base.shape()) +
                          " not divisible by 2^(L-1)=" + std::to_string(divisor));
  }
  FeaturePyramid pyramid;
  Tensor current = self_attention_block(base, blocks[0]);
  pyramid.stages.push_back(current);
  for (std::size_t l = 1; l < stages; ++l) {
    Tensor pooled = avg_pool2x2(current);
    const std::size_t h = pooled.dim(1), w = pooled.dim(2);
    Tensor expanded = from_tokens(linear(to_tokens(pooled), blocks[l].expand), h, w);
    current = self_attention_block(expanded, blocks[l]);
    pyramid.stages.push_back(current);
  }
  return pyramid;
}

}  // namespace hdmnet
