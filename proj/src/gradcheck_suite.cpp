#include "hdmnet/gradcheck_suite.hpp"

#include <functional>
#include <map>

#include "hdmnet/decoder.hpp"
#include "hdmnet/distillation.hpp"
#include "hdmnet/feature_pyramid.hpp"
#include "hdmnet/matching.hpp"
#include "hdmnet/model.hpp"
#include "hdmnet/rng.hpp"

namespace hdmnet {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return w;
}

Tensor blob_mask(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(h * w);
  for (double& x : v) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
  v[0] = 1.0;
  return Tensor::from({h, w}, std::move(v));
}

// Zero-initialized biases can leave a ReLU exactly at its kink, where central
// differences and the one-sided derivative legitimately disagree.
void jitter(const std::vector<NamedTensor>& params, Rng& rng) {
  for (const NamedTensor& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
  }
}

struct OpCase {
  const char* name;
  std::function<Tensor(std::vector<Tensor>&)> fn;
  std::vector<Shape> shapes;
  double lo = -1.0, hi = 1.0;
};

std::vector<OpCase> tensor_cases() {
  static const int labels[] = {0, 1, 1, 0, 1, 0};
  static const double teacher[] = {0.05, 0.25, 0.3, 0.4, 0.0, 0.0};
  return {
      {"matmul", [](auto& t) { return matmul(t[0], t[1]); }, {{3, 4}, {4, 2}}},
      {"matmul_nt", [](auto& t) { return matmul_nt(t[0], t[1]); }, {{3, 4}, {5, 4}}},
      {"transpose", [](auto& t) { return transpose(t[0]); }, {{3, 4}}},
      {"add", [](auto& t) { return add(t[0], t[1]); }, {{2, 3}, {2, 3}}},
      {"sub", [](auto& t) { return sub(t[0], t[1]); }, {{2, 3}, {2, 3}}},
      {"hadamard", [](auto& t) { return hadamard(t[0], t[1]); }, {{2, 3}, {2, 3}}},
      {"scalar_mul", [](auto& t) { return scalar_mul(t[0], 2.3); }, {{5}}},
      {"add_row_bias", [](auto& t) { return add_row_bias(t[0], t[1]); }, {{3, 4}, {4}}},
      {"relu", [](auto& t) { return relu(t[0]); }, {{4, 4}}},
      {"exp", [](auto& t) { return exp(t[0]); }, {{6}}},
      {"log", [](auto& t) { return log(t[0]); }, {{6}}, 0.2, 2.0},
      {"softmax", [](auto& t) { return softmax(t[0], 1); }, {{3, 4, 2}}},
      {"concat", [](auto& t) { return concat({t[0], t[1]}, 0); }, {{2, 3}, {1, 3}}},
      {"reshape", [](auto& t) { return reshape(t[0], {4, 3}); }, {{3, 4}}},
      {"l2_normalize_rows", [](auto& t) { return l2_normalize_rows(t[0]); }, {{4, 3}}},
      {"sum", [](auto& t) { return sum(t[0]); }, {{3, 2}}},
      {"mean", [](auto& t) { return mean(t[0]); }, {{3, 2}}},
      {"layer_norm_rows", [](auto& t) { return layer_norm_rows(t[0], t[1], t[2]); },
       {{4, 5}, {5}, {5}}},
      {"avg_pool2x2", [](auto& t) { return avg_pool2x2(t[0]); }, {{2, 4, 4}}},
      {"bilinear_resize", [](auto& t) { return bilinear_resize(t[0], 5, 7); }, {{2, 3, 4}}},
      {"softmax_cross_entropy", [](auto& t) { return softmax_cross_entropy(t[0], labels); },
       {{2, 6}}},
      {"kl_divergence", [](auto& t) { return kl_divergence(teacher, softmax(t[0], 0)); }, {{6}}},
      {"linear", [](auto& t) { return linear(t[0], t[1], t[2]); }, {{3, 4}, {5, 4}, {5}}},
      {"tokens_roundtrip", [](auto& t) { return from_tokens(to_tokens(t[0]), 2, 3); }, {{4, 2, 3}}},
  };
}

void add_tensor_cases(std::vector<GradCheckCase>& out, Rng& rng) {
  for (const OpCase& c : tensor_cases()) {
    std::vector<Tensor> inputs;
    std::vector<NamedTensor> named;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
      inputs.push_back(random_tensor(c.shapes[i], rng, c.lo, c.hi));
      named.push_back({std::string(c.name) + ".in" + std::to_string(i), inputs.back()});
    }
    const auto w = random_weights(c.fn(inputs).numel(), rng);
    out.push_back({"tensor", c.name,
                   grad_check([&] { return weighted_sum(c.fn(inputs), w); }, named)});
  }
}

void add_pyramid_cases(std::vector<GradCheckCase>& out, Rng& rng) {
  {
    Tensor q = random_tensor({5, 3}, rng), k = random_tensor({4, 3}, rng), v = random_tensor({4, 2}, rng);
    const auto w = random_weights(10, rng);
    out.push_back({"pyramid", "attention",
                   grad_check([&] { return weighted_sum(attention(q, k, v), w); },
                              {{"q", q}, {"k", k}, {"v", v}})});
  }
  {
    StageBlockParams p = StageBlockParams::init(4, 0, rng);
    Tensor f = random_tensor({4, 3, 3}, rng);
    std::vector<NamedTensor> named{{"input", f}};
    p.append_named("block", named);
    const auto w = random_weights(36, rng);
    out.push_back({"pyramid", "self_attention_block",
                   grad_check([&] { return weighted_sum(self_attention_block(f, p), w); }, named)});
  }
  {
    std::vector<StageBlockParams> blocks{StageBlockParams::init(3, 0, rng),
                                         StageBlockParams::init(5, 3, rng)};
    Tensor base = random_tensor({3, 4, 4}, rng);
    std::vector<NamedTensor> named{{"base", base}};
    blocks[0].append_named("stage1", named);
    blocks[1].append_named("stage2", named);
    const auto w1 = random_weights(48, rng), w2 = random_weights(20, rng);
    out.push_back({"pyramid", "build_pyramid", grad_check([&] {
                     FeaturePyramid pyr = build_pyramid(base, blocks, 2);
                     return add(weighted_sum(pyr.stages[0], w1), weighted_sum(pyr.stages[1], w2));
                   }, named)});
  }
}

void add_matching_cases(std::vector<GradCheckCase>& out, Rng& rng) {
  const std::size_t c = 4;
  const std::pair<const char*, CorrelationNorm> variants[] = {
      {"match_inverse_softmax", CorrelationNorm::kInverseSoftmax},
      {"match_softmax", CorrelationNorm::kSoftmax},
      {"match_no_norm", CorrelationNorm::kNone}};
  for (const auto& [name, norm] : variants) {
    MatchingParams p = MatchingParams::init(c, 0.1, rng);
    Tensor fq = random_tensor({c, 3, 3}, rng), fs = random_tensor({c, 3, 2}, rng);
    Tensor ms = blob_mask(3, 2, rng);
    Tensor prior = Tensor::from({3, 3}, random_weights(9, rng));
    std::vector<NamedTensor> named{{"query", fq}, {"support", fs}};
    p.append_named("matching", named);
    const auto w = random_weights(c * 9, rng);
    const CorrelationNorm n = norm;
    out.push_back({"matching", name, grad_check([&] {
                     return weighted_sum(match(fq, fs, ms, prior, p, n).output, w);
                   }, named)});
  }
  {
    MatchingParams p = MatchingParams::init(c, 0.1, rng);
    Tensor fq = random_tensor({c, 3, 3}, rng), fs = random_tensor({c, 2, 3}, rng);
    Tensor ms = blob_mask(2, 3, rng);
    Tensor prior = Tensor::from({3, 3}, random_weights(9, rng));
    std::vector<NamedTensor> named{{"query", fq}, {"support", fs}};
    p.append_named("matching", named);
    const auto w = random_weights(c * 9, rng);
    out.push_back({"matching", "cross_attention_match", grad_check([&] {
                     return weighted_sum(cross_attention_match(fq, fs, ms, prior, p).output, w);
                   }, named)});
  }
  {
    MatchingParams p = MatchingParams::init(c, 0.1, rng);
    Tensor q = random_tensor({5, c}, rng), s = random_tensor({4, c}, rng);
    std::vector<NamedTensor> named{{"query_tokens", q}, {"support_tokens", s}};
    p.append_named("matching", named);
    const auto w = random_weights(20, rng);
    out.push_back({"matching", "correlation",
                   grad_check([&] { return weighted_sum(correlation(q, s, p).values, w); }, named)});
  }
}

void add_distill_cases(std::vector<GradCheckCase>& out, Rng& rng) {
  // Three stages of correlation maps over 4x4, 2x2 and 1x2 query grids.
  const std::size_t c = 3;
  const std::size_t qh[] = {4, 2, 1}, qw[] = {4, 2, 2};
  std::vector<MatchingParams> params;
  std::vector<Tensor> query, support, masks;
  std::vector<NamedTensor> named;
  for (std::size_t l = 0; l < 3; ++l) {
    params.push_back(MatchingParams::init(c, 0.5, rng));
    query.push_back(random_tensor({qh[l] * qw[l], c}, rng));
    support.push_back(random_tensor({3, c}, rng));
    masks.push_back(blob_mask(1, 3, rng));
    params.back().append_named("stage" + std::to_string(l), named);
    named.push_back({"query" + std::to_string(l), query.back()});
  }
  std::vector<double> qm(64, 0.0);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 1; x < 7; ++x) qm[y * 8 + x] = 1.0;
  const Tensor query_mask = Tensor::from({8, 8}, std::move(qm));
  auto maps = [&] {
    std::vector<CorrelationMap> m;
    for (std::size_t l = 0; l < 3; ++l) {
      Tensor s = hadamard(support[l], matmul(reshape(masks[l], {3, 1}), Tensor::full({1, c}, 1.0)));
      CorrelationMap map = correlation(query[l], s, params[l]);
      map.stage = l;
      map.query_h = qh[l];
      map.query_w = qw[l];
      m.push_back(map);
    }
    return m;
  };
  for (double temperature : {1.0, 2.0}) {
    DistillConfig cfg;
    cfg.temperature = temperature;
    const auto teachers = distill_loss(maps(), masks, query_mask, cfg).teachers;
    out.push_back({"distillation", temperature == 1.0 ? "distill_loss_T1" : "distill_loss_T2",
                   grad_check([&] { return distill_loss(maps(), masks, query_mask, cfg, &teachers).total; },
                              named)});
  }
  {
    Tensor reduced = random_tensor({6}, rng);
    const auto w = random_weights(6, rng);
    out.push_back({"distillation", "spatial_softmax",
                   grad_check([&] { return weighted_sum(spatial_softmax(reduced, 0.7), w); },
                              {{"reduced", reduced}})});
  }
}

void add_decoder_cases(std::vector<GradCheckCase>& out, Rng& rng) {
  for (bool norm : {false, true}) {
    DecoderParams p = DecoderParams::init({3, 4, 5}, norm, rng);
    std::vector<Tensor> matched{random_tensor({3, 4, 4}, rng), random_tensor({4, 2, 2}, rng),
                                random_tensor({5, 1, 1}, rng)};
    std::vector<NamedTensor> named;
    for (std::size_t l = 0; l < matched.size(); ++l) named.push_back({"matched" + std::to_string(l), matched[l]});
    p.append_named("decoder", named);
    jitter(named, rng);
    const auto w = random_weights(2 * 8 * 8, rng);
    out.push_back({"decoder", norm ? "decode_with_norm" : "decode",
                   grad_check([&] { return weighted_sum(predict_mask(decode(matched, p), p, 8, 8), w); },
                              named)});
  }
}

void add_model_cases(std::vector<GradCheckCase>& out, std::uint64_t seed) {
  struct Variant {
    const char* name;
    MatchingKind matching;
    CorrelationNorm norm;
    std::size_t shots;
  };
  const Variant variants[] = {
      {"loss_inverse_softmax_1shot", MatchingKind::kCorrelation, CorrelationNorm::kInverseSoftmax, 1},
      {"loss_inverse_softmax_2shot", MatchingKind::kCorrelation, CorrelationNorm::kInverseSoftmax, 2},
      {"loss_softmax", MatchingKind::kCorrelation, CorrelationNorm::kSoftmax, 1},
      {"loss_cross_attention", MatchingKind::kCrossAttention, CorrelationNorm::kInverseSoftmax, 1},
  };
  GradCheckOptions opts;
  opts.max_entries_per_tensor = 6;
  for (const Variant& v : variants) {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.channels = {4, 6};
    cfg.encoder_mid_channels = 4;
    cfg.matching = v.matching;
    cfg.norm = v.norm;
    const Model model = Model::create(cfg, seed);
    Rng rng(derive_seed(seed, v.shots));
    jitter(model.params.named(), rng);
    const Episode ep = tiny_episode(16, v.shots, derive_seed(seed, 0x746e79ULL));
    std::vector<std::vector<double>> teachers;
    {
      NoGradScope no_grad;
      teachers = compute_loss(forward(model, ep), ep, cfg).teachers;
    }
    out.push_back({"model", v.name, grad_check([&] {
                     return compute_loss(forward(model, ep), ep, cfg, &teachers).total;
                   }, model.params.named(), opts)});
  }
}

void add_self_test(std::vector<GradCheckCase>& out, Rng& rng) {
  Tensor x = random_tensor({5}, rng, 0.5, 1.5);
  GradCheckCase c{"harness", "faulty_square_detected",
                  grad_check([&] { return sum(testing_ops::faulty_square(x)); }, {{"x", x}})};
  c.expect_failure = true;
  out.push_back(c);
}

}  // namespace

Episode tiny_episode(std::size_t image_size, std::size_t shots, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = image_size;
  auto image = [&] {
    std::vector<double> v(3 * n * n);
    for (double& x : v) x = rng.uniform();
    return Tensor::from({3, n, n}, std::move(v));
  };
  // A half-size square: it covers at least one cell at stride n/2.
  auto mask = [&] {
    const std::size_t side = n / 2, y0 = rng.below(n - side + 1), x0 = rng.below(n - side + 1);
    std::vector<double> v(n * n, 0.0);
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x) v[y * n + x] = 1.0;
    return Tensor::from({n, n}, std::move(v));
  };
  Episode ep;
  ep.seed = seed;
  ep.query_image = image();
  ep.query_mask = mask();
  for (std::size_t k = 0; k < shots; ++k) {
    ep.support_images.push_back(image());
    ep.support_masks.push_back(mask());
  }
  return ep;
}

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  add_tensor_cases(out, rng);
  add_pyramid_cases(out, rng);
  add_matching_cases(out, rng);
  add_distill_cases(out, rng);
  add_decoder_cases(out, rng);
  add_model_cases(out, seed);
  add_self_test(out, rng);
  return out;
}

std::vector<GradCheckGroupSummary> summarize(const std::vector<GradCheckCase>& cases, double tol) {
  std::vector<GradCheckGroupSummary> out;
  std::map<std::string, std::size_t> index;
  for (const GradCheckCase& c : cases) {
    auto [it, fresh] = index.try_emplace(c.group, out.size());
    if (fresh) {
      GradCheckGroupSummary s;
      s.group = c.group;
      out.push_back(s);
    }
    GradCheckGroupSummary& s = out[it->second];
    ++s.cases;
    if (!c.ok(tol)) ++s.failures;
    if (!c.expect_failure && c.report.max_rel_error >= s.max_rel_error) {
      s.max_rel_error = c.report.max_rel_error;
      s.worst_case = c.name;
    }
  }
  return out;
}

}  // namespace hdmnet
