#include "hdmnet/model.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace hdmnet {
namespace {

std::size_t count_foreground(const Tensor& mask) {
  std::size_t n = 0;
  for (double v : mask.data()) n += v > 0.0 ? 1 : 0;
  return n;
}

Tensor prior_at(const Tensor& prior, std::size_t h, std::size_t w) {
  NoGradScope no_grad;
  if (prior.dim(0) == h && prior.dim(1) == w) return prior;
  Tensor p = bilinear_resize(reshape(prior, {1, prior.dim(0), prior.dim(1)}), h, w);
  return reshape(p, {h, w});
}

Tensor deep_copy(const Tensor& t) {
  if (!t.defined()) return t;
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

}  // namespace

void ModelConfig::validate() const {
  if (stages == 0) throw InvalidArgument("model: stages must be >= 1");
  if (channels.size() < stages) {
    throw InvalidArgument("model: need " + std::to_string(stages) + " channel counts, got " +
                          std::to_string(channels.size()));
  }
  for (std::size_t l = 0; l < stages; ++l) {
    if (channels[l] == 0) throw InvalidArgument("model: channel counts must be positive");
    if (l > 0 && channels[l] <= channels[l - 1]) {
      throw InvalidArgument("model: channel counts must strictly increase across stages");
    }
  }
  if (!(correlation_temperature > 0.0)) throw InvalidArgument("model: t must be > 0");
  if (!(distill.temperature > 0.0)) throw InvalidArgument("model: T must be > 0");
  if (lambda_distill < 0.0) throw InvalidArgument("model: lambda_distill must be >= 0");
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  ModelParams p;
  std::vector<std::size_t> ch(config.channels.begin(),
                              config.channels.begin() + static_cast<std::ptrdiff_t>(config.stages));
  for (std::size_t l = 0; l < config.stages; ++l) {
    p.blocks.push_back(StageBlockParams::init(ch[l], l == 0 ? 0 : ch[l - 1], rng));
  }
  for (std::size_t l = 0; l < config.stages; ++l) {
    p.matching.push_back(MatchingParams::init(ch[l], config.correlation_temperature, rng));
  }
  p.decoder = DecoderParams::init(ch, config.decoder_norm, rng);
  return p;
}

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].append_named("pyramid.stage" + std::to_string(l + 1), out);
  }
  for (std::size_t l = 0; l < matching.size(); ++l) {
    matching[l].append_named("matching.stage" + std::to_string(l + 1), out);
  }
  decoder.append_named("decoder", out);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams c = *this;
  for (StageBlockParams& b : c.blocks) {
    for (Tensor* t : {&b.expand, &b.ln1_gamma, &b.ln1_beta, &b.wq, &b.wk, &b.wv, &b.wo,
                      &b.ln2_gamma, &b.ln2_beta, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2}) {
      *t = deep_copy(*t);
    }
  }
  for (MatchingParams& m : c.matching) {
    for (Tensor* t : {&m.wq, &m.wk, &m.wv, &m.wo}) *t = deep_copy(*t);
  }
  for (DecoderStageParams& s : c.decoder.stages) {
    for (Tensor* t : {&s.project, &s.mlp_w1, &s.mlp_b1, &s.mlp_w2, &s.mlp_b2, &s.norm_gamma,
                      &s.norm_beta}) {
      *t = deep_copy(*t);
    }
  }
  c.decoder.head_weight = deep_copy(c.decoder.head_weight);
  c.decoder.head_bias = deep_copy(c.decoder.head_bias);
  return c;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const NamedTensor& p : named()) n += p.tensor.numel();
  return n;
}

Model Model::create(const ModelConfig& config, std::uint64_t init_seed) {
  config.validate();
  Model m;
  m.config = config;
  m.encoder = EncoderParams::random(config.encoder_mid_channels, config.channels.front(),
                                    config.encoder_seed);
  m.params = ModelParams::init(config, init_seed);
  return m;
}

SupportSet kshot_concat(std::span<const Tensor> features, std::span<const Tensor> masks) {
  if (features.empty()) throw InvalidArgument("kshot_concat: need at least one shot");
  if (features.size() != masks.size()) throw InvalidArgument("kshot_concat: one mask per shot");
  for (std::size_t k = 1; k < features.size(); ++k) {
    if (features[k].shape() != features[0].shape() || masks[k].shape() != masks[0].shape()) {
      throw ShapeError("kshot_concat: inconsistent shot shapes");
    }
  }
  if (features.size() == 1) return SupportSet{features[0], masks[0]};
  std::vector<Tensor> f(features.begin(), features.end());
  std::vector<Tensor> m(masks.begin(), masks.end());
  return SupportSet{concat(f, 2), concat(m, 1)};
}

ForwardResult forward(const Model& model, const Episode& episode) {
  const ModelConfig& cfg = model.config;
  if (episode.shots() == 0 || episode.support_masks.size() != episode.shots()) {
    throw InvalidArgument("forward: episode needs K >= 1 support pairs with masks");
  }
  if (count_foreground(episode.query_mask) == 0) {
    throw InvalidArgument("forward: degenerate episode (empty query mask)");
  }
  for (const Tensor& m : episode.support_masks) {
    if (count_foreground(m) == 0) throw InvalidArgument("forward: degenerate episode (empty support mask)");
  }
  const std::size_t H = episode.query_image.dim(1), W = episode.query_image.dim(2);
  const std::size_t K = episode.shots();

  std::vector<Tensor> support_masks;
  for (const Tensor& m : episode.support_masks) {
    support_masks.push_back(cfg.use_support_mask ? m : Tensor::full(m.shape(), 1.0));
  }

  const Tensor base_q = encode(episode.query_image, model.encoder, cfg.stages);
  std::vector<Tensor> base_s;
  for (const Tensor& img : episode.support_images) base_s.push_back(encode(img, model.encoder, cfg.stages));
  const std::size_t hb = base_q.dim(1), wb = base_q.dim(2);

  ForwardResult result;
  if (cfg.use_prior) {
    std::vector<Tensor> base_masks;
    for (const Tensor& m : support_masks) base_masks.push_back(nearest_resize_mask(m, hb, wb));
    SupportSet s = kshot_concat(base_s, base_masks);
    result.prior = prior_mask(base_q, s.features, s.mask);
  } else {
    result.prior = Tensor::zeros({hb, wb});
  }

  result.query_pyramid = build_pyramid(base_q, model.params.blocks, cfg.stages);
  std::vector<FeaturePyramid> support_pyramids;
  for (const Tensor& b : base_s) support_pyramids.push_back(build_pyramid(b, model.params.blocks, cfg.stages));

  for (std::size_t l = 0; l < cfg.stages; ++l) {
    const Tensor& fq = result.query_pyramid.stages[l];
    const std::size_t h = fq.dim(1), w = fq.dim(2);
    std::vector<Tensor> shot_features, shot_masks;
    for (std::size_t k = 0; k < K; ++k) {
      shot_features.push_back(support_pyramids[k].stages[l]);
      shot_masks.push_back(nearest_resize_mask(support_masks[k], h, w));
    }
    SupportSet s = kshot_concat(shot_features, shot_masks);
    const Tensor prior = prior_at(result.prior, h, w);
    MatchResult m = cfg.matching == MatchingKind::kCorrelation
                        ? match(fq, s.features, s.mask, prior, model.params.matching[l], cfg.norm)
                        : cross_attention_match(fq, s.features, s.mask, prior, model.params.matching[l]);
    m.map.stage = l;
    result.matched.push_back(m.output);
    result.maps.push_back(std::move(m.map));
    result.stage_support_masks.push_back(s.mask);
  }
  result.logits = predict_mask(decode(result.matched, model.params.decoder), model.params.decoder, H, W);
  return result;
}

LossTerms compute_loss(const ForwardResult& result, const Episode& episode,
                       const ModelConfig& config,
                       const std::vector<std::vector<double>>* fixed_teachers) {
  const std::size_t H = result.logits.dim(1), W = result.logits.dim(2);
  std::vector<int> labels(H * W);
  const auto m = episode.query_mask.data();
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = m[i] > 0.0 ? 1 : 0;
  LossTerms terms;
  Tensor ce = softmax_cross_entropy(reshape(result.logits, {2, H * W}), labels);
  terms.cross_entropy = ce.item();
  terms.total = ce;
  if (config.use_distill && config.lambda_distill > 0.0) {
    DistillTerms d = distill_loss(result.maps, result.stage_support_masks, episode.query_mask,
                                  config.distill, fixed_teachers);
    terms.teachers = d.teachers;
    terms.distill = d.total.item();
    terms.total = add(ce, scalar_mul(d.total, config.lambda_distill));
  }
  return terms;
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, std::vector<NamedTensor> params)
    : kind_(kind), lr_(learning_rate), params_(std::move(params)) {
  if (kind_ == OptimizerKind::kAdam) {
    for (const NamedTensor& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }
}

void Optimizer::zero_grad() {
  for (NamedTensor& p : params_) p.tensor.zero_grad();
}

void Optimizer::step(double grad_divisor) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& t = params_[k].tensor;
    const auto g = t.grad();
    if (g.empty()) continue;
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] / grad_divisor;
      if (kind_ == OptimizerKind::kSgd) {
        w[i] -= lr_ * gi;
      } else {
        m_[k][i] = kBeta1 * m_[k][i] + (1.0 - kBeta1) * gi;
        v_[k][i] = kBeta2 * v_[k][i] + (1.0 - kBeta2) * gi * gi;
        w[i] -= lr_ * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + kEps);
      }
    }
  }
  zero_grad();
}

BenchmarkConfig benchmark_for(const TrainConfig& config) {
  BenchmarkConfig b = config.benchmark;
  b.mask_strides.clear();
  for (std::size_t l = 0; l < config.model.stages; ++l) b.mask_strides.push_back(std::size_t{4} << l);
  return b;
}

EvalResult evaluate(const Model& model, const SyntheticBenchmark& benchmark,
                    std::span<const int> classes, std::size_t episodes, std::size_t shots,
                    std::uint64_t seed, IouPooling pooling) {
  NoGradScope no_grad;
  EvalResult r;
  double total_ms = 0.0;
  for (std::size_t i = 0; i < episodes; ++i) {
    const Episode ep = benchmark.sample_episode(classes, shots, derive_seed(seed, 0x6576616cULL, i));
    const auto t0 = std::chrono::steady_clock::now();
    const ForwardResult fr = forward(model, ep);
    total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    r.evaluator.add(ep.class_id, hard_mask(fr.logits), to_binary(ep.query_mask));
  }
  r.miou = r.evaluator.miou(pooling, &r.warnings);
  r.fb_iou = r.evaluator.fb_iou();
  r.mean_forward_ms = episodes > 0 ? total_ms / static_cast<double>(episodes) : 0.0;
  return r;
}

TrainResult train(const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch) {
  if (config.batch_size == 0) throw InvalidArgument("train: batch_size must be >= 1");
  const SyntheticBenchmark bench(benchmark_for(config));
  const FoldSplit split = bench.split(config.fold);
  TrainResult result{Model::create(config.model, config.seed), {}};
  Model& model = result.model;
  Optimizer opt(config.optimizer, config.learning_rate, model.params.named());
  opt.zero_grad();
  const std::size_t steps_per_epoch = (config.train_episodes + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);
  std::size_t step = 0;
  auto take_step = [&](std::size_t pending) {
    if (config.schedule == LrSchedule::kPoly) {
      opt.set_learning_rate(config.learning_rate *
                            std::pow(1.0 - static_cast<double>(step) / total_steps, config.poly_power));
    }
    opt.step(static_cast<double>(pending));
    ++step;
  };

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    std::size_t pending = 0;
    for (std::size_t i = 0; i < config.train_episodes; ++i) {
      // Held-out classes never appear in training scenes, not even as
      // unlabelled distractors.
      const Episode ep = bench.sample_episode(split.train_classes, config.train_shots,
                                              derive_seed(config.seed, epoch, i), split.train_classes);
      GradTape tape;
      LossTerms terms;
      {
        TapeScope scope(tape);
        const ForwardResult fr = forward(model, ep);
        terms = compute_loss(fr, ep, model.config);
      }
      const double value = terms.total.item();
      if (!std::isfinite(value)) {
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             ", episode " + std::to_string(i));
      }
      tape.backward(terms.total);
      log.train_loss += value;
      log.cross_entropy += terms.cross_entropy;
      log.distill += terms.distill;
      if (++pending == config.batch_size) {
        take_step(pending);
        pending = 0;
      }
    }
    if (pending > 0) take_step(pending);
    const double n = static_cast<double>(std::max<std::size_t>(config.train_episodes, 1));
    log.train_loss /= n;
    log.cross_entropy /= n;
    log.distill /= n;
    if (config.eval_every_epoch || epoch == config.epochs) {
      const EvalResult ev = evaluate(model, bench, split.test_classes, config.eval_episodes,
                                     config.eval_shots, config.eval_seed, config.pooling);
      log.heldout_miou = ev.miou;
      log.fb_iou = ev.fb_iou;
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

std::uint64_t forward_mac_count(const ModelConfig& config, std::size_t image_size, std::size_t shots) {
  std::uint64_t macs = 0;
  const std::uint64_t H = image_size;
  const std::uint64_t images = 1 + shots;
  // Encoder: two stride-2 3x3 convolutions.
  const std::uint64_t c1 = config.channels.front(), cm = config.encoder_mid_channels;
  macs += images * ((H / 2) * (H / 2) * cm * 27 + (H / 4) * (H / 4) * c1 * cm * 9);
  std::uint64_t side = H / 4;
  for (std::size_t l = 0; l < config.stages; ++l) {
    const std::uint64_t c = config.channels[l];
    const std::uint64_t n = side * side;
    const std::uint64_t ns = shots * n;
    std::uint64_t block = 4 * n * c * c + 2 * n * n * c + 4 * n * c * c;  // proj, attn, MLP
    if (l > 0) block += n * c * config.channels[l - 1];                   // expansion
    macs += images * block;
    // Matching: projections, correlation, retrieval, output projection.
    macs += n * c * c + 2 * ns * c * c + n * ns * c + n * ns * c + n * c * (c + 1);
    // Decoder MLP and coarse projection.
    macs += 2 * n * c * c;
    if (l + 1 < config.stages) macs += n * c * config.channels[l + 1];
    side /= 2;
  }
  macs += (H / 4) * (H / 4) * 2 * c1;
  return macs;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'H', 'D', 'M', 'N', 'E', 'T', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointTruncatedError("checkpoint is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double d;
    std::memcpy(&d, &v, sizeof d);
    return d;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const std::vector<NamedTensor> named = params.named();
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const NamedTensor& p : named) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : p.tensor.data()) put_f64(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointMagicError(path.string() + " is not a checkpoint (bad magic)");
  }
  Reader r(bytes.substr(sizeof kMagic));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, std::pair<Shape, std::vector<double>>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    Shape shape(r.u32());
    for (std::size_t& e : shape) e = r.u32();
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = r.f64();
    entries.emplace(name, std::make_pair(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");

  ModelParams params = ModelParams::init(config, 0);
  const std::vector<NamedTensor> named = params.named();
  if (named.size() != entries.size()) {
    throw CheckpointShapeError("checkpoint holds " + std::to_string(entries.size()) +
                               " parameters, config expects " + std::to_string(named.size()));
  }
  for (const NamedTensor& p : named) {
    const auto it = entries.find(p.name);
    if (it == entries.end()) throw CheckpointShapeError("checkpoint lacks parameter " + p.name);
    if (it->second.first != p.tensor.shape()) {
      throw CheckpointShapeError("parameter " + p.name + " has shape " + shape_str(it->second.first) +
                                 ", config expects " + shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    std::copy(it->second.second.begin(), it->second.second.end(), t.mutable_data().begin());
  }
  return params;
}

}  // namespace hdmnet
