#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "hdmnet/distillation.hpp"
#include "hdmnet/gradcheck_suite.hpp"
#include "hdmnet/model.hpp"
#include "test_util.hpp"

namespace hdmnet {
namespace {

namespace fs = std::filesystem;
using test::max_abs_diff;

ModelConfig tiny_config() {
  ModelConfig c;
  c.stages = 2;
  c.channels = {4, 6};
  c.encoder_mid_channels = 4;
  return c;
}

TrainConfig small_train_config() {
  TrainConfig t;
  t.model.channels = {6, 8, 10};
  t.model.encoder_mid_channels = 6;
  t.epochs = 2;
  t.train_episodes = 4;
  t.eval_episodes = 4;
  return t;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

bool same_params(const ModelParams& a, const ModelParams& b) {
  const auto na = a.named(), nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].name != nb[i].name || values(na[i].tensor) != values(nb[i].tensor)) return false;
  }
  return true;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hdmnet_test_model";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

// ---------------------------------------------------------------------------

TEST(Forward, ShapeContract) {
  const ModelConfig cfg = tiny_config();
  const Model model = Model::create(cfg, 3);
  for (std::size_t shots : {1, 3}) {
    const Episode ep = tiny_episode(16, shots, 11);
    const ForwardResult r = forward(model, ep);
    EXPECT_EQ(r.logits.shape(), (Shape{2, 16, 16}));
    ASSERT_EQ(r.maps.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
      const std::size_t side = 16 >> (l + 2);
      EXPECT_EQ(r.maps[l].stage, l);
      EXPECT_EQ(r.maps[l].query_h, side);
      EXPECT_EQ(r.maps[l].values.shape(), (Shape{side * side, shots * side * side}));
      EXPECT_EQ(r.stage_support_masks[l].shape(), (Shape{side, shots * side}));
      EXPECT_EQ(r.matched[l].shape(), (Shape{cfg.channels[l], side, side}));
    }
  }
}

TEST(Forward, SingleShotMatchesHandAssembledPipeline) {
  // The K-shot path with K = 1 against the modules composed by hand, with no
  // concatenation anywhere.
  const ModelConfig cfg = tiny_config();
  const Model model = Model::create(cfg, 5);
  const Episode ep = tiny_episode(16, 1, 12);

  const Tensor bq = encode(ep.query_image, model.encoder, cfg.stages);
  const Tensor bs = encode(ep.support_images[0], model.encoder, cfg.stages);
  const Tensor prior = prior_mask(bq, bs, nearest_resize_mask(ep.support_masks[0], bq.dim(1), bq.dim(2)));
  const FeaturePyramid pq = build_pyramid(bq, model.params.blocks, cfg.stages);
  const FeaturePyramid ps = build_pyramid(bs, model.params.blocks, cfg.stages);
  std::vector<Tensor> matched;
  for (std::size_t l = 0; l < cfg.stages; ++l) {
    const std::size_t h = pq.stages[l].dim(1), w = pq.stages[l].dim(2);
    Tensor p = prior;
    if (h != prior.dim(0)) {
      p = reshape(bilinear_resize(reshape(prior, {1, prior.dim(0), prior.dim(1)}), h, w), {h, w});
    }
    matched.push_back(match(pq.stages[l], ps.stages[l], nearest_resize_mask(ep.support_masks[0], h, w), p,
                            model.params.matching[l], cfg.norm)
                          .output);
  }
  const Tensor logits = predict_mask(decode(matched, model.params.decoder), model.params.decoder, 16, 16);
  EXPECT_EQ(values(forward(model, ep).logits), values(logits));
}

TEST(Forward, Deterministic) {
  const Model model = Model::create(tiny_config(), 9);
  const Episode ep = tiny_episode(16, 2, 13);
  EXPECT_EQ(values(forward(model, ep).logits), values(forward(model, ep).logits));
}

TEST(Forward, RejectsDegenerateEpisodes) {
  const Model model = Model::create(tiny_config(), 9);
  Episode ep = tiny_episode(16, 1, 13);
  Episode no_query = ep;
  no_query.query_mask = Tensor::zeros({16, 16});
  EXPECT_THROW(forward(model, no_query), InvalidArgument);
  Episode no_support = ep;
  no_support.support_masks[0] = Tensor::zeros({16, 16});
  EXPECT_THROW(forward(model, no_support), InvalidArgument);
  Episode no_shots = ep;
  no_shots.support_images.clear();
  no_shots.support_masks.clear();
  EXPECT_THROW(forward(model, no_shots), InvalidArgument);
}

TEST(Forward, QueryPyramidIgnoresSupport) {
  const Model model = Model::create(tiny_config(), 21);
  Episode a = tiny_episode(16, 1, 14);
  Episode b = a;
  Rng rng(99);
  b.support_images[0] = test::random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  const ForwardResult ra = forward(model, a), rb = forward(model, b);
  for (std::size_t l = 0; l < ra.query_pyramid.stages.size(); ++l) {
    EXPECT_EQ(values(ra.query_pyramid.stages[l]), values(rb.query_pyramid.stages[l]));
  }
  EXPECT_NE(values(ra.logits), values(rb.logits));
}

TEST(Forward, VariantsProduceDifferentOutputs) {
  const Episode ep = tiny_episode(16, 1, 15);
  std::vector<std::vector<double>> outputs;
  for (int v = 0; v < 4; ++v) {
    ModelConfig cfg = tiny_config();
    if (v == 0) cfg.matching = MatchingKind::kCrossAttention;
    if (v == 1) cfg.norm = CorrelationNorm::kNone;
    if (v == 2) cfg.norm = CorrelationNorm::kSoftmax;
    outputs.push_back(values(forward(Model::create(cfg, 4), ep).logits));
  }
  for (std::size_t i = 0; i < outputs.size(); ++i)
    for (std::size_t j = i + 1; j < outputs.size(); ++j) EXPECT_NE(outputs[i], outputs[j]) << i << " vs " << j;
}

TEST(Forward, SupportMaskFlagSubstitutesFullMasks) {
  ModelConfig off = tiny_config();
  off.use_support_mask = false;
  const Model with = Model::create(tiny_config(), 6);
  const Model without = Model::create(off, 6);
  const Episode ep = tiny_episode(16, 2, 16);
  Episode full = ep;
  for (Tensor& m : full.support_masks) m = Tensor::full(m.shape(), 1.0);
  EXPECT_EQ(values(forward(without, ep).logits), values(forward(with, full).logits));
  EXPECT_NE(values(forward(without, ep).logits), values(forward(with, ep).logits));
  // The reduction then averages over every support column.
  const ForwardResult r = forward(without, ep);
  for (const Tensor& m : r.stage_support_masks)
    for (double v : values(m)) EXPECT_EQ(v, 1.0);
}

TEST(Forward, PriorSwitch) {
  ModelConfig cfg = tiny_config();
  cfg.use_prior = false;
  const ForwardResult r = forward(Model::create(cfg, 6), tiny_episode(16, 1, 17));
  for (double v : values(r.prior)) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// K-shot concatenation

TEST(KShot, ConcatIdentityForOneShot) {
  Rng rng(1);
  const Tensor f = test::random_tensor({3, 2, 2}, rng);
  const Tensor m = test::binary_mask(2, 2, rng);
  const SupportSet s = kshot_concat(std::vector<Tensor>{f}, std::vector<Tensor>{m});
  EXPECT_EQ(values(s.features), values(f));
  EXPECT_EQ(values(s.mask), values(m));
}

TEST(KShot, ConcatGrowsTheTokenAxis) {
  Rng rng(2);
  std::vector<Tensor> f{test::random_tensor({3, 2, 2}, rng), test::random_tensor({3, 2, 2}, rng)};
  std::vector<Tensor> m{test::binary_mask(2, 2, rng), test::binary_mask(2, 2, rng)};
  const SupportSet s = kshot_concat(f, m);
  EXPECT_EQ(s.features.shape(), (Shape{3, 2, 4}));
  EXPECT_EQ(s.mask.shape(), (Shape{2, 4}));
  const auto fv = s.features.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t x = 0; x < 2; ++x) {
          EXPECT_EQ(fv[c * 8 + y * 4 + k * 2 + x], f[k].data()[c * 4 + y * 2 + x]);
        }
  std::vector<Tensor> bad{test::random_tensor({3, 2, 2}, rng), test::random_tensor({3, 3, 2}, rng)};
  EXPECT_THROW(kshot_concat(bad, m), ShapeError);
}

TEST(KShot, EmptySecondShotIsInert) {
  Rng rng(3);
  const std::size_t c = 5;
  const MatchingParams p = MatchingParams::init(c, 0.1, rng);
  const Tensor fq = test::random_tensor({c, 3, 3}, rng);
  const Tensor f1 = test::random_tensor({c, 3, 3}, rng), f2 = test::random_tensor({c, 3, 3}, rng);
  const Tensor m1 = test::binary_mask(3, 3, rng);
  const Tensor prior = test::random_tensor({3, 3}, rng, 0.0, 1.0);
  const SupportSet s = kshot_concat(std::vector<Tensor>{f1, f2}, std::vector<Tensor>{m1, Tensor::zeros({3, 3})});
  // Column-wise and unnormalized maps keep the zero columns out of every
  // query's retrieval. (A row softmax would hand them probability mass.)
  for (CorrelationNorm norm : {CorrelationNorm::kInverseSoftmax, CorrelationNorm::kNone}) {
    const MatchResult one = match(fq, f1, m1, prior, p, norm);
    const MatchResult two = match(fq, s.features, s.mask, prior, p, norm);
    EXPECT_LT(max_abs_diff(one.output.data(), two.output.data()), 1e-12);
  }
  EXPECT_LT(max_abs_diff(prior_mask(fq, f1, m1).data(), prior_mask(fq, s.features, s.mask).data()), 1e-15);
}

TEST(KShot, ReductionIsTheMeanOverTheMaskedUnion) {
  Rng rng(4);
  const std::size_t c = 4, K = 5;
  const MatchingParams p = MatchingParams::init(c, 0.1, rng);
  std::vector<Tensor> f, m;
  for (std::size_t k = 0; k < K; ++k) {
    f.push_back(test::random_tensor({c, 2, 3}, rng));
    m.push_back(test::binary_mask(2, 3, rng, 0.4));
  }
  const SupportSet s = kshot_concat(f, m);
  const Tensor fq = test::random_tensor({c, 3, 2}, rng);
  const MatchResult r = match(fq, s.features, s.mask, Tensor::zeros({3, 2}), p);
  const Tensor reduced = reduce_map(r.map, s.mask);

  // Loop oracle: walk each shot's own mask and pick the matching columns.
  const auto cv = r.map.values.data();
  const std::size_t cols = K * 6;
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto mk = m[k].data();
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 3; ++x) {
          if (mk[y * 3 + x] == 0.0) continue;
          total += cv[i * cols + y * (K * 3) + k * 3 + x];
          ++count;
        }
    }
    EXPECT_NEAR(reduced.data()[i], total / static_cast<double>(count), 1e-12);
  }
}

TEST(KShot, OutputShapeIndependentOfK) {
  const Model model = Model::create(tiny_config(), 8);
  for (std::size_t k : {1, 2, 5}) {
    EXPECT_EQ(forward(model, tiny_episode(16, k, 30 + k)).logits.shape(), (Shape{2, 16, 16}));
  }
}

// ---------------------------------------------------------------------------
// Loss

TEST(Loss, GoldenValue) {
  // Recorded once from this implementation.
  const ModelConfig cfg = tiny_config();
  const Model model = Model::create(cfg, 2024);
  const Episode ep = tiny_episode(16, 1, 77);
  const LossTerms t = compute_loss(forward(model, ep), ep, cfg);
  EXPECT_NEAR(t.total.item(), 3.8841989296565487, 1e-12) << std::setprecision(17) << t.total.item();
  EXPECT_NEAR(t.cross_entropy, 0.88021115162103114, 1e-12);
  EXPECT_NEAR(t.distill, 3.0039877780355178, 1e-12);
}

TEST(Loss, ZeroWeightIsPureCrossEntropy) {
  ModelConfig cfg = tiny_config();
  cfg.lambda_distill = 0.0;
  const Model model = Model::create(cfg, 2);
  const Episode ep = tiny_episode(16, 1, 78);
  const ForwardResult r = forward(model, ep);
  const LossTerms t = compute_loss(r, ep, cfg);
  EXPECT_EQ(t.total.item(), t.cross_entropy);
  EXPECT_EQ(t.distill, 0.0);

  std::vector<int> labels;
  for (double v : values(ep.query_mask)) labels.push_back(v > 0.0 ? 1 : 0);
  EXPECT_EQ(t.total.item(), softmax_cross_entropy(reshape(r.logits, {2, 256}), labels).item());
}

TEST(Loss, SumOfTermsWithUnitWeight) {
  const ModelConfig cfg = tiny_config();
  const Model model = Model::create(cfg, 2);
  const Episode ep = tiny_episode(16, 1, 79);
  const ForwardResult r = forward(model, ep);
  const LossTerms t = compute_loss(r, ep, cfg);
  const DistillTerms d = distill_loss(r.maps, r.stage_support_masks, ep.query_mask, cfg.distill);
  EXPECT_DOUBLE_EQ(t.distill, d.total.item());
  EXPECT_NEAR(t.total.item(), t.cross_entropy + t.distill, 1e-14);
  EXPECT_GT(t.distill, 0.0);
}

TEST(Loss, EndToEndGradientCheck) {
  for (std::size_t shots : {1, 2}) {
    const ModelConfig cfg = tiny_config();
    const Model model = Model::create(cfg, 31);
    // Move the zero-initialized biases off the ReLU kinks, where central
    // differences and one-sided derivatives legitimately disagree.
    Rng rng(shots);
    for (const NamedTensor& p : model.params.named()) {
      Tensor t = p.tensor;
      for (double& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
    }
    const Episode ep = tiny_episode(16, shots, 80);
    std::vector<std::vector<double>> teachers;
    {
      NoGradScope no_grad;
      teachers = compute_loss(forward(model, ep), ep, cfg).teachers;
    }
    GradCheckOptions opts;
    opts.max_entries_per_tensor = 5;
    const GradCheckReport r = grad_check(
        [&] { return compute_loss(forward(model, ep), ep, cfg, &teachers).total; }, model.params.named(), opts);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
    EXPECT_GT(r.entries_checked, 100u);
  }
}

TEST(Loss, EveryParameterReceivesGradient) {
  const ModelConfig cfg = tiny_config();
  const Model model = Model::create(cfg, 32);
  const Episode ep = tiny_episode(16, 1, 81);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = compute_loss(forward(model, ep), ep, cfg).total;
  }
  tape.backward(loss);
  for (const NamedTensor& p : model.params.named()) {
    double mag = 0.0;
    for (double g : p.tensor.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << p.name;
  }
}

// ---------------------------------------------------------------------------
// Optimization

TEST(Optimizer, ZeroLearningRateLeavesParameters) {
  for (OptimizerKind kind : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
    const ModelConfig cfg = tiny_config();
    const Model model = Model::create(cfg, 40);
    const ModelParams before = model.params.clone();
    Optimizer opt(kind, 0.0, model.params.named());
    for (int step = 0; step < 3; ++step) {
      const Episode ep = tiny_episode(16, 1, 90 + step);
      GradTape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = compute_loss(forward(model, ep), ep, cfg).total;
      }
      tape.backward(loss);
      opt.step();
    }
    EXPECT_TRUE(same_params(before, model.params));
  }
}

TEST(Optimizer, SgdStepIsPlainGradientDescent) {
  Tensor w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Optimizer opt(OptimizerKind::kSgd, 0.1, {{"w", w}});
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(hadamard(w, w));
  }
  tape.backward(loss);
  opt.step(2.0);
  EXPECT_EQ(values(w), (std::vector<double>{1.0 - 0.1 * 1.0, -2.0 + 0.1 * 2.0, 0.5 - 0.1 * 0.5}));
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

std::vector<double> repeated_episode_losses(double learning_rate, std::uint64_t episode_seed,
                                            int steps) {
  const ModelConfig cfg;
  const TrainConfig defaults;
  const Model model = Model::create(cfg, 1);
  const SyntheticBenchmark bench(benchmark_for(defaults));
  const Episode ep = bench.sample_episode(bench.split(0).train_classes, 1, episode_seed);
  Optimizer opt(OptimizerKind::kSgd, learning_rate, model.params.named());
  std::vector<double> losses;
  for (int step = 0; step < steps; ++step) {
    GradTape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = compute_loss(forward(model, ep), ep, cfg).total;
    }
    losses.push_back(loss.item());
    tape.backward(loss);
    opt.step();
  }
  return losses;
}

// Small steps: the objective is smooth enough that every step helps.
TEST(Optimizer, RepeatedEpisodeLossDecreasesEveryStep) {
  for (std::uint64_t seed : {123, 7}) {
    const std::vector<double> losses = repeated_episode_losses(0.001, seed, 50);
    for (std::size_t i = 1; i < losses.size(); ++i) {
      EXPECT_LT(losses[i], losses[i - 1]) << "episode " << seed << " step " << i;
    }
  }
}

// At the default rate the distillation term makes single steps overshoot, but
// the loss still falls steadily.
TEST(Optimizer, RepeatedEpisodeLossFallsAtDefaultRate) {
  const TrainConfig defaults;
  const std::vector<double> losses = repeated_episode_losses(defaults.learning_rate, 123, 50);
  const double first = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10.0;
  const double last = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  EXPECT_LT(last, 0.75 * first);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  TrainConfig t = small_train_config();
  t.epochs = 0;
  const TrainResult r = train(t);
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(same_params(r.model.params, ModelParams::init(t.model, t.seed)));
}

TEST(Train, ZeroLearningRateKeepsInitialization) {
  TrainConfig t = small_train_config();
  t.learning_rate = 0.0;
  t.eval_every_epoch = false;
  const TrainResult r = train(t);
  EXPECT_TRUE(same_params(r.model.params, ModelParams::init(t.model, t.seed)));
}

TEST(Train, SeededRunsAreIdentical) {
  TrainConfig t = small_train_config();
  const TrainResult a = train(t), b = train(t);
  EXPECT_TRUE(same_params(a.model.params, b.model.params));
  ASSERT_EQ(a.log.size(), 2u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].heldout_miou, b.log[i].heldout_miou);
  }
  t.seed = 2;
  EXPECT_FALSE(same_params(a.model.params, train(t).model.params));
}

TEST(Train, LogsEveryEpoch) {
  TrainConfig t = small_train_config();
  std::size_t calls = 0;
  const TrainResult r = train(t, [&](const EpochLog& l) { EXPECT_EQ(l.epoch, ++calls); });
  EXPECT_EQ(calls, 2u);
  for (const EpochLog& l : r.log) {
    EXPECT_NEAR(l.train_loss, l.cross_entropy + l.distill, 1e-9);
    EXPECT_GE(l.heldout_miou, 0.0);
    EXPECT_LE(l.heldout_miou, 1.0);
  }
}

TEST(Train, RejectsZeroBatch) {
  TrainConfig t = small_train_config();
  t.batch_size = 0;
  EXPECT_THROW(train(t), InvalidArgument);
}

TEST(Train, HeldOutClassesNeverAppearInTraining) {
  TrainConfig t = small_train_config();
  const SyntheticBenchmark bench(benchmark_for(t));
  const FoldSplit split = bench.split(0);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Episode ep = bench.sample_episode(split.train_classes, 1, i, split.train_classes);
    EXPECT_NE(std::find(split.train_classes.begin(), split.train_classes.end(), ep.class_id),
              split.train_classes.end());
  }
}

TEST(MacCount, GrowsWithStagesAndShots) {
  ModelConfig c1;
  c1.stages = 1;
  ModelConfig c3;
  EXPECT_LT(forward_mac_count(c1, 64, 1), forward_mac_count(c3, 64, 1));
  EXPECT_LT(forward_mac_count(c3, 64, 1), forward_mac_count(c3, 64, 5));
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsExact) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = ModelParams::init(cfg, 55);
  const fs::path a = temp_path("a.bin"), b = temp_path("b.bin");
  save_checkpoint(p, a);
  const ModelParams q = load_checkpoint(a, cfg);
  EXPECT_TRUE(same_params(p, q));
  save_checkpoint(q, b);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  EXPECT_EQ(read_bytes(a).substr(0, 8), "HDMNETCK");
}

TEST(Checkpoint, LoadedParametersAreTrainable) {
  const ModelConfig cfg = tiny_config();
  const fs::path a = temp_path("trainable.bin");
  save_checkpoint(ModelParams::init(cfg, 56), a);
  const ModelParams q = load_checkpoint(a, cfg);
  for (const NamedTensor& p : q.named()) EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
}

TEST(Checkpoint, Errors) {
  const ModelConfig cfg = tiny_config();
  const fs::path good = temp_path("good.bin");
  save_checkpoint(ModelParams::init(cfg, 57), good);
  const std::string bytes = read_bytes(good);

  std::string magic = bytes;
  magic[0] = 'X';
  write_bytes(temp_path("magic.bin"), magic);
  EXPECT_THROW(load_checkpoint(temp_path("magic.bin"), cfg), CheckpointMagicError);

  std::string version = bytes;
  version[8] = 9;
  write_bytes(temp_path("version.bin"), version);
  EXPECT_THROW(load_checkpoint(temp_path("version.bin"), cfg), CheckpointVersionError);

  write_bytes(temp_path("short.bin"), bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(temp_path("short.bin"), cfg), CheckpointTruncatedError);

  write_bytes(temp_path("long.bin"), bytes + "x");
  EXPECT_THROW(load_checkpoint(temp_path("long.bin"), cfg), CheckpointError);

  ModelConfig deeper = cfg;
  deeper.stages = 3;
  deeper.channels = {4, 6, 8};
  EXPECT_THROW(load_checkpoint(good, deeper), CheckpointShapeError);
  ModelConfig wider = cfg;
  wider.channels = {5, 6};
  EXPECT_THROW(load_checkpoint(good, wider), CheckpointShapeError);

  EXPECT_THROW(load_checkpoint(temp_path("missing.bin"), cfg), CheckpointError);
}

}  // namespace
}  // namespace hdmnet
