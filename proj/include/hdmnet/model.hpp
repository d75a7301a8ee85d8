#pragma once

// Full few-shot segmentation graph: fixed encoder -> shared self-attention
// pyramids for query and support -> per-stage matching -> coarse-to-fine
// decoder. Also the training objective, K-shot support concatenation,
// optimizers, the training/evaluation loops and the checkpoint format.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hdmnet/decoder.hpp"
#include "hdmnet/distillation.hpp"
#include "hdmnet/episodes.hpp"
#include "hdmnet/feature_pyramid.hpp"
#include "hdmnet/matching.hpp"

namespace hdmnet {

struct ModelConfig {
  std::size_t stages = 3;
  std::vector<std::size_t> channels = {16, 24, 32};
  std::size_t encoder_mid_channels = 64;
  std::uint64_t encoder_seed = 7;
  double correlation_temperature = 0.1;
  MatchingKind matching = MatchingKind::kCorrelation;
  CorrelationNorm norm = CorrelationNorm::kInverseSoftmax;
  bool use_distill = true;
  bool use_prior = true;
  // false replaces every support mask with all-ones wherever it is consumed.
  bool use_support_mask = true;
  bool decoder_norm = false;
  DistillConfig distill;
  double lambda_distill = 1.0;

  // Throws InvalidArgument on inconsistent settings.
  void validate() const;
};

struct ModelParams {
  std::vector<StageBlockParams> blocks;
  std::vector<MatchingParams> matching;
  DecoderParams decoder;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  // Stable order: pyramid blocks, matching, decoder.
  std::vector<NamedTensor> named() const;
  ModelParams clone() const;
  std::size_t parameter_count() const;
};

struct Model {
  ModelConfig config;
  EncoderParams encoder;
  ModelParams params;

  static Model create(const ModelConfig& config, std::uint64_t init_seed);
};

struct SupportSet {
  Tensor features;  // [c x h x K*w]
  Tensor mask;      // [h x K*w]
};

// Concatenates per-shot support feature maps and masks along the width axis,
// so after flattening the support token axis grows K-fold.
SupportSet kshot_concat(std::span<const Tensor> features, std::span<const Tensor> masks);

struct ForwardResult {
  Tensor logits;  // [2 x H x W]
  std::vector<CorrelationMap> maps;
  std::vector<Tensor> stage_support_masks;  // concatenated over shots
  std::vector<Tensor> matched;              // X_l
  FeaturePyramid query_pyramid;
  Tensor prior;  // [h_1 x w_1] prior at encoder resolution
};

ForwardResult forward(const Model& model, const Episode& episode);

struct LossTerms {
  Tensor total;
  double cross_entropy = 0.0;
  double distill = 0.0;
  std::vector<std::vector<double>> teachers;  // empty without distillation
};

// Pixel-mean 2-class cross-entropy + lambda * distillation.
// `fixed_teachers` replaces the detached teacher distributions (see
// distill_loss); used to differentiate the objective with teachers held fixed.
LossTerms compute_loss(const ForwardResult& result, const Episode& episode,
                       const ModelConfig& config,
                       const std::vector<std::vector<double>>* fixed_teachers = nullptr);

// ---------------------------------------------------------------------------
// Optimization

enum class OptimizerKind { kSgd, kAdam };
enum class LrSchedule { kConstant, kPoly };

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, std::vector<NamedTensor> params);
  // Applies grad / grad_divisor, then clears the gradients.
  void step(double grad_divisor = 1.0);
  void zero_grad();
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  ModelConfig model;
  BenchmarkConfig benchmark;
  std::size_t fold = 0;
  std::size_t epochs = 30;
  std::size_t train_episodes = 200;
  std::size_t eval_episodes = 200;
  std::size_t batch_size = 1;
  std::size_t train_shots = 1;
  std::size_t eval_shots = 1;
  double learning_rate = 0.05;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  // Poly decays lr * (1 - step / total_steps)^poly_power.
  LrSchedule schedule = LrSchedule::kConstant;
  double poly_power = 0.9;
  std::uint64_t seed = 1;
  // Held-out episodes come from this seed alone, so runs that differ only in
  // `seed` or in ablation flags see the same evaluation stream.
  std::uint64_t eval_seed = 99;
  // Evaluate held-out episodes after every epoch (else only after the last).
  bool eval_every_epoch = true;
  IouPooling pooling = IouPooling::kPooled;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double cross_entropy = 0.0;
  double distill = 0.0;
  double heldout_miou = 0.0;
  double fb_iou = 0.0;
};

struct EvalResult {
  double miou = 0.0;
  double fb_iou = 0.0;
  double mean_forward_ms = 0.0;
  SegmentationEvaluator evaluator;
  std::vector<std::string> warnings;
};

EvalResult evaluate(const Model& model, const SyntheticBenchmark& benchmark,
                    std::span<const int> classes, std::size_t episodes, std::size_t shots,
                    std::uint64_t seed, IouPooling pooling = IouPooling::kPooled);

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
};

TrainResult train(const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Benchmark config consistent with the model's stage strides.
BenchmarkConfig benchmark_for(const TrainConfig& config);

// Analytic multiply-accumulate count of one forward pass.
std::uint64_t forward_mac_count(const ModelConfig& config, std::size_t image_size, std::size_t shots);

// ---------------------------------------------------------------------------
// Checkpoints: "HDMNETCK", u32 version, u32 count, then per parameter
// u32 name length, name, u32 rank, u32 extents, little-endian f64 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};
class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace hdmnet
