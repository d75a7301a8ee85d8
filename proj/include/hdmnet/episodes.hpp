#pragma once

// Procedural few-shot segmentation benchmark. Classes are textured coloured
// shape families; scenes hold 1-4 objects that may occlude each other. Class
// ids are split into folds; training draws episode classes from the other
// folds and evaluation from the held-out one.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hdmnet/tensor.hpp"

namespace hdmnet {

enum class ShapeFamily {
  kDisk,
  kSquare,
  kTriangle,
  kRing,
  kCross,
  kBar,
  kDiamond,
  kEllipse,
  kFrame,
  kPillar,
  kSemicircle,
  kBowtie,
};

struct ShapeClass {
  int id = 0;
  ShapeFamily family = ShapeFamily::kDisk;
  double rgb[3] = {0, 0, 0};
  double stripe_frequency = 0.0;  // cycles per pixel
  double stripe_angle = 0.0;      // radians
  double stripe_contrast = 0.0;
  std::uint64_t texture_seed = 0;
  double min_size = 9.0;  // half-extent in pixels
  double max_size = 16.0;

  // Whether (dx, dy) relative to the object centre falls inside a shape of
  // half-extent `size`.
  bool contains(double dx, double dy, double size) const;
};

struct ObjectSpec {
  int class_id = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  double size = 0.0;
};

struct Scene {
  Tensor image;                   // [3 x H x W] in [0, 1]
  std::map<int, Tensor> masks;    // class id -> [H x W] binary, mutually exclusive
};

struct FoldSplit {
  std::vector<int> train_classes;
  std::vector<int> test_classes;
};

struct Episode {
  Tensor query_image;  // [3 x H x W]
  Tensor query_mask;   // [H x W]
  std::vector<Tensor> support_images;
  std::vector<Tensor> support_masks;
  int class_id = 0;
  std::uint64_t seed = 0;

  std::size_t shots() const { return support_images.size(); }
};

struct BenchmarkConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 12;
  std::size_t num_folds = 4;
  std::size_t max_objects = 4;     // per scene, including the episode class
  std::size_t min_visible_pixels = 24;
  std::uint64_t class_seed = 2023;  // appearance of the class registry
  // Every support mask must stay non-empty after nearest downsampling by each
  // of these strides.
  std::vector<std::size_t> mask_strides = {4, 8, 16};
};

class SyntheticBenchmark {
 public:
  explicit SyntheticBenchmark(BenchmarkConfig config);

  const BenchmarkConfig& config() const { return config_; }
  const std::vector<ShapeClass>& classes() const { return classes_; }
  const ShapeClass& shape_class(int id) const;

  // Fold f holds class ids {f, f + F, f + 2F, ...}.
  FoldSplit split(std::size_t fold) const;

  Scene render_scene(const std::vector<ObjectSpec>& objects, std::uint64_t background_seed) const;

  // Objects for `classes` in drawing order (later occludes earlier), random
  // sizes and positions.
  Scene generate_scene(const std::vector<int>& classes, std::uint64_t seed) const;

  // Class uniform over `episode_classes`; query and K support scenes drawn
  // independently, each containing the class plus 0..max_objects-1
  // distractors drawn from `distractor_classes` (every registered class when
  // empty), never the episode class. Degenerate draws are resampled (bounded).
  Episode sample_episode(std::span<const int> episode_classes, std::size_t shots,
                         std::uint64_t seed, std::span<const int> distractor_classes = {}) const;

 private:
  bool mask_usable(const Tensor& mask) const;

  BenchmarkConfig config_;
  std::vector<ShapeClass> classes_;
};

// ---------------------------------------------------------------------------
// Metrics

enum class IouPooling {
  kPooled,      // per class: sum of intersections / sum of unions
  kPerEpisode,  // per class: mean of per-episode IoUs
};

struct IouCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
};

class SegmentationEvaluator {
 public:
  void add(int class_id, std::span<const std::uint8_t> prediction,
           std::span<const std::uint8_t> ground_truth);
  void merge(const SegmentationEvaluator& other);

  // Classes with zero union over the run are skipped and reported in
  // `warnings` when given. Returns 0 when no class qualifies.
  double miou(IouPooling pooling = IouPooling::kPooled,
              std::vector<std::string>* warnings = nullptr) const;
  std::map<int, double> class_iou(IouPooling pooling = IouPooling::kPooled) const;
  double fb_iou() const;
  std::size_t episodes() const { return episodes_; }

 private:
  std::map<int, IouCounts> pooled_;
  std::map<int, std::pair<double, std::size_t>> per_episode_;
  IouCounts foreground_;
  IouCounts background_;
  std::size_t episodes_ = 0;
};

std::vector<std::uint8_t> to_binary(const Tensor& mask);

// Writes <dir>/episode_<seed>_{query,support<k>}.{ppm,pgm} and appends one
// line per episode to <dir>/manifest.tsv.
void dump_episode(const Episode& episode, const std::filesystem::path& dir);

}  // namespace hdmnet
