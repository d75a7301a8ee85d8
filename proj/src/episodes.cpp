#include "hdmnet/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "hdmnet/image_io.hpp"
#include "hdmnet/matching.hpp"
#include "hdmnet/rng.hpp"

namespace hdmnet {
namespace {

constexpr std::size_t kFamilyCount = 12;
constexpr int kMaxAttempts = 200;

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

std::vector<int> all_other_classes(std::size_t n, int excluded) {
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i)
    if (static_cast<int>(i) != excluded) out.push_back(static_cast<int>(i));
  return out;
}

std::size_t count_foreground(const Tensor& mask) {
  std::size_t n = 0;
  for (double v : mask.data()) n += v > 0.0 ? 1 : 0;
  return n;
}

}  // namespace

bool ShapeClass::contains(double dx, double dy, double size) const {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double r = std::hypot(dx, dy);
  switch (family) {
    case ShapeFamily::kDisk:
      return r <= size;
    case ShapeFamily::kSquare:
      return std::max(ax, ay) <= 0.85 * size;
    case ShapeFamily::kTriangle:
      return dy >= -size && dy <= size && ax <= 0.5 * (dy + size);
    case ShapeFamily::kRing:
      return r <= size && r >= 0.55 * size;
    case ShapeFamily::kCross:
      return (ax <= size / 3.0 && ay <= size) || (ay <= size / 3.0 && ax <= size);
    case ShapeFamily::kBar:
      return ax <= size && ay <= 0.45 * size;
    case ShapeFamily::kDiamond:
      return ax + ay <= size;
    case ShapeFamily::kEllipse:
      return (dx * dx) / (0.36 * size * size) + (dy * dy) / (size * size) <= 1.0;
    case ShapeFamily::kFrame:
      return std::max(ax, ay) <= 0.9 * size && std::max(ax, ay) >= 0.5 * size;
    case ShapeFamily::kPillar:
      return ax <= 0.45 * size && ay <= size;
    case ShapeFamily::kSemicircle:
      return r <= size && dy <= 0.25 * size;
    case ShapeFamily::kBowtie:
      return ay <= size && ax <= size && ay <= ax + 0.2 * size;
  }
  return false;
}

SyntheticBenchmark::SyntheticBenchmark(BenchmarkConfig config) : config_(std::move(config)) {
  if (config_.num_classes == 0 || config_.num_folds == 0 ||
      config_.num_classes < 2 * config_.num_folds) {
    throw InvalidArgument("SyntheticBenchmark: need num_classes >= 2 * num_folds > 0");
  }
  if (config_.max_objects == 0) throw InvalidArgument("SyntheticBenchmark: max_objects must be >= 1");
  Rng rng(config_.class_seed);
  for (std::size_t i = 0; i < config_.num_classes; ++i) {
    ShapeClass c;
    c.id = static_cast<int>(i);
    c.family = static_cast<ShapeFamily>(i % kFamilyCount);
    // Hues are spread evenly and then visited in a stride-5 order so that
    // classes within a fold are not hue neighbours.
    const double hue = static_cast<double>((i * 5) % config_.num_classes) /
                       static_cast<double>(config_.num_classes);
    hsv_to_rgb(hue, rng.uniform(0.65, 0.9), rng.uniform(0.75, 0.95), c.rgb);
    c.stripe_frequency = rng.uniform(0.08, 0.3);
    c.stripe_angle = rng.uniform(0.0, M_PI);
    c.stripe_contrast = rng.uniform(0.08, 0.2);
    c.texture_seed = rng.next_u64();
    classes_.push_back(c);
  }
}

const ShapeClass& SyntheticBenchmark::shape_class(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= classes_.size()) {
    throw InvalidArgument("unknown class id " + std::to_string(id));
  }
  return classes_[static_cast<std::size_t>(id)];
}

FoldSplit SyntheticBenchmark::split(std::size_t fold) const {
  if (fold >= config_.num_folds) throw InvalidArgument("fold index out of range");
  FoldSplit s;
  for (std::size_t i = 0; i < config_.num_classes; ++i) {
    (i % config_.num_folds == fold ? s.test_classes : s.train_classes).push_back(static_cast<int>(i));
  }
  return s;
}

Scene SyntheticBenchmark::render_scene(const std::vector<ObjectSpec>& objects,
                                       std::uint64_t background_seed) const {
  const std::size_t n = config_.image_size;
  const double nd = static_cast<double>(n);
  Rng rng(background_seed);
  std::vector<double> img(3 * n * n);
  // Low-saturation background with a linear gradient.
  double base[3];
  hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.7), base);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double shade = gx * (static_cast<double>(x) / nd - 0.5) + gy * (static_cast<double>(y) / nd - 0.5);
      for (std::size_t c = 0; c < 3; ++c) {
        img[c * n * n + y * n + x] = base[c] + shade + 0.03 * rng.normal();
      }
    }

  std::vector<int> owner(n * n, -1);
  for (const ObjectSpec& obj : objects) {
    const ShapeClass& cls = shape_class(obj.class_id);
    Rng tex(derive_seed(cls.texture_seed, background_seed, static_cast<std::uint64_t>(obj.class_id)));
    const double phase = tex.uniform(0.0, 2.0 * M_PI);
    const double ca = std::cos(cls.stripe_angle), sa = std::sin(cls.stripe_angle);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - obj.center_x;
        const double dy = static_cast<double>(y) + 0.5 - obj.center_y;
        if (!cls.contains(dx, dy, obj.size)) continue;
        owner[y * n + x] = obj.class_id;
        const double u = static_cast<double>(x) * ca + static_cast<double>(y) * sa;
        const double mod = 1.0 + cls.stripe_contrast * std::sin(2.0 * M_PI * cls.stripe_frequency * u + phase);
        for (std::size_t c = 0; c < 3; ++c) {
          img[c * n * n + y * n + x] = cls.rgb[c] * mod + 0.02 * tex.normal();
        }
      }
    }
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);

  Scene scene;
  scene.image = Tensor::from({3, n, n}, std::move(img));
  for (const ObjectSpec& obj : objects) {
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n * n; ++i) m[i] = owner[i] == obj.class_id ? 1.0 : 0.0;
    scene.masks[obj.class_id] = Tensor::from({n, n}, std::move(m));
  }
  return scene;
}

Scene SyntheticBenchmark::generate_scene(const std::vector<int>& classes, std::uint64_t seed) const {
  Rng rng(seed);
  const double n = static_cast<double>(config_.image_size);
  std::vector<ObjectSpec> objects;
  for (int id : classes) {
    const ShapeClass& cls = shape_class(id);
    ObjectSpec o;
    o.class_id = id;
    o.size = rng.uniform(cls.min_size, cls.max_size);
    const double margin = 0.6 * o.size;
    o.center_x = rng.uniform(margin, n - margin);
    o.center_y = rng.uniform(margin, n - margin);
    objects.push_back(o);
  }
  return render_scene(objects, rng.next_u64());
}

bool SyntheticBenchmark::mask_usable(const Tensor& mask) const {
  if (count_foreground(mask) < config_.min_visible_pixels) return false;
  const std::size_t n = config_.image_size;
  for (std::size_t stride : config_.mask_strides) {
    if (stride == 0 || n % stride != 0) continue;
    if (count_foreground(nearest_resize_mask(mask, n / stride, n / stride)) == 0) return false;
  }
  return true;
}

Episode SyntheticBenchmark::sample_episode(std::span<const int> episode_classes, std::size_t shots,
                                           std::uint64_t seed,
                                           std::span<const int> distractor_classes) const {
  if (episode_classes.empty()) throw InvalidArgument("sample_episode: empty class split");
  if (shots == 0) throw InvalidArgument("sample_episode: need at least one shot");
  Rng rng(seed);
  Episode ep;
  ep.seed = seed;
  ep.class_id = episode_classes[rng.below(episode_classes.size())];
  std::vector<int> others;
  if (distractor_classes.empty()) {
    others = all_other_classes(config_.num_classes, ep.class_id);
  } else {
    for (int id : distractor_classes) {
      shape_class(id);
      if (id != ep.class_id) others.push_back(id);
    }
  }

  auto draw = [&](Tensor& image, Tensor& mask) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      std::vector<int> pool = others;
      const std::size_t distractors = std::min<std::size_t>(rng.below(config_.max_objects), pool.size());
      std::vector<int> classes{ep.class_id};
      for (std::size_t d = 0; d < distractors; ++d) {
        const std::size_t k = rng.below(pool.size());
        classes.push_back(pool[k]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
      }
      for (std::size_t i = classes.size(); i > 1; --i) std::swap(classes[i - 1], classes[rng.below(i)]);
      Scene scene = generate_scene(classes, rng.next_u64());
      Tensor m = scene.masks.at(ep.class_id);
      if (!mask_usable(m)) continue;
      image = scene.image;
      mask = m;
      return;
    }
    throw Error("sample_episode: no usable scene for class " + std::to_string(ep.class_id) +
                " after " + std::to_string(kMaxAttempts) + " attempts (seed " +
                std::to_string(seed) + ")");
  };

  draw(ep.query_image, ep.query_mask);
  ep.support_images.resize(shots);
  ep.support_masks.resize(shots);
  for (std::size_t k = 0; k < shots; ++k) draw(ep.support_images[k], ep.support_masks[k]);
  return ep;
}

// ---------------------------------------------------------------------------

void SegmentationEvaluator::add(int class_id, std::span<const std::uint8_t> prediction,
                                std::span<const std::uint8_t> ground_truth) {
  if (prediction.size() != ground_truth.size()) {
    throw ShapeError("SegmentationEvaluator: prediction and ground truth sizes differ");
  }
  IouCounts fg, bg;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const bool p = prediction[i] != 0, g = ground_truth[i] != 0;
    fg.intersection += (p && g) ? 1 : 0;
    fg.union_ += (p || g) ? 1 : 0;
    bg.intersection += (!p && !g) ? 1 : 0;
    bg.union_ += (!p || !g) ? 1 : 0;
  }
  IouCounts& c = pooled_[class_id];
  c.intersection += fg.intersection;
  c.union_ += fg.union_;
  if (fg.union_ > 0) {
    auto& e = per_episode_[class_id];
    e.first += static_cast<double>(fg.intersection) / static_cast<double>(fg.union_);
    e.second += 1;
  }
  foreground_.intersection += fg.intersection;
  foreground_.union_ += fg.union_;
  background_.intersection += bg.intersection;
  background_.union_ += bg.union_;
  ++episodes_;
}

void SegmentationEvaluator::merge(const SegmentationEvaluator& other) {
  for (const auto& [id, c] : other.pooled_) {
    pooled_[id].intersection += c.intersection;
    pooled_[id].union_ += c.union_;
  }
  for (const auto& [id, e] : other.per_episode_) {
    per_episode_[id].first += e.first;
    per_episode_[id].second += e.second;
  }
  foreground_.intersection += other.foreground_.intersection;
  foreground_.union_ += other.foreground_.union_;
  background_.intersection += other.background_.intersection;
  background_.union_ += other.background_.union_;
  episodes_ += other.episodes_;
}

std::map<int, double> SegmentationEvaluator::class_iou(IouPooling pooling) const {
  std::map<int, double> out;
  for (const auto& [id, c] : pooled_) {
    if (c.union_ == 0) continue;
    if (pooling == IouPooling::kPooled) {
      out[id] = static_cast<double>(c.intersection) / static_cast<double>(c.union_);
    } else {
      const auto it = per_episode_.find(id);
      out[id] = it->second.first / static_cast<double>(it->second.second);
    }
  }
  return out;
}

double SegmentationEvaluator::miou(IouPooling pooling, std::vector<std::string>* warnings) const {
  if (warnings != nullptr) {
    for (const auto& [id, c] : pooled_) {
      if (c.union_ == 0) {
        warnings->push_back("class " + std::to_string(id) +
                            " has zero union over the run; excluded from mIoU");
      }
    }
  }
  const std::map<int, double> ious = class_iou(pooling);
  if (ious.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [id, v] : ious) s += v;
  return s / static_cast<double>(ious.size());
}

double SegmentationEvaluator::fb_iou() const {
  auto ratio = [](const IouCounts& c) {
    return c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_);
  };
  return 0.5 * (ratio(foreground_) + ratio(background_));
}

std::vector<std::uint8_t> to_binary(const Tensor& mask) {
  std::vector<std::uint8_t> out(mask.numel());
  const auto m = mask.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] > 0.0 ? 1 : 0;
  return out;
}

void dump_episode(const Episode& episode, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = "episode_" + std::to_string(episode.seed);
  const std::size_t h = episode.query_mask.dim(0), w = episode.query_mask.dim(1);
  std::vector<std::string> files;
  auto emit = [&](const std::string& tag, const Tensor& image, const Tensor& mask) {
    const std::string img = stem + "_" + tag + ".ppm";
    const std::string msk = stem + "_" + tag + "_mask.pgm";
    write_ppm(dir / img, image);
    write_pgm(dir / msk, mask_image(to_binary(mask), h, w));
    files.push_back(img);
    files.push_back(msk);
  };
  emit("query", episode.query_image, episode.query_mask);
  for (std::size_t k = 0; k < episode.shots(); ++k) {
    emit("support" + std::to_string(k), episode.support_images[k], episode.support_masks[k]);
  }
  std::ofstream manifest(dir / "manifest.tsv", std::ios::app);
  manifest << episode.seed << '\t' << episode.class_id;
  for (const std::string& f : files) manifest << '\t' << f;
  manifest << '\n';
}

}  // namespace hdmnet
