#include "hdmnet/distillation.hpp"

#include <numeric>

namespace hdmnet {

Tensor reduce_map(const CorrelationMap& map, const Tensor& support_mask) {
  const Tensor& c = map.values;
  if (c.rank() != 2) throw ShapeError("reduce_map: correlation map must be 2-D");
  const std::size_t ns = c.dim(1);
  if (support_mask.numel() != ns) {
    throw ShapeError("reduce_map: mask has " + std::to_string(support_mask.numel()) +
                     " entries, map has " + std::to_string(ns) + " support columns");
  }
  const auto m = support_mask.data();
  std::size_t count = 0;
  for (double v : m) count += v > 0.0 ? 1 : 0;
  if (count == 0) throw InvalidArgument("reduce_map: resized support mask is empty");
  std::vector<double> w(ns);
  for (std::size_t j = 0; j < ns; ++j) w[j] = m[j] > 0.0 ? 1.0 / static_cast<double>(count) : 0.0;
  Tensor reduced = matmul(c, Tensor::from({ns, 1}, std::move(w)));
  return reshape(reduced, {c.dim(0)});
}

Tensor spatial_softmax(const Tensor& reduced, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("spatial_softmax: temperature must be > 0");
  Tensor flat = reshape(reduced, {reduced.numel()});
  return softmax(temperature == 1.0 ? flat : scalar_mul(flat, 1.0 / temperature), 0);
}

Tensor kl_pair_loss(std::span<const double> teacher, const Tensor& student) {
  return kl_divergence(teacher, student, 1e-12);
}

std::vector<double> ground_truth_teacher(const Tensor& query_mask, std::size_t h, std::size_t w) {
  if (query_mask.rank() != 2) throw ShapeError("ground_truth_teacher: mask must be [H x W]");
  const std::size_t H = query_mask.dim(0), W = query_mask.dim(1);
  if (h == 0 || w == 0 || H % h != 0 || W % w != 0) {
    throw ShapeError("ground_truth_teacher: target size must divide the mask size");
  }
  const std::size_t fy = H / h, fx = W / w;
  const auto m = query_mask.data();
  std::vector<double> out(h * w, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out[(y / fy) * w + x / fx] += m[y * W + x];
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (total <= 0.0) throw InvalidArgument("ground_truth_teacher: query mask has no foreground");
  for (double& v : out) v /= total;
  return out;
}

std::vector<double> resize_distribution(std::span<const double> dist, std::size_t h,
                                        std::size_t w, std::size_t out_h, std::size_t out_w) {
  NoGradScope no_grad;
  Tensor map = Tensor::from({1, h, w}, std::vector<double>(dist.begin(), dist.end()));
  Tensor resized = bilinear_resize(map, out_h, out_w);
  std::vector<double> out(resized.data().begin(), resized.data().end());
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (total <= 0.0) throw NumericalError("resize_distribution: resized mass is zero");
  for (double& v : out) v /= total;
  return out;
}

DistillTerms distill_loss(const std::vector<CorrelationMap>& maps,
                          const std::vector<Tensor>& stage_support_masks,
                          const Tensor& query_mask, const DistillConfig& config,
                          const std::vector<std::vector<double>>* fixed_teachers) {
  if (maps.empty()) throw InvalidArgument("distill_loss: need at least one stage");
  if (stage_support_masks.size() != maps.size()) {
    throw InvalidArgument("distill_loss: one support mask per stage required");
  }
  if (fixed_teachers != nullptr && fixed_teachers->size() != maps.size()) {
    throw InvalidArgument("distill_loss: one fixed teacher per stage required");
  }
  const std::size_t stages = maps.size();
  DistillTerms terms;
  for (std::size_t l = 0; l < stages; ++l) {
    terms.distributions.push_back(
        spatial_softmax(reduce_map(maps[l], stage_support_masks[l]), config.temperature));
  }
  const double scale = config.scale_by_t_squared ? config.temperature * config.temperature : 1.0;
  std::vector<Tensor> parts;
  terms.stage_losses.resize(stages);
  for (std::size_t l = 0; l < stages; ++l) {
    std::vector<double> teacher;
    if (fixed_teachers != nullptr) {
      teacher = (*fixed_teachers)[l];
    } else if (l + 1 < stages) {
      const auto deeper = terms.distributions[l + 1].data();
      teacher = resize_distribution(deeper, maps[l + 1].query_h, maps[l + 1].query_w,
                                    maps[l].query_h, maps[l].query_w);
    } else {
      teacher = ground_truth_teacher(query_mask, maps[l].query_h, maps[l].query_w);
    }
    Tensor term = kl_pair_loss(teacher, terms.distributions[l]);
    terms.teachers.push_back(std::move(teacher));
    if (scale != 1.0) term = scalar_mul(term, scale);
    terms.stage_losses[l] = term.item();
    parts.push_back(term);
  }
  Tensor total = parts.front();
  for (std::size_t l = 1; l < parts.size(); ++l) total = add(total, parts[l]);
  terms.total = total;
  return terms;
}

}  // namespace hdmnet
