#pragma once

// Inter-stage correlation-map distillation. Each stage's correlation map is
// reduced to one score per query position (masked mean over support
// columns), turned into a spatial distribution, and pulled toward the next
// deeper stage's distribution with a KL term. The deepest stage is pulled
// toward the downsampled query ground truth.

#include <span>
#include <vector>

#include "hdmnet/matching.hpp"
#include "hdmnet/tensor.hpp"

namespace hdmnet {

struct DistillConfig {
  double temperature = 1.0;
  // Classic KD rescales each term by T^2; off by default.
  bool scale_by_t_squared = false;
};

// Mean of C(i, j) over support columns j with mask(j) > 0. The mask may be any
// shape whose element count equals the number of support columns.
// Returns [hq*wq]. Throws InvalidArgument on an empty mask.
Tensor reduce_map(const CorrelationMap& map, const Tensor& support_mask);

// softmax(reduced / T) over all query positions.
Tensor spatial_softmax(const Tensor& reduced, double temperature);

// KL(teacher || student) with the student floored at 1e-12 inside the log.
Tensor kl_pair_loss(std::span<const double> teacher, const Tensor& student);

// Area-average downsample of the query mask to [h x w], normalized to sum 1.
std::vector<double> ground_truth_teacher(const Tensor& query_mask, std::size_t h, std::size_t w);

// Bilinear resize of a [h x w] distribution, renormalized to sum 1.
std::vector<double> resize_distribution(std::span<const double> dist, std::size_t h,
                                        std::size_t w, std::size_t out_h, std::size_t out_w);

struct DistillTerms {
  Tensor total;
  std::vector<double> stage_losses;  // index l: term whose student is stage l
  std::vector<Tensor> distributions;  // per-stage spatial softmax of the reduced map
  std::vector<std::vector<double>> teachers;  // detached target of each stage's term
};

// sum_{l<L} KL(resize(detach(P_{l+1})) || P_l) + KL(gt || P_L).
// stage_support_masks[l] holds the support mask at stage-l resolution.
// When `fixed_teachers` is given it replaces the teachers derived from the
// maps (the gradient is the same either way, since teachers are constants).
DistillTerms distill_loss(const std::vector<CorrelationMap>& maps,
                          const std::vector<Tensor>& stage_support_masks,
                          const Tensor& query_mask, const DistillConfig& config,
                          const std::vector<std::vector<double>>* fixed_teachers = nullptr);

}  // namespace hdmnet
