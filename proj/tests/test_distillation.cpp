#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hdmnet/distillation.hpp"
#include "test_util.hpp"

namespace hdmnet {
namespace {

using test::max_abs_diff;
using test::random_tensor;

CorrelationMap make_map(Tensor values, std::size_t qh, std::size_t qw) {
  CorrelationMap m;
  m.values = std::move(values);
  m.query_h = qh;
  m.query_w = qw;
  return m;
}

double sum_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// ---------------------------------------------------------------------------
// reduce_map

TEST(ReduceMap, FullMaskIsRowMean) {
  Rng rng(1);
  CorrelationMap m = make_map(random_tensor({6, 5}, rng), 2, 3);
  Tensor r = reduce_map(m, Tensor::full({5}, 1.0));
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += m.values.at({i, j});
    EXPECT_NEAR(r.data()[i], s / 5.0, 1e-15);
  }
}

TEST(ReduceMap, SingleColumnMaskSelectsColumn) {
  Rng rng(2);
  CorrelationMap m = make_map(random_tensor({4, 6}, rng), 2, 2);
  Tensor mask = Tensor::zeros({2, 3});
  mask.mutable_data()[4] = 1.0;
  Tensor r = reduce_map(m, mask);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.data()[i], m.values.at({i, 4}));
}

TEST(ReduceMap, MatchesMaskedMeanLoop) {
  Rng rng(3);
  CorrelationMap m = make_map(random_tensor({64, 49}, rng, -10, 10), 8, 8);
  Tensor mask = test::binary_mask(7, 7, rng, 0.3);
  Tensor r = reduce_map(m, mask);
  for (std::size_t i = 0; i < 64; ++i) {
    double s = 0.0;
    int n = 0;
    for (std::size_t j = 0; j < 49; ++j) {
      if (mask.data()[j] > 0.0) {
        s += m.values.at({i, j});
        ++n;
      }
    }
    EXPECT_NEAR(r.data()[i], s / n, 1e-12);
  }
}

TEST(ReduceMap, EmptyMaskAndSizeMismatchAreErrors) {
  CorrelationMap m = make_map(Tensor::full({4, 4}, 1.0), 2, 2);
  EXPECT_THROW(reduce_map(m, Tensor::zeros({2, 2})), InvalidArgument);
  EXPECT_THROW(reduce_map(m, Tensor::full({3}, 1.0)), ShapeError);
}

// ---------------------------------------------------------------------------
// spatial_softmax

TEST(SpatialSoftmax, ConstantInputIsUniform) {
  Tensor p = spatial_softmax(Tensor::full({12}, -3.0), 1.0);
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 12.0, 1e-15);
}

TEST(SpatialSoftmax, SumsToOne) {
  Rng rng(4);
  for (double t : {0.5, 1.0, 2.0, 5.0}) {
    Tensor p = spatial_softmax(random_tensor({37}, rng, -10, 10), t);
    EXPECT_NEAR(sum_of(p.data()), 1.0, 1e-12);
  }
}

TEST(SpatialSoftmax, HigherTemperatureFlattens) {
  Rng rng(5);
  Tensor x = random_tensor({20}, rng, -3, 3);
  auto ratio = [](const Tensor& p) {
    const auto [lo, hi] = std::minmax_element(p.data().begin(), p.data().end());
    return *hi / *lo;
  };
  EXPECT_LT(ratio(spatial_softmax(x, 5.0)), ratio(spatial_softmax(x, 1.0)));
}

TEST(SpatialSoftmax, ArgmaxInvariantToTemperature) {
  Rng rng(6);
  Tensor x = random_tensor({30}, rng, -3, 3);
  auto argmax = [](const Tensor& p) {
    return std::max_element(p.data().begin(), p.data().end()) - p.data().begin();
  };
  const auto ref = argmax(spatial_softmax(x, 1.0));
  for (double t : {0.1, 0.5, 2.0, 5.0, 50.0}) EXPECT_EQ(argmax(spatial_softmax(x, t)), ref) << t;
}

// ---------------------------------------------------------------------------
// kl_pair_loss

TEST(KlPair, IdenticalDistributionsGiveZero) {
  Rng rng(7);
  Tensor p = spatial_softmax(random_tensor({16}, rng), 1.0);
  std::vector<double> teacher(p.data().begin(), p.data().end());
  EXPECT_NEAR(kl_pair_loss(teacher, p).item(), 0.0, 1e-12);
}

TEST(KlPair, OneHotTeacherUniformStudentIsLogN) {
  for (std::size_t n : {2, 16, 256}) {
    std::vector<double> teacher(n, 0.0);
    teacher[n / 3] = 1.0;
    Tensor student = Tensor::full({n}, 1.0 / static_cast<double>(n));
    EXPECT_NEAR(kl_pair_loss(teacher, student).item(), std::log(static_cast<double>(n)), 1e-9);
  }
}

TEST(KlPair, MatchesDirectSum) {
  Rng rng(8);
  Tensor t = spatial_softmax(random_tensor({64}, rng, -4, 4), 1.0);
  Tensor s = spatial_softmax(random_tensor({64}, rng, -4, 4), 1.0);
  std::vector<double> teacher(t.data().begin(), t.data().end());
  teacher[5] = 0.0;  // zero-probability teacher entries contribute nothing
  double expect = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    if (teacher[i] > 0.0) expect += teacher[i] * std::log(teacher[i] / s.data()[i]);
  }
  EXPECT_NEAR(kl_pair_loss(teacher, s).item(), expect, 1e-10);
}

TEST(KlPair, StudentFloorKeepsLossFinite) {
  std::vector<double> teacher = {0.5, 0.5};
  Tensor student = Tensor::from({2}, {1.0, 0.0});
  const double v = kl_pair_loss(teacher, student).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12), 1e-9);
}

// ---------------------------------------------------------------------------
// ground_truth_teacher

TEST(GroundTruthTeacher, UniformForegroundIsUniform) {
  std::vector<double> t = ground_truth_teacher(Tensor::full({16, 16}, 1.0), 4, 4);
  for (double v : t) EXPECT_NEAR(v, 1.0 / 16.0, 1e-15);
}

TEST(GroundTruthTeacher, SingleCellIsOneHot) {
  Tensor m = Tensor::zeros({8, 8});
  m.mutable_data()[5 * 8 + 6] = 1.0;  // cell (1, 1) of a 2x2 grid
  std::vector<double> t = ground_truth_teacher(m, 2, 2);
  EXPECT_EQ(t, (std::vector<double>{0, 0, 0, 1}));
}

TEST(GroundTruthTeacher, CheckerboardMatchesAreaAverage) {
  // 1-pixel checkerboard in the top half, solid foreground bottom-left.
  std::vector<double> v(8 * 8, 0.0);
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      if (y < 4) v[y * 8 + x] = (x + y) % 2 == 0 ? 1.0 : 0.0;
      else if (x < 4) v[y * 8 + x] = 1.0;
    }
  }
  Tensor m = Tensor::from({8, 8}, v);
  std::vector<double> t = ground_truth_teacher(m, 4, 4);
  std::vector<double> oracle(16, 0.0);
  double total = 0.0;
  for (std::size_t cy = 0; cy < 4; ++cy) {
    for (std::size_t cx = 0; cx < 4; ++cx) {
      double a = 0.0;
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) a += v[(2 * cy + dy) * 8 + 2 * cx + dx] / 4.0;
      oracle[cy * 4 + cx] = a;
      total += a;
    }
  }
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(t[i], oracle[i] / total, 1e-15);
  EXPECT_NEAR(t[0], 0.5 / total, 1e-15);
}

TEST(GroundTruthTeacher, EmptyMaskIsAnError) {
  EXPECT_THROW(ground_truth_teacher(Tensor::zeros({8, 8}), 2, 2), InvalidArgument);
  EXPECT_THROW(ground_truth_teacher(Tensor::full({8, 8}, 1.0), 3, 3), ShapeError);
}

// ---------------------------------------------------------------------------
// distill_loss

struct Stage {
  std::size_t h, w, ns;
};

std::vector<CorrelationMap> random_maps(const std::vector<Stage>& stages, Rng& rng) {
  std::vector<CorrelationMap> maps;
  for (const Stage& s : stages) maps.push_back(make_map(random_tensor({s.h * s.w, s.ns}, rng, -10, 10), s.h, s.w));
  return maps;
}

std::vector<Tensor> full_masks(const std::vector<Stage>& stages) {
  std::vector<Tensor> m;
  for (const Stage& s : stages) m.push_back(Tensor::full({s.ns}, 1.0));
  return m;
}

Tensor query_blob(std::size_t n) {
  Tensor m = Tensor::zeros({n, n});
  for (std::size_t y = n / 4; y < n / 2 + 1; ++y)
    for (std::size_t x = n / 8; x < 3 * n / 4; ++x) m.mutable_data()[y * n + x] = 1.0;
  return m;
}

TEST(DistillLoss, SingleStageIsGroundTruthTermOnly) {
  Rng rng(9);
  std::vector<Stage> st = {{4, 4, 9}};
  auto maps = random_maps(st, rng);
  Tensor qm = query_blob(16);
  DistillTerms d = distill_loss(maps, full_masks(st), qm, {});
  Tensor student = spatial_softmax(reduce_map(maps[0], Tensor::full({9}, 1.0)), 1.0);
  EXPECT_NEAR(d.total.item(), kl_pair_loss(ground_truth_teacher(qm, 4, 4), student).item(), 1e-15);
}

TEST(DistillLoss, StagesMatchingResizedGroundTruthGiveZero) {
  // Build maps whose reduced rows are log-probabilities of the teacher chain.
  std::vector<double> solid(16 * 16, 0.0);
  for (std::size_t i = 0; i < solid.size(); ++i) solid[i] = (i * 37 % 11) < 6 ? 1.0 : 0.0;
  Tensor qm = Tensor::from({16, 16}, solid);
  const std::size_t sizes[] = {8, 4, 2};
  std::vector<std::vector<double>> targets(3);
  targets[2] = ground_truth_teacher(qm, 2, 2);
  for (int l = 1; l >= 0; --l) {
    targets[l] = resize_distribution(targets[l + 1], sizes[l + 1], sizes[l + 1], sizes[l], sizes[l]);
  }
  std::vector<CorrelationMap> maps;
  std::vector<Tensor> masks;
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t n = sizes[l] * sizes[l];
    std::vector<double> v(n * 3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 3; ++j) v[i * 3 + j] = std::log(targets[l][i]);
    maps.push_back(make_map(Tensor::from({n, 3}, v), sizes[l], sizes[l]));
    masks.push_back(Tensor::full({3}, 1.0));
  }
  EXPECT_NEAR(distill_loss(maps, masks, qm, {}).total.item(), 0.0, 1e-9);
}

TEST(DistillLoss, ThreeStagesMatchSumOfIndependentPairs) {
  Rng rng(10);
  std::vector<Stage> st = {{8, 8, 20}, {4, 4, 12}, {2, 2, 6}};
  auto maps = random_maps(st, rng);
  std::vector<Tensor> masks = {test::binary_mask(4, 5, rng), test::binary_mask(3, 4, rng),
                               test::binary_mask(2, 3, rng)};
  Tensor qm = query_blob(16);
  for (double t : {1.0, 2.0}) {
    DistillConfig cfg;
    cfg.temperature = t;
    DistillTerms d = distill_loss(maps, masks, qm, cfg);
    // Independent evaluation of every pair with plain loops.
    std::vector<std::vector<double>> dist(3);
    for (std::size_t l = 0; l < 3; ++l) {
      const std::size_t nq = st[l].h * st[l].w;
      std::vector<double> r(nq, 0.0);
      for (std::size_t i = 0; i < nq; ++i) {
        int n = 0;
        for (std::size_t j = 0; j < st[l].ns; ++j) {
          if (masks[l].data()[j] > 0.0) {
            r[i] += maps[l].values.at({i, j});
            ++n;
          }
        }
        r[i] /= n * t;
      }
      const double mx = *std::max_element(r.begin(), r.end());
      double z = 0.0;
      for (double& v : r) z += (v = std::exp(v - mx));
      for (double& v : r) v /= z;
      dist[l] = r;
    }
    double expect = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
      std::vector<double> teacher = l + 1 < 3 ? resize_distribution(dist[l + 1], st[l + 1].h, st[l + 1].w, st[l].h, st[l].w)
                                              : ground_truth_teacher(qm, st[l].h, st[l].w);
      double kl = 0.0;
      for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (teacher[i] > 0.0) kl += teacher[i] * std::log(teacher[i] / dist[l][i]);
      }
      EXPECT_NEAR(d.stage_losses[l], kl, 1e-10) << "stage " << l;
      expect += kl;
    }
    EXPECT_NEAR(d.total.item(), expect, 1e-10);
  }
}

TEST(DistillLoss, NonNegativeOnRandomInputs) {
  Rng rng(11);
  std::vector<Stage> st = {{8, 8, 16}, {4, 4, 16}, {2, 2, 16}};
  for (int trial = 0; trial < 50; ++trial) {
    auto maps = random_maps(st, rng);
    DistillConfig cfg;
    cfg.temperature = rng.uniform(0.3, 5.0);
    EXPECT_GE(distill_loss(maps, full_masks(st), query_blob(16), cfg).total.item(), -1e-12);
  }
}

TEST(DistillLoss, TSquaredScalingIsOptIn) {
  Rng rng(12);
  std::vector<Stage> st = {{4, 4, 5}, {2, 2, 5}};
  auto maps = random_maps(st, rng);
  DistillConfig cfg;
  cfg.temperature = 2.0;
  const double plain = distill_loss(maps, full_masks(st), query_blob(8), cfg).total.item();
  cfg.scale_by_t_squared = true;
  EXPECT_NEAR(distill_loss(maps, full_masks(st), query_blob(8), cfg).total.item(), 4.0 * plain, 1e-12);
}

// Maps produced by real correlation at three stages so gradients reach the
// matching projections.
struct Upstream {
  std::vector<MatchingParams> params;
  std::vector<Tensor> query, support, masks;

  explicit Upstream(Rng& rng) {
    const std::size_t sizes[] = {8, 4, 2};
    for (std::size_t l = 0; l < 3; ++l) {
      params.push_back(MatchingParams::init(3, 0.1, rng));
      query.push_back(random_tensor({sizes[l] * sizes[l], 3}, rng, -1, 1, true));
      support.push_back(random_tensor({sizes[l] * sizes[l], 3}, rng, -1, 1, true));
      masks.push_back(test::binary_mask(sizes[l], sizes[l], rng));
    }
  }
  std::vector<CorrelationMap> maps() const {
    const std::size_t sizes[] = {8, 4, 2};
    std::vector<CorrelationMap> out;
    for (std::size_t l = 0; l < 3; ++l) {
      CorrelationMap m = correlation(query[l], support[l], params[l]);
      m.query_h = m.query_w = sizes[l];
      out.push_back(m);
    }
    return out;
  }
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> n;
    for (std::size_t l = 0; l < 3; ++l) {
      params[l].append_named("stage" + std::to_string(l), n);
      n.push_back({"query" + std::to_string(l), query[l]});
    }
    return n;
  }
};

TEST(DistillLoss, GradientCheckThroughCorrelation) {
  Rng rng(13);
  Upstream up(rng);
  Tensor qm = query_blob(16);
  // Teachers are constants of the objective; hold them at their values at
  // the expansion point so the finite differences see the same function.
  const auto teachers = distill_loss(up.maps(), up.masks, qm, {}).teachers;
  GradCheckReport r = grad_check(
      [&] { return distill_loss(up.maps(), up.masks, qm, {}, &teachers).total; }, up.named());
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(DistillLoss, ShallowestStageGradientNeedsNoFreezing) {
  // Stage-0 parameters only feed a student, so the plain loss checks out.
  Rng rng(14);
  Upstream up(rng);
  Tensor qm = query_blob(16);
  std::vector<NamedTensor> stage0;
  up.params[0].append_named("stage0", stage0);
  GradCheckReport r = grad_check([&] { return distill_loss(up.maps(), up.masks, qm, {}).total; }, stage0);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_parameter;
}

TEST(DistillLoss, TeacherIsDetached) {
  Rng rng(15);
  Upstream up(rng);
  Tensor qm = query_blob(16);
  // The pair term whose teacher is stage 1 must send no gradient into stage 1.
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    DistillTerms d = distill_loss(up.maps(), up.masks, qm, {});
    std::vector<std::vector<double>> teachers = d.teachers;
    auto maps = up.maps();
    Tensor student = spatial_softmax(reduce_map(maps[0], up.masks[0]), 1.0);
    loss = kl_pair_loss(d.teachers[0], student);
  }
  for (NamedTensor& p : up.named()) p.tensor.zero_grad();
  tape.backward(loss);
  for (const Tensor* t : {&up.params[1].wq, &up.params[1].wk, &up.query[1]}) {
    for (double g : t->grad()) EXPECT_EQ(g, 0.0);
  }
  double stage0 = 0.0;
  for (double g : up.params[0].wq.grad()) stage0 += std::abs(g);
  EXPECT_GT(stage0, 0.0);

  // With teacher values held fixed, perturbing teacher-stage parameters
  // leaves the student-stage gradient bit-identical.
  const auto teachers = distill_loss(up.maps(), up.masks, qm, {}).teachers;
  auto stage0_grad = [&] {
    for (NamedTensor& p : up.named()) p.tensor.zero_grad();
    GradTape t;
    Tensor l;
    {
      TapeScope scope(t);
      l = distill_loss(up.maps(), up.masks, qm, {}, &teachers).total;
    }
    t.backward(l);
    return std::vector<double>(up.params[0].wq.grad().begin(), up.params[0].wq.grad().end());
  };
  const auto before = stage0_grad();
  for (double& w : up.params[1].wk.mutable_data()) w += 0.3;
  EXPECT_EQ(stage0_grad(), before);
}

}  // namespace
}  // namespace hdmnet
