#pragma once

// Finite-difference checks of every differentiable operation and of the full
// training loss on miniature random shapes, grouped by module.

#include <cstdint>
#include <string>
#include <vector>

#include "hdmnet/episodes.hpp"
#include "hdmnet/gradcheck.hpp"

namespace hdmnet {

struct GradCheckCase {
  std::string group;
  std::string name;
  GradCheckReport report;
  // Harness self-tests must be flagged by the checker.
  bool expect_failure = false;

  bool ok(double tol) const { return report.passed(tol) != expect_failure; }
};

struct GradCheckGroupSummary {
  std::string group;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::string worst_case;
};

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 1);

std::vector<GradCheckGroupSummary> summarize(const std::vector<GradCheckCase>& cases, double tol);

// Miniature episode for end-to-end checks: random images, rectangular masks
// that survive every stage's downsampling.
Episode tiny_episode(std::size_t image_size, std::size_t shots, std::uint64_t seed);

}  // namespace hdmnet
