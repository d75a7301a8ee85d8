#pragma once

// Command implementations behind the hdmnet executable. Each writes its
// effective config next to its outputs and returns a process exit code.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "hdmnet/run_config.hpp"

namespace hdmnet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

// Maps an exception escaping a command to its exit code.
int exit_code_for(const std::exception& e);

// out_dir/{checkpoint.bin, metrics.csv, config.txt}.
void cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct FoldReport {
  std::size_t fold = 0;
  double miou = 0.0;
  double fb_iou = 0.0;
  double mean_forward_ms = 0.0;
};

// Evaluates the checkpoint on the test classes of each listed fold (all folds
// when empty) with config.train.eval_shots support pairs; writes eval.csv and
// config.txt. The last row of eval.csv is the unweighted mean.
std::vector<FoldReport> cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                                 const std::vector<std::size_t>& folds,
                                 const std::filesystem::path& out_dir, std::ostream& log);

struct AblationVariant {
  std::string name;
  RunConfig config;
};

// Named grids: distill, matching, stages, temperature, support_mask, kshot.
std::vector<AblationVariant> ablation_grid(const std::string& grid, const RunConfig& base);

struct AblationRow {
  std::string variant;
  std::vector<double> seed_miou;  // one entry per seed, shared across variants
  double mean_miou = 0.0;
  double mean_fb_iou = 0.0;
  std::size_t parameters = 0;
  double mean_forward_ms = 0.0;
  std::uint64_t macs = 0;
};

// Trains and evaluates every variant for seeds base.seed .. base.seed+seeds-1;
// writes ablation.csv (one row per variant) and ablation_seeds.csv.
std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::string& grid, std::size_t seeds,
                                    const std::filesystem::path& out_dir, std::ostream& log);

// Runs the finite-difference suite; returns false if any case misbehaves.
bool cmd_gradcheck(std::uint64_t seed, std::ostream& log);

// Per-stage reduced correlation heatmaps (stage resolution, PGM) and overlays
// on the query (PPM), predicted and ground-truth masks, and a manifest, for
// one held-out episode.
void cmd_heatmaps(const RunConfig& config, const std::filesystem::path& checkpoint,
                  std::uint64_t episode_seed, const std::filesystem::path& out_dir, std::ostream& log);

// CSV line for one epoch: epoch,train_loss,ce,kl,heldout_miou,fbiou.
std::string metrics_csv_row(const EpochLog& log);

}  // namespace hdmnet
