// hdmnet: train, eval, ablate, gradcheck, heatmaps.
//
// Every config key is also a flag: `--learning_rate 0.01`. Flags override the
// file given by --config. Outputs land in --out, or under $HDMNET_OUT_ROOT
// (default "runs") in a directory named after the subcommand.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>

#include "hdmnet/commands.hpp"

namespace {

using namespace hdmnet;
namespace fs = std::filesystem;

struct Common {
  std::string config_file;
  std::string out;
  std::map<std::string, std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory");
  for (const std::string& key : RunConfig::keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&c, key](const std::string& v) { c.overrides[key] = v; }, "config key " + key);
  }
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  for (const auto& [k, v] : c.overrides) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c, const std::string& command) {
  if (!c.out.empty()) return c.out;
  const char* root = std::getenv("HDMNET_OUT_ROOT");
  return fs::path(root != nullptr && *root != '\0' ? root : "runs") / command;
}

std::vector<std::size_t> parse_folds(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty() || s == "all") return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw ConfigError("bad fold list '" + s + "'");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HDMNet few-shot segmentation at desk scale"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, ablate_opts, heat_opts;
  auto* train_cmd = app.add_subcommand("train", "train on the synthetic benchmark");
  add_common(train_cmd, train_opts);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint per fold");
  add_common(eval_cmd, eval_opts);
  std::string eval_ckpt, eval_folds = "all";
  std::size_t kshot = 0;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--folds", eval_folds, "comma-separated folds, or all");
  eval_cmd->add_option("--kshot", kshot, "support pairs per episode (overrides eval_shots)");

  auto* ablate_cmd = app.add_subcommand("ablate", "train and compare a grid of variants");
  add_common(ablate_cmd, ablate_opts);
  std::string grid = "distill";
  std::size_t seeds = 5;
  ablate_cmd->add_option("--grid", grid, "distill|matching|stages|temperature|support_mask|kshot");
  ablate_cmd->add_option("--seeds", seeds, "seeds per variant");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  std::uint64_t grad_seed = 1;
  grad_cmd->add_option("--seed", grad_seed, "seed for the random miniature inputs");

  auto* heat_cmd = app.add_subcommand("heatmaps", "export per-stage correlation heatmaps");
  add_common(heat_cmd, heat_opts);
  std::string heat_ckpt;
  std::uint64_t episode_seed = 0;
  heat_cmd->add_option("--checkpoint", heat_ckpt, "checkpoint file")->required();
  heat_cmd->add_option("--episode-seed", episode_seed, "held-out episode seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) {
      cmd_train(resolve(train_opts), out_dir(train_opts, "train"), std::cout);
    } else if (eval_cmd->parsed()) {
      RunConfig cfg = resolve(eval_opts);
      if (kshot > 0) cfg.train.eval_shots = kshot;
      cmd_eval(cfg, eval_ckpt, parse_folds(eval_folds), out_dir(eval_opts, "eval"), std::cout);
    } else if (ablate_cmd->parsed()) {
      cmd_ablate(resolve(ablate_opts), grid, seeds, out_dir(ablate_opts, "ablate"), std::cout);
    } else if (grad_cmd->parsed()) {
      if (!cmd_gradcheck(grad_seed, std::cout)) {
        std::cerr << "gradcheck: relative error at or above 1e-4\n";
        return kExitNumerical;
      }
    } else if (heat_cmd->parsed()) {
      cmd_heatmaps(resolve(heat_opts), heat_ckpt, episode_seed, out_dir(heat_opts, "heatmaps"), std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
