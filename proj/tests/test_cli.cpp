#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hdmnet/commands.hpp"
#include "hdmnet/image_io.hpp"

namespace hdmnet {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hdmnet_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Small but complete: three stages on 64x64 scenes, a handful of episodes.
RunConfig quick_config() {
  RunConfig c;
  c.load_text(
      "channels = 6,8,10\n"
      "encoder_mid_channels = 6\n"
      "epochs = 2\n"
      "train_episodes = 3\n"
      "eval_episodes = 3\n");
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HDMNET_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---------------------------------------------------------------------------

TEST(RunConfig, DefaultsSerializeAndReload) {
  RunConfig a;
  RunConfig b;
  b.load_text(a.serialize());
  EXPECT_EQ(a.serialize(), b.serialize());
  for (const std::string& key : RunConfig::keys()) {
    EXPECT_NE(a.serialize().find(key + " = "), std::string::npos) << key;
  }
}

TEST(RunConfig, NonDefaultValuesRoundTrip) {
  RunConfig a;
  a.set("learning_rate", "0.0123456789");
  a.set("channels", "8, 12,16");
  a.set("matching", "cross_attention");
  a.set("norm", "softmax");
  a.set("use_distill", "false");
  a.set("optimizer", "adam");
  a.set("schedule", "poly");
  a.set("seed", "18446744073709551615");
  a.set("miou_pooling", "per_episode");
  RunConfig b;
  b.load_text(a.serialize());
  EXPECT_EQ(b.train.learning_rate, 0.0123456789);
  EXPECT_EQ(b.train.model.channels, (std::vector<std::size_t>{8, 12, 16}));
  EXPECT_EQ(b.train.model.matching, MatchingKind::kCrossAttention);
  EXPECT_EQ(b.train.model.norm, CorrelationNorm::kSoftmax);
  EXPECT_FALSE(b.train.model.use_distill);
  EXPECT_EQ(b.train.optimizer, OptimizerKind::kAdam);
  EXPECT_EQ(b.train.schedule, LrSchedule::kPoly);
  EXPECT_EQ(b.train.seed, 18446744073709551615ULL);
  EXPECT_EQ(b.train.pooling, IouPooling::kPerEpisode);
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(RunConfig, CommentsAndBlankLines) {
  RunConfig c;
  c.load_text("# header\n\n  epochs = 7   # trailing\n\t\nfold=2\n");
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.train.fold, 2u);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  RunConfig c;
  EXPECT_THROW(c.set("learning_rat", "0.1"), ConfigError);
  EXPECT_THROW(c.set("epochs", "-1"), ConfigError);
  EXPECT_THROW(c.set("epochs", "3x"), ConfigError);
  EXPECT_THROW(c.set("learning_rate", "nan"), ConfigError);
  EXPECT_THROW(c.set("use_prior", "maybe"), ConfigError);
  EXPECT_THROW(c.set("norm", "l2"), ConfigError);
  EXPECT_THROW(c.load_text("epochs 3\n"), ConfigError);
  try {
    c.load_text("epochs = 3\nbogus = 1\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(c.load_file("/nonexistent/run.cfg"), ConfigError);
}

TEST(RunConfig, Validation) {
  RunConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto invalid = [](const std::string& text) {
    RunConfig c;
    c.load_text(text);
    EXPECT_THROW(c.validate(), ConfigError) << text;
  };
  invalid("stages = 4\n");             // three channel counts only
  invalid("channels = 16,16,32\n");    // not increasing
  invalid("image_size = 40\n");        // not a multiple of 16
  invalid("fold = 4\n");
  invalid("batch_size = 0\n");
  invalid("eval_shots = 0\n");
  invalid("num_classes = 6\n");
  invalid("correlation_temperature = 0\n");
}

TEST(RunConfig, FileLoading) {
  const fs::path dir = scratch("file");
  std::ofstream(dir / "a.cfg") << "epochs = 11\nlearning_rate = 0.5\n";
  RunConfig c;
  c.load_file(dir / "a.cfg");
  EXPECT_EQ(c.train.epochs, 11u);
  EXPECT_EQ(c.train.learning_rate, 0.5);
}

// ---------------------------------------------------------------------------

TEST(Commands, ExitCodes) {
  EXPECT_EQ(exit_code_for(NumericalError("x")), kExitNumerical);
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitUsage);
  EXPECT_EQ(exit_code_for(CheckpointShapeError("x")), kExitUsage);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), kExitUsage);
}

TEST(Commands, TrainWritesArtifacts) {
  const fs::path dir = scratch("train");
  std::ostringstream log;
  cmd_train(quick_config(), dir, log);
  for (const char* f : {"checkpoint.bin", "metrics.csv", "config.txt"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const std::string csv = read_file(dir / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,ce,kl,heldout_miou,fbiou");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  RunConfig reloaded;
  reloaded.load_file(dir / "config.txt");
  EXPECT_EQ(reloaded.serialize(), quick_config().serialize());
}

TEST(Commands, ZeroEpochCheckpointIsInitialization) {
  RunConfig c = quick_config();
  c.train.epochs = 0;
  const fs::path dir = scratch("zero");
  std::ostringstream log;
  cmd_train(c, dir, log);
  save_checkpoint(ModelParams::init(c.train.model, c.train.seed), dir / "init.bin");
  EXPECT_EQ(read_file(dir / "checkpoint.bin"), read_file(dir / "init.bin"));
}

TEST(Commands, TrainIsByteReproducible) {
  const fs::path a = scratch("repro_a"), b = scratch("repro_b");
  std::ostringstream log;
  cmd_train(quick_config(), a, log);
  cmd_train(quick_config(), b, log);
  EXPECT_EQ(read_file(a / "metrics.csv"), read_file(b / "metrics.csv"));
  EXPECT_EQ(read_file(a / "checkpoint.bin"), read_file(b / "checkpoint.bin"));
}

TEST(Commands, EvalReportsEveryFoldAndTheirMean) {
  const fs::path dir = scratch("eval");
  std::ostringstream log;
  RunConfig c = quick_config();
  cmd_train(c, dir / "run", log);
  for (std::size_t k : {1, 5}) {
    c.train.eval_shots = k;
    const auto reports = cmd_eval(c, dir / "run" / "checkpoint.bin", {}, dir / ("k" + std::to_string(k)), log);
    ASSERT_EQ(reports.size(), 4u);
    double mean = 0.0;
    for (const FoldReport& r : reports) mean += r.miou / 4.0;
    const std::string csv = read_file(dir / ("k" + std::to_string(k)) / "eval.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
    const std::string last = csv.substr(csv.rfind("mean,"));
    std::stringstream ss(last);
    std::string tag, shots, miou;
    std::getline(ss, tag, ',');
    std::getline(ss, shots, ',');
    std::getline(ss, miou, ',');
    EXPECT_EQ(shots, std::to_string(k));
    EXPECT_NEAR(std::stod(miou), mean, 1e-12);
  }
  const auto one = cmd_eval(c, dir / "run" / "checkpoint.bin", {2}, dir / "one", log);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].fold, 2u);
}

TEST(Commands, EvalRejectsIncompatibleCheckpoint) {
  const fs::path dir = scratch("incompatible");
  std::ostringstream log;
  cmd_train([] {
    RunConfig c = quick_config();
    c.train.epochs = 0;
    return c;
  }(), dir, log);
  RunConfig other = quick_config();
  other.train.model.channels = {6, 8, 12};
  EXPECT_THROW(cmd_eval(other, dir / "checkpoint.bin", {}, dir / "eval", log), CheckpointShapeError);
}

TEST(Commands, HeatmapsPerStage) {
  const fs::path dir = scratch("heat");
  std::ostringstream log;
  RunConfig c = quick_config();
  cmd_train(c, dir / "run", log);
  cmd_heatmaps(c, dir / "run" / "checkpoint.bin", 5, dir / "maps", log);
  std::size_t heatmaps = 0, masks = 0;
  for (const auto& e : fs::directory_iterator(dir / "maps")) {
    const std::string name = e.path().filename().string();
    if (name.find("_heatmap.pgm") != std::string::npos) {
      ++heatmaps;
      const GrayImage g = read_pgm(e.path());
      const auto [lo, hi] = std::minmax_element(g.pixels.begin(), g.pixels.end());
      EXPECT_TRUE((*lo == 0 && *hi == 255) || (*lo == 128 && *hi == 128)) << name;
    }
    if (name == "prediction.pgm" || name == "ground_truth.pgm") ++masks;
  }
  EXPECT_EQ(heatmaps, 3u);
  EXPECT_EQ(masks, 2u);
  EXPECT_TRUE(fs::exists(dir / "maps" / "manifest.txt"));
  EXPECT_EQ(read_pgm(dir / "maps" / "stage1_heatmap.pgm").height, 16u);
  EXPECT_EQ(read_pgm(dir / "maps" / "stage3_heatmap.pgm").height, 4u);
  EXPECT_EQ(read_ppm(dir / "maps" / "stage2_overlay.ppm").height, 64u);
}

TEST(Commands, AblationGrids) {
  const RunConfig base;
  EXPECT_EQ(ablation_grid("distill", base).size(), 2u);
  EXPECT_EQ(ablation_grid("matching", base).size(), 4u);
  EXPECT_EQ(ablation_grid("temperature", base).size(), 4u);
  EXPECT_EQ(ablation_grid("support_mask", base).size(), 2u);
  EXPECT_EQ(ablation_grid("kshot", base).size(), 2u);
  EXPECT_THROW(ablation_grid("nope", base), ConfigError);

  const auto stages = ablation_grid("stages", base);
  ASSERT_EQ(stages.size(), 4u);
  std::size_t previous = 0;
  for (const AblationVariant& v : stages) {
    const std::size_t n = ModelParams::init(v.config.train.model, 1).parameter_count();
    EXPECT_GT(n, previous) << v.name;
    previous = n;
  }
}

TEST(Commands, AblateTableHasOneRowPerVariant) {
  RunConfig c = quick_config();
  c.train.epochs = 1;
  c.train.train_episodes = 2;
  c.train.eval_episodes = 2;
  const fs::path dir = scratch("ablate");
  std::ostringstream log;
  const auto rows = cmd_ablate(c, "matching", 2, dir, log);
  ASSERT_EQ(rows.size(), 4u);
  for (const AblationRow& r : rows) {
    EXPECT_EQ(r.seed_miou.size(), 2u);
    EXPECT_GT(r.parameters, 0u);
    EXPECT_GT(r.macs, 0u);
  }
  const std::string csv = read_file(dir / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  const std::string seeds = read_file(dir / "ablation_seeds.csv");
  EXPECT_EQ(std::count(seeds.begin(), seeds.end(), '\n'), 9);
}

TEST(Commands, GradcheckPasses) {
  std::ostringstream log;
  EXPECT_TRUE(cmd_gradcheck(1, log)) << log.str();
  EXPECT_NE(log.str().find("harness"), std::string::npos);
}

// ---------------------------------------------------------------------------

TEST(Executable, ExitCodesAndOutputRoot) {
  const fs::path dir = scratch("exe");
  const std::string quick = "--channels 6,8,10 --encoder_mid_channels 6 --train_episodes 2 --eval_episodes 2";
  EXPECT_EQ(run_cli("train " + quick + " --epochs 0 --out " + (dir / "a").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "a" / "checkpoint.bin"));
  EXPECT_EQ(run_cli("train --no_such_key 1"), 1);
  EXPECT_EQ(run_cli("train --epochs many"), 1);
  EXPECT_EQ(run_cli("train --stages 5"), 1);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "missing.bin").string() + " --out " + (dir / "e").string()), 1);

  std::ofstream(dir / "run.cfg") << "epochs = 0\nchannels = 6,8,10\nencoder_mid_channels = 6\n";
  EXPECT_EQ(run_cli("train --config " + (dir / "run.cfg").string() + " --seed 4 --out " + (dir / "b").string()), 0);
  RunConfig written;
  written.load_file(dir / "b" / "config.txt");
  EXPECT_EQ(written.train.seed, 4u);
  EXPECT_EQ(written.train.epochs, 0u);

  const std::string env = "HDMNET_OUT_ROOT=" + (dir / "root").string() + " ";
  const int status = std::system((env + HDMNET_CLI_PATH + " train " + quick + " --epochs 0 > /dev/null").c_str());
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_TRUE(fs::exists(dir / "root" / "train" / "metrics.csv"));
}

}  // namespace
}  // namespace hdmnet
