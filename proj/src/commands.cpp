#include "hdmnet/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "hdmnet/distillation.hpp"
#include "hdmnet/gradcheck_suite.hpp"
#include "hdmnet/image_io.hpp"

namespace hdmnet {
namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e) != nullptr) return kExitNumerical;
  return kExitUsage;
}

std::string metrics_csv_row(const EpochLog& l) {
  return std::to_string(l.epoch) + "," + num(l.train_loss) + "," + num(l.cross_entropy) + "," +
         num(l.distill) + "," + num(l.heldout_miou) + "," + num(l.fb_iou);
}

void cmd_train(const RunConfig& config, const fs::path& out_dir, std::ostream& log) {
  config.validate();
  prepare_dir(out_dir);
  config.save(out_dir / "config.txt");
  std::ofstream csv(out_dir / "metrics.csv", std::ios::binary);
  if (!csv) throw Error("cannot write " + (out_dir / "metrics.csv").string());
  csv << "epoch,train_loss,ce,kl,heldout_miou,fbiou\n";
  const TrainResult result = train(config.train, [&](const EpochLog& l) {
    csv << metrics_csv_row(l) << "\n";
    csv.flush();
    log << "epoch " << l.epoch << "  loss " << fixed(l.train_loss) << "  ce " << fixed(l.cross_entropy)
        << "  kl " << fixed(l.distill) << "  held-out mIoU " << fixed(l.heldout_miou) << "  FB-IoU "
        << fixed(l.fb_iou) << "\n";
    log.flush();
  });
  save_checkpoint(result.model.params, out_dir / "checkpoint.bin");
  log << "wrote " << (out_dir / "checkpoint.bin").string() << "\n";
}

std::vector<FoldReport> cmd_eval(const RunConfig& config, const fs::path& checkpoint,
                                 const std::vector<std::size_t>& folds, const fs::path& out_dir,
                                 std::ostream& log) {
  config.validate();
  const TrainConfig& tc = config.train;
  Model model = Model::create(tc.model, tc.seed);
  model.params = load_checkpoint(checkpoint, tc.model);
  const SyntheticBenchmark bench(benchmark_for(tc));

  std::vector<std::size_t> which = folds;
  if (which.empty()) {
    which.resize(tc.benchmark.num_folds);
    std::iota(which.begin(), which.end(), std::size_t{0});
  }
  prepare_dir(out_dir);
  config.save(out_dir / "config.txt");

  std::vector<FoldReport> reports;
  for (std::size_t f : which) {
    if (f >= tc.benchmark.num_folds) throw ConfigError("fold " + std::to_string(f) + " out of range");
    const FoldSplit split = bench.split(f);
    const EvalResult r = evaluate(model, bench, split.test_classes, tc.eval_episodes, tc.eval_shots,
                                  tc.eval_seed, tc.pooling);
    for (const std::string& w : r.warnings) log << "warning: " << w << "\n";
    reports.push_back({f, r.miou, r.fb_iou, r.mean_forward_ms});
  }

  double miou = 0.0, fb = 0.0, ms = 0.0;
  for (const FoldReport& r : reports) {
    miou += r.miou;
    fb += r.fb_iou;
    ms += r.mean_forward_ms;
  }
  const double n = static_cast<double>(reports.size());
  std::string csv = "fold,shots,miou,fbiou,forward_ms\n";
  log << "fold  shots  mIoU    FB-IoU  ms/episode\n";
  for (const FoldReport& r : reports) {
    csv += std::to_string(r.fold) + "," + std::to_string(tc.eval_shots) + "," + num(r.miou) + "," +
           num(r.fb_iou) + "," + num(r.mean_forward_ms) + "\n";
    log << std::to_string(r.fold) << "     " << tc.eval_shots << "      " << fixed(r.miou) << "  "
        << fixed(r.fb_iou) << "  " << fixed(r.mean_forward_ms, 2) << "\n";
  }
  csv += "mean," + std::to_string(tc.eval_shots) + "," + num(miou / n) + "," + num(fb / n) + "," +
         num(ms / n) + "\n";
  log << "mean  " << tc.eval_shots << "      " << fixed(miou / n) << "  " << fixed(fb / n) << "  "
      << fixed(ms / n, 2) << "\n";
  write_text(out_dir / "eval.csv", csv);
  return reports;
}

std::vector<AblationVariant> ablation_grid(const std::string& grid, const RunConfig& base) {
  std::vector<AblationVariant> out;
  auto variant = [&](const std::string& name, auto&& edit) {
    RunConfig c = base;
    edit(c.train);
    out.push_back({name, c});
  };
  if (grid == "distill") {
    variant("distill", [](TrainConfig& t) { t.model.use_distill = true; });
    variant("no_distill", [](TrainConfig& t) { t.model.use_distill = false; });
  } else if (grid == "matching") {
    variant("CA", [](TrainConfig& t) { t.model.matching = MatchingKind::kCrossAttention; });
    for (const auto& [name, norm] :
         {std::pair{"Cos", CorrelationNorm::kNone}, std::pair{"Cos+SM", CorrelationNorm::kSoftmax},
          std::pair{"Cos+Inv-SM", CorrelationNorm::kInverseSoftmax}}) {
      variant(name, [norm = norm](TrainConfig& t) {
        t.model.matching = MatchingKind::kCorrelation;
        t.model.norm = norm;
      });
    }
  } else if (grid == "stages") {
    const std::vector<std::size_t> channels = {16, 24, 32, 48};
    for (std::size_t s = 1; s <= 4; ++s) {
      variant("S" + std::to_string(s), [&](TrainConfig& t) {
        t.model.stages = s;
        t.model.channels.assign(channels.begin(), channels.begin() + static_cast<std::ptrdiff_t>(s));
      });
    }
  } else if (grid == "temperature") {
    for (double T : {0.5, 1.0, 2.0, 5.0}) {
      variant("T=" + num(T), [T](TrainConfig& t) { t.model.distill.temperature = T; });
    }
  } else if (grid == "support_mask") {
    variant("with_mask", [](TrainConfig& t) { t.model.use_support_mask = true; });
    variant("without_mask", [](TrainConfig& t) { t.model.use_support_mask = false; });
  } else if (grid == "kshot") {
    variant("1-shot", [](TrainConfig& t) { t.eval_shots = 1; });
    variant("5-shot", [](TrainConfig& t) { t.eval_shots = 5; });
  } else {
    throw ConfigError("unknown ablation grid '" + grid +
                      "' (distill|matching|stages|temperature|support_mask|kshot)");
  }
  for (const AblationVariant& v : out) v.config.validate();
  return out;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::string& grid, std::size_t seeds,
                                    const fs::path& out_dir, std::ostream& log) {
  if (seeds == 0) throw ConfigError("ablate: need at least one seed");
  base.validate();
  const std::vector<AblationVariant> variants = ablation_grid(grid, base);
  prepare_dir(out_dir);
  base.save(out_dir / "config.txt");

  std::vector<AblationRow> rows;
  for (const AblationVariant& v : variants) {
    AblationRow row;
    row.variant = v.name;
    TrainConfig tc = v.config.train;
    tc.eval_every_epoch = false;
    double fb = 0.0, ms = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      tc.seed = base.train.seed + s;
      const TrainResult tr = train(tc);
      const SyntheticBenchmark bench(benchmark_for(tc));
      const EvalResult ev = evaluate(tr.model, bench, bench.split(tc.fold).test_classes,
                                     tc.eval_episodes, tc.eval_shots, tc.eval_seed, tc.pooling);
      row.seed_miou.push_back(ev.miou);
      fb += ev.fb_iou;
      ms += ev.mean_forward_ms;
      row.parameters = tr.model.params.parameter_count();
      log << grid << "  " << v.name << "  seed " << tc.seed << "  mIoU " << fixed(ev.miou)
          << "  FB-IoU " << fixed(ev.fb_iou) << "\n";
      log.flush();
    }
    const double n = static_cast<double>(seeds);
    row.mean_miou = std::accumulate(row.seed_miou.begin(), row.seed_miou.end(), 0.0) / n;
    row.mean_fb_iou = fb / n;
    row.mean_forward_ms = ms / n;
    row.macs = forward_mac_count(tc.model, tc.benchmark.image_size, tc.eval_shots);
    rows.push_back(row);
  }

  std::string csv = "variant,miou,fbiou,parameters,forward_ms,macs\n";
  std::string per_seed = "variant,seed,miou\n";
  log << "\nvariant          mIoU    FB-IoU  params   ms/ep   MACs\n";
  for (const AblationRow& r : rows) {
    csv += r.variant + "," + num(r.mean_miou) + "," + num(r.mean_fb_iou) + "," +
           std::to_string(r.parameters) + "," + num(r.mean_forward_ms) + "," + std::to_string(r.macs) + "\n";
    for (std::size_t s = 0; s < r.seed_miou.size(); ++s) {
      per_seed += r.variant + "," + std::to_string(base.train.seed + s) + "," + num(r.seed_miou[s]) + "\n";
    }
    std::string name = r.variant;
    name.resize(std::max<std::size_t>(name.size(), 16), ' ');
    log << name << " " << fixed(r.mean_miou) << "  " << fixed(r.mean_fb_iou) << "  " << r.parameters
        << "  " << fixed(r.mean_forward_ms, 2) << "  " << r.macs << "\n";
  }
  if (rows.size() == 2) {
    log << "per-seed delta (" << rows[0].variant << " - " << rows[1].variant << "):";
    for (std::size_t s = 0; s < seeds; ++s) log << " " << fixed(rows[0].seed_miou[s] - rows[1].seed_miou[s]);
    log << "\n";
  }
  write_text(out_dir / "ablation.csv", csv);
  write_text(out_dir / "ablation_seeds.csv", per_seed);
  return rows;
}

bool cmd_gradcheck(std::uint64_t seed, std::ostream& log) {
  constexpr double kTol = 1e-4;
  const std::vector<GradCheckCase> cases = run_gradcheck_suite(seed);
  bool ok = true;
  for (const GradCheckCase& c : cases) {
    const bool pass = c.ok(kTol);
    ok = ok && pass;
    log << (pass ? "ok    " : "FAIL  ") << c.group << "/" << c.name << "  max rel err "
        << c.report.max_rel_error << (c.expect_failure ? " (must be flagged)" : "") << "\n";
  }
  log << "\ngroup          cases  failures  max rel err  worst\n";
  for (const GradCheckGroupSummary& s : summarize(cases, kTol)) {
    std::string g = s.group;
    g.resize(std::max<std::size_t>(g.size(), 14), ' ');
    log << g << " " << s.cases << "      " << s.failures << "         " << s.max_rel_error << "  "
        << s.worst_case << "\n";
  }
  return ok;
}

void cmd_heatmaps(const RunConfig& config, const fs::path& checkpoint, std::uint64_t episode_seed,
                  const fs::path& out_dir, std::ostream& log) {
  config.validate();
  const TrainConfig& tc = config.train;
  Model model = Model::create(tc.model, tc.seed);
  model.params = load_checkpoint(checkpoint, tc.model);
  const SyntheticBenchmark bench(benchmark_for(tc));
  const Episode ep = bench.sample_episode(bench.split(tc.fold).test_classes, tc.eval_shots, episode_seed);
  prepare_dir(out_dir);
  config.save(out_dir / "config.txt");

  NoGradScope no_grad;
  const ForwardResult fr = forward(model, ep);
  const std::size_t H = ep.query_image.dim(1), W = ep.query_image.dim(2);
  const auto image = ep.query_image.data();
  std::string manifest = "episode_seed\t" + std::to_string(episode_seed) + "\nclass\t" +
                         std::to_string(ep.class_id) + "\nshots\t" + std::to_string(ep.shots()) + "\n";

  write_ppm(out_dir / "query.ppm", ep.query_image);
  manifest += "query\tquery.ppm\n";
  for (std::size_t k = 0; k < ep.shots(); ++k) {
    const std::string name = "support" + std::to_string(k + 1) + ".ppm";
    write_ppm(out_dir / name, ep.support_images[k]);
    manifest += "support\t" + name + "\n";
  }
  for (std::size_t l = 0; l < fr.maps.size(); ++l) {
    const CorrelationMap& map = fr.maps[l];
    const Tensor reduced = reduce_map(map, fr.stage_support_masks[l]);
    const auto values = reduced.data();
    const std::string stem = "stage" + std::to_string(l + 1);
    write_pgm(out_dir / (stem + "_heatmap.pgm"), heatmap(values, map.query_h, map.query_w));
    manifest += "heatmap\t" + stem + "_heatmap.pgm\t" + std::to_string(map.query_h) + "x" +
                std::to_string(map.query_w) + "\n";

    // Overlay: min-max normalized map, bilinearly upsampled, blended into red.
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double span = *hi - *lo;
    std::vector<double> norm(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) norm[i] = span > 0.0 ? (values[i] - *lo) / span : 0.5;
    const Tensor up = bilinear_resize(Tensor::from({1, map.query_h, map.query_w}, std::move(norm)), H, W);
    const auto u = up.data();
    std::vector<double> blend(3 * H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
      blend[i] = 0.4 * image[i] + 0.6 * u[i];
      blend[H * W + i] = 0.4 * image[H * W + i];
      blend[2 * H * W + i] = 0.4 * image[2 * H * W + i] + 0.6 * (1.0 - u[i]);
    }
    write_ppm(out_dir / (stem + "_overlay.ppm"), Tensor::from({3, H, W}, std::move(blend)));
    manifest += "overlay\t" + stem + "_overlay.ppm\n";
  }
  write_pgm(out_dir / "prediction.pgm", mask_image(hard_mask(fr.logits), H, W));
  write_pgm(out_dir / "ground_truth.pgm", mask_image(to_binary(ep.query_mask), H, W));
  manifest += "prediction\tprediction.pgm\nground_truth\tground_truth.pgm\n";
  write_text(out_dir / "manifest.txt", manifest);
  log << "wrote " << fr.maps.size() << " stage heatmaps to " << out_dir.string() << "\n";
}

}  // namespace hdmnet
