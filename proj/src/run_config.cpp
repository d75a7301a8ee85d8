#include "hdmnet/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace hdmnet {
namespace {

struct KeyDef {
  std::string name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected an unsigned integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("expected a finite number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list, got '" + v + "'");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename E>
E parse_enum(const std::string& v, const std::map<std::string, E>& names) {
  const auto it = names.find(v);
  if (it != names.end()) return it->second;
  std::string choices;
  for (const auto& [k, _] : names) choices += (choices.empty() ? "" : "|") + k;
  throw ConfigError("expected one of " + choices + ", got '" + v + "'");
}

template <typename E>
std::string enum_name(E value, const std::map<std::string, E>& names) {
  for (const auto& [k, e] : names)
    if (e == value) return k;
  return "?";
}

const std::map<std::string, MatchingKind> kMatching = {
    {"correlation", MatchingKind::kCorrelation}, {"cross_attention", MatchingKind::kCrossAttention}};
const std::map<std::string, CorrelationNorm> kNorm = {{"inverse_softmax", CorrelationNorm::kInverseSoftmax},
                                                      {"softmax", CorrelationNorm::kSoftmax},
                                                      {"none", CorrelationNorm::kNone}};
const std::map<std::string, OptimizerKind> kOptimizer = {{"sgd", OptimizerKind::kSgd},
                                                         {"adam", OptimizerKind::kAdam}};
const std::map<std::string, LrSchedule> kSchedule = {{"constant", LrSchedule::kConstant},
                                                     {"poly", LrSchedule::kPoly}};
const std::map<std::string, IouPooling> kPooling = {{"pooled", IouPooling::kPooled},
                                                    {"per_episode", IouPooling::kPerEpisode}};

#define SIZE_KEY(key, field)                                                   \
  KeyDef{key, [](TrainConfig& c, const std::string& v) { c.field = parse_size(v); }, \
         [](const TrainConfig& c) { return std::to_string(c.field); }}
#define U64_KEY(key, field)                                                   \
  KeyDef{key, [](TrainConfig& c, const std::string& v) { c.field = parse_u64(v); }, \
         [](const TrainConfig& c) { return std::to_string(c.field); }}
#define DOUBLE_KEY(key, field)                                                    \
  KeyDef{key, [](TrainConfig& c, const std::string& v) { c.field = parse_double(v); }, \
         [](const TrainConfig& c) { return fmt(c.field); }}
#define BOOL_KEY(key, field)                                                    \
  KeyDef{key, [](TrainConfig& c, const std::string& v) { c.field = parse_bool(v); }, \
         [](const TrainConfig& c) { return fmt(c.field); }}
#define ENUM_KEY(key, field, table)                                                    \
  KeyDef{key, [](TrainConfig& c, const std::string& v) { c.field = parse_enum(v, table); }, \
         [](const TrainConfig& c) { return enum_name(c.field, table); }}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      SIZE_KEY("stages", model.stages),
      KeyDef{"channels",
             [](TrainConfig& c, const std::string& v) { c.model.channels = parse_list(v); },
             [](const TrainConfig& c) {
               std::string s;
               for (std::size_t ch : c.model.channels) s += (s.empty() ? "" : ",") + std::to_string(ch);
               return s;
             }},
      SIZE_KEY("encoder_mid_channels", model.encoder_mid_channels),
      U64_KEY("encoder_seed", model.encoder_seed),
      DOUBLE_KEY("correlation_temperature", model.correlation_temperature),
      ENUM_KEY("matching", model.matching, kMatching),
      ENUM_KEY("norm", model.norm, kNorm),
      BOOL_KEY("use_distill", model.use_distill),
      BOOL_KEY("use_prior", model.use_prior),
      BOOL_KEY("use_support_mask", model.use_support_mask),
      BOOL_KEY("decoder_norm", model.decoder_norm),
      DOUBLE_KEY("distill_temperature", model.distill.temperature),
      BOOL_KEY("distill_scale_t_squared", model.distill.scale_by_t_squared),
      DOUBLE_KEY("lambda_distill", model.lambda_distill),
      SIZE_KEY("image_size", benchmark.image_size),
      SIZE_KEY("num_classes", benchmark.num_classes),
      SIZE_KEY("num_folds", benchmark.num_folds),
      SIZE_KEY("max_objects", benchmark.max_objects),
      SIZE_KEY("min_visible_pixels", benchmark.min_visible_pixels),
      U64_KEY("class_seed", benchmark.class_seed),
      SIZE_KEY("fold", fold),
      SIZE_KEY("epochs", epochs),
      SIZE_KEY("train_episodes", train_episodes),
      SIZE_KEY("eval_episodes", eval_episodes),
      SIZE_KEY("batch_size", batch_size),
      SIZE_KEY("train_shots", train_shots),
      SIZE_KEY("eval_shots", eval_shots),
      ENUM_KEY("optimizer", optimizer, kOptimizer),
      DOUBLE_KEY("learning_rate", learning_rate),
      ENUM_KEY("schedule", schedule, kSchedule),
      DOUBLE_KEY("poly_power", poly_power),
      U64_KEY("seed", seed),
      U64_KEY("eval_seed", eval_seed),
      BOOL_KEY("eval_every_epoch", eval_every_epoch),
      ENUM_KEY("miou_pooling", pooling, kPooling),
  };
  return defs;
}

#undef SIZE_KEY
#undef U64_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY
#undef ENUM_KEY

const KeyDef& find_key(const std::string& key) {
  for (const KeyDef& d : key_defs())
    if (d.name == key) return d;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const KeyDef& d : key_defs()) out.push_back(d.name);
    return out;
  }();
  return names;
}

bool RunConfig::has_key(const std::string& key) {
  for (const KeyDef& d : key_defs())
    if (d.name == key) return true;
  return false;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeyDef& d = find_key(key);
  try {
    d.set(train, trim(value));
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(train); }

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path.string());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const KeyDef& d : key_defs()) out += d.name + " = " + d.get(train) + "\n";
  return out;
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << serialize();
  if (!out) throw Error("failed writing " + path.string());
}

void RunConfig::validate() const {
  try {
    train.model.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  const BenchmarkConfig& b = train.benchmark;
  const std::size_t stride = std::size_t{4} << (train.model.stages - 1);
  if (b.image_size == 0 || b.image_size % stride != 0) {
    throw ConfigError("image_size must be a positive multiple of " + std::to_string(stride) +
                      " for " + std::to_string(train.model.stages) + " stages");
  }
  if (b.num_folds == 0 || b.num_classes < 2 * b.num_folds) {
    throw ConfigError("need num_classes >= 2 * num_folds > 0");
  }
  if (train.fold >= b.num_folds) throw ConfigError("fold must be < num_folds");
  if (b.max_objects == 0) throw ConfigError("max_objects must be >= 1");
  if (train.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (train.train_shots == 0 || train.eval_shots == 0) throw ConfigError("shots must be >= 1");
  if (!(train.learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(train.poly_power > 0.0)) throw ConfigError("poly_power must be > 0");
}

}  // namespace hdmnet
