#pragma once

// Plain-text run configuration: one `key = value` per line, '#' starts a
// comment. Every key maps onto a TrainConfig field (model, benchmark and
// optimization settings). Unknown keys and unparsable values are errors.

#include <filesystem>
#include <string>
#include <vector>

#include "hdmnet/error.hpp"
#include "hdmnet/model.hpp"

namespace hdmnet {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  TrainConfig train;

  // All recognised keys, in serialization order.
  static const std::vector<std::string>& keys();
  static bool has_key(const std::string& key);

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  // Applies every assignment in the file on top of the current values.
  void load_file(const std::filesystem::path& path);
  // Parses `key = value` lines; `origin` names the source in error messages.
  void load_text(const std::string& text, const std::string& origin = "<text>");

  // Every key, one per line, in keys() order. load_text(serialize())
  // reproduces the config exactly.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  // Cross-field checks (channel counts vs stages, image size vs strides...).
  void validate() const;
};

}  // namespace hdmnet
