#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pixcon/datamet.hpp"
#include "pixcon/errors.hpp"
#include "pixcon/semisup.hpp"
#include "pixcon/trainer.hpp"

namespace pixcon {

/// Unknown key, unparsable value or malformed config line.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string full_scale_value;  // empty when there is no full-scale value
  std::string help;
};

/// Every recognised key, in the order shown by --help.
const std::vector<ConfigKey>& config_keys();
const ConfigKey* find_config_key(const std::string& name);

/// Flat string map of key = value settings layered over the defaults.
class Config {
 public:
  Config();

  /// Replaces every key that has a full-scale value.
  static Config full_scale_preset();

  void set(const std::string& key, const std::string& value);
  const std::string& text(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::size_t> counts(const std::string& key) const;
  std::vector<std::string> words(const std::string& key) const;

  /// Reads `key = value` lines; `#` starts a comment, blank lines are skipped.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");

  /// Every key and its current value, one `key = value` line each.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

SynthConfig synth_config(const Config& c);
ModelSpec model_spec(const Config& c);
ContrastConfig contrast_config(const Config& c);
TrainConfig pretrain_config(const Config& c);
TrainConfig finetune_config(const Config& c);
TrainConfig ce_config(const Config& c);
TrainConfig joint_config(const Config& c);
PipelineConfig pipeline_config(const Config& c);
PseudoLabelConfig pseudo_label_config(const Config& c);

}  // namespace pixcon
