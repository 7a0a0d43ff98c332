#pragma once

// Run configuration: flat "key = value" files with # comments and dotted
// keys, layered over preset defaults and resolved into typed settings.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcffa/blocks.hpp"
#include "mcffa/training.hpp"

namespace mcffa {

// Sorted by key, so rendering is canonical.
using ConfigMap = std::map<std::string, std::string>;

// Parses "key = value" lines. Blank lines and text after '#' are ignored;
// keys and values are trimmed. Errors name `source` and the line number.
ConfigMap parse_config(std::string_view text, const std::string& source = "config");
ConfigMap read_config_file(const std::filesystem::path& path);

// Every key with its default for preset "paper" or "micro".
ConfigMap preset_defaults(const std::string& preset);

// Overwrites known keys of `base` with `layer`; an unknown key is a
// ConfigError.
void merge_config(ConfigMap& base, const ConfigMap& layer, const std::string& source);

// Splits "key=value" as given to --set.
std::pair<std::string, std::string> parse_assignment(const std::string& text);

// One "key = value" line per entry after a comment header; parse_config
// of the result reproduces the map.
std::string render_config(const ConfigMap& cfg);

// Builds the effective map: defaults of the chosen preset, then each layer
// in order. The preset comes from the last layer that sets "preset".
ConfigMap layered_config(const std::vector<std::pair<std::string, ConfigMap>>& layers);

struct RunConfig {
  std::string preset;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::filesystem::path data_csv;
  std::filesystem::path image_dir;
  std::filesystem::path out_dir;
  double train_fraction = 0.8;
  std::size_t folds = 4;
  std::string variant;  // "micro" or a backbone triple such as "A,B,C"
  ModelConfig model;
  TrainConfig train;
};

// Typed view of a complete map; malformed or out-of-range values raise
// ConfigError naming the key.
RunConfig resolve_config(const ConfigMap& cfg);

// The model of `run` with its backbones replaced by the triple `spec`.
ModelConfig model_for_variant(const RunConfig& run, const std::string& spec);

}  // namespace mcffa
