#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmseg/metrics.hpp"
#include "mmseg/network.hpp"
#include "mmseg/training.hpp"

namespace mmseg {

/// `key = value` lines; `#` starts a comment; blank lines are skipped. Order is preserved.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

/// Model keys only, fixed order, doubles printed with %.17g.
std::string to_text(const ModelConfig& cfg);
/// Inverse of `to_text`; every model key must appear exactly once.
ModelConfig model_config_from_text(std::string_view text);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> modality_order{"FLAIR", "T2", "T1", "T1c"};
  std::vector<RegionSpec> regions = default_regions();
  std::string data_dir;
  std::string out_dir;

  /// Applies one `key = value` setting; unknown keys and malformed values are usage errors.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  /// Every key, resolved, in canonical order. Parsing the result reproduces the config.
  std::string to_text() const;
};

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::string& path);

}  // namespace mmseg
