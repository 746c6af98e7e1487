#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ntpseg/codec.hpp"
#include "ntpseg/inference.hpp"
#include "ntpseg/losses.hpp"
#include "ntpseg/model.hpp"
#include "ntpseg/trainer.hpp"

namespace ntpseg {

// Every tunable of a run. Keys are flat "section.field" names; the vocabulary
// size and the number of model heads are derived (from the codec and loss.k).
struct RunConfig {
  CodecConfig codec{2, 64};
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DecodeConfig decode;

  RunConfig();
  // Recomputes derived fields and validates everything.
  void finalize();
  VocabLayout vocab() const { return VocabLayout::from(codec); }

  void set(std::string_view key, const std::string& value);
  std::string get(std::string_view key) const;

  // key -> canonical value text, sorted by key.
  std::map<std::string, std::string> to_map() const;
  static RunConfig from_map(const std::map<std::string, std::string>& values);
  std::string to_text() const;  // "key = value" lines

  bool operator==(const RunConfig&) const = default;
};

struct ConfigKey {
  std::string key;
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

// "key = value" lines; '#' starts a comment. Unknown keys are errors.
void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin = "config");
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

// Shortest text that reads back to the same double.
std::string format_double(double v);

}  // namespace ntpseg
