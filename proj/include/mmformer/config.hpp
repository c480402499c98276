#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmformer/episodes.hpp"
#include "mmformer/mm.hpp"

namespace mmformer {

// Every tunable of a run. Each field is reachable as a config-file key of the
// same name (see config_keys()).
struct RunConfig {
  std::uint64_t seed = 0;

  // Architecture.
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ffn = 64;
  std::size_t num_proposals = 16;
  bool positional_encoding = false;
  std::size_t ca_ffn = 64;
  std::size_t ca_layers = 2;
  AblationFlags flags;
  BlendMode blend = BlendMode::softmax;

  // Data.
  std::size_t image_size = 64;
  int fold = 0;
  std::size_t k_shot = 1;
  bool augment = true;

  // Optimisation. Unset iterations / batch_size take the stage defaults.
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> batch_size;
  double base_lr = 1e-4;
  double weight_decay = 5e-2;
  double poly_power = 0.9;
  double lambda_dice = 10.0;
  double lambda_co = 6.0;
  double clip_norm = 0.0;  // 0 disables clipping
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // Evaluation.
  std::size_t episodes = 200;
  Split eval_split = Split::test;

  // Run mode.
  bool joint = false;
  bool oracle = false;
  bool baseline = false;
  bool ablation_grid = false;

  // Paths.
  std::string output;
  std::string checkpoint;
  std::string stage1_checkpoint;

  bool operator==(const RunConfig&) const = default;
};

struct ConfigKey {
  std::string name;
  std::string type;  // "int", "uint64", "float", "bool", "string", or "a|b|c" for enums
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

// Assigns one key from its text form; unknown keys and malformed values raise
// ConfigError naming the key.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
// Text form of a key's current value ("" for unset optionals).
std::string get_config_value(const RunConfig& config, const std::string& key);

// Flat text: one `key = value` per line, `#` starts a comment.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
std::string format_config(const RunConfig& config);

nlohmann::json config_to_json(const RunConfig& config);
RunConfig config_from_json(const nlohmann::json& json);

// Copy with the run-mode and path keys reset; this is what checkpoints and
// report fingerprints record.
RunConfig model_settings(RunConfig config);

// Cross-key consistency checks (divisibility, ranges).
void validate_config(const RunConfig& config);

// Resolves a config path: absolute or existing relative paths are used as
// given; otherwise the path is looked up under $MMFORMER_CONFIG_DIR.
std::filesystem::path resolve_config_path(const std::filesystem::path& path);

}  // namespace mmformer
