#include "mmformer/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "mmformer/errors.hpp"

namespace mmformer {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + value + "'", key);
  }
  return out;
}

int parse_int(const std::string& key, const std::string& value) {
  int out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) {
    throw ConfigError("'" + key + "' expects an integer, got '" + value + "'", key);
  }
  return out;
}

double parse_float(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size() || !std::isfinite(out)) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + value + "'", key);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1" || value == "yes") return true;
  if (value == "off" || value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("'" + key + "' expects on/off, got '" + value + "'", key);
}

std::string format_float(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string on_off(bool v) { return v ? "on" : "off"; }

struct Accessor {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Accessor size_key(std::string name, T RunConfig::*field, std::string help) {
  const std::string n = name;
  return {{name, "int", std::move(help)},
          [n, field](RunConfig& c, const std::string& v) { c.*field = static_cast<T>(parse_uint(n, v)); },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

Accessor float_key(std::string name, double RunConfig::*field, std::string help) {
  const std::string n = name;
  return {{name, "float", std::move(help)},
          [n, field](RunConfig& c, const std::string& v) { c.*field = parse_float(n, v); },
          [field](const RunConfig& c) { return format_float(c.*field); }};
}

Accessor bool_key(std::string name, bool RunConfig::*field, std::string help) {
  const std::string n = name;
  return {{name, "bool", std::move(help)},
          [n, field](RunConfig& c, const std::string& v) { c.*field = parse_bool(n, v); },
          [field](const RunConfig& c) { return on_off(c.*field); }};
}

Accessor string_key(std::string name, std::string RunConfig::*field, std::string help) {
  return {{name, "string", std::move(help)}, [field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

Accessor optional_key(std::string name, std::optional<std::size_t> RunConfig::*field, std::string help) {
  const std::string n = name;
  return {{name, "int", std::move(help)},
          [n, field](RunConfig& c, const std::string& v) {
            if (v.empty() || v == "auto") {
              c.*field = std::nullopt;
            } else {
              c.*field = static_cast<std::size_t>(parse_uint(n, v));
            }
          },
          [field](const RunConfig& c) { return (c.*field) ? std::to_string(*(c.*field)) : std::string("auto"); }};
}

const std::vector<Accessor>& accessors() {
  static const std::vector<Accessor> table = [] {
    std::vector<Accessor> t;
    t.push_back({{"seed", "uint64", "master seed for data, initialisation and augmentation"},
                 [](RunConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    t.push_back(size_key("d_model", &RunConfig::d_model, "feature and embedding width d"));
    t.push_back(size_key("heads", &RunConfig::heads, "attention heads"));
    t.push_back(size_key("d_ffn", &RunConfig::d_ffn, "hidden width of the segmenter feed-forward blocks"));
    t.push_back(size_key("num_proposals", &RunConfig::num_proposals, "number of mask proposals N"));
    t.push_back(bool_key("positional_encoding", &RunConfig::positional_encoding,
                         "add a sine position code to the segmenter memory"));
    t.push_back(size_key("ca_ffn", &RunConfig::ca_ffn, "hidden width of the cross-alignment feed-forward blocks"));
    t.push_back(size_key("ca_layers", &RunConfig::ca_layers, "cross-alignment layer count L"));
    t.push_back({{"sa", "bool", "self-alignment block"},
                 [](RunConfig& c, const std::string& v) { c.flags.self_alignment = parse_bool("sa", v); },
                 [](const RunConfig& c) { return on_off(c.flags.self_alignment); }});
    t.push_back({{"ca", "on|off|np", "cross-alignment block (np: non-parametric)"},
                 [](RunConfig& c, const std::string& v) { c.flags.cross = parse_cross_mode(v); },
                 [](const RunConfig& c) { return to_string(c.flags.cross); }});
    t.push_back({{"lm", "bool", "learnable matching block"},
                 [](RunConfig& c, const std::string& v) { c.flags.learnable_matching = parse_bool("lm", v); },
                 [](const RunConfig& c) { return on_off(c.flags.learnable_matching); }});
    t.push_back({{"blend", "softmax|linear", "normalisation of the blend weights"},
                 [](RunConfig& c, const std::string& v) { c.blend = parse_blend_mode(v); },
                 [](const RunConfig& c) { return to_string(c.blend); }});
    t.push_back(size_key("image_size", &RunConfig::image_size, "square image side, a multiple of 32"));
    t.push_back({{"fold", "int", "class fold 0-3; fold f tests classes 2f and 2f+1"},
                 [](RunConfig& c, const std::string& v) { c.fold = parse_int("fold", v); },
                 [](const RunConfig& c) { return std::to_string(c.fold); }});
    t.push_back(size_key("k_shot", &RunConfig::k_shot, "supports per episode"));
    t.push_back(bool_key("augment", &RunConfig::augment, "random flip and crop during training"));
    t.push_back(optional_key("iterations", &RunConfig::iterations, "optimisation steps (auto: stage default)"));
    t.push_back(optional_key("batch_size", &RunConfig::batch_size, "samples per step (auto: stage default)"));
    t.push_back(float_key("base_lr", &RunConfig::base_lr, "initial learning rate"));
    t.push_back(float_key("weight_decay", &RunConfig::weight_decay, "decoupled weight decay"));
    t.push_back(float_key("poly_power", &RunConfig::poly_power, "exponent of the poly schedule"));
    t.push_back(float_key("lambda_dice", &RunConfig::lambda_dice, "weight of the matched-mask dice loss"));
    t.push_back(float_key("lambda_co", &RunConfig::lambda_co, "weight of the contrastive loss"));
    t.push_back(float_key("clip_norm", &RunConfig::clip_norm, "global gradient-norm clip (0: off)"));
    t.push_back(float_key("adam_beta1", &RunConfig::adam_beta1, "AdamW first-moment decay"));
    t.push_back(float_key("adam_beta2", &RunConfig::adam_beta2, "AdamW second-moment decay"));
    t.push_back(float_key("adam_eps", &RunConfig::adam_eps, "AdamW denominator epsilon"));
    t.push_back(size_key("episodes", &RunConfig::episodes, "evaluation episodes"));
    t.push_back({{"eval_split", "train|test", "split sampled for evaluation"},
                 [](RunConfig& c, const std::string& v) { c.eval_split = parse_split(v); },
                 [](const RunConfig& c) { return to_string(c.eval_split); }});
    t.push_back(bool_key("joint", &RunConfig::joint, "train-mm: train segmenter and matching end to end"));
    t.push_back(bool_key("oracle", &RunConfig::oracle, "eval: also score the best proposal per episode"));
    t.push_back(bool_key("baseline", &RunConfig::baseline, "eval: also score argmax-cosine matching"));
    t.push_back(bool_key("ablation_grid", &RunConfig::ablation_grid,
                         "eval: train and score every SA x CA x LM cell on a stage-1 checkpoint"));
    t.push_back(string_key("output", &RunConfig::output, "run directory for logs, reports and the manifest"));
    t.push_back(string_key("checkpoint", &RunConfig::checkpoint, "checkpoint written by training, read by eval"));
    t.push_back(string_key("stage1_checkpoint", &RunConfig::stage1_checkpoint, "trained segmenter checkpoint"));
    return t;
  }();
  return table;
}

const Accessor& find(const std::string& key) {
  for (const auto& a : accessors()) {
    if (a.key.name == key) return a;
  }
  throw ConfigError("unknown config key '" + key + "'", key);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& a : accessors()) out.push_back(a.key);
    return out;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  find(key).set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return find(key).get(config); }

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'",
                        trim(line));
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("key '" + key + "' set twice", key);
    set_config_value(base, key, value);
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path.string());
  std::ostringstream text;
  text << f.rdbuf();
  return parse_config(text.str(), std::move(base));
}

std::string format_config(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& a : accessors()) {
    const auto value = a.get(config);
    os << a.key.name << " = " << value << '\n';
  }
  return os.str();
}

nlohmann::json config_to_json(const RunConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& a : accessors()) {
    const auto value = a.get(config);
    const auto& type = a.key.type;
    if (type == "uint64") {
      j[a.key.name] = std::stoull(value);
    } else if (type == "int" && value != "auto") {
      j[a.key.name] = std::stoll(value);
    } else if (type == "float") {
      j[a.key.name] = std::stod(value);
    } else if (type == "bool") {
      j[a.key.name] = value == "on";
    } else {
      j[a.key.name] = value;
    }
  }
  return j;
}

RunConfig config_from_json(const nlohmann::json& json) {
  if (!json.is_object()) throw ConfigError("config snapshot is not an object");
  RunConfig c;
  for (const auto& [key, value] : json.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_boolean()) {
      text = value.get<bool>() ? "on" : "off";
    } else if (value.is_number_float()) {
      text = format_float(value.get<double>());
    } else if (value.is_number()) {
      text = value.dump();
    } else {
      throw ConfigError("config snapshot key '" + key + "' has an unsupported type", key);
    }
    set_config_value(c, key, text);
  }
  return c;
}

RunConfig model_settings(RunConfig config) {
  const RunConfig defaults;
  config.joint = defaults.joint;
  config.oracle = defaults.oracle;
  config.baseline = defaults.baseline;
  config.ablation_grid = defaults.ablation_grid;
  config.output.clear();
  config.checkpoint.clear();
  config.stage1_checkpoint.clear();
  return config;
}

void validate_config(const RunConfig& c) {
  auto require = [](bool ok, const std::string& key, const std::string& message) {
    if (!ok) throw ConfigError("'" + key + "': " + message, key);
  };
  require(c.d_model > 0, "d_model", "must be positive");
  require(c.heads > 0 && c.d_model % c.heads == 0, "heads", "must divide d_model");
  require(!c.positional_encoding || c.d_model % 4 == 0, "positional_encoding", "needs d_model divisible by 4");
  require(c.d_ffn > 0, "d_ffn", "must be positive");
  require(c.ca_ffn > 0, "ca_ffn", "must be positive");
  require(c.ca_layers > 0, "ca_layers", "must be positive");
  require(c.num_proposals >= 2, "num_proposals", "must be at least 2");
  require(c.image_size > 0 && c.image_size % 32 == 0, "image_size", "must be a positive multiple of 32");
  require(c.fold >= 0 && c.fold < kNumFolds, "fold", "must be in [0, 3]");
  require(c.k_shot >= 1, "k_shot", "must be at least 1");
  require(!c.batch_size || *c.batch_size >= 1, "batch_size", "must be at least 1");
  require(c.base_lr >= 0.0, "base_lr", "must be non-negative");
  require(c.weight_decay >= 0.0, "weight_decay", "must be non-negative");
  require(c.poly_power > 0.0, "poly_power", "must be positive");
  require(c.lambda_dice >= 0.0, "lambda_dice", "must be non-negative");
  require(c.lambda_co >= 0.0, "lambda_co", "must be non-negative");
  require(c.clip_norm >= 0.0, "clip_norm", "must be non-negative");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0, "adam_beta1", "must be in [0, 1)");
  require(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0, "adam_beta2", "must be in [0, 1)");
  require(c.adam_eps > 0.0, "adam_eps", "must be positive");
}

std::filesystem::path resolve_config_path(const std::filesystem::path& path) {
  if (path.is_absolute() || std::filesystem::exists(path)) return path;
  if (const char* dir = std::getenv("MMFORMER_CONFIG_DIR"); dir && *dir) {
    const auto candidate = std::filesystem::path(dir) / path;
    if (std::filesystem::exists(candidate)) return candidate;
  }
  return path;
}

}  // namespace mmformer
