#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmformer/config.hpp"
#include "mmformer/errors.hpp"
#include "mmformer/evaluation.hpp"
#include "mmformer/rng.hpp"
#include "mmformer/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmformer;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

const std::vector<std::string> kModeKeys = {"joint", "oracle", "baseline", "ablation_grid"};

struct Invocation {
  std::string command;
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> modes;
};

std::string flag_names(const std::string& key) {
  std::string names = "--" + key;
  if (key.find('_') != std::string::npos) {
    std::string dashed = key;
    for (auto& c : dashed) {
      if (c == '_') c = '-';
    }
    names += ",--" + dashed;
  }
  if (key == "k_shot") names += ",--k";
  return names;
}

// One flag per config key; run-mode keys are switches, the rest take a value.
void add_config_options(CLI::App& cmd, Invocation& inv) {
  cmd.add_option("--config", inv.config_path, "config file (key = value lines)");
  for (const auto& key : config_keys()) {
    const bool mode = std::find(kModeKeys.begin(), kModeKeys.end(), key.name) != kModeKeys.end();
    if (mode) {
      cmd.add_flag(flag_names(key.name), inv.modes[key.name], key.help);
    } else {
      cmd.add_option(flag_names(key.name), inv.values[key.name], key.help)->type_name(key.type);
    }
  }
}

RunConfig resolve(const CLI::App& cmd, const Invocation& inv) {
  RunConfig config;
  if (!inv.config_path.empty()) config = load_config(resolve_config_path(inv.config_path));
  for (const auto& key : config_keys()) {
    if (cmd.count("--" + key.name) == 0) continue;
    if (inv.modes.count(key.name) != 0) {
      set_config_value(config, key.name, inv.modes.at(key.name) ? "true" : "false");
    } else {
      set_config_value(config, key.name, inv.values.at(key.name));
    }
  }
  validate_config(config);
  return config;
}

void require(const std::string& value, const std::string& key, const std::string& command) {
  if (value.empty()) throw ConfigError(command + " needs the '" + key + "' key", key);
}

std::string git_blob_sha1(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string() + " for hashing");
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &length) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha-1 digest failed for " + path.string());
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < length; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

struct RunRecord {
  std::vector<fs::path> outputs;
  json checkpoints = json::object();
  std::vector<std::string> warnings;
};

void append_manifest(const std::string& command_line, const std::string& command, const RunConfig& config,
                     const RunRecord& record) {
  json outputs = json::array();
  for (const auto& p : record.outputs) outputs.push_back({{"path", p.string()}, {"sha1", git_blob_sha1(p)}});
  const json entry = {{"command", command},
                      {"command_line", command_line},
                      {"config", config_to_json(config)},
                      {"seeds",
                       {{"seed", config.seed},
                        {"encoder", derive_seed(config.seed, "encoder")},
                        {"pos", derive_seed(config.seed, "pos")},
                        {"mm", derive_seed(config.seed, "mm")}}},
                      {"checkpoints", record.checkpoints},
                      {"outputs", outputs},
                      {"warnings", record.warnings}};
  ensure_directory(config.output);
  const fs::path path = fs::path(config.output) / "run_manifest.jsonl";
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << entry.dump() << "\n";
}

void warn(RunRecord& record, const std::string& message) {
  std::cerr << "warning: " << message << "\n";
  record.warnings.push_back(message);
}

void finish_training(const Model& model, Stage stage, const TrainResult& result, const RunConfig& config,
                     RunRecord& record) {
  for (const auto& w : result.warnings) warn(record, w);
  ensure_directory(config.output);
  const fs::path checkpoint = config.checkpoint;
  if (checkpoint.has_parent_path()) ensure_directory(checkpoint.parent_path());
  save_checkpoint(checkpoint, model, stage, result.optimizer);
  const fs::path log = fs::path(config.output) / "train_log.csv";
  write_text(log, format_log(result.log));
  record.outputs = {checkpoint, log};
  record.checkpoints["written"] = checkpoint.string();
  std::cout << "stage " << to_string(stage) << ": " << result.log.size() << " iterations";
  if (!result.log.empty()) std::cout << ", final loss " << result.log.back().loss;
  std::cout << "\ncheckpoint " << checkpoint.string() << "\n";
}

RunRecord train_pos(const RunConfig& config) {
  require(config.output, "output", "train-pos");
  require(config.checkpoint, "checkpoint", "train-pos");
  RunRecord record;
  Model model(config, false);
  const auto result = train_stage1(model, config);
  finish_training(model, Stage::pos, result, config, record);
  return record;
}

RunRecord train_mm(RunConfig& config) {
  require(config.output, "output", "train-mm");
  require(config.checkpoint, "checkpoint", "train-mm");
  if (!config.joint) require(config.stage1_checkpoint, "stage1_checkpoint", "train-mm");
  RunRecord record;
  std::optional<Checkpoint> stage1;
  if (!config.stage1_checkpoint.empty()) {
    stage1 = read_checkpoint(config.stage1_checkpoint);
    config = adopt_architecture(config, stage1->config);
    record.checkpoints["read"] = config.stage1_checkpoint;
  }
  Model model(config, true);
  if (stage1) load_parameters(model.store(), *stage1, {"encoder", "pos"});
  if (config.joint) {
    const auto result = train_joint(model, config);
    finish_training(model, Stage::joint, result, config, record);
  } else {
    const auto result = train_stage2(model, config);
    finish_training(model, Stage::mm, result, config, record);
  }
  return record;
}

RunRecord run_grid(const RunConfig& config) {
  const std::string source = config.stage1_checkpoint.empty() ? config.checkpoint : config.stage1_checkpoint;
  require(source, "stage1_checkpoint", "eval --ablation-grid");
  RunRecord record;
  const auto stage1 = read_checkpoint(source);
  record.checkpoints["read"] = source;
  std::cout << "cell trained miou\n";
  const auto rows = ablation_grid(stage1, config, [&](const GridRow& row) {
    std::cout << describe(row.flags) << " " << (row.trained ? "yes" : "no") << " " << row.miou << std::endl;
    if (!row.trained) warn(record, "ablation " + describe(row.flags) + " leaves nothing learnable; evaluated untrained");
  });
  std::cout << "\n" << format_grid(rows);
  const fs::path dir = config.output;
  write_text(dir / "grid.json", grid_to_json(rows).dump(2) + "\n");
  write_text(dir / "grid.csv", grid_csv(rows));
  write_text(dir / "grid.txt", format_grid(rows));
  record.outputs = {dir / "grid.json", dir / "grid.csv", dir / "grid.txt"};
  return record;
}

RunRecord run_eval(RunConfig& config) {
  require(config.output, "output", "eval");
  ensure_directory(config.output);
  if (config.ablation_grid) return run_grid(config);
  require(config.checkpoint, "checkpoint", "eval");
  RunRecord record;
  const auto checkpoint = read_checkpoint(config.checkpoint);
  record.checkpoints["read"] = config.checkpoint;
  config = adopt_architecture(config, checkpoint.config);
  const bool has_matching = checkpoint.stage != Stage::pos;
  if (has_matching) {
    config.flags = checkpoint.config.flags;
    config.blend = checkpoint.config.blend;
    config.ca_ffn = checkpoint.config.ca_ffn;
    config.ca_layers = checkpoint.config.ca_layers;
  } else {
    config.flags = AblationFlags{false, CrossMode::off, false};
    std::cout << "checkpoint holds no matching module; the model row uses argmax-cosine matching\n";
  }
  Model model(config, true);
  std::vector<std::string> prefixes{"encoder", "pos"};
  if (has_matching) prefixes.push_back("mm");
  load_parameters(model.store(), checkpoint, prefixes);
  const auto report = evaluate(model, config, {config.oracle, config.baseline});
  std::cout << format_report(report);
  if (report.oracle && report.baseline) {
    std::cout << "oracle >= baseline: " << (report.oracle->miou >= report.baseline->miou ? "yes" : "no") << "\n";
  }
  record.outputs = write_report(report, config.output);
  return record;
}

RunRecord gen_data(const RunConfig& config) {
  require(config.output, "output", "gen-data");
  RunRecord record;
  const auto episodes = evaluation_episodes(config);
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "episode_%04zu", i);
    const fs::path dir = fs::path(config.output) / name;
    dump_episode(episodes[i], dir, derive_seed(config.seed, "eval/episode", i), config.eval_split);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    record.outputs.insert(record.outputs.end(), files.begin(), files.end());
  }
  std::cout << "wrote " << episodes.size() << " " << to_string(config.eval_split) << " episodes (k = "
            << config.k_shot << ") to " << config.output << "\n";
  return record;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation by mask proposal and mask matching"};
  app.require_subcommand(1);
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train-pos", "stage 1: train the proposal segmenter"},
      {"train-mm", "stage 2: train the matching module on a stage-1 checkpoint (--joint: end to end)"},
      {"eval", "evaluate a checkpoint on sampled episodes (--oracle, --baseline, --ablation-grid)"},
      {"gen-data", "write the evaluation episodes as image and mask rasters"}};
  std::map<std::string, Invocation> invocations;
  std::map<std::string, CLI::App*> subcommands;
  for (const auto& [name, help] : commands) {
    auto* cmd = app.add_subcommand(name, help);
    invocations[name].command = name;
    add_config_options(*cmd, invocations[name]);
    subcommands[name] = cmd;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  std::string command;
  for (const auto& [name, cmd] : subcommands) {
    if (cmd->parsed()) command = name;
  }
  RunConfig config;
  try {
    config = resolve(*subcommands.at(command), invocations.at(command));
    RunRecord record;
    if (command == "train-pos") record = train_pos(config);
    if (command == "train-mm") record = train_mm(config);
    if (command == "eval") record = run_eval(config);
    if (command == "gen-data") record = gen_data(config);
    append_manifest(command_line, command, config, record);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error";
    if (!e.key().empty()) std::cerr << " [" << e.key() << "]";
    std::cerr << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
