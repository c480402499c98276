#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmformer/config.hpp"
#include "mmformer/encoder.hpp"
#include "mmformer/mm.hpp"
#include "mmformer/nn.hpp"
#include "mmformer/pos.hpp"

namespace mmformer {

enum class Stage { pos, mm, joint };
std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

constexpr std::size_t kStage1Iterations = 2000;
constexpr std::size_t kStage1BatchSize = 8;
constexpr std::size_t kStage2Iterations = 1000;
constexpr std::size_t kStage2BatchSize = 4;

std::size_t default_iterations(Stage stage);
std::size_t default_batch_size(Stage stage);
std::size_t resolved_iterations(const RunConfig& config, Stage stage);
std::size_t resolved_batch_size(const RunConfig& config, Stage stage);

// base * (1 - step / total)^power; 0 when total is 0.
double poly_lr(std::size_t step, std::size_t total, double base, double power = 0.9);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-2;
};

struct Moments {
  std::vector<double> first;
  std::vector<double> second;
};

// AdamW with decoupled weight decay (applied before the moment update) and
// bias-corrected moments. Only trainable parameters get moment buffers.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig config) : config_(config) {}

  void step(ParamStore& store, double lr);

  std::size_t steps() const { return steps_; }
  const AdamWConfig& config() const { return config_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::size_t steps, std::map<std::string, Moments> moments);

 private:
  AdamWConfig config_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

// Rescales all trainable gradients so their global L2 norm is at most
// `max_norm`. Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);
double grad_norm(const ParamStore& store);

// Encoder ("encoder.*", frozen), segmenter ("pos.*") and, when requested, the
// matching module ("mm.*") in one parameter store.
class Model {
 public:
  Model(const RunConfig& config, bool with_matching);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const RunConfig& config() const { return config_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const Encoder& encoder() const { return encoder_; }
  const Pos& pos() const { return pos_; }
  bool has_matching() const { return mm_.has_value(); }
  const MaskMatching& matching() const;

 private:
  RunConfig config_;
  ParamStore store_;
  Encoder encoder_;
  Pos pos_;
  std::optional<MaskMatching> mm_;
};

MmConfig matching_config(const RunConfig& config);
PosConfig segmenter_config(const RunConfig& config);

// Versioned container: "MMFORMER", u32 version, u64 header length, JSON header
// (config, stage, seeds, optimizer step, tensor directory), raw little-endian doubles.
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  Stage stage = Stage::pos;
  std::size_t optimizer_step = 0;
  std::map<std::string, Tensor> parameters;
  std::map<std::string, Moments> moments;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, Stage stage, const AdamW& optimizer);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies checkpoint values into the store for every parameter under one of
// `prefixes`. Missing names or shape mismatches raise ConfigError.
void load_parameters(ParamStore& store, const Checkpoint& checkpoint, const std::vector<std::string>& prefixes);

// Architecture keys (widths, heads, proposal count, image size, fold) follow
// the checkpoint; everything else comes from `config`.
RunConfig adopt_architecture(const RunConfig& config, const RunConfig& from_checkpoint);

// Model rebuilt from a checkpoint's config with all its parameters loaded.
std::unique_ptr<Model> load_model(const Checkpoint& checkpoint);

struct LogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double pos_loss = 0.0;
  double dice_term = 0.0;
  double contrastive_term = 0.0;
};

struct TrainResult {
  std::vector<LogEntry> log;
  AdamW optimizer;
  std::vector<std::string> warnings;
  bool trained = false;
};

// Stage 1: segmenter on training scenes with the matched dice loss; encoder frozen.
TrainResult train_stage1(Model& model, const RunConfig& config);
// Stage 2: matching module on training episodes; encoder and segmenter frozen.
TrainResult train_stage2(Model& model, const RunConfig& config);
// End-to-end: segmenter and matching module together on episodes.
TrainResult train_joint(Model& model, const RunConfig& config);

struct EpisodeLoss {
  Tensor total;
  double pos_loss = 0.0;
  double dice_term = 0.0;
  double contrastive_term = 0.0;
};

// Loss of one episode: lambda_dice * dice + lambda_co * L_co, plus the
// segmenter loss on the query's instance masks when `with_pos_loss`.
EpisodeLoss episode_loss(const Model& model, const EpisodeSample& episode, const RunConfig& config,
                         bool with_pos_loss);

// Mean losses over fixed probe samples (no augmentation), for smoke checks.
double probe_pos_loss(const Model& model, std::size_t count, std::uint64_t seed);
double probe_mm_loss(const Model& model, const RunConfig& config, std::size_t count, std::uint64_t seed);

// CSV of the per-iteration log.
std::string format_log(const std::vector<LogEntry>& log);

}  // namespace mmformer
