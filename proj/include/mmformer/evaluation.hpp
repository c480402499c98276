#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmformer/config.hpp"
#include "mmformer/episodes.hpp"
#include "mmformer/training.hpp"

namespace mmformer {

// One evaluation episode with its frozen features and proposals computed once,
// so several matchers can be scored on identical inputs.
struct PreparedEpisode {
  std::size_t index = 0;
  EpisodeSample sample;
  FeaturePyramid query;
  std::vector<FeaturePyramid> supports;
  ProposalSet proposals;
};

// Episode i is sample_episode(derive_seed(seed, "eval/episode", i), split, k).
std::vector<EpisodeSample> evaluation_episodes(const RunConfig& config);
std::vector<PreparedEpisode> prepare_episodes(const Model& model, const RunConfig& config);

// Proposal-grid mask binarized at 0.5 and brought to image size by nearest neighbour.
Mask to_image_mask(std::span<const double> grid, std::size_t grid_h, std::size_t grid_w, std::size_t height,
                   std::size_t width);

Mask predict(const MaskMatching& matcher, const PreparedEpisode& episode);
// Best proposal by IoU against the query ground truth.
Mask oracle_predict(const PreparedEpisode& episode);
// Argmax-cosine proposal on raw encoder features.
Mask baseline_predict(const PreparedEpisode& episode);

struct EpisodeScore {
  std::size_t index = 0;
  int class_id = 0;
  double iou = 0.0;
};

// Per-class mean of per-episode foreground IoU, then the unweighted mean over
// the classes that occur.
struct Scores {
  std::vector<EpisodeScore> episodes;
  std::map<int, double> class_iou;
  double miou = 0.0;
};

Scores score(const std::vector<EpisodeScore>& episodes);

using Predictor = std::function<Mask(std::size_t index, const EpisodeSample& sample)>;
Scores evaluate_predictor(const std::vector<EpisodeSample>& episodes, const Predictor& predictor);

struct EvalOptions {
  bool oracle = false;
  bool baseline = false;
};

struct EvalReport {
  std::string label;
  std::size_t episode_count = 0;
  std::size_t k_shot = 1;
  Split split = Split::test;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::string parameter_fingerprint;
  Scores model;
  std::optional<Scores> oracle;
  std::optional<Scores> baseline;
};

EvalReport evaluate(const Model& model, const RunConfig& config, const EvalOptions& options);
EvalReport evaluate(const MaskMatching& matcher, const std::vector<PreparedEpisode>& episodes,
                    const RunConfig& config, const EvalOptions& options);

std::string format_report(const EvalReport& report);
nlohmann::json report_to_json(const EvalReport& report);
std::string episodes_csv(const EvalReport& report);
// Writes report.txt, report.json and episodes.csv; returns the written paths.
std::vector<std::filesystem::path> write_report(const EvalReport& report, const std::filesystem::path& dir);

struct GridRow {
  AblationFlags flags;
  double miou = 0.0;
  bool trained = false;
  std::size_t iterations = 0;
};

// The eight SA x CA x LM combinations in binary order (SA slowest), then
// non-parametric CA alone.
std::vector<AblationFlags> ablation_rows();

// Trains a matching module per row on top of the stage-1 checkpoint and
// evaluates it on one shared episode set.
std::vector<GridRow> ablation_grid(const Checkpoint& stage1, const RunConfig& config,
                                   const std::function<void(const GridRow&)>& on_row = {});

nlohmann::json grid_to_json(const std::vector<GridRow>& rows);
std::vector<GridRow> grid_from_json(const nlohmann::json& json);
std::string format_grid(const std::vector<GridRow>& rows);
std::string grid_csv(const std::vector<GridRow>& rows);

std::string hex64(std::uint64_t value);

}  // namespace mmformer
