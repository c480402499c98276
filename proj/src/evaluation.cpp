#include "mmformer/evaluation.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mmformer/errors.hpp"
#include "mmformer/rng.hpp"

namespace mmformer {

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SceneOptions scene_options(const RunConfig& config) { return {config.image_size, config.fold}; }

std::string fixed(double value, int digits = 4) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << value;
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json scores_to_json(const Scores& scores) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [id, value] : scores.class_iou) classes[shape_classes()[static_cast<std::size_t>(id)].name] = value;
  return {{"miou", scores.miou}, {"class_iou", classes}};
}

}  // namespace

std::vector<EpisodeSample> evaluation_episodes(const RunConfig& config) {
  std::vector<EpisodeSample> out;
  out.reserve(config.episodes);
  for (std::size_t i = 0; i < config.episodes; ++i) {
    out.push_back(sample_episode(derive_seed(config.seed, "eval/episode", i), config.eval_split, config.k_shot,
                                 scene_options(config)));
  }
  return out;
}

std::vector<PreparedEpisode> prepare_episodes(const Model& model, const RunConfig& config) {
  auto samples = evaluation_episodes(config);
  std::vector<PreparedEpisode> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    PreparedEpisode p;
    p.index = i;
    p.sample = std::move(samples[i]);
    p.query = model.encoder().encode(p.sample.query);
    for (const auto& s : p.sample.supports) p.supports.push_back(model.encoder().encode(s.image));
    p.proposals = model.pos().propose(p.query);
    out.push_back(std::move(p));
  }
  return out;
}

Mask to_image_mask(std::span<const double> grid, std::size_t grid_h, std::size_t grid_w, std::size_t height,
                   std::size_t width) {
  if (grid.size() != grid_h * grid_w) throw DimensionError("mask grid size does not match its extents");
  Mask m(grid_h, grid_w);
  for (std::size_t i = 0; i < grid.size(); ++i) m.pixels[i] = grid[i] >= 0.5 ? 1 : 0;
  return resize_nearest(m, height, width);
}

Mask predict(const MaskMatching& matcher, const PreparedEpisode& episode) {
  std::vector<SupportFeatures> supports;
  for (std::size_t j = 0; j < episode.supports.size(); ++j) {
    supports.push_back({&episode.supports[j], &episode.sample.supports[j].mask});
  }
  const auto result = matcher.match(supports, episode.query, episode.proposals);
  const auto& gt = episode.sample.query_gt;
  return to_image_mask(result.blended.data(), episode.proposals.height, episode.proposals.width, gt.height, gt.width);
}

Mask oracle_predict(const PreparedEpisode& episode) {
  const auto& gt = episode.sample.query_gt;
  Mask best;
  double best_iou = -1.0;
  for (std::size_t n = 0; n < episode.proposals.size(); ++n) {
    auto m = resize_nearest(episode.proposals.binarized(n), gt.height, gt.width);
    const double v = iou(m, gt);
    if (v > best_iou) {
      best_iou = v;
      best = std::move(m);
    }
  }
  return best;
}

Mask baseline_predict(const PreparedEpisode& episode) {
  static const MaskMatching heuristic = [] {
    ParamStore scratch;
    Rng rng(0);
    MmConfig config;
    config.flags = AblationFlags{false, CrossMode::off, false};
    return MaskMatching(scratch, "baseline", config, rng);
  }();
  return predict(heuristic, episode);
}

Scores score(const std::vector<EpisodeScore>& episodes) {
  Scores out;
  out.episodes = episodes;
  std::map<int, std::pair<double, std::size_t>> sums;
  for (const auto& e : episodes) {
    auto& s = sums[e.class_id];
    s.first += e.iou;
    ++s.second;
  }
  for (const auto& [id, s] : sums) out.class_iou[id] = s.first / static_cast<double>(s.second);
  if (!out.class_iou.empty()) {
    double total = 0.0;
    for (const auto& [id, v] : out.class_iou) total += v;
    out.miou = total / static_cast<double>(out.class_iou.size());
  }
  return out;
}

Scores evaluate_predictor(const std::vector<EpisodeSample>& episodes, const Predictor& predictor) {
  std::vector<EpisodeScore> scores;
  scores.reserve(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    const auto mask = predictor(i, e);
    if (mask.height != e.query_gt.height || mask.width != e.query_gt.width) {
      throw DimensionError("prediction does not match the query size");
    }
    scores.push_back({i, e.class_id, iou(mask, e.query_gt)});
  }
  return score(scores);
}

EvalReport evaluate(const MaskMatching& matcher, const std::vector<PreparedEpisode>& episodes,
                    const RunConfig& config, const EvalOptions& options) {
  std::vector<EpisodeSample> samples;
  samples.reserve(episodes.size());
  for (const auto& e : episodes) samples.push_back(e.sample);
  EvalReport report;
  report.label = describe(matcher.config().flags);
  report.episode_count = episodes.size();
  report.k_shot = config.k_shot;
  report.split = config.eval_split;
  report.seed = config.seed;
  report.config_fingerprint = hex64(fnv1a(format_config(model_settings(config))));
  report.model = evaluate_predictor(samples, [&](std::size_t i, const EpisodeSample&) {
    return predict(matcher, episodes[i]);
  });
  if (options.oracle) {
    report.oracle = evaluate_predictor(samples, [&](std::size_t i, const EpisodeSample&) {
      return oracle_predict(episodes[i]);
    });
  }
  if (options.baseline) {
    report.baseline = evaluate_predictor(samples, [&](std::size_t i, const EpisodeSample&) {
      return baseline_predict(episodes[i]);
    });
  }
  return report;
}

EvalReport evaluate(const Model& model, const RunConfig& config, const EvalOptions& options) {
  const auto episodes = prepare_episodes(model, config);
  auto report = evaluate(model.matching(), episodes, config, options);
  report.parameter_fingerprint = hex64(model.store().fingerprint());
  return report;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  out << "model " << report.label << "\n";
  out << "split " << to_string(report.split) << "  episodes " << report.episode_count << "  k " << report.k_shot
      << "  seed " << report.seed << "\n";
  out << "miou: per-class mean of per-episode foreground IoU, averaged over classes\n";
  out << "config " << report.config_fingerprint;
  if (!report.parameter_fingerprint.empty()) out << "  parameters " << report.parameter_fingerprint;
  out << "\n\n";
  out << std::left << std::setw(12) << "class" << std::setw(10) << "model";
  if (report.oracle) out << std::setw(10) << "oracle";
  if (report.baseline) out << std::setw(10) << "baseline";
  out << "\n";
  for (const auto& [id, v] : report.model.class_iou) {
    out << std::setw(12) << shape_classes()[static_cast<std::size_t>(id)].name << std::setw(10) << fixed(v);
    if (report.oracle) out << std::setw(10) << fixed(report.oracle->class_iou.at(id));
    if (report.baseline) out << std::setw(10) << fixed(report.baseline->class_iou.at(id));
    out << "\n";
  }
  out << std::setw(12) << "miou" << std::setw(10) << fixed(report.model.miou);
  if (report.oracle) out << std::setw(10) << fixed(report.oracle->miou);
  if (report.baseline) out << std::setw(10) << fixed(report.baseline->miou);
  out << "\n";
  return out.str();
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j = {{"model", report.label},
                      {"split", to_string(report.split)},
                      {"episodes", report.episode_count},
                      {"k_shot", report.k_shot},
                      {"seed", report.seed},
                      {"miou_convention", "per-class mean of per-episode IoU, averaged over classes"},
                      {"config_fingerprint", report.config_fingerprint},
                      {"parameter_fingerprint", report.parameter_fingerprint},
                      {"result", scores_to_json(report.model)}};
  if (report.oracle) j["oracle"] = scores_to_json(*report.oracle);
  if (report.baseline) j["baseline"] = scores_to_json(*report.baseline);
  return j;
}

std::string episodes_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "episode,class,iou";
  if (report.oracle) out << ",oracle_iou";
  if (report.baseline) out << ",baseline_iou";
  out << "\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < report.model.episodes.size(); ++i) {
    const auto& e = report.model.episodes[i];
    out << e.index << "," << shape_classes()[static_cast<std::size_t>(e.class_id)].name << "," << e.iou;
    if (report.oracle) out << "," << report.oracle->episodes[i].iou;
    if (report.baseline) out << "," << report.baseline->episodes[i].iou;
    out << "\n";
  }
  return out.str();
}

std::vector<std::filesystem::path> write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::vector<std::filesystem::path> paths = {dir / "report.txt", dir / "report.json", dir / "episodes.csv"};
  write_text(paths[0], format_report(report));
  write_text(paths[1], report_to_json(report).dump(2) + "\n");
  write_text(paths[2], episodes_csv(report));
  return paths;
}

std::vector<AblationFlags> ablation_rows() {
  std::vector<AblationFlags> rows;
  for (int sa = 0; sa < 2; ++sa) {
    for (int ca = 0; ca < 2; ++ca) {
      for (int lm = 0; lm < 2; ++lm) {
        rows.push_back({sa == 1, ca == 1 ? CrossMode::learned : CrossMode::off, lm == 1});
      }
    }
  }
  rows.push_back({false, CrossMode::nonparametric, false});
  return rows;
}

std::vector<GridRow> ablation_grid(const Checkpoint& stage1, const RunConfig& config,
                                   const std::function<void(const GridRow&)>& on_row) {
  const auto base = adopt_architecture(config, stage1.config);
  std::vector<PreparedEpisode> episodes;
  std::vector<GridRow> rows;
  for (const auto& flags : ablation_rows()) {
    auto cell = base;
    cell.flags = flags;
    Model model(cell, true);
    load_parameters(model.store(), stage1, {"encoder", "pos"});
    if (episodes.empty()) episodes = prepare_episodes(model, cell);
    const auto trained = train_stage2(model, cell);
    GridRow row;
    row.flags = flags;
    row.trained = trained.trained;
    row.iterations = trained.log.size();
    row.miou = evaluate(model.matching(), episodes, cell, {}).model.miou;
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json grid_to_json(const std::vector<GridRow>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"sa", r.flags.self_alignment},
                   {"ca", to_string(r.flags.cross)},
                   {"lm", r.flags.learnable_matching},
                   {"label", describe(r.flags)},
                   {"miou", r.miou},
                   {"trained", r.trained},
                   {"iterations", r.iterations}});
  }
  return out;
}

std::vector<GridRow> grid_from_json(const nlohmann::json& json) {
  std::vector<GridRow> rows;
  try {
    for (const auto& r : json) {
      GridRow row;
      row.flags.self_alignment = r.at("sa").get<bool>();
      row.flags.cross = parse_cross_mode(r.at("ca").get<std::string>());
      row.flags.learnable_matching = r.at("lm").get<bool>();
      row.miou = r.at("miou").get<double>();
      row.trained = r.at("trained").get<bool>();
      row.iterations = r.at("iterations").get<std::size_t>();
      rows.push_back(row);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed ablation grid: ") + e.what());
  }
  return rows;
}

std::string format_grid(const std::vector<GridRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(5) << "SA" << std::setw(5) << "CA" << std::setw(5) << "LM" << std::setw(10)
      << "miou" << "trained\n";
  for (const auto& r : rows) {
    out << std::setw(5) << (r.flags.self_alignment ? "on" : "off") << std::setw(5)
        << to_string(r.flags.cross) << std::setw(5) << (r.flags.learnable_matching ? "on" : "off")
        << std::setw(10) << fixed(r.miou) << (r.trained ? "yes" : "no") << "\n";
  }
  return out.str();
}

std::string grid_csv(const std::vector<GridRow>& rows) {
  std::ostringstream out;
  out << "sa,ca,lm,miou,trained,iterations\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << (r.flags.self_alignment ? "on" : "off") << "," << to_string(r.flags.cross) << ","
        << (r.flags.learnable_matching ? "on" : "off") << "," << r.miou << "," << (r.trained ? 1 : 0) << ","
        << r.iterations << "\n";
  }
  return out.str();
}

}  // namespace mmformer
