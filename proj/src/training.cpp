#include "mmformer/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mmformer/errors.hpp"
#include "mmformer/ops.hpp"

namespace mmformer {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::pos: return "pos";
    case Stage::mm: return "mm";
    case Stage::joint: return "joint";
  }
  return "pos";
}

Stage parse_stage(const std::string& text) {
  if (text == "pos") return Stage::pos;
  if (text == "mm") return Stage::mm;
  if (text == "joint") return Stage::joint;
  throw ConfigError("stage must be pos, mm or joint, got '" + text + "'", "stage");
}

std::size_t default_iterations(Stage stage) {
  switch (stage) {
    case Stage::pos: return kStage1Iterations;
    case Stage::mm: return kStage2Iterations;
    case Stage::joint: return kStage1Iterations + kStage2Iterations;
  }
  return 0;
}

std::size_t default_batch_size(Stage stage) { return stage == Stage::pos ? kStage1BatchSize : kStage2BatchSize; }

std::size_t resolved_iterations(const RunConfig& config, Stage stage) {
  return config.iterations.value_or(default_iterations(stage));
}

std::size_t resolved_batch_size(const RunConfig& config, Stage stage) {
  return config.batch_size.value_or(default_batch_size(stage));
}

double poly_lr(std::size_t step, std::size_t total, double base, double power) {
  if (total == 0) return 0.0;
  if (step > total) throw ContractError("schedule step beyond the total");
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

void AdamW::step(ParamStore& store, double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& name : store.trainable_names()) {
    auto& p = store.at(name);
    const auto g = p.grad();
    auto& mom = moments_[name];
    if (mom.first.empty()) {
      mom.first.assign(g.size(), 0.0);
      mom.second.assign(g.size(), 0.0);
    }
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr * config_.weight_decay * w[i];
      mom.first[i] = config_.beta1 * mom.first[i] + (1.0 - config_.beta1) * g[i];
      mom.second[i] = config_.beta2 * mom.second[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = mom.first[i] / c1;
      const double v_hat = mom.second[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void AdamW::restore(std::size_t steps, std::map<std::string, Moments> moments) {
  steps_ = steps;
  moments_ = std::move(moments);
}

double grad_norm(const ParamStore& store) {
  double total = 0.0;
  for (const auto& name : store.trainable_names()) {
    for (double g : store.at(name).grad()) total += g * g;
  }
  return std::sqrt(total);
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  const double norm = grad_norm(store);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& name : store.trainable_names()) {
      for (auto& g : store.at(name).mutable_grad()) g *= factor;
    }
  }
  return norm;
}

PosConfig segmenter_config(const RunConfig& c) {
  return PosConfig{c.d_model, c.heads, c.d_ffn, c.num_proposals, c.positional_encoding};
}

MmConfig matching_config(const RunConfig& c) {
  MmConfig m;
  m.d_model = c.d_model;
  m.heads = c.heads;
  m.d_ffn = c.ca_ffn;
  m.ca_layers = c.ca_layers;
  m.num_proposals = c.num_proposals;
  m.flags = c.flags;
  m.blend = c.blend;
  return m;
}

Model::Model(const RunConfig& config, bool with_matching) : config_(config) {
  validate_config(config);
  encoder_ = Encoder(store_, "encoder", derive_seed(config.seed, "encoder"), config.d_model);
  Rng pos_rng(derive_seed(config.seed, "pos"));
  pos_ = Pos(store_, "pos", segmenter_config(config), pos_rng);
  if (with_matching) {
    Rng mm_rng(derive_seed(config.seed, "mm"));
    mm_.emplace(store_, "mm", matching_config(config), mm_rng);
  }
}

const MaskMatching& Model::matching() const {
  if (!mm_) throw ContractError("model was built without the matching module");
  return *mm_;
}

namespace {

constexpr char kMagic[8] = {'M', 'M', 'F', 'O', 'R', 'M', 'E', 'R'};

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw IoError("truncated checkpoint " + path.string());
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, Stage stage, const AdamW& optimizer) {
  nlohmann::json header;
  header["config"] = config_to_json(model_settings(model.config()));
  header["stage"] = to_string(stage);
  header["seeds"] = {{"seed", model.config().seed},
                     {"encoder", model.encoder().seed()},
                     {"pos", derive_seed(model.config().seed, "pos")},
                     {"mm", derive_seed(model.config().seed, "mm")}};
  header["optimizer"] = {{"step", optimizer.steps()},
                         {"beta1", optimizer.config().beta1},
                         {"beta2", optimizer.config().beta2},
                         {"eps", optimizer.config().eps},
                         {"weight_decay", optimizer.config().weight_decay}};
  std::vector<const std::vector<double>*> blobs;
  std::vector<std::vector<double>> param_values;
  nlohmann::json directory = nlohmann::json::array();
  std::size_t offset = 0;
  const auto& entries = model.store().entries();
  param_values.reserve(entries.size());
  for (const auto& [name, t] : entries) {
    param_values.emplace_back(t.data().begin(), t.data().end());
    directory.push_back({{"name", name}, {"kind", "param"}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  for (const auto& v : param_values) blobs.push_back(&v);
  for (const auto& [name, m] : optimizer.moments()) {
    directory.push_back({{"name", name}, {"kind", "adam_m"}, {"shape", {m.first.size()}}, {"offset", offset}});
    offset += m.first.size();
    blobs.push_back(&m.first);
    directory.push_back({{"name", name}, {"kind", "adam_v"}, {"shape", {m.second.size()}}, {"offset", offset}});
    offset += m.second.size();
    blobs.push_back(&m.second);
  }
  header["tensors"] = directory;
  header["payload_doubles"] = offset;
  const auto text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* blob : blobs) {
    out.write(reinterpret_cast<const char*>(blob->data()), static_cast<std::streamsize>(blob->size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                       "; this build reads version " + std::to_string(kCheckpointVersion));
  }
  const auto length = read_pod<std::uint64_t>(in, path);
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw IoError("truncated checkpoint " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto total = header.at("payload_doubles").get<std::size_t>();
  std::vector<double> payload(total);
  if (!in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * sizeof(double)))) {
    throw IoError("truncated checkpoint payload in " + path.string());
  }
  Checkpoint ck;
  ck.config = config_from_json(header.at("config"));
  ck.stage = parse_stage(header.at("stage").get<std::string>());
  ck.optimizer_step = header.at("optimizer").at("step").get<std::size_t>();
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto kind = entry.at("kind").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto n = shape_numel(shape);
    if (offset + n > total) throw IoError("tensor '" + name + "' overruns the checkpoint payload");
    std::vector<double> values(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
    if (kind == "param") {
      ck.parameters.emplace(name, Tensor(shape, std::move(values)));
    } else if (kind == "adam_m") {
      ck.moments[name].first = std::move(values);
    } else if (kind == "adam_v") {
      ck.moments[name].second = std::move(values);
    } else {
      throw IoError("unknown tensor kind '" + kind + "' in " + path.string());
    }
  }
  return ck;
}

void load_parameters(ParamStore& store, const Checkpoint& checkpoint, const std::vector<std::string>& prefixes) {
  for (const auto& prefix : prefixes) {
    for (const auto& name : store.names(prefix)) {
      auto it = checkpoint.parameters.find(name);
      if (it == checkpoint.parameters.end()) {
        throw ConfigError("checkpoint lacks parameter '" + name + "'", "stage1_checkpoint");
      }
      auto& target = store.at(name);
      if (target.shape() != it->second.shape()) {
        throw ConfigError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                              " in the checkpoint but " + shape_str(target.shape()) + " in the model",
                          "stage1_checkpoint");
      }
      const auto src = it->second.data();
      auto dst = target.mutable_data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
}

RunConfig adopt_architecture(const RunConfig& config, const RunConfig& from_checkpoint) {
  RunConfig out = config;
  out.d_model = from_checkpoint.d_model;
  out.heads = from_checkpoint.heads;
  out.d_ffn = from_checkpoint.d_ffn;
  out.num_proposals = from_checkpoint.num_proposals;
  out.positional_encoding = from_checkpoint.positional_encoding;
  out.image_size = from_checkpoint.image_size;
  out.fold = from_checkpoint.fold;
  return out;
}

std::unique_ptr<Model> load_model(const Checkpoint& checkpoint) {
  auto model = std::make_unique<Model>(checkpoint.config, checkpoint.stage != Stage::pos);
  std::vector<std::string> prefixes{"encoder", "pos"};
  if (model->has_matching()) prefixes.push_back("mm");
  load_parameters(model->store(), checkpoint, prefixes);
  return model;
}

namespace {

SceneOptions scene_options(const RunConfig& c) { return SceneOptions{c.image_size, c.fold}; }

std::vector<Mask> instance_masks(const Scene& scene) {
  std::vector<Mask> out;
  for (const auto& o : scene.objects) out.push_back(o.mask);
  return out;
}

AdamW make_optimizer(const RunConfig& c) {
  return AdamW(AdamWConfig{c.adam_beta1, c.adam_beta2, c.adam_eps, c.weight_decay});
}

void optimise(ParamStore& store, AdamW& optimizer, const Tensor& loss, const RunConfig& config, double lr) {
  store.zero_grad();
  if (!loss.requires_grad()) return;
  backward(loss);
  if (config.clip_norm > 0.0) clip_grad_norm(store, config.clip_norm);
  optimizer.step(store, lr);
}

}  // namespace

TrainResult train_stage1(Model& model, const RunConfig& config) {
  auto& store = model.store();
  store.freeze("encoder");
  store.unfreeze("pos");
  if (model.has_matching()) store.freeze("mm");
  TrainResult result;
  result.optimizer = make_optimizer(config);
  const auto iterations = resolved_iterations(config, Stage::pos);
  const auto batch = resolved_batch_size(config, Stage::pos);
  const auto opts = scene_options(model.config());
  for (std::size_t step = 0; step < iterations; ++step) {
    const double lr = poly_lr(step, iterations, config.base_lr, config.poly_power);
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto index = step * batch + b;
      auto scene = generate_scene(derive_seed(config.seed, "stage1/scene", index), Split::train, opts);
      if (config.augment) scene = augment(scene, derive_seed(config.seed, "stage1/augment", index));
      const auto proposals = model.pos().propose(model.encoder().encode(scene.image));
      total = add(total, pos_loss(proposals, instance_masks(scene)));
    }
    total = scale(total, 1.0 / static_cast<double>(batch));
    const double value = total.item();
    result.log.push_back({step, lr, value, value, 0.0, 0.0});
    optimise(store, result.optimizer, total, config, lr);
  }
  result.trained = iterations > 0;
  return result;
}

EpisodeLoss episode_loss(const Model& model, const EpisodeSample& episode, const RunConfig& config,
                         bool with_pos_loss) {
  const auto& mm = model.matching();
  const auto query = model.encoder().encode(episode.query);
  std::vector<FeaturePyramid> support_features;
  support_features.reserve(episode.supports.size());
  for (const auto& s : episode.supports) support_features.push_back(model.encoder().encode(s.image));
  std::vector<SupportFeatures> supports;
  for (std::size_t j = 0; j < episode.supports.size(); ++j) {
    supports.push_back({&support_features[j], &episode.supports[j].mask});
  }
  const auto proposals = model.pos().propose(query);
  const auto gt = to_proposal_grid(episode.query_gt, proposals.height, proposals.width);
  const auto ious = proposal_ious(proposals, gt);
  const auto match = mm.match(supports, query, proposals);
  const auto terms = mm_loss(match.blended, gt.to_row(), match.normalized_similarity, ious, config.lambda_dice,
                             config.lambda_co);
  EpisodeLoss out;
  out.total = terms.total;
  out.dice_term = terms.dice_term;
  out.contrastive_term = terms.contrastive_term;
  if (with_pos_loss) {
    const auto lp = pos_loss(proposals, episode.query_objects);
    out.pos_loss = lp.item();
    out.total = add(lp, out.total);
  }
  return out;
}

namespace {

TrainResult train_episodes(Model& model, const RunConfig& config, Stage stage) {
  TrainResult result;
  result.optimizer = make_optimizer(config);
  auto& store = model.store();
  if (store.trainable_names().empty()) {
    result.warnings.push_back("ablation " + describe(config.flags) +
                              " leaves nothing learnable; training skipped");
    return result;
  }
  const bool joint = stage == Stage::joint;
  const auto iterations = resolved_iterations(config, stage);
  const auto batch = resolved_batch_size(config, stage);
  const auto opts = scene_options(model.config());
  const std::string tag = joint ? "joint" : "stage2";
  for (std::size_t step = 0; step < iterations; ++step) {
    const double lr = poly_lr(step, iterations, config.base_lr, config.poly_power);
    Tensor total = Tensor::scalar(0.0);
    LogEntry entry{step, lr, 0.0, 0.0, 0.0, 0.0};
    for (std::size_t b = 0; b < batch; ++b) {
      const auto index = step * batch + b;
      auto episode = sample_episode(derive_seed(config.seed, tag + "/episode", index), Split::train, config.k_shot, opts);
      if (config.augment) episode = augment(episode, derive_seed(config.seed, tag + "/augment", index));
      const auto loss = episode_loss(model, episode, config, joint);
      total = add(total, loss.total);
      entry.pos_loss += loss.pos_loss;
      entry.dice_term += loss.dice_term;
      entry.contrastive_term += loss.contrastive_term;
    }
    const double inv = 1.0 / static_cast<double>(batch);
    total = scale(total, inv);
    entry.loss = total.item();
    entry.pos_loss *= inv;
    entry.dice_term *= inv;
    entry.contrastive_term *= inv;
    result.log.push_back(entry);
    optimise(store, result.optimizer, total, config, lr);
  }
  result.trained = iterations > 0;
  return result;
}

}  // namespace

TrainResult train_stage2(Model& model, const RunConfig& config) {
  auto& store = model.store();
  store.freeze("encoder");
  store.freeze("pos");
  store.unfreeze("mm");
  model.matching();
  return train_episodes(model, config, Stage::mm);
}

TrainResult train_joint(Model& model, const RunConfig& config) {
  auto& store = model.store();
  store.freeze("encoder");
  store.unfreeze("pos");
  store.unfreeze("mm");
  model.matching();
  return train_episodes(model, config, Stage::joint);
}

double probe_pos_loss(const Model& model, std::size_t count, std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto scene = generate_scene(derive_seed(seed, "probe/scene", i), Split::train, scene_options(model.config()));
    const auto proposals = model.pos().propose(model.encoder().encode(scene.image));
    total += pos_loss(proposals, instance_masks(scene)).item();
  }
  return total / static_cast<double>(count);
}

double probe_mm_loss(const Model& model, const RunConfig& config, std::size_t count, std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto episode = sample_episode(derive_seed(seed, "probe/episode", i), Split::train, config.k_shot,
                                        scene_options(model.config()));
    total += episode_loss(model, episode, config, false).total.item();
  }
  return total / static_cast<double>(count);
}

std::string format_log(const std::vector<LogEntry>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,lr,loss,pos_loss,dice_term,contrastive_term\n";
  for (const auto& e : log) {
    os << e.step << ',' << e.lr << ',' << e.loss << ',' << e.pos_loss << ',' << e.dice_term << ','
       << e.contrastive_term << '\n';
  }
  return os.str();
}

}  // namespace mmformer
