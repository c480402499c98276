#include "mmformer/mm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <tuple>

#include "mmformer/errors.hpp"
#include "mmformer/ops.hpp"

namespace mmformer {

namespace {

constexpr double kGapEps = 1e-7;
constexpr double kNormEps = 1e-7;
constexpr double kLogFloor = 1e-7;

}  // namespace

std::string to_string(CrossMode mode) {
  switch (mode) {
    case CrossMode::off: return "off";
    case CrossMode::learned: return "on";
    case CrossMode::nonparametric: return "np";
  }
  return "off";
}

CrossMode parse_cross_mode(const std::string& text) {
  if (text == "off") return CrossMode::off;
  if (text == "on") return CrossMode::learned;
  if (text == "np") return CrossMode::nonparametric;
  throw ConfigError("ca must be on, off or np, got '" + text + "'", "ca");
}

std::string to_string(BlendMode mode) { return mode == BlendMode::softmax ? "softmax" : "linear"; }

BlendMode parse_blend_mode(const std::string& text) {
  if (text == "softmax") return BlendMode::softmax;
  if (text == "linear") return BlendMode::linear;
  throw ConfigError("blend must be softmax or linear, got '" + text + "'", "blend");
}

std::string describe(const AblationFlags& flags) {
  std::vector<std::string> parts;
  if (flags.self_alignment) parts.push_back("SA");
  if (flags.cross == CrossMode::learned) parts.push_back("CA");
  if (flags.cross == CrossMode::nonparametric) parts.push_back("CA*");
  if (flags.learnable_matching) parts.push_back("LM");
  if (parts.empty()) return "none";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

Tensor self_align(const Tensor& f) {
  if (f.rank() != 2) throw DimensionError("self alignment expects [c x hw], got " + shape_str(f.shape()));
  const auto anchor = mean(f, 0);                    // [1 x hw]
  const auto weights = matmul(f, transpose(anchor));  // [c x 1]
  return mul(f, weights);
}

const Tensor& resize_matrix(std::size_t sh, std::size_t sw, std::size_t dh, std::size_t dw) {
  if (sh == 0 || sw == 0 || dh == 0 || dw == 0) throw DimensionError("resize to or from an empty grid");
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, Tensor> cache;
  const auto key = std::make_tuple(sh, sw, dh, dw);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  std::vector<double> r(sh * sw * dh * dw, 0.0);
  auto at = [&](std::size_t sy, std::size_t sx, std::size_t y, std::size_t x) -> double& {
    return r[(sy * sw + sx) * dh * dw + y * dw + x];
  };
  if (sh % dh == 0 && sw % dw == 0) {
    const std::size_t fy = sh / dh, fx = sw / dw;
    const double share = 1.0 / static_cast<double>(fy * fx);
    for (std::size_t sy = 0; sy < sh; ++sy)
      for (std::size_t sx = 0; sx < sw; ++sx) at(sy, sx, sy / fy, sx / fx) = share;
  } else {
    auto taps = [](std::size_t y, std::size_t src, std::size_t dst) {
      const double pos = std::clamp((static_cast<double>(y) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5,
                                    0.0, static_cast<double>(src - 1));
      const auto lo = static_cast<std::size_t>(pos);
      const auto hi = std::min(lo + 1, src - 1);
      return std::make_tuple(lo, hi, pos - static_cast<double>(lo));
    };
    for (std::size_t y = 0; y < dh; ++y) {
      const auto [y0, y1, ay] = taps(y, sh, dh);
      for (std::size_t x = 0; x < dw; ++x) {
        const auto [x0, x1, ax] = taps(x, sw, dw);
        at(y0, x0, y, x) += (1 - ay) * (1 - ax);
        at(y0, x1, y, x) += (1 - ay) * ax;
        at(y1, x0, y, x) += ay * (1 - ax);
        at(y1, x1, y, x) += ay * ax;
      }
    }
  }
  return cache.emplace(key, Tensor({sh * sw, dh * dw}, std::move(r))).first->second;
}

Tensor AlignedFeatures::level(int level) const {
  if (level < 3 || level > 5) throw DimensionError("aligned level " + std::to_string(level) + " does not exist");
  const auto i = static_cast<std::size_t>(level - 3);
  return tokens_to_level(tokens[i], heights[i], widths[i]);
}

AlignedFeatures raw_features(const FeaturePyramid& pyramid) {
  AlignedFeatures out;
  for (int level = 3; level <= 5; ++level) {
    const auto i = static_cast<std::size_t>(level - 3);
    const auto& f = pyramid.level(level);
    out.tokens[i] = level_tokens(f);
    out.heights[i] = f.dim(1);
    out.widths[i] = f.dim(2);
  }
  return out;
}

CrossAlignment::CrossAlignment(ParamStore* store, const std::string& prefix, const MmConfig& config, bool parametric,
                               Rng& rng) {
  const auto d = config.d_model;
  if (config.ca_layers == 0) throw ConfigError("cross alignment needs at least one layer", "ca_layers");
  input_norm_ = parametric ? LayerNorm(*store, prefix + ".norm_in", d) : LayerNorm(d);
  const DecoderLayerConfig layer{d, config.heads, config.d_ffn, false, parametric};
  for (std::size_t l = 0; l < config.ca_layers; ++l) {
    layers_.emplace_back(parametric ? store : nullptr, prefix + ".layer" + std::to_string(l), layer, rng);
  }
  output_norm_ = parametric ? LayerNorm(*store, prefix + ".norm_out", d) : LayerNorm(d);
}

Tensor CrossAlignment::align(const Tensor& tokens, const Tensor& other, std::size_t h, std::size_t w,
                             std::size_t pool_h, std::size_t pool_w) const {
  const auto& pool = resize_matrix(h, w, pool_h, pool_w);
  const auto memory = matmul(transpose(pool), other);
  Tensor x = input_norm_(tokens);
  for (const auto& layer : layers_) x = layer(x, memory);
  return output_norm_(x);
}

std::pair<Tensor, Tensor> CrossAlignment::operator()(const Tensor& tokens_q, const Tensor& tokens_s, std::size_t h,
                                                     std::size_t w, std::size_t pool_h, std::size_t pool_w) const {
  if (tokens_q.shape() != tokens_s.shape()) {
    throw DimensionError("cross alignment level shapes differ: " + shape_str(tokens_q.shape()) + " vs " +
                         shape_str(tokens_s.shape()));
  }
  return {align(tokens_q, tokens_s, h, w, pool_h, pool_w), align(tokens_s, tokens_q, h, w, pool_h, pool_w)};
}

Tensor masked_gap(const Tensor& tokens, std::size_t h, std::size_t w, const Tensor& masks, std::size_t mh,
                  std::size_t mw) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w) {
    throw DimensionError("tokens " + shape_str(tokens.shape()) + " do not cover a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  if (masks.rank() != 2 || masks.dim(1) != mh * mw) {
    throw DimensionError("masks " + shape_str(masks.shape()) + " do not cover a " + std::to_string(mh) + "x" +
                         std::to_string(mw) + " grid");
  }
  const auto resized = (mh == h && mw == w) ? masks : matmul(masks, resize_matrix(mh, mw, h, w));
  const auto pooled = matmul(resized, tokens);
  return div(pooled, add_scalar(sum(resized, 1), kGapEps));
}

Tensor prototypes(const AlignedFeatures& features, const Tensor& masks, std::size_t mh, std::size_t mw) {
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < 3; ++i) {
    parts.push_back(masked_gap(features.tokens[i], features.heights[i], features.widths[i], masks, mh, mw));
  }
  return concat(parts, 1);
}

Tensor minmax_norm(const Tensor& s) {
  if (s.rank() != 2 || s.dim(0) != 1 || s.dim(1) == 0) {
    throw DimensionError("min-max normalization expects [1 x N], got " + shape_str(s.shape()));
  }
  const auto lo = min(s, 1);
  const auto range = add_scalar(sub(max(s, 1), lo), kNormEps);
  return div(sub(s, lo), range);
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace {

bool zero_norm(const Tensor& proto) {
  const auto d = proto.data();
  return std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
}

void check_match_inputs(const Tensor& support_proto, const Tensor& query_protos, const Tensor& proposal_masks) {
  if (support_proto.rank() != 2 || support_proto.dim(0) != 1) {
    throw DimensionError("support prototype must be [1 x 3d], got " + shape_str(support_proto.shape()));
  }
  if (query_protos.rank() != 2 || query_protos.dim(1) != support_proto.dim(1)) {
    throw DimensionError("query prototypes " + shape_str(query_protos.shape()) + " do not match support " +
                         shape_str(support_proto.shape()));
  }
  if (proposal_masks.rank() != 2 || proposal_masks.dim(0) != query_protos.dim(0)) {
    throw DimensionError("proposal masks " + shape_str(proposal_masks.shape()) + " do not match " +
                         std::to_string(query_protos.dim(0)) + " prototypes");
  }
  if (query_protos.dim(0) == 0) throw ConfigError("matching needs at least one proposal", "num_proposals");
}

}  // namespace

LearnableMatching::LearnableMatching(ParamStore& store, const std::string& prefix, std::size_t num_proposals,
                                     BlendMode blend, Rng& rng)
    : mlp_(store, prefix, {num_proposals, 2 * num_proposals, num_proposals}, rng), blend_(blend) {
  // Starts as MLP(S) = kTemperature * S, the identity split as relu(x) - relu(-x)
  // with the gain shared evenly between the two layers.
  constexpr double kTemperature = 50.0;
  const double gain = std::sqrt(kTemperature);
  const std::size_t n = num_proposals;
  auto w0 = store.at(prefix + ".fc0.weight").mutable_data();
  auto w1 = store.at(prefix + ".fc1.weight").mutable_data();
  std::fill(w0.begin(), w0.end(), 0.0);
  std::fill(w1.begin(), w1.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    w0[i * 2 * n + i] = gain;
    w0[i * 2 * n + n + i] = -gain;
    w1[i * n + i] = gain;
    w1[(n + i) * n + i] = -gain;
  }
}

MatchResult LearnableMatching::operator()(const Tensor& support_proto, const Tensor& query_protos,
                                          const Tensor& proposal_masks) const {
  check_match_inputs(support_proto, query_protos, proposal_masks);
  MatchResult r;
  r.similarity = cosine_similarity(query_protos, support_proto);
  r.normalized_similarity = minmax_norm(r.similarity);
  r.selected = argmax_lowest(r.similarity.data());
  const auto logits = mlp_(r.similarity);
  if (blend_ == BlendMode::softmax) {
    r.weights = softmax(logits, 1);
    r.blended = matmul(r.weights, proposal_masks);
  } else {
    r.weights = logits;
    r.blended = clamp(matmul(r.weights, proposal_masks), 0.0, 1.0);
  }
  r.degenerate_prototype = zero_norm(support_proto);
  return r;
}

MatchResult heuristic_match(const Tensor& support_proto, const Tensor& query_protos, const Tensor& proposal_masks) {
  check_match_inputs(support_proto, query_protos, proposal_masks);
  MatchResult r;
  r.similarity = cosine_similarity(query_protos, support_proto);
  r.normalized_similarity = minmax_norm(r.similarity);
  r.selected = argmax_lowest(r.similarity.data());
  const std::size_t n = proposal_masks.dim(0), hw = proposal_masks.dim(1);
  std::vector<double> w(n, 0.0);
  w[r.selected] = 1.0;
  r.weights = Tensor({1, n}, std::move(w));
  const auto row = proposal_masks.data().subspan(r.selected * hw, hw);
  r.blended = Tensor({1, hw}, std::vector<double>(row.begin(), row.end()));
  r.degenerate_prototype = zero_norm(support_proto);
  return r;
}

Tensor contrastive_loss(const Tensor& s_hat, const std::vector<double>& ious) {
  if (s_hat.rank() != 2 || s_hat.dim(0) != 1) {
    throw DimensionError("contrastive loss expects [1 x N], got " + shape_str(s_hat.shape()));
  }
  const std::size_t n = s_hat.dim(1);
  if (n < 2) throw ConfigError("the contrastive loss needs at least two proposals", "num_proposals");
  if (ious.size() != n) throw DimensionError("IoU count does not match the number of proposals");
  const std::size_t pos = argmax_lowest(ious);
  std::size_t neg = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (ious[i] < ious[neg]) neg = i;
  }
  const double inf = std::numeric_limits<double>::infinity();
  const auto s_pos = clamp(slice(s_hat, 1, pos, pos + 1), kLogFloor, inf);
  const auto s_neg = clamp(add_scalar(scale(slice(s_hat, 1, neg, neg + 1), -1.0), 1.0), kLogFloor, inf);
  return reshape(scale(add(log(s_pos), log(s_neg)), -0.5), {});
}

LossTerms mm_loss(const Tensor& blended, const Tensor& gt_row, const Tensor& s_hat, const std::vector<double>& ious,
                  double lambda_dice, double lambda_contrastive) {
  const auto dice = scale(dice_loss(blended, gt_row), lambda_dice);
  const auto co = scale(contrastive_loss(s_hat, ious), lambda_contrastive);
  LossTerms out;
  out.total = add(dice, co);
  out.dice_term = dice.item();
  out.contrastive_term = co.item();
  return out;
}

std::vector<double> proposal_ious(const ProposalSet& proposals, const Mask& gt_grid) {
  std::vector<double> out(proposals.size());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = iou(proposals.binarized(n), gt_grid);
  return out;
}

MaskMatching::MaskMatching(ParamStore& store, const std::string& prefix, const MmConfig& config, Rng& rng)
    : config_(config) {
  if (config.flags.cross != CrossMode::off) {
    const bool parametric = config.flags.cross == CrossMode::learned;
    for (int level = 3; level <= 5; ++level) {
      cross_[static_cast<std::size_t>(level - 3)] =
          CrossAlignment(&store, prefix + ".ca" + std::to_string(level), config, parametric, rng);
    }
  }
  if (config.flags.learnable_matching) {
    matching_.emplace(store, prefix + ".lm", config.num_proposals, config.blend, rng);
  }
}

bool MaskMatching::has_parameters() const {
  return config_.flags.learnable_matching || config_.flags.cross == CrossMode::learned;
}

std::pair<AlignedFeatures, AlignedFeatures> MaskMatching::align(const FeaturePyramid& query,
                                                                const FeaturePyramid& support) const {
  auto q = raw_features(query);
  auto s = raw_features(support);
  for (std::size_t i = 0; i < 3; ++i) {
    if (q.tokens[i].shape() != s.tokens[i].shape()) {
      throw DimensionError("support and query level shapes differ: " + shape_str(q.tokens[i].shape()) + " vs " +
                           shape_str(s.tokens[i].shape()));
    }
  }
  if (config_.flags.self_alignment) {
    for (std::size_t i = 0; i < 3; ++i) {
      q.tokens[i] = transpose(self_align(transpose(q.tokens[i])));
      s.tokens[i] = transpose(self_align(transpose(s.tokens[i])));
    }
  }
  if (config_.flags.cross != CrossMode::off) {
    const auto ph = query.f5.dim(1), pw = query.f5.dim(2);
    for (std::size_t i = 0; i < 3; ++i) {
      auto [aq, as] = cross_[i](q.tokens[i], s.tokens[i], q.heights[i], q.widths[i], ph, pw);
      q.tokens[i] = std::move(aq);
      s.tokens[i] = std::move(as);
    }
  }
  return {std::move(q), std::move(s)};
}

MatchResult MaskMatching::match(const std::vector<SupportFeatures>& supports, const FeaturePyramid& query,
                                const ProposalSet& proposals) const {
  if (supports.empty()) throw ConfigError("k-shot matching needs at least one support", "k_shot");
  if (proposals.size() != config_.num_proposals && config_.flags.learnable_matching) {
    throw ConfigError("matching block expects " + std::to_string(config_.num_proposals) + " proposals, got " +
                          std::to_string(proposals.size()),
                      "num_proposals");
  }
  Tensor support_proto, query_protos;
  for (std::size_t j = 0; j < supports.size(); ++j) {
    const auto& s = supports[j];
    const auto [aq, as] = align(query, *s.pyramid);
    const auto ps = prototypes(as, s.mask->to_row(), s.mask->height, s.mask->width);
    const auto pq = prototypes(aq, proposals.masks, proposals.height, proposals.width);
    if (j == 0) {
      support_proto = ps;
      query_protos = pq;
    } else {
      // Running mean: stays bit-identical when every support repeats the first.
      const double step = 1.0 / static_cast<double>(j + 1);
      support_proto = add(support_proto, scale(sub(ps, support_proto), step));
      query_protos = add(query_protos, scale(sub(pq, query_protos), step));
    }
  }
  if (matching_) return (*matching_)(support_proto, query_protos, proposals.masks);
  return heuristic_match(support_proto, query_protos, proposals.masks);
}

MatchResult MaskMatching::match(const FeaturePyramid& support, const Mask& support_mask, const FeaturePyramid& query,
                                const ProposalSet& proposals) const {
  return match(std::vector<SupportFeatures>{{&support, &support_mask}}, query, proposals);
}

}  // namespace mmformer
