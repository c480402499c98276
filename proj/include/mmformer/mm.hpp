#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmformer/encoder.hpp"
#include "mmformer/episodes.hpp"
#include "mmformer/nn.hpp"
#include "mmformer/pos.hpp"
#include "mmformer/rng.hpp"
#include "mmformer/tensor.hpp"

namespace mmformer {

enum class CrossMode { off, learned, nonparametric };
enum class BlendMode { softmax, linear };

std::string to_string(CrossMode mode);
CrossMode parse_cross_mode(const std::string& text);
std::string to_string(BlendMode mode);
BlendMode parse_blend_mode(const std::string& text);

struct AblationFlags {
  bool self_alignment = true;
  CrossMode cross = CrossMode::learned;
  bool learnable_matching = true;

  bool operator==(const AblationFlags&) const = default;
};

// Short label such as "SA+CA*+LM" or "none".
std::string describe(const AblationFlags& flags);

struct MmConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ffn = 64;
  std::size_t ca_layers = 2;
  std::size_t num_proposals = 16;
  AblationFlags flags;
  BlendMode blend = BlendMode::softmax;
};

// Non-parametric channel reweighting. F: [c x hw]; with F_avg the channel mean
// [1 x hw] and A = F F_avg^T [c x 1], returns A broadcast over F.
Tensor self_align(const Tensor& f);

// Constant [sh*sw x dh*dw] matrix R such that a row-major raster r [1 x sh*sw]
// resized to dh x dw is r R. Integer downscales average whole cells; every
// other ratio samples bilinearly.
const Tensor& resize_matrix(std::size_t sh, std::size_t sw, std::size_t dh, std::size_t dw);

// Features for levels 3, 4, 5 as token matrices [h*w x d].
struct AlignedFeatures {
  std::array<Tensor, 3> tokens;
  std::array<std::size_t, 3> heights{};
  std::array<std::size_t, 3> widths{};

  // Level in {3, 4, 5} as [d x h x w].
  Tensor level(int level) const;
};

AlignedFeatures raw_features(const FeaturePyramid& pyramid);

// Cross-alignment for one pyramid level. Both directions run through the same
// layer objects; the memory is the other image's tokens average-pooled to the
// coarsest grid.
class CrossAlignment {
 public:
  CrossAlignment() = default;
  CrossAlignment(ParamStore* store, const std::string& prefix, const MmConfig& config, bool parametric, Rng& rng);

  // tokens_*: [h*w x d] on an h x w grid; memory pooled to pool_h x pool_w.
  std::pair<Tensor, Tensor> operator()(const Tensor& tokens_q, const Tensor& tokens_s, std::size_t h, std::size_t w,
                                       std::size_t pool_h, std::size_t pool_w) const;
  // One direction: tokens attend to the pooled `other`.
  Tensor align(const Tensor& tokens, const Tensor& other, std::size_t h, std::size_t w, std::size_t pool_h,
               std::size_t pool_w) const;

  const std::vector<DecoderLayer>& layers() const { return layers_; }

 private:
  LayerNorm input_norm_;
  std::vector<DecoderLayer> layers_;
  LayerNorm output_norm_;
};

// Prototypes of `masks` [n x mh*mw] over one level's tokens [h*w x d]:
// sum(F * m) / (sum(m) + 1e-7) with the masks resized to h x w. Returns [n x d].
Tensor masked_gap(const Tensor& tokens, std::size_t h, std::size_t w, const Tensor& masks, std::size_t mh,
                  std::size_t mw);
// Concatenation over levels 3, 4, 5 -> [n x 3d].
Tensor prototypes(const AlignedFeatures& features, const Tensor& masks, std::size_t mh, std::size_t mw);

// (S - min S) / (max S - min S + 1e-7) over a [1 x N] row.
Tensor minmax_norm(const Tensor& s);

struct MatchResult {
  Tensor similarity;             // S [1 x N]
  Tensor normalized_similarity;  // S-hat [1 x N]
  Tensor weights;                // [1 x N]
  Tensor blended;                // [1 x h*w]
  std::size_t selected = 0;      // argmax S (lowest index on ties)
  bool degenerate_prototype = false;
};

// Index of the largest entry, lowest index on ties.
std::size_t argmax_lowest(std::span<const double> values);

// Learnable matching block: softmax(MLP(S)) weights over N proposals.
class LearnableMatching {
 public:
  LearnableMatching() = default;
  LearnableMatching(ParamStore& store, const std::string& prefix, std::size_t num_proposals, BlendMode blend, Rng& rng);

  MatchResult operator()(const Tensor& support_proto, const Tensor& query_protos, const Tensor& proposal_masks) const;

 private:
  Mlp mlp_;
  BlendMode blend_ = BlendMode::softmax;
};

// Proposal at argmax cosine similarity; weights one-hot; no gradient reaches the proposals.
MatchResult heuristic_match(const Tensor& support_proto, const Tensor& query_protos, const Tensor& proposal_masks);

// Eq.-style contrastive loss on the normalized similarity: positive = best-IoU
// proposal, negative = worst-IoU proposal, both clamped at 1e-7 before the log.
Tensor contrastive_loss(const Tensor& s_hat, const std::vector<double>& ious);

// Weighted terms; total = dice_term + contrastive_term.
struct LossTerms {
  Tensor total;
  double dice_term = 0.0;
  double contrastive_term = 0.0;
};

LossTerms mm_loss(const Tensor& blended, const Tensor& gt_row, const Tensor& s_hat, const std::vector<double>& ious,
                  double lambda_dice = 10.0, double lambda_contrastive = 6.0);

// IoU of every proposal binarized at 0.5 against a mask on the proposal grid.
std::vector<double> proposal_ious(const ProposalSet& proposals, const Mask& gt_grid);

struct SupportFeatures {
  const FeaturePyramid* pyramid = nullptr;
  const Mask* mask = nullptr;
};

// Self-alignment, cross-alignment and learnable matching over frozen features.
class MaskMatching {
 public:
  MaskMatching() = default;
  MaskMatching(ParamStore& store, const std::string& prefix, const MmConfig& config, Rng& rng);

  std::pair<AlignedFeatures, AlignedFeatures> align(const FeaturePyramid& query, const FeaturePyramid& support) const;

  // k-shot matching. Support and query prototypes are averaged over the k
  // pairings before matching; with one support this is the one-shot path.
  MatchResult match(const std::vector<SupportFeatures>& supports, const FeaturePyramid& query,
                    const ProposalSet& proposals) const;
  MatchResult match(const FeaturePyramid& support, const Mask& support_mask, const FeaturePyramid& query,
                    const ProposalSet& proposals) const;

  const MmConfig& config() const { return config_; }
  bool has_parameters() const;
  const std::array<CrossAlignment, 3>& cross_alignment() const { return cross_; }

 private:
  MmConfig config_;
  std::array<CrossAlignment, 3> cross_;
  std::optional<LearnableMatching> matching_;
};

}  // namespace mmformer
