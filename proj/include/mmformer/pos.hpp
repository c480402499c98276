#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmformer/encoder.hpp"
#include "mmformer/episodes.hpp"
#include "mmformer/nn.hpp"
#include "mmformer/rng.hpp"
#include "mmformer/tensor.hpp"

namespace mmformer {

struct PosConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ffn = 64;
  std::size_t num_proposals = 16;
  // Adds a fixed sine code to the memory tokens of each level.
  bool positional_encoding = false;
};

// N soft mask proposals at stride 4. `masks` is [N x h*w] (row n is proposal n
// flattened row-major over an h x w grid) with values in [0, 1].
struct ProposalSet {
  Tensor masks;
  Tensor embeddings;  // [N x d]
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return masks.dim(0); }
  // Proposal n as a {0,1} mask after thresholding at 0.5.
  Mask binarized(std::size_t n) const;
};

// Potential objects segmenter: learnable embeddings refined by one decoder
// layer per level F3, F4, F5, then projected and dotted with F2 per pixel.
class Pos {
 public:
  Pos() = default;
  Pos(ParamStore& store, const std::string& prefix, PosConfig config, Rng& rng);

  ProposalSet propose(const FeaturePyramid& pyramid) const;
  const PosConfig& config() const { return config_; }

 private:
  PosConfig config_;
  Tensor queries_;
  std::vector<DecoderLayer> layers_;
  LayerNorm norm_;
  Linear projection_;
};

// Soft dice loss 1 - (2 sum(p*g) + 1) / (sum(p) + sum(g) + 1) over tensors of equal shape.
Tensor dice_loss(const Tensor& pred, const Tensor& gt);
double dice_value(std::span<const double> pred, std::span<const double> gt);

struct Assignment {
  // (proposal index, ground-truth index), one pair per ground truth, ordered by ground truth.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;
};

// Minimum-cost injective assignment of the G columns (ground truths) to the N rows
// (proposals) of a row-major N x G cost matrix.
Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols);

// Ground-truth mask brought to the proposal grid by nearest-neighbour sampling.
Mask to_proposal_grid(const Mask& mask, std::size_t height, std::size_t width);

// Mean dice over Hungarian-matched (proposal, ground truth) pairs. `gts` are at
// image resolution and are resampled to the proposal grid.
Tensor pos_loss(const ProposalSet& proposals, const std::vector<Mask>& gts, Assignment* assignment = nullptr);

}  // namespace mmformer
