#include "mmformer/pos.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmformer/errors.hpp"
#include "mmformer/ops.hpp"

namespace mmformer {

Mask ProposalSet::binarized(std::size_t n) const {
  Mask m(height, width);
  const auto row = masks.data().subspan(n * height * width, height * width);
  for (std::size_t p = 0; p < row.size(); ++p) m.pixels[p] = row[p] >= 0.5 ? 1 : 0;
  return m;
}

Pos::Pos(ParamStore& store, const std::string& prefix, PosConfig config, Rng& rng) : config_(config) {
  if (config.num_proposals == 0) throw ConfigError("at least one proposal is required", "num_proposals");
  std::vector<double> q(config.num_proposals * config.d_model);
  for (auto& v : q) v = rng.normal();
  queries_ = store.create(prefix + ".query_embed", Tensor({config.num_proposals, config.d_model}, std::move(q)));
  const DecoderLayerConfig layer{config.d_model, config.heads, config.d_ffn, true, true};
  for (int level = 3; level <= 5; ++level) {
    layers_.emplace_back(&store, prefix + ".layer" + std::to_string(level), layer, rng);
  }
  norm_ = LayerNorm(store, prefix + ".norm", config.d_model);
  projection_ = Linear(store, prefix + ".proj", config.d_model, config.d_model, rng);
}

ProposalSet Pos::propose(const FeaturePyramid& pyramid) const {
  if (pyramid.channels() != config_.d_model) {
    throw DimensionError("pyramid width " + std::to_string(pyramid.channels()) + " does not match d_model " +
                         std::to_string(config_.d_model));
  }
  Tensor e = queries_;
  for (int level = 3; level <= 5; ++level) {
    const auto& f = pyramid.level(level);
    Tensor memory = level_tokens(f);
    if (config_.positional_encoding) {
      memory = add(memory, sine_position_encoding(f.dim(1), f.dim(2), config_.d_model));
    }
    e = layers_[static_cast<std::size_t>(level - 3)](e, memory);
  }
  ProposalSet out;
  out.embeddings = e;
  out.height = pyramid.f2.dim(1);
  out.width = pyramid.f2.dim(2);
  const auto f2 = reshape(pyramid.f2, {config_.d_model, out.height * out.width});
  out.masks = sigmoid(matmul(projection_(norm_(e)), f2));
  return out;
}

Tensor dice_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("dice loss shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  const auto inter = sum_all(mul(pred, gt));
  const auto total = add(sum_all(pred), sum_all(gt));
  return sub(Tensor::scalar(1.0), div(add_scalar(scale(inter, 2.0), 1.0), add_scalar(total, 1.0)));
}

double dice_value(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw DimensionError("dice value sizes differ");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    total += pred[i] + gt[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (total + 1.0);
}

Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols) throw DimensionError("cost matrix size does not match its shape");
  if (cols == 0) return {};
  if (cols > rows) {
    throw ConfigError(std::to_string(cols) + " ground truths exceed " + std::to_string(rows) + " proposals",
                      "num_proposals");
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw DomainError("cost matrix holds a non-finite entry");
  }
  // Potentials method on the transposed problem: ground truths are assigned to proposals.
  const std::size_t n = cols, m = rows;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  auto a = [&](std::size_t gt, std::size_t prop) { return cost[(prop - 1) * cols + (gt - 1)]; };
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out;
  out.pairs.resize(n);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) out.pairs[p[j] - 1] = {j - 1, p[j] - 1};
  }
  for (const auto& [prop, gt] : out.pairs) out.total_cost += cost[prop * cols + gt];
  return out;
}

Mask to_proposal_grid(const Mask& mask, std::size_t height, std::size_t width) {
  return resize_nearest(mask, height, width);
}

Tensor pos_loss(const ProposalSet& proposals, const std::vector<Mask>& gts, Assignment* assignment) {
  if (gts.empty()) throw ContractError("proposal loss needs at least one ground-truth mask");
  const std::size_t n = proposals.size(), g = gts.size(), hw = proposals.height * proposals.width;
  std::vector<Tensor> targets;
  for (const auto& m : gts) targets.push_back(to_proposal_grid(m, proposals.height, proposals.width).to_row());
  const auto values = proposals.masks.data();
  std::vector<double> cost(n * g);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j) cost[i * g + j] = dice_value(values.subspan(i * hw, hw), targets[j].data());
  auto match = hungarian(cost, n, g);
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [prop, gt] : match.pairs) {
    total = add(total, dice_loss(slice(proposals.masks, 0, prop, prop + 1), targets[gt]));
  }
  if (assignment) *assignment = std::move(match);
  return scale(total, 1.0 / static_cast<double>(g));
}

}  // namespace mmformer
