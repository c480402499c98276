#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmformer/rng.hpp"
#include "mmformer/tensor.hpp"

namespace mmformer {

// Named parameters with hierarchical dotted names ("pos.layer0.ffn.fc1.weight").
// Iteration is lexicographic. A frozen subtree has requires_grad switched off, so
// it never enters a tape and never receives an update.
class ParamStore {
 public:
  // Registers a trainable tensor (frozen if an enclosing subtree is frozen).
  Tensor& create(const std::string& name, Tensor init);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::vector<std::string> names(std::string_view prefix = {}) const;
  std::vector<std::string> trainable_names() const;

  void freeze(const std::string& prefix);
  void unfreeze(const std::string& prefix);
  bool is_frozen(const std::string& name) const;

  void zero_grad();
  // FNV-1a over names, shapes and raw value bytes of the subtree.
  std::uint64_t fingerprint(std::string_view prefix = {}) const;

 private:
  std::map<std::string, Tensor> params_;
  std::vector<std::string> frozen_;
};

// True when `name` equals `prefix` or lies below it in the dotted hierarchy.
bool in_subtree(std::string_view name, std::string_view prefix);

// Glorot uniform initialisation for a [fan_in x fan_out] matrix.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng, bool bias = true);

  // x: [n x in] -> [n x out]
  Tensor operator()(const Tensor& x) const;

  const Tensor& weight() const { return weight_; }
  const std::optional<Tensor>& bias() const { return bias_; }
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }

 private:
  Tensor weight_;
  std::optional<Tensor> bias_;
};

// Normalizes each row over its last extent. Without `affine` it has no parameters.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, std::size_t width, bool affine = true, double eps = 1e-5);
  explicit LayerNorm(std::size_t width, double eps = 1e-5) : width_(width), eps_(eps) {}

  Tensor operator()(const Tensor& x) const;

 private:
  std::size_t width_ = 0;
  double eps_ = 1e-5;
  std::optional<Tensor> gamma_;
  std::optional<Tensor> beta_;
};

// Linear layers with ReLU between consecutive layers (none after the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& dims, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
};

struct AttentionConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  // Without learnable projections q, k, v and the output pass through unchanged.
  bool parametric = true;
};

// Multi-head scaled dot-product attention: per head softmax(q k^T / sqrt(d_k)) v,
// heads concatenated and passed through the output projection.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore* store, const std::string& prefix, AttentionConfig config, Rng& rng);

  // q: [Lq x d], k/v: [Lk x d] -> [Lq x d]. `weights`, when given, receives one [Lq x Lk]
  // attention matrix per head.
  Tensor operator()(const Tensor& q, const Tensor& k, const Tensor& v, std::vector<Tensor>* weights = nullptr) const;

  const AttentionConfig& config() const { return config_; }
  const std::optional<Linear>& output_projection() const { return out_; }

 private:
  AttentionConfig config_;
  std::optional<Linear> q_, k_, v_, out_;
};

struct DecoderLayerConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ffn = 64;
  bool self_attention = true;
  // false: identity projections, no feed-forward, norms without affine terms.
  bool parametric = true;
};

// Pre-norm transformer decoder layer:
//   x += SelfAttn(LN(x))            (optional)
//   x += CrossAttn(LN(x), LN(mem))
//   x += FFN(LN(x))                 (parametric only)
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParamStore* store, const std::string& prefix, DecoderLayerConfig config, Rng& rng);

  // queries: [Nq x d], memory: [Lm x d] -> [Nq x d]
  Tensor operator()(const Tensor& queries, const Tensor& memory) const;

  const DecoderLayerConfig& config() const { return config_; }
  const MultiHeadAttention& cross_attention() const { return cross_; }

 private:
  DecoderLayerConfig config_;
  std::optional<MultiHeadAttention> self_;
  MultiHeadAttention cross_;
  std::optional<Mlp> ffn_;
  std::optional<LayerNorm> norm_self_;
  LayerNorm norm_cross_;
  LayerNorm norm_memory_;
  std::optional<LayerNorm> norm_ffn_;
};

// Fixed 2-D sine/cosine position code for an h x w grid, [h*w x d] with d divisible by 4.
Tensor sine_position_encoding(std::size_t h, std::size_t w, std::size_t d);

}  // namespace mmformer
