#include "mmformer/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mmformer/errors.hpp"
#include "mmformer/ops.hpp"

namespace mmformer {

bool in_subtree(std::string_view name, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (name.size() < prefix.size() || name.substr(0, prefix.size()) != prefix) return false;
  return name.size() == prefix.size() || name[prefix.size()] == '.';
}

Tensor& ParamStore::create(const std::string& name, Tensor init) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'", name);
  auto t = Tensor(init.shape(), std::vector<double>(init.data().begin(), init.data().end()));
  t.set_requires_grad(!is_frozen(name));
  return params_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'", name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'", name);
  return it->second;
}

std::vector<std::string> ParamStore::names(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) {
    if (in_subtree(name, prefix)) out.push_back(name);
  }
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) {
    if (!is_frozen(name)) out.push_back(name);
  }
  return out;
}

void ParamStore::freeze(const std::string& prefix) {
  if (std::find(frozen_.begin(), frozen_.end(), prefix) == frozen_.end()) frozen_.push_back(prefix);
  for (auto& [name, t] : params_) {
    if (in_subtree(name, prefix)) {
      t.set_requires_grad(false);
      t.zero_grad();
    }
  }
}

void ParamStore::unfreeze(const std::string& prefix) {
  std::erase_if(frozen_, [&](const std::string& p) { return in_subtree(p, prefix); });
  for (auto& [name, t] : params_) {
    if (in_subtree(name, prefix) && !is_frozen(name)) t.set_requires_grad(true);
  }
}

bool ParamStore::is_frozen(const std::string& name) const {
  return std::any_of(frozen_.begin(), frozen_.end(), [&](const std::string& p) { return in_subtree(name, p); });
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

std::uint64_t ParamStore::fingerprint(std::string_view prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params_) {
    if (!in_subtree(name, prefix)) continue;
    feed(name.data(), name.size());
    for (auto e : t.shape()) feed(&e, sizeof e);
    feed(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor({fan_in, fan_out}, std::move(v));
}

Linear::Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng, bool bias)
    : weight_(store.create(prefix + ".weight", xavier_uniform(in, out, rng))) {
  if (bias) bias_ = store.create(prefix + ".bias", Tensor::zeros({1, out}));
}

Tensor Linear::operator()(const Tensor& x) const {
  auto y = matmul(x, weight_);
  return bias_ ? add(y, *bias_) : y;
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, std::size_t width, bool affine, double eps)
    : width_(width), eps_(eps) {
  if (affine) {
    gamma_ = store.create(prefix + ".gamma", Tensor::ones({1, width}));
    beta_ = store.create(prefix + ".beta", Tensor::zeros({1, width}));
  }
}

Tensor LayerNorm::operator()(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != width_) {
    throw DimensionError("layer norm of width " + std::to_string(width_) + " applied to " + shape_str(x.shape()));
  }
  const auto centered = sub(x, mean(x, 1));
  const auto var = mean(mul(centered, centered), 1);
  auto y = div(centered, sqrt(add_scalar(var, eps_)));
  if (gamma_) y = add(mul(y, *gamma_), *beta_);
  return y;
}

Mlp::Mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& dims, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    layers_.emplace_back(store, prefix + ".fc" + std::to_string(i), dims[i], dims[i + 1], rng);
  }
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

MultiHeadAttention::MultiHeadAttention(ParamStore* store, const std::string& prefix, AttentionConfig config,
                                       Rng& rng)
    : config_(config) {
  if (config.heads == 0 || config.d_model % config.heads != 0) {
    throw ConfigError("d_model " + std::to_string(config.d_model) + " is not divisible by heads " +
                          std::to_string(config.heads),
                      "heads");
  }
  if (config.parametric) {
    if (!store) throw ConfigError("parametric attention needs a parameter store");
    const auto d = config.d_model;
    q_.emplace(*store, prefix + ".q", d, d, rng);
    k_.emplace(*store, prefix + ".k", d, d, rng);
    v_.emplace(*store, prefix + ".v", d, d, rng);
    out_.emplace(*store, prefix + ".out", d, d, rng);
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& q, const Tensor& k, const Tensor& v,
                                      std::vector<Tensor>* weights) const {
  const auto d = config_.d_model;
  for (const Tensor* t : {&q, &k, &v}) {
    if (t->rank() != 2 || t->dim(1) != d) {
      throw DimensionError("attention input " + shape_str(t->shape()) + " does not have width " + std::to_string(d));
    }
  }
  if (k.dim(0) == 0 || k.dim(0) != v.dim(0)) throw DimensionError("attention needs matching, nonempty keys and values");

  const auto qp = q_ ? (*q_)(q) : q;
  const auto kp = k_ ? (*k_)(k) : k;
  const auto vp = v_ ? (*v_)(v) : v;
  const auto dk = d / config_.heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Tensor> heads;
  heads.reserve(config_.heads);
  if (weights) weights->clear();
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const auto qh = config_.heads == 1 ? qp : slice(qp, 1, h * dk, (h + 1) * dk);
    const auto kh = config_.heads == 1 ? kp : slice(kp, 1, h * dk, (h + 1) * dk);
    const auto vh = config_.heads == 1 ? vp : slice(vp, 1, h * dk, (h + 1) * dk);
    const auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), 1);
    if (weights) weights->push_back(attn);
    heads.push_back(matmul(attn, vh));
  }
  const auto merged = heads.size() == 1 ? heads.front() : concat(heads, 1);
  return out_ ? (*out_)(merged) : merged;
}

DecoderLayer::DecoderLayer(ParamStore* store, const std::string& prefix, DecoderLayerConfig config, Rng& rng)
    : config_(config) {
  const auto d = config.d_model;
  const AttentionConfig attn{d, config.heads, config.parametric};
  auto norm = [&](const std::string& name) {
    return config.parametric ? LayerNorm(*store, prefix + "." + name, d) : LayerNorm(d);
  };
  if (config.self_attention) {
    norm_self_ = norm("norm_self");
    self_.emplace(store, prefix + ".self_attn", attn, rng);
  }
  norm_cross_ = norm("norm_cross");
  norm_memory_ = norm("norm_memory");
  cross_ = MultiHeadAttention(store, prefix + ".cross_attn", attn, rng);
  if (config.parametric) {
    norm_ffn_ = norm("norm_ffn");
    ffn_.emplace(*store, prefix + ".ffn", std::vector<std::size_t>{d, config.d_ffn, d}, rng);
  }
}

Tensor DecoderLayer::operator()(const Tensor& queries, const Tensor& memory) const {
  Tensor x = queries;
  if (self_) {
    const auto h = (*norm_self_)(x);
    x = add(x, (*self_)(h, h, h));
  }
  const auto mem = norm_memory_(memory);
  x = add(x, cross_(norm_cross_(x), mem, mem));
  if (ffn_) x = add(x, (*ffn_)((*norm_ffn_)(x)));
  return x;
}

Tensor sine_position_encoding(std::size_t h, std::size_t w, std::size_t d) {
  if (d % 4 != 0) throw ConfigError("sine position encoding needs d divisible by 4", "d_model");
  const std::size_t quarter = d / 4;
  std::vector<double> v(h * w * d);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* row = v.data() + (y * w + x) * d;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[i] = std::sin(static_cast<double>(y) * freq);
        row[quarter + i] = std::cos(static_cast<double>(y) * freq);
        row[2 * quarter + i] = std::sin(static_cast<double>(x) * freq);
        row[3 * quarter + i] = std::cos(static_cast<double>(x) * freq);
      }
    }
  }
  return Tensor({h * w, d}, std::move(v));
}

}  // namespace mmformer
