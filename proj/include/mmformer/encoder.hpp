#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "mmformer/nn.hpp"
#include "mmformer/tensor.hpp"

namespace mmformer {

// Backbone feature maps at strides 4, 8, 16 and 32, each [d x h x w].
struct FeaturePyramid {
  Tensor f2, f3, f4, f5;

  // level in {2, 3, 4, 5}
  const Tensor& level(int level) const;
  std::size_t channels() const { return f2.dim(0); }
};

// Level viewed as a token matrix [h*w x d] (one row per spatial position).
Tensor level_tokens(const Tensor& level);
// Inverse of level_tokens for a [h*w x d] matrix.
Tensor tokens_to_level(const Tensor& tokens, std::size_t h, std::size_t w);

// Frozen stand-in backbone: five 3x3 stride-2 convolution + ReLU stages with
// He-normal weights drawn from `seed`. Stages 2..5 emit F2..F5.
class Encoder {
 public:
  static constexpr int kStages = 5;

  Encoder() = default;
  // Registers its weights under `prefix` in `store` and freezes that subtree.
  Encoder(ParamStore& store, const std::string& prefix, std::uint64_t seed, std::size_t width);

  // image: [3 x H x W] with H, W divisible by 32.
  FeaturePyramid encode(const Tensor& image) const;
  // The encoder never records a graph; asking for gradients is a contract error.
  FeaturePyramid encode(const Tensor& image, bool require_grad) const;

  std::uint64_t seed() const { return seed_; }
  std::size_t width() const { return width_; }

 private:
  std::uint64_t seed_ = 0;
  std::size_t width_ = 0;
  std::array<Tensor, kStages> weights_;
  std::array<Tensor, kStages> biases_;
};

}  // namespace mmformer
