#include "mmformer/encoder.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "mmformer/errors.hpp"
#include "mmformer/ops.hpp"
#include "mmformer/rng.hpp"

namespace mmformer {

const Tensor& FeaturePyramid::level(int level) const {
  switch (level) {
    case 2: return f2;
    case 3: return f3;
    case 4: return f4;
    case 5: return f5;
  }
  throw DimensionError("pyramid level " + std::to_string(level) + " does not exist");
}

Tensor level_tokens(const Tensor& level) {
  if (level.rank() != 3) throw DimensionError("feature level must be [d x h x w], got " + shape_str(level.shape()));
  return transpose(reshape(level, {level.dim(0), level.dim(1) * level.dim(2)}));
}

Tensor tokens_to_level(const Tensor& tokens, std::size_t h, std::size_t w) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w) {
    throw DimensionError("tokens " + shape_str(tokens.shape()) + " do not form a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

namespace {

// 3x3 convolution, stride 2, zero padding 1, followed by ReLU, as one GEMM
// over an im2col matrix with rows ordered (input channel, ky, kx).
std::vector<double> conv_stride2_relu(const std::vector<double>& in, std::size_t cin, std::size_t h, std::size_t w,
                                      const Tensor& weight, const Tensor& bias, std::size_t cout) {
  const std::size_t oh = h / 2, ow = w / 2, positions = oh * ow, taps = cin * 9;
  std::vector<double> cols(taps * positions, 0.0);
  for (std::size_t i = 0; i < cin; ++i) {
    const double* src = in.data() + i * h * w;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + ((i * 3 + ky) * 3 + kx) * positions;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(2 * y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          const double* srow = src + static_cast<std::size_t>(sy) * w;
          double* crow = row + y * ow;
          // kx == 0 reads column 2x-1, which is padding for x == 0.
          for (std::size_t x = kx == 0 ? 1 : 0; x < ow; ++x) crow[x] = srow[2 * x + kx - 1];
        }
      }
    }
  }
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto idx = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  std::vector<double> out(cout * positions);
  Eigen::Map<RowMatrix> result(out.data(), idx(cout), idx(positions));
  result.noalias() = Eigen::Map<const RowMatrix>(weight.data().data(), idx(cout), idx(taps)) *
                     Eigen::Map<const RowMatrix>(cols.data(), idx(taps), idx(positions));
  const auto bd = bias.data();
  for (std::size_t o = 0; o < cout; ++o) {
    double* plane = out.data() + o * positions;
    for (std::size_t p = 0; p < positions; ++p) plane[p] = std::max(plane[p] + bd[o], 0.0);
  }
  return out;
}

}  // namespace

Encoder::Encoder(ParamStore& store, const std::string& prefix, std::uint64_t seed, std::size_t width)
    : seed_(seed), width_(width) {
  if (width == 0) throw ConfigError("encoder width must be positive", "d_model");
  store.freeze(prefix);
  Rng rng(derive_seed(seed, "encoder"));
  std::size_t cin = 3;
  for (int s = 0; s < kStages; ++s) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * 9));
    std::vector<double> w(width * cin * 9);
    for (auto& v : w) v = rng.normal() * std_dev;
    const auto name = prefix + ".stage" + std::to_string(s + 1);
    weights_[s] = store.create(name + ".weight", Tensor({width, cin, 3, 3}, std::move(w)));
    biases_[s] = store.create(name + ".bias", Tensor::zeros({width}));
    cin = width;
  }
}

FeaturePyramid Encoder::encode(const Tensor& image, bool require_grad) const {
  if (require_grad) throw ContractError("the encoder is frozen and cannot produce gradients");
  return encode(image);
}

FeaturePyramid Encoder::encode(const Tensor& image) const {
  if (width_ == 0) throw ContractError("encoder used before construction");
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("encoder expects a [3 x H x W] image, got " + shape_str(image.shape()));
  }
  std::size_t h = image.dim(1), w = image.dim(2);
  if (h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0) {
    throw ConfigError("image size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 32",
                      "image_size");
  }
  std::vector<double> act(image.data().begin(), image.data().end());
  for (auto& v : act) v = 2.0 * v - 1.0;
  std::size_t cin = 3;
  FeaturePyramid out;
  for (int s = 0; s < kStages; ++s) {
    act = conv_stride2_relu(act, cin, h, w, weights_[s], biases_[s], width_);
    h /= 2;
    w /= 2;
    cin = width_;
    if (s >= 1) {
      Tensor level({width_, h, w}, act);
      switch (s) {
        case 1: out.f2 = std::move(level); break;
        case 2: out.f3 = std::move(level); break;
        case 3: out.f4 = std::move(level); break;
        case 4: out.f5 = std::move(level); break;
      }
    }
  }
  return out;
}

}  // namespace mmformer
