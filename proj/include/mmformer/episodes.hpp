#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmformer/tensor.hpp"

namespace mmformer {

enum class Split { train, test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

// Binary raster, row-major, values in {0, 1}.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}

  std::size_t count() const;
  bool empty() const { return count() == 0; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  // As a [1 x h*w] tensor of 0/1 values.
  Tensor to_row() const;
  bool operator==(const Mask&) const = default;
};

Mask mask_union(const Mask& a, const Mask& b);
// |a & b| / |a | b|; 1 when both are empty, 0 when exactly one is.
double iou(const Mask& a, const Mask& b);
// Nearest-neighbour resampling (binarity preserved).
Mask resize_nearest(const Mask& mask, std::size_t height, std::size_t width);

enum class ShapeKind { circle, square, triangle, ring, cross, star, bar, ellipse };

struct ShapeClass {
  int id = 0;
  ShapeKind kind = ShapeKind::circle;
  std::string name;
  std::array<double, 3> base_color{};
  double color_jitter = 0.0;
  double stripe_amplitude = 0.0;
  double stripe_frequency = 0.0;
};

constexpr int kNumClasses = 8;
constexpr int kNumFolds = 4;

const std::vector<ShapeClass>& shape_classes();

// Fold f holds classes {2f, 2f+1} out for testing; the other six train.
struct ClassSplit {
  std::vector<int> train;
  std::vector<int> test;
};
ClassSplit class_split(int fold);
const std::vector<int>& split_classes(const ClassSplit& classes, Split split);

struct SceneObject {
  int class_id = 0;
  Mask mask;
};

struct Scene {
  Tensor image;  // [3 x H x W], values in [0, 1]
  std::vector<SceneObject> objects;

  Mask class_mask(int class_id) const;
  bool operator==(const Scene& other) const;
};

struct SceneOptions {
  std::size_t image_size = 64;
  int fold = 0;
};

// Deterministic scene with 1-4 non-overlapping objects drawn from the split's classes.
Scene generate_scene(std::uint64_t seed, Split split, const SceneOptions& options = {});
// As above but guaranteeing at least one visible object of `forced_class`.
Scene generate_scene(std::uint64_t seed, Split split, const SceneOptions& options, int forced_class);

struct SupportExample {
  Tensor image;
  Mask mask;
};

struct EpisodeSample {
  int class_id = 0;
  std::vector<SupportExample> supports;
  Tensor query;
  Mask query_gt;
  // Instance masks of every object in the query scene (proposal supervision).
  std::vector<Mask> query_objects;
};

// Prefix-stable: support j depends only on (seed, split, j), so a k=5 episode
// begins with the k=1 episode of the same seed.
EpisodeSample sample_episode(std::uint64_t seed, Split split, std::size_t k, const SceneOptions& options = {});

// Geometric transform shared by an image and its masks.
struct ViewTransform {
  bool flip = false;
  double scale = 1.0;  // crop side relative to the frame
  double offset_y = 0.0;
  double offset_x = 0.0;
};

Tensor apply_to_image(const Tensor& image, const ViewTransform& t);
Mask apply_to_mask(const Mask& mask, const ViewTransform& t);

// Random flip (p = 0.5) and crop-and-resize (scale in [0.8, 1]) drawn independently per image.
// A draw that empties a support mask or the query mask is redrawn, up to 10 tries, after
// which the image is left untouched.
EpisodeSample augment(const EpisodeSample& sample, std::uint64_t seed);
Scene augment(const Scene& scene, std::uint64_t seed);

// Writes support/query rasters (PPM/PGM) and meta.json into `dir`.
void dump_episode(const EpisodeSample& sample, const std::filesystem::path& dir, std::uint64_t seed, Split split);

}  // namespace mmformer
