#include "mmformer/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "mmformer/errors.hpp"
#include "mmformer/rng.hpp"

namespace mmformer {

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw ConfigError("split must be 'train' or 'test', got '" + text + "'", "split");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

Tensor Mask::to_row() const {
  std::vector<double> v(pixels.begin(), pixels.end());
  return Tensor({1, height * width}, std::move(v));
}

Mask mask_union(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("mask union of differently sized masks");
  Mask out = a;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = a.pixels[i] | b.pixels[i];
  return out;
}

double iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("IoU of differently sized masks");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    inter += a.pixels[i] & b.pixels[i];
    uni += a.pixels[i] | b.pixels[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Mask resize_nearest(const Mask& mask, std::size_t height, std::size_t width) {
  Mask out(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const auto sy = std::min(mask.height - 1, (2 * y + 1) * mask.height / (2 * height));
    for (std::size_t x = 0; x < width; ++x) {
      const auto sx = std::min(mask.width - 1, (2 * x + 1) * mask.width / (2 * width));
      out.pixels[y * width + x] = mask.at(sy, sx);
    }
  }
  return out;
}

const std::vector<ShapeClass>& shape_classes() {
  static const std::vector<ShapeClass> classes{
      {0, ShapeKind::circle, "circle", {0.85, 0.20, 0.20}, 0.12, 0.00, 0.0},
      {1, ShapeKind::star, "star", {0.20, 0.85, 0.85}, 0.12, 0.10, 1.1},
      {2, ShapeKind::square, "square", {0.20, 0.75, 0.25}, 0.12, 0.10, 0.9},
      {3, ShapeKind::ring, "ring", {0.90, 0.85, 0.20}, 0.12, 0.08, 1.4},
      {4, ShapeKind::triangle, "triangle", {0.20, 0.30, 0.90}, 0.12, 0.00, 0.0},
      {5, ShapeKind::cross, "cross", {0.85, 0.25, 0.80}, 0.12, 0.00, 0.0},
      {6, ShapeKind::ellipse, "ellipse", {0.55, 0.25, 0.75}, 0.12, 0.12, 0.7},
      {7, ShapeKind::bar, "bar", {0.95, 0.55, 0.10}, 0.12, 0.00, 0.0},
  };
  return classes;
}

ClassSplit class_split(int fold) {
  if (fold < 0 || fold >= kNumFolds) throw ConfigError("fold must be in [0, 3]", "fold");
  ClassSplit s;
  for (int c = 0; c < kNumClasses; ++c) (c / 2 == fold ? s.test : s.train).push_back(c);
  return s;
}

const std::vector<int>& split_classes(const ClassSplit& classes, Split split) {
  return split == Split::train ? classes.train : classes.test;
}

Mask Scene::class_mask(int class_id) const {
  const auto h = image.dim(1), w = image.dim(2);
  Mask out(h, w);
  for (const auto& o : objects) {
    if (o.class_id == class_id) out = mask_union(out, o.mask);
  }
  return out;
}

bool Scene::operator==(const Scene& other) const {
  if (image.shape() != other.image.shape() || objects.size() != other.objects.size()) return false;
  if (!std::equal(image.data().begin(), image.data().end(), other.image.data().begin())) return false;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].class_id != other.objects[i].class_id || !(objects[i].mask == other.objects[i].mask)) return false;
  }
  return true;
}

namespace {

constexpr std::size_t kMinForcedPixels = 16;

bool inside(ShapeKind kind, double u, double v, double s) {
  const double r = std::hypot(u, v);
  switch (kind) {
    case ShapeKind::circle: return r <= s;
    case ShapeKind::square: return std::abs(u) <= 0.8 * s && std::abs(v) <= 0.8 * s;
    case ShapeKind::triangle: {
      // Equilateral, apex up in the rotated frame.
      const double y = v + 0.35 * s;
      return y <= 0.0 + 0.7 * s && y >= -0.9 * s && std::abs(u) <= (0.7 * s - y) * 0.6;
    }
    case ShapeKind::ring: return r <= s && r >= 0.45 * s;
    case ShapeKind::cross:
      return (std::abs(u) <= 0.4 * s && std::abs(v) <= s) || (std::abs(v) <= 0.4 * s && std::abs(u) <= s);
    case ShapeKind::star: {
      const double phi = std::atan2(v, u);
      return r <= s * (0.7 + 0.3 * std::cos(5.0 * phi));
    }
    case ShapeKind::bar: return std::abs(u) <= s && std::abs(v) <= 0.5 * s;
    case ShapeKind::ellipse: return (u / s) * (u / s) + (v / (0.6 * s)) * (v / (0.6 * s)) <= 1.0;
  }
  return false;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Rendered {
  Scene scene;
  bool forced_visible = true;
};

Rendered render(Rng& rng, const std::vector<int>& classes, std::size_t size, int forced_class) {
  const auto n = size;
  std::vector<double> img(3 * n * n);

  const double gray = rng.uniform(0.25, 0.7);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = gray + rng.uniform(-0.08, 0.08);
  const double gy = rng.uniform(-0.15, 0.15), gx = rng.uniform(-0.15, 0.15);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double ramp = gy * (static_cast<double>(y) / n - 0.5) + gx * (static_cast<double>(x) / n - 0.5);
      const double noise = rng.uniform(-0.06, 0.06);
      for (std::size_t c = 0; c < 3; ++c) img[(c * n + y) * n + x] = bg[c] + ramp + noise;
    }

  const std::size_t count = 1 + rng.below(4);
  Rendered out;
  const std::size_t forced_slot = forced_class >= 0 ? rng.below(count) : count;
  std::vector<Mask> masks;
  std::vector<int> ids;
  const double scale = static_cast<double>(n) / 64.0;
  for (std::size_t k = 0; k < count; ++k) {
    const int cls = k == forced_slot ? forced_class : classes[rng.below(classes.size())];
    const auto& info = shape_classes()[cls];
    const double s = rng.uniform(7.0, 13.0) * scale;
    const double cy = rng.uniform(s, static_cast<double>(n) - s);
    const double cx = rng.uniform(s, static_cast<double>(n) - s);
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::array<double, 3> color{};
    for (std::size_t c = 0; c < 3; ++c) color[c] = info.base_color[c] + rng.uniform(-info.color_jitter, info.color_jitter);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    Mask m(n, n);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
        if (!inside(info.kind, u, v, s)) continue;
        m.pixels[y * n + x] = 1;
        const double texture = 1.0 + info.stripe_amplitude * std::sin(info.stripe_frequency * u + phase);
        for (std::size_t c = 0; c < 3; ++c) img[(c * n + y) * n + x] = color[c] * texture;
        for (auto& prev : masks) prev.pixels[y * n + x] = 0;  // occlusion by z-order
      }
    masks.push_back(std::move(m));
    ids.push_back(cls);
  }

  for (auto& v : img) v = quantize(v);
  out.scene.image = Tensor({3, n, n}, std::move(img));
  for (std::size_t k = 0; k < count; ++k) {
    if (k == forced_slot && masks[k].count() < kMinForcedPixels) out.forced_visible = false;
    if (!masks[k].empty()) out.scene.objects.push_back({ids[k], std::move(masks[k])});
  }
  return out;
}

Scene generate(std::uint64_t seed, Split split, const SceneOptions& options, int forced_class) {
  if (options.image_size == 0 || options.image_size % 32 != 0) {
    throw ConfigError("image size must be a positive multiple of 32", "image_size");
  }
  const auto split_info = class_split(options.fold);
  const auto& classes = split_classes(split_info, split);
  if (forced_class >= 0 && std::find(classes.begin(), classes.end(), forced_class) == classes.end()) {
    throw ConfigError("class " + std::to_string(forced_class) + " is not in the " + to_string(split) + " split");
  }
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, split == Split::train ? "scene/train" : "scene/test", attempt));
    auto r = render(rng, classes, options.image_size, forced_class);
    std::size_t covered = 0;
    for (std::size_t p = 0; p < options.image_size * options.image_size; ++p) {
      bool any = false;
      for (const auto& o : r.scene.objects) any = any || o.mask.pixels[p];
      covered += any;
    }
    const bool has_background = covered < options.image_size * options.image_size;
    if (r.forced_visible && has_background && !r.scene.objects.empty()) return std::move(r.scene);
  }
}

}  // namespace

Scene generate_scene(std::uint64_t seed, Split split, const SceneOptions& options) {
  return generate(seed, split, options, -1);
}

Scene generate_scene(std::uint64_t seed, Split split, const SceneOptions& options, int forced_class) {
  return generate(seed, split, options, forced_class);
}

EpisodeSample sample_episode(std::uint64_t seed, Split split, std::size_t k, const SceneOptions& options) {
  if (k == 0) throw ConfigError("an episode needs at least one support", "k_shot");
  const auto classes = split_classes(class_split(options.fold), split);
  Rng rng(derive_seed(seed, "episode/class"));
  EpisodeSample ep;
  ep.class_id = classes[rng.below(classes.size())];
  for (std::size_t j = 0; j < k; ++j) {
    auto scene = generate_scene(derive_seed(seed, "episode/support", j), split, options, ep.class_id);
    ep.supports.push_back({scene.image, scene.class_mask(ep.class_id)});
  }
  auto query = generate_scene(derive_seed(seed, "episode/query"), split, options, ep.class_id);
  ep.query = query.image;
  ep.query_gt = query.class_mask(ep.class_id);
  for (const auto& o : query.objects) ep.query_objects.push_back(o.mask);
  return ep;
}

Tensor apply_to_image(const Tensor& image, const ViewTransform& t) {
  const auto ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto src = image.data();
  std::vector<double> out(src.size());
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * t.scale - 0.5 + t.offset_y, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t xo = t.flip ? w - 1 - x : x;
      const double fx =
          std::clamp((static_cast<double>(x) + 0.5) * t.scale - 0.5 + t.offset_x, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < ch; ++c) {
        const double* p = src.data() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - ax) + p[y0 * w + x1] * ax;
        const double bottom = p[y1 * w + x0] * (1 - ax) + p[y1 * w + x1] * ax;
        out[(c * h + y) * w + xo] = top * (1 - ay) + bottom * ay;
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Mask apply_to_mask(const Mask& mask, const ViewTransform& t) {
  const auto h = mask.height, w = mask.width;
  Mask out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * t.scale + t.offset_y;
    const auto sy = std::min(h - 1, static_cast<std::size_t>(std::max(0.0, std::floor(fy))));
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * t.scale + t.offset_x;
      const auto sx = std::min(w - 1, static_cast<std::size_t>(std::max(0.0, std::floor(fx))));
      out.pixels[y * w + (t.flip ? w - 1 - x : x)] = mask.at(sy, sx);
    }
  }
  return out;
}

namespace {

ViewTransform draw_transform(Rng& rng, std::size_t h, std::size_t w) {
  ViewTransform t;
  t.flip = rng.bernoulli(0.5);
  t.scale = rng.uniform(0.8, 1.0);
  t.offset_y = rng.uniform(0.0, (1.0 - t.scale) * static_cast<double>(h));
  t.offset_x = rng.uniform(0.0, (1.0 - t.scale) * static_cast<double>(w));
  return t;
}

// Draws a transform that keeps every mask in `required` nonempty.
ViewTransform draw_valid(Rng& rng, const std::vector<const Mask*>& required, std::size_t h, std::size_t w) {
  for (int tries = 0; tries < 10; ++tries) {
    auto t = draw_transform(rng, h, w);
    bool ok = true;
    for (const auto* m : required) ok = ok && !apply_to_mask(*m, t).empty();
    if (ok) return t;
  }
  return ViewTransform{};
}

}  // namespace

EpisodeSample augment(const EpisodeSample& sample, std::uint64_t seed) {
  EpisodeSample out = sample;
  for (std::size_t j = 0; j < sample.supports.size(); ++j) {
    Rng rng(derive_seed(seed, "augment/support", j));
    const auto& s = sample.supports[j];
    const auto t = draw_valid(rng, {&s.mask}, s.mask.height, s.mask.width);
    out.supports[j] = {apply_to_image(s.image, t), apply_to_mask(s.mask, t)};
  }
  Rng rng(derive_seed(seed, "augment/query"));
  const auto t = draw_valid(rng, {&sample.query_gt}, sample.query_gt.height, sample.query_gt.width);
  out.query = apply_to_image(sample.query, t);
  out.query_gt = apply_to_mask(sample.query_gt, t);
  out.query_objects.clear();
  for (const auto& m : sample.query_objects) {
    auto moved = apply_to_mask(m, t);
    if (!moved.empty()) out.query_objects.push_back(std::move(moved));
  }
  return out;
}

Scene augment(const Scene& scene, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "augment/scene"));
  std::vector<const Mask*> required;
  for (const auto& o : scene.objects) required.push_back(&o.mask);
  const auto h = scene.image.dim(1), w = scene.image.dim(2);
  // Objects may be cropped away; only a fully empty scene forces a redraw.
  ViewTransform t{};
  for (int tries = 0; tries < 10; ++tries) {
    auto candidate = draw_transform(rng, h, w);
    bool any = false;
    for (const auto* m : required) any = any || !apply_to_mask(*m, candidate).empty();
    if (any) {
      t = candidate;
      break;
    }
  }
  Scene out;
  out.image = apply_to_image(scene.image, t);
  for (const auto& o : scene.objects) {
    auto moved = apply_to_mask(o.mask, t);
    if (!moved.empty()) out.objects.push_back({o.class_id, std::move(moved)});
  }
  return out;
}

namespace {

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  const auto h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P6\n" << w << ' ' << h << "\n255\n";
  const auto d = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto v = static_cast<unsigned char>(std::lround(std::clamp(d[(c * h + y) * w + x], 0.0, 1.0) * 255.0));
        f.put(static_cast<char>(v));
      }
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  for (auto p : mask.pixels) f.put(static_cast<char>(p ? 255 : 0));
}

}  // namespace

void dump_episode(const EpisodeSample& sample, const std::filesystem::path& dir, std::uint64_t seed, Split split) {
  std::filesystem::create_directories(dir);
  for (std::size_t j = 0; j < sample.supports.size(); ++j) {
    write_ppm(dir / ("support_" + std::to_string(j) + ".ppm"), sample.supports[j].image);
    write_pgm(dir / ("support_" + std::to_string(j) + "_mask.pgm"), sample.supports[j].mask);
  }
  write_ppm(dir / "query.ppm", sample.query);
  write_pgm(dir / "query_mask.pgm", sample.query_gt);
  nlohmann::json meta{{"class_id", sample.class_id},
                      {"class_name", shape_classes()[sample.class_id].name},
                      {"seed", seed},
                      {"split", to_string(split)},
                      {"k", sample.supports.size()},
                      {"image_size", sample.query.dim(1)}};
  std::ofstream f(dir / "meta.json");
  if (!f) throw IoError("cannot write " + (dir / "meta.json").string());
  f << meta.dump(2) << '\n';
}

}  // namespace mmformer
