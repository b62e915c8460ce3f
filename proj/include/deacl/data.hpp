#pragma once

// Datasets (CIFAR-10 binary records and a synthetic shape benchmark),
// augmentation policies, two-view generation and deterministic batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "models.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

class LabelAccessError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline thread_local int label_guard_depth = 0;
}

/// While alive, any read of ground-truth labels on this thread throws.
/// Training stages that must stay label-free hold one for their whole body.
class LabelGuard {
 public:
  LabelGuard() { ++detail::label_guard_depth; }
  ~LabelGuard() { --detail::label_guard_depth; }
  LabelGuard(const LabelGuard&) = delete;
  LabelGuard& operator=(const LabelGuard&) = delete;

  static bool active() { return detail::label_guard_depth > 0; }

  /// Temporarily lifts the guard for evaluation callbacks (probes).
  class Lift {
   public:
    Lift() : saved_(detail::label_guard_depth) { detail::label_guard_depth = 0; }
    ~Lift() { detail::label_guard_depth = saved_; }
    Lift(const Lift&) = delete;
    Lift& operator=(const Lift&) = delete;

   private:
    int saved_;
  };
};

/// Single CHW image with values in [0,1].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<Real> pixels;

  Real& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  Real at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  std::size_t size() const { return pixels.size(); }
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes, std::string split)
      : channels_(channels), height_(height), width_(width), classes_(classes), split_(std::move(split)) {}

  void push_back(std::span<const Real> image, int label, std::size_t sample_index) {
    if (image.size() != image_size()) throw ShapeError("dataset: image size mismatch");
    for (Real v : image)
      if (!(v >= 0 && v <= 1)) throw Error("dataset: pixel outside [0,1]");
    if (label < 0 || static_cast<std::size_t>(label) >= classes_) throw Error("dataset: label out of range");
    images_.insert(images_.end(), image.begin(), image.end());
    labels_.push_back(label);
    index_.push_back(sample_index);
  }

  std::size_t size() const { return index_.size(); }
  bool empty() const { return index_.empty(); }
  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t image_size() const { return channels_ * height_ * width_; }
  std::size_t classes() const { return classes_; }
  const std::string& split() const { return split_; }

  std::span<const Real> image(std::size_t pos) const {
    return std::span<const Real>(images_).subspan(pos * image_size(), image_size());
  }
  Image image_copy(std::size_t pos) const {
    auto px = image(pos);
    return Image{channels_, height_, width_, {px.begin(), px.end()}};
  }

  /// Stable per-sample identity (survives shuffling; keys pseudo-targets).
  std::size_t sample_index(std::size_t pos) const { return index_.at(pos); }
  const std::vector<std::size_t>& sample_indices() const { return index_; }

  int label(std::size_t pos) const {
    guard_check();
    return labels_.at(pos);
  }
  const std::vector<int>& labels() const {
    guard_check();
    return labels_;
  }

  /// Subset by positions, keeping sample indices.
  Dataset subset(std::span<const std::size_t> positions) const {
    Dataset out(channels_, height_, width_, classes_, split_);
    for (auto p : positions) {
      auto px = image(p);
      out.images_.insert(out.images_.end(), px.begin(), px.end());
      out.labels_.push_back(labels_.at(p));
      out.index_.push_back(index_.at(p));
    }
    return out;
  }

 private:
  static void guard_check() {
    if (LabelGuard::active()) throw LabelAccessError("ground-truth labels read inside a label-free stage");
  }

  std::size_t channels_ = 0, height_ = 0, width_ = 0, classes_ = 0;
  std::string split_;
  std::vector<Real> images_;
  std::vector<int> labels_;
  std::vector<std::size_t> index_;
};

/// Stacks the given positions into a [B,C,H,W] tensor.
inline Tensor stack_images(const Dataset& ds, std::span<const std::size_t> positions) {
  std::vector<Real> v;
  v.reserve(positions.size() * ds.image_size());
  for (auto p : positions) {
    auto px = ds.image(p);
    v.insert(v.end(), px.begin(), px.end());
  }
  return Tensor({positions.size(), ds.channels(), ds.height(), ds.width()}, std::move(v));
}

inline Tensor stack_images(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const auto& f = images.front();
  std::vector<Real> v;
  v.reserve(images.size() * f.size());
  for (const auto& im : images) {
    if (im.channels != f.channels || im.height != f.height || im.width != f.width)
      throw ShapeError("stack_images: mixed image shapes");
    v.insert(v.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor({images.size(), f.channels, f.height, f.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Binary record files

/// Reads fixed-size records (1 label byte + C*H*W pixel bytes, channel planes
/// in row-major order). The defaults are the CIFAR-10 layout.
inline Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t channels = 3, std::size_t height = 32,
                                 std::size_t width = 32, std::size_t classes = 10,
                                 std::size_t first_index = 0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t pixels = channels * height * width;
  const std::size_t record = 1 + pixels;
  if (bytes.size() % record != 0)
    throw IoError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                  std::to_string(record));
  Dataset ds(channels, height, width, classes, path.filename().string());
  std::vector<Real> img(pixels);
  for (std::size_t r = 0; r < bytes.size() / record; ++r) {
    const unsigned char* rec = bytes.data() + r * record;
    if (rec[0] >= classes) throw IoError(path.string() + ": label byte " + std::to_string(rec[0]) + " out of range");
    for (std::size_t i = 0; i < pixels; ++i) img[i] = static_cast<Real>(rec[1 + i]) / Real(255);
    ds.push_back(img, rec[0], first_index + r);
  }
  return ds;
}

/// Writes a dataset in the same record layout (pixels rounded to bytes).
inline void write_cifar_binary(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t p = 0; p < ds.size(); ++p) {
    os.put(static_cast<char>(ds.label(p)));
    for (Real v : ds.image(p)) os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic shape benchmark

struct SyntheticSpec {
  std::size_t n_per_class = 64;
  std::size_t classes = 4;
  std::uint64_t seed = 1;
  std::size_t channels = 1;
  std::size_t size = 16;
  double contrast = 0.4;   // shape intensity above background
  double noise = 0.08;     // per-pixel gaussian noise std
  std::string split = "train";
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"n_per_class", s.n_per_class}, {"classes", s.classes}, {"seed", s.seed},   {"channels", s.channels},
       {"size", s.size},               {"contrast", s.contrast}, {"noise", s.noise}, {"split", s.split}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.n_per_class = j.value("n_per_class", s.n_per_class);
  s.classes = j.value("classes", s.classes);
  s.seed = j.value("seed", s.seed);
  s.channels = j.value("channels", s.channels);
  s.size = j.value("size", s.size);
  s.contrast = j.value("contrast", s.contrast);
  s.noise = j.value("noise", s.noise);
  s.split = j.value("split", s.split);
}

enum class ShapeKind { HBar, VBar, Cross, Disc, Ring, Square };
inline constexpr std::size_t kShapeKinds = 6;

namespace detail {

// Soft coverage in [0,1] of pixel (x,y) by the shape centred at (cx,cy) with radius r.
inline double shape_coverage(ShapeKind kind, double x, double y, double cx, double cy, double r) {
  const double dx = x - cx, dy = y - cy;
  const auto soft = [](double signed_dist) { return std::clamp(0.5 - signed_dist, 0.0, 1.0); };
  const double half_thick = std::max(0.75, r * 0.3);
  switch (kind) {
    case ShapeKind::HBar:
      return std::min(soft(std::abs(dy) - half_thick), soft(std::abs(dx) - r));
    case ShapeKind::VBar:
      return std::min(soft(std::abs(dx) - half_thick), soft(std::abs(dy) - r));
    case ShapeKind::Cross:
      return std::max(std::min(soft(std::abs(dy) - half_thick), soft(std::abs(dx) - r)),
                      std::min(soft(std::abs(dx) - half_thick), soft(std::abs(dy) - r)));
    case ShapeKind::Disc:
      return soft(std::hypot(dx, dy) - r);
    case ShapeKind::Ring:
      return soft(std::abs(std::hypot(dx, dy) - r * 0.8) - half_thick);
    case ShapeKind::Square:
      return soft(std::abs(std::max(std::abs(dx), std::abs(dy)) - r * 0.8) - half_thick);
  }
  return 0.0;
}

}  // namespace detail

/// K shape classes (bars, crosses, discs, rings, squares) at jittered
/// positions and sizes on noisy backgrounds. Deterministic per seed; samples
/// are interleaved by class.
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.classes > kShapeKinds)
    throw ConfigError("synthetic: only " + std::to_string(kShapeKinds) + " shape kinds available");
  if (spec.classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (spec.size < 8) throw ConfigError("synthetic: image size must be >= 8");
  Dataset ds(spec.channels, spec.size, spec.size, spec.classes, spec.split);
  Rng rng(splitmix64(spec.seed ^ fnv1a64("synthetic/" + spec.split)));
  const double s = static_cast<double>(spec.size);
  std::vector<Real> img(spec.channels * spec.size * spec.size);
  std::size_t next = 0;
  for (std::size_t n = 0; n < spec.n_per_class; ++n)
    for (std::size_t k = 0; k < spec.classes; ++k) {
      const auto kind = static_cast<ShapeKind>(k);
      const double jitter = s / 8.0;
      const double cx = (s - 1) / 2 + rng.uniform(-jitter, jitter);
      const double cy = (s - 1) / 2 + rng.uniform(-jitter, jitter);
      const double r = s * 0.25 * rng.uniform(0.8, 1.2);
      const double amp = spec.contrast * rng.uniform(0.8, 1.2);
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const double bg = rng.uniform(0.3, 0.6);
        const double tint = spec.channels > 1 ? rng.uniform(0.7, 1.0) : 1.0;
        for (std::size_t y = 0; y < spec.size; ++y)
          for (std::size_t x = 0; x < spec.size; ++x) {
            const double cov = detail::shape_coverage(kind, static_cast<double>(x), static_cast<double>(y), cx, cy, r);
            const double v = bg + amp * tint * cov + spec.noise * rng.normal();
            img[(c * spec.size + y) * spec.size + x] = static_cast<Real>(std::clamp(v, 0.0, 1.0));
          }
      }
      ds.push_back(img, static_cast<int>(k), next++);
    }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugKind { None, Weak, Strong };

inline std::string to_string(AugKind k) {
  switch (k) {
    case AugKind::None: return "none";
    case AugKind::Weak: return "weak";
    case AugKind::Strong: return "strong";
  }
  return "?";
}

inline AugKind aug_kind_from_string(std::string_view s) {
  if (s == "none") return AugKind::None;
  if (s == "weak") return AugKind::Weak;
  if (s == "strong") return AugKind::Strong;
  throw ConfigError("unknown augmentation kind '" + std::string(s) + "'");
}

struct StrongAugParams {
  double crop_scale_min = 0.2, crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0, crop_ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 0.8, brightness = 0.4, contrast = 0.4, saturation = 0.4;
  double grayscale_p = 0.2;
  double blur_p = 0.5, blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  double solarize_p = 0.1, solarize_threshold = 0.5;
};

struct WeakAugParams {
  std::size_t pad = 4;
  double flip_p = 0.5;
};

struct AugmentationPolicy {
  AugKind kind = AugKind::None;
  StrongAugParams strong;
  WeakAugParams weak;
  std::string stream = "augment";

  static AugmentationPolicy of(AugKind k, std::string stream = "augment") {
    AugmentationPolicy p;
    p.kind = k;
    p.stream = std::move(stream);
    return p;
  }
};

inline void to_json(nlohmann::json& j, const AugmentationPolicy& p) {
  j = {{"kind", to_string(p.kind)},
       {"stream", p.stream},
       {"strong",
        {{"crop_scale", {p.strong.crop_scale_min, p.strong.crop_scale_max}},
         {"flip_p", p.strong.flip_p},
         {"jitter_p", p.strong.jitter_p},
         {"brightness", p.strong.brightness},
         {"contrast", p.strong.contrast},
         {"saturation", p.strong.saturation},
         {"grayscale_p", p.strong.grayscale_p},
         {"blur_p", p.strong.blur_p},
         {"blur_sigma", {p.strong.blur_sigma_min, p.strong.blur_sigma_max}},
         {"solarize_p", p.strong.solarize_p},
         {"solarize_threshold", p.strong.solarize_threshold}}},
       {"weak", {{"pad", p.weak.pad}, {"flip_p", p.weak.flip_p}}}};
}

inline void from_json(const nlohmann::json& j, AugmentationPolicy& p) {
  if (j.is_string()) {
    p.kind = aug_kind_from_string(j.get<std::string>());
    return;
  }
  if (j.contains("kind")) p.kind = aug_kind_from_string(j.at("kind").get<std::string>());
  p.stream = j.value("stream", p.stream);
  if (j.contains("strong")) {
    const auto& s = j.at("strong");
    if (s.contains("crop_scale")) {
      p.strong.crop_scale_min = s.at("crop_scale").at(0);
      p.strong.crop_scale_max = s.at("crop_scale").at(1);
    }
    p.strong.flip_p = s.value("flip_p", p.strong.flip_p);
    p.strong.jitter_p = s.value("jitter_p", p.strong.jitter_p);
    p.strong.brightness = s.value("brightness", p.strong.brightness);
    p.strong.contrast = s.value("contrast", p.strong.contrast);
    p.strong.saturation = s.value("saturation", p.strong.saturation);
    p.strong.grayscale_p = s.value("grayscale_p", p.strong.grayscale_p);
    p.strong.blur_p = s.value("blur_p", p.strong.blur_p);
    if (s.contains("blur_sigma")) {
      p.strong.blur_sigma_min = s.at("blur_sigma").at(0);
      p.strong.blur_sigma_max = s.at("blur_sigma").at(1);
    }
    p.strong.solarize_p = s.value("solarize_p", p.strong.solarize_p);
    p.strong.solarize_threshold = s.value("solarize_threshold", p.strong.solarize_threshold);
  }
  if (j.contains("weak")) {
    p.weak.pad = j.at("weak").value("pad", p.weak.pad);
    p.weak.flip_p = j.at("weak").value("flip_p", p.weak.flip_p);
  }
}

namespace aug {

inline void clamp01(Image& im) {
  for (auto& v : im.pixels) v = std::clamp(v, Real{0}, Real{1});
}

inline Image hflip(const Image& im) {
  Image out = im;
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) out.at(c, y, x) = im.at(c, y, im.width - 1 - x);
  return out;
}

/// Inverts pixels strictly above the threshold.
inline Image solarize(const Image& im, double threshold) {
  Image out = im;
  for (auto& v : out.pixels)
    if (v > threshold) v = Real{1} - v;
  return out;
}

inline std::vector<double> gaussian_kernel(double sigma, std::size_t max_radius) {
  const auto radius = std::min<std::size_t>(max_radius, static_cast<std::size_t>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    total += (k[i] = std::exp(-d * d / (2 * sigma * sigma)));
  }
  for (auto& w : k) w /= total;
  return k;
}

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto nn = static_cast<std::ptrdiff_t>(n);
  if (n == 1) return 0;
  while (i < 0 || i >= nn) i = i < 0 ? -i : 2 * (nn - 1) - i;
  return static_cast<std::size_t>(i);
}

/// Separable gaussian blur with reflected borders.
inline Image gaussian_blur(const Image& im, double sigma) {
  const auto k = gaussian_kernel(sigma, std::max(im.height, im.width) - 1);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  Image tmp = im, out = im;
  for (std::size_t c = 0; c < im.channels; ++c) {
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) {
        double acc = 0;
        for (std::ptrdiff_t d = -r; d <= r; ++d)
          acc += k[d + r] * im.at(c, y, reflect_index(static_cast<std::ptrdiff_t>(x) + d, im.width));
        tmp.at(c, y, x) = static_cast<Real>(acc);
      }
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) {
        double acc = 0;
        for (std::ptrdiff_t d = -r; d <= r; ++d)
          acc += k[d + r] * tmp.at(c, reflect_index(static_cast<std::ptrdiff_t>(y) + d, im.height), x);
        out.at(c, y, x) = static_cast<Real>(acc);
      }
  }
  return out;
}

inline std::vector<Real> luminance(const Image& im) {
  std::vector<Real> g(im.height * im.width);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (im.channels >= 3)
      g[i] = Real(0.299) * im.pixels[i] + Real(0.587) * im.pixels[g.size() + i] +
             Real(0.114) * im.pixels[2 * g.size() + i];
    else
      g[i] = im.pixels[i];
  }
  return g;
}

inline Image grayscale(const Image& im) {
  Image out = im;
  const auto g = luminance(im);
  for (std::size_t c = 0; c < im.channels; ++c)
    std::copy(g.begin(), g.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(c * g.size()));
  return out;
}

/// Brightness, contrast, saturation with factors drawn from [1-s, 1+s], in that order.
inline Image color_jitter(const Image& im, const StrongAugParams& p, Rng& rng) {
  Image out = im;
  const double fb = rng.uniform(1 - p.brightness, 1 + p.brightness);
  const double fc = rng.uniform(1 - p.contrast, 1 + p.contrast);
  const double fs = rng.uniform(1 - p.saturation, 1 + p.saturation);
  for (auto& v : out.pixels) v = static_cast<Real>(v * fb);
  clamp01(out);
  const auto g = luminance(out);
  double m = 0;
  for (Real v : g) m += v;
  m /= static_cast<double>(g.size());
  for (auto& v : out.pixels) v = static_cast<Real>((v - m) * fc + m);
  clamp01(out);
  if (out.channels >= 3) {
    const auto gs = luminance(out);
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t i = 0; i < gs.size(); ++i) {
        auto& v = out.pixels[c * gs.size() + i];
        v = static_cast<Real>(gs[i] + (v - gs[i]) * fs);
      }
    clamp01(out);
  }
  return out;
}

/// Bilinear sample at continuous source coordinates (half-pixel centres).
inline Real bilinear(const Image& im, std::size_t c, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(im.height - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(im.width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const auto y1 = std::min(y0 + 1, im.height - 1), x1 = std::min(x0 + 1, im.width - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  const double top = im.at(c, y0, x0) * (1 - fx) + im.at(c, y0, x1) * fx;
  const double bot = im.at(c, y1, x0) * (1 - fx) + im.at(c, y1, x1) * fx;
  return static_cast<Real>(top * (1 - fy) + bot * fy);
}

/// Crop of random area fraction and aspect ratio, resized back to the input size.
inline Image random_resized_crop(const Image& im, const StrongAugParams& p, Rng& rng) {
  const double H = static_cast<double>(im.height), W = static_cast<double>(im.width);
  double ch = H, cw = W, top = 0, left = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = H * W * rng.uniform(p.crop_scale_min, p.crop_scale_max);
    const double ratio = std::exp(rng.uniform(std::log(p.crop_ratio_min), std::log(p.crop_ratio_max)));
    const double w = std::round(std::sqrt(area * ratio)), h = std::round(std::sqrt(area / ratio));
    if (w >= 1 && h >= 1 && w <= W && h <= H) {
      ch = h;
      cw = w;
      top = static_cast<double>(rng.below(static_cast<std::size_t>(H - h) + 1));
      left = static_cast<double>(rng.below(static_cast<std::size_t>(W - w) + 1));
      break;
    }
  }
  Image out = im;
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) {
        const double sy = top + (static_cast<double>(y) + 0.5) * ch / H - 0.5;
        const double sx = left + (static_cast<double>(x) + 0.5) * cw / W - 0.5;
        out.at(c, y, x) = bilinear(im, c, sy, sx);
      }
  return out;
}

/// Reflect-pad by `pad` then take a random crop of the original size.
inline Image pad_crop(const Image& im, std::size_t pad, Rng& rng) {
  const auto oy = rng.below(2 * pad + 1), ox = rng.below(2 * pad + 1);
  Image out = im;
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x) {
        const auto sy = reflect_index(static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad), im.height);
        const auto sx = reflect_index(static_cast<std::ptrdiff_t>(x + ox) - static_cast<std::ptrdiff_t>(pad), im.width);
        out.at(c, y, x) = im.at(c, sy, sx);
      }
  return out;
}

}  // namespace aug

/// Applies one random draw of the policy. Output keeps the shape and stays in [0,1].
inline Image augment(const AugmentationPolicy& policy, const Image& image, Rng& rng) {
  switch (policy.kind) {
    case AugKind::None:
      return image;
    case AugKind::Weak: {
      Image out = aug::pad_crop(image, policy.weak.pad, rng);
      if (rng.bernoulli(policy.weak.flip_p)) out = aug::hflip(out);
      aug::clamp01(out);
      return out;
    }
    case AugKind::Strong: {
      const auto& p = policy.strong;
      Image out = aug::random_resized_crop(image, p, rng);
      if (rng.bernoulli(p.flip_p)) out = aug::hflip(out);
      if (rng.bernoulli(p.jitter_p)) out = aug::color_jitter(out, p, rng);
      if (rng.bernoulli(p.grayscale_p)) out = aug::grayscale(out);
      if (rng.bernoulli(p.blur_p)) out = aug::gaussian_blur(out, rng.uniform(p.blur_sigma_min, p.blur_sigma_max));
      if (rng.bernoulli(p.solarize_p)) out = aug::solarize(out, p.solarize_threshold);
      aug::clamp01(out);
      return out;
    }
  }
  return image;
}

/// Augmented batch for the given positions; each (epoch, sample index, view)
/// draws from its own substream so results do not depend on batch layout.
inline Tensor augment_batch(const AugmentationPolicy& policy, const Dataset& ds, std::span<const std::size_t> positions,
                            std::uint64_t epoch, std::uint64_t view, const SeedStreams& streams) {
  if (policy.kind == AugKind::None) return stack_images(ds, positions);
  std::vector<Image> out;
  out.reserve(positions.size());
  for (auto p : positions) {
    Rng rng = streams.substream(policy.stream, {epoch, ds.sample_index(p), view});
    out.push_back(augment(policy, ds.image_copy(p), rng));
  }
  return stack_images(out);
}

/// Two independent augmentation draws per sample.
inline std::pair<Tensor, Tensor> make_views(const AugmentationPolicy& policy, const Dataset& ds,
                                            std::span<const std::size_t> positions, std::uint64_t epoch,
                                            const SeedStreams& streams) {
  return {augment_batch(policy, ds, positions, epoch, 0, streams),
          augment_batch(policy, ds, positions, epoch, 1, streams)};
}

/// Shuffled mini-batches of dataset positions for one epoch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t epoch,
                                                           const SeedStreams& streams, bool drop_last,
                                                           std::string_view stream = "data_order") {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = streams.substream(stream, {epoch});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < n; s += batch_size) {
    const auto e = std::min(n, s + batch_size);
    if (drop_last && e - s < batch_size && !batches.empty()) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return batches;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
