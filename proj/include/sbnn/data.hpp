#pragma once

// Dataset ingestion (IDX, CIFAR binary, synthetic), two-view augmentation and
// batch iteration.
//
// Pre-training iterates over `UnlabeledImages`, which carries no labels at
// all; labels are only reachable through `Dataset` for evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "sbnn/tensor.hpp"

namespace sbnn {

enum class DataFormat : std::uint8_t { idx, cifar_bin, synthetic };

inline DataFormat parse_format(const std::string& s) {
  if (s == "idx") return DataFormat::idx;
  if (s == "cifar" || s == "cifar-bin") return DataFormat::cifar_bin;
  if (s == "synth" || s == "synthetic") return DataFormat::synthetic;
  throw ConfigError("unknown dataset format '" + s + "'");
}

struct ImageShape {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  bool operator==(const ImageShape&) const = default;
};

/// A single C×H×W image with values in [0, 1].
struct Image {
  ImageShape shape;
  std::vector<float> px;

  float& at(std::size_t c, std::size_t y, std::size_t x) { return px[(c * shape.h + y) * shape.w + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return px[(c * shape.h + y) * shape.w + x]; }
};

/// Images without labels; the only view pre-training gets.
struct UnlabeledImages {
  std::shared_ptr<const std::vector<float>> pixels;
  ImageShape shape;
  std::size_t count = 0;
  static constexpr bool has_labels = false;

  Image image(std::size_t i) const {
    Image im{shape, {}};
    im.px.assign(pixels->begin() + static_cast<std::ptrdiff_t>(i * shape.size()),
                 pixels->begin() + static_cast<std::ptrdiff_t>((i + 1) * shape.size()));
    return im;
  }
};

struct Dataset {
  DataFormat format = DataFormat::synthetic;
  ImageShape shape;
  std::size_t count = 0;
  std::shared_ptr<const std::vector<float>> pixels;
  std::shared_ptr<const std::vector<std::int64_t>> labels;  // null when unlabeled
  std::size_t num_classes = 0;

  bool has_labels() const { return labels != nullptr; }
  Image image(std::size_t i) const { return unlabeled().image(i); }
  std::int64_t label(std::size_t i) const {
    if (!labels) throw ConfigError("dataset has no labels");
    return (*labels)[i];
  }
  UnlabeledImages unlabeled() const { return {pixels, shape, count}; }

  /// Rows [begin, end) as a new dataset sharing nothing with this one.
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > count) throw DimensionError("dataset slice out of range");
    Dataset d = *this;
    d.count = end - begin;
    d.pixels = std::make_shared<const std::vector<float>>(
        pixels->begin() + static_cast<std::ptrdiff_t>(begin * shape.size()),
        pixels->begin() + static_cast<std::ptrdiff_t>(end * shape.size()));
    if (labels)
      d.labels = std::make_shared<const std::vector<std::int64_t>>(labels->begin() + static_cast<std::ptrdiff_t>(begin),
                                                                   labels->begin() + static_cast<std::ptrdiff_t>(end));
    return d;
  }
};

// ------------------------------------------------------------------ file formats

namespace detail {
inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& what) {
  if (off + 4 > b.size()) throw FormatError(what + ": truncated header", b.size());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}
}  // namespace detail

/// Parses an IDX unsigned-byte file: magic 0x00000801 (labels, N) or
/// 0x00000803 (images, N×H×W). Big-endian dimensions.
struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

inline IdxFile parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& what = "idx") {
  const std::uint32_t magic = detail::read_be32(bytes, 0, what);
  if ((magic >> 8) != 0x08 || ((magic & 0xff) != 1 && (magic & 0xff) != 3))
    throw FormatError(what + ": bad magic", 0);
  IdxFile f;
  const std::size_t rank = magic & 0xff;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    f.dims.push_back(detail::read_be32(bytes, 4 + 4 * i, what));
    total *= f.dims.back();
  }
  const std::size_t off = 4 + 4 * rank;
  if (bytes.size() < off + total) throw FormatError(what + ": truncated payload", bytes.size());
  if (bytes.size() > off + total) throw FormatError(what + ": trailing bytes", off + total);
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return f;
}

/// IDX images; labels are read from the sibling file obtained by replacing
/// "images" with "labels" (and "idx3" with "idx1") in the file name when it exists.
inline Dataset load_idx(const std::string& path) {
  const auto img = parse_idx(detail::read_file(path), path);
  if (img.dims.size() != 3) throw FormatError(path + ": expected an N×H×W image file", 0);
  Dataset d;
  d.format = DataFormat::idx;
  d.shape = {1, img.dims[1], img.dims[2]};
  d.count = img.dims[0];
  auto px = std::make_shared<std::vector<float>>(img.payload.size());
  for (std::size_t i = 0; i < px->size(); ++i) (*px)[i] = static_cast<float>(img.payload[i]) / 255.0f;
  d.pixels = px;
  std::string lp = path;
  if (auto pos = lp.rfind("images"); pos != std::string::npos) {
    lp.replace(pos, 6, "labels");
    if (auto k = lp.rfind("idx3"); !std::filesystem::exists(lp) && k != std::string::npos) lp.replace(k, 4, "idx1");
    if (std::filesystem::exists(lp)) {
      const auto lab = parse_idx(detail::read_file(lp), lp);
      if (lab.dims.size() != 1 || lab.dims[0] != d.count) throw FormatError(lp + ": label count mismatch", 4);
      auto l = std::make_shared<std::vector<std::int64_t>>(lab.payload.begin(), lab.payload.end());
      d.num_classes = static_cast<std::size_t>(*std::max_element(l->begin(), l->end()) + 1);
      d.labels = l;
    }
  }
  return d;
}

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

/// CIFAR-10 binary records: one label byte then 3072 pixel bytes (R, G, B planes).
inline Dataset parse_cifar(const std::vector<std::uint8_t>& bytes, const std::string& what = "cifar") {
  if (bytes.empty() || bytes.size() % kCifarRecord)
    throw FormatError(what + ": size is not a whole number of 3073-byte records",
                      bytes.size() - bytes.size() % kCifarRecord);
  Dataset d;
  d.format = DataFormat::cifar_bin;
  d.shape = {3, 32, 32};
  d.count = bytes.size() / kCifarRecord;
  auto px = std::make_shared<std::vector<float>>(d.count * 3072);
  auto lab = std::make_shared<std::vector<std::int64_t>>(d.count);
  for (std::size_t r = 0; r < d.count; ++r) {
    const std::size_t off = r * kCifarRecord;
    if (bytes[off] > 9) throw FormatError(what + ": label byte out of range", off);
    (*lab)[r] = bytes[off];
    for (std::size_t i = 0; i < 3072; ++i) (*px)[r * 3072 + i] = static_cast<float>(bytes[off + 1 + i]) / 255.0f;
  }
  d.pixels = px;
  d.labels = lab;
  d.num_classes = 10;
  return d;
}

/// A single .bin file, or the *.bin files of a directory in name order. With
/// `prefix`, only files whose name starts with it ("data_batch", "test_batch").
inline Dataset load_cifar(const std::string& path, const std::string& prefix = "") {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) return parse_cifar(detail::read_file(path), path);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.path().extension() == ".bin" && e.path().filename().string().rfind(prefix, 0) == 0)
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no " + prefix + "*.bin files in '" + path + "'");
  std::vector<std::uint8_t> all;
  for (const auto& f : files) {
    auto b = detail::read_file(f.string());
    if (b.size() % kCifarRecord) (void)parse_cifar(b, f.string());
    all.insert(all.end(), b.begin(), b.end());
  }
  return parse_cifar(all, path);
}

// ---------------------------------------------------------------- synthetic data

struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::size_t count = 1000;
  std::size_t classes = 10;
  ImageShape shape{3, 32, 32};
};

/// Procedural labelled images. Each class is a crosshatch of two gratings at
/// ±θ inside a disc or ring mask; instances vary in position, phase, colour,
/// contrast, background and noise. Classes are mirror-symmetric, so flips and
/// crops preserve the label as they do on natural images.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.count == 0) throw ConfigError("synthetic dataset must be non-empty");
  std::mt19937_64 proto_rng(0x5eedc1a55ULL ^ spec.classes);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Proto {
    double theta, freq, radius, ring;
  };
  // class c: angle index c/2 over [0, π/2), disc or ring by parity
  const std::size_t angles = (spec.classes + 1) / 2;
  std::vector<Proto> protos(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const double theta = std::numbers::pi / 2 * (static_cast<double>(c / 2) + 0.5) / static_cast<double>(angles);
    protos[c] = {theta, 0.35 + 0.4 * u(proto_rng), 0.28 + 0.12 * u(proto_rng), c % 2 ? 1.0 : 0.0};
  }
  const auto [C, H, W] = spec.shape;
  Dataset d;
  d.format = DataFormat::synthetic;
  d.shape = spec.shape;
  d.count = spec.count;
  d.num_classes = spec.classes;
  auto px = std::make_shared<std::vector<float>>(spec.count * spec.shape.size());
  auto lab = std::make_shared<std::vector<std::int64_t>>(spec.count);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t cls = i % spec.classes;
    (*lab)[i] = static_cast<std::int64_t>(cls);
    const auto& p = protos[cls];
    const double cx = 0.3 + 0.4 * u(rng), cy = 0.3 + 0.4 * u(rng);
    const double ph1 = 2 * std::numbers::pi * u(rng), ph2 = 2 * std::numbers::pi * u(rng);
    const double contrast = 0.25 + 0.25 * u(rng);
    std::array<double, 3> fg{}, bg{};
    for (auto& v : fg) v = 0.3 + 0.7 * u(rng);
    for (auto& v : bg) v = 0.2 + 0.6 * u(rng);
    const double gx = (u(rng) - 0.5) * 0.4, gy = (u(rng) - 0.5) * 0.4;
    const double jitter = 0.15 * (u(rng) - 0.5);
    const double c1 = std::cos(p.theta + jitter), s1 = std::sin(p.theta + jitter);
    const double c2 = std::cos(p.theta + jitter), s2 = -std::sin(p.theta + jitter);
    float* out = px->data() + i * spec.shape.size();
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        const double r = std::hypot(fx - cx, fy - cy);
        double mask = 1.0 / (1.0 + std::exp((r - p.radius) * 30.0));
        if (p.ring > 0) mask *= 1.0 / (1.0 + std::exp((p.radius * 0.45 - r) * 30.0));
        const double px_ = static_cast<double>(x), py_ = static_cast<double>(y);
        const double g1 = std::sin(p.freq * (c1 * px_ + s1 * py_) * 2.0 + ph1);
        const double g2 = std::sin(p.freq * (c2 * px_ + s2 * py_) * 2.0 + ph2);
        const double pattern = 0.5 + 0.5 * contrast * (g1 + g2);
        const double back = 0.5 + gx * (fx - 0.5) + gy * (fy - 0.5);
        for (std::size_t ch = 0; ch < C; ++ch) {
          const double col_f = C == 3 ? fg[ch] : fg[0];
          const double col_b = C == 3 ? bg[ch] : bg[0];
          double v = mask * pattern * col_f + (1.0 - mask) * back * col_b + 0.05 * noise(rng);
          out[(ch * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
  }
  d.pixels = px;
  d.labels = lab;
  return d;
}

inline Dataset load_dataset(const std::string& path, DataFormat format, const SyntheticSpec& synth = {}) {
  switch (format) {
    case DataFormat::idx: return load_idx(path);
    case DataFormat::cifar_bin: return load_cifar(path);
    case DataFormat::synthetic: return make_synthetic(synth);
  }
  throw ConfigError("unsupported dataset format");
}

/// Per-channel mean and standard deviation over the whole dataset.
struct Normalization {
  std::vector<float> mean, std;

  void apply(std::span<float> chw, const ImageShape& s) const {
    const std::size_t hw = s.h * s.w;
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < hw; ++i) chw[c * hw + i] = (chw[c * hw + i] - mean[c]) / std[c];
  }
};

inline Normalization compute_normalization(const UnlabeledImages& d) {
  Normalization n;
  const std::size_t hw = d.shape.h * d.shape.w;
  for (std::size_t c = 0; c < d.shape.c; ++c) {
    double s = 0, q = 0;
    for (std::size_t i = 0; i < d.count; ++i)
      for (std::size_t k = 0; k < hw; ++k) {
        const double v = (*d.pixels)[i * d.shape.size() + c * hw + k];
        s += v;
        q += v * v;
      }
    const double m = s / static_cast<double>(d.count * hw);
    const double var = std::max(q / static_cast<double>(d.count * hw) - m * m, 1e-12);
    n.mean.push_back(static_cast<float>(m));
    n.std.push_back(static_cast<float>(std::sqrt(var)));
  }
  return n;
}

inline Normalization compute_normalization(const Dataset& d) { return compute_normalization(d.unlabeled()); }

// --------------------------------------------------------------- augmentation

enum class AugVariant : std::uint8_t { vanilla, lite };

inline AugVariant parse_aug(const std::string& s) {
  if (s == "lite") return AugVariant::lite;
  if (s == "vanilla") return AugVariant::vanilla;
  throw ConfigError("unknown augmentation variant '" + s + "'");
}

struct AugConfig {
  AugVariant variant = AugVariant::lite;
  double crop_scale_min = 0.2, crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0, crop_ratio_max = 4.0 / 3.0;
  double hflip_p = 0.5;
  double jitter_p = 0.6;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1;
  double grayscale_p = 0.2;
  double blur_p = 0.2;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  std::size_t blur_kernel = 3;

  static AugConfig lite() { return AugConfig{}; }
  static AugConfig vanilla() {
    AugConfig c;
    c.variant = AugVariant::vanilla;
    c.jitter_p = 0.8;
    c.blur_p = 0.5;
    return c;
  }
  static AugConfig of(AugVariant v) { return v == AugVariant::lite ? lite() : vanilla(); }
  /// Every transform off and the crop pinned to the full image.
  static AugConfig identity() {
    AugConfig c;
    c.crop_scale_min = c.crop_scale_max = 1.0;
    c.crop_ratio_min = c.crop_ratio_max = 1.0;
    c.hflip_p = c.jitter_p = c.grayscale_p = c.blur_p = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {hflip_p, jitter_p, grayscale_p, blur_p})
      if (p < 0.0 || p > 1.0) throw ConfigError("augmentation probability outside [0, 1]");
    if (crop_scale_min <= 0 || crop_scale_min > crop_scale_max || crop_scale_max > 1.0)
      throw ConfigError("bad crop scale range");
  }
};

/// Which stochastic transforms fired for one view.
struct AugRecord {
  bool flipped = false, jittered = false, grayscaled = false, blurred = false;
};

inline void hflip(Image& im) {
  for (std::size_t c = 0; c < im.shape.c; ++c)
    for (std::size_t y = 0; y < im.shape.h; ++y) {
      float* row = &im.px[(c * im.shape.h + y) * im.shape.w];
      std::reverse(row, row + im.shape.w);
    }
}

/// Bilinear resample of the crop [top, top+ch) × [left, left+cw) to out_h × out_w
/// (half-pixel centres).
inline Image resized_crop(const Image& im, std::size_t top, std::size_t left, std::size_t ch, std::size_t cw,
                          std::size_t out_h, std::size_t out_w) {
  Image out{{im.shape.c, out_h, out_w}, std::vector<float>(im.shape.c * out_h * out_w)};
  const double sy = static_cast<double>(ch) / static_cast<double>(out_h);
  const double sx = static_cast<double>(cw) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(ch - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, ch - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(cw - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, cw - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < im.shape.c; ++c) {
        const double v00 = im.at(c, top + y0, left + x0), v01 = im.at(c, top + y0, left + x1);
        const double v10 = im.at(c, top + y1, left + x0), v11 = im.at(c, top + y1, left + x1);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

/// Random area/aspect crop resized back to the input size. Up to 10 draws,
/// then a centre crop clamped to the aspect range.
inline Image random_resized_crop(const Image& im, std::mt19937_64& rng, double scale_min, double scale_max,
                                 double ratio_min, double ratio_max) {
  const double H = static_cast<double>(im.shape.h), W = static_cast<double>(im.shape.w);
  std::uniform_real_distribution<double> us(scale_min, scale_max);
  std::uniform_real_distribution<double> ur(std::log(ratio_min), std::log(ratio_max));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = H * W * us(rng);
    const double ratio = std::exp(ur(rng));
    const auto cw = static_cast<long>(std::lround(std::sqrt(area * ratio)));
    const auto ch = static_cast<long>(std::lround(std::sqrt(area / ratio)));
    if (cw > 0 && ch > 0 && cw <= static_cast<long>(W) && ch <= static_cast<long>(H)) {
      std::uniform_int_distribution<long> ty(0, static_cast<long>(H) - ch), tx(0, static_cast<long>(W) - cw);
      const auto top = static_cast<std::size_t>(ty(rng)), left = static_cast<std::size_t>(tx(rng));
      return resized_crop(im, top, left, static_cast<std::size_t>(ch), static_cast<std::size_t>(cw), im.shape.h,
                          im.shape.w);
    }
  }
  std::size_t cw = im.shape.w, ch = im.shape.h;
  const double in_ratio = W / H;
  if (in_ratio < ratio_min)
    ch = static_cast<std::size_t>(std::lround(W / ratio_min));
  else if (in_ratio > ratio_max)
    cw = static_cast<std::size_t>(std::lround(H * ratio_max));
  return resized_crop(im, (im.shape.h - ch) / 2, (im.shape.w - cw) / 2, ch, cw, im.shape.h, im.shape.w);
}

namespace detail {
inline float gray(const Image& im, std::size_t y, std::size_t x) {
  if (im.shape.c != 3) return im.at(0, y, x);
  return 0.299f * im.at(0, y, x) + 0.587f * im.at(1, y, x) + 0.114f * im.at(2, y, x);
}

inline void blend(Image& im, const std::vector<float>& other, float factor) {
  for (std::size_t i = 0; i < im.px.size(); ++i)
    im.px[i] = std::clamp(factor * im.px[i] + (1.0f - factor) * other[i], 0.0f, 1.0f);
}

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0f;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0f);
  else if (mx == g)
    h = (b - r) / d + 2.0f;
  else
    h = (r - g) / d + 4.0f;
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = h * 6.0f;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}
}  // namespace detail

/// Brightness, contrast, saturation and hue perturbations in random order.
/// A zero strength disables that component.
inline void color_jitter(Image& im, std::mt19937_64& rng, double brightness, double contrast, double saturation,
                         double hue) {
  std::array<int, 4> order{0, 1, 2, 3};
  std::shuffle(order.begin(), order.end(), rng);
  auto factor = [&](double s) {
    std::uniform_real_distribution<double> d(std::max(0.0, 1.0 - s), 1.0 + s);
    return static_cast<float>(d(rng));
  };
  const std::size_t hw = im.shape.h * im.shape.w;
  for (int op : order) {
    switch (op) {
      case 0:
        if (brightness > 0) detail::blend(im, std::vector<float>(im.px.size(), 0.0f), factor(brightness));
        break;
      case 1:
        if (contrast > 0) {
          double m = 0;
          for (std::size_t y = 0; y < im.shape.h; ++y)
            for (std::size_t x = 0; x < im.shape.w; ++x) m += detail::gray(im, y, x);
          detail::blend(im, std::vector<float>(im.px.size(), static_cast<float>(m / static_cast<double>(hw))),
                        factor(contrast));
        }
        break;
      case 2:
        if (saturation > 0 && im.shape.c == 3) {
          std::vector<float> g(im.px.size());
          for (std::size_t y = 0; y < im.shape.h; ++y)
            for (std::size_t x = 0; x < im.shape.w; ++x)
              for (std::size_t c = 0; c < 3; ++c) g[(c * im.shape.h + y) * im.shape.w + x] = detail::gray(im, y, x);
          detail::blend(im, g, factor(saturation));
        }
        break;
      case 3:
        if (hue > 0 && im.shape.c == 3) {
          std::uniform_real_distribution<double> d(-hue, hue);
          const float shift = static_cast<float>(d(rng));
          for (std::size_t i = 0; i < hw; ++i) {
            float h, s, v;
            detail::rgb_to_hsv(im.px[i], im.px[hw + i], im.px[2 * hw + i], h, s, v);
            h = std::fmod(h + shift + 1.0f, 1.0f);
            detail::hsv_to_rgb(h, s, v, im.px[i], im.px[hw + i], im.px[2 * hw + i]);
          }
        }
        break;
    }
  }
}

inline void to_grayscale(Image& im) {
  if (im.shape.c != 3) return;
  for (std::size_t y = 0; y < im.shape.h; ++y)
    for (std::size_t x = 0; x < im.shape.w; ++x) {
      const float g = detail::gray(im, y, x);
      for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = g;
    }
}

/// Separable Gaussian blur with a renormalised odd kernel and reflected borders.
inline void gaussian_blur(Image& im, double sigma, std::size_t kernel = 3) {
  if (kernel % 2 == 0 || kernel == 0) throw ConfigError("blur kernel size must be odd");
  const long r = static_cast<long>(kernel / 2);
  std::vector<double> k(kernel);
  double s = 0;
  for (long i = -r; i <= r; ++i) s += (k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2 * sigma * sigma)));
  for (auto& v : k) v /= s;
  const long H = static_cast<long>(im.shape.h), W = static_cast<long>(im.shape.w);
  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  std::vector<float> tmp(im.px.size());
  for (std::size_t c = 0; c < im.shape.c; ++c) {
    const std::size_t base = c * im.shape.h * im.shape.w;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double a = 0;
        for (long i = -r; i <= r; ++i) a += k[static_cast<std::size_t>(i + r)] * im.px[base + y * W + reflect(x + i, W)];
        tmp[base + y * W + x] = static_cast<float>(a);
      }
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double a = 0;
        for (long i = -r; i <= r; ++i) a += k[static_cast<std::size_t>(i + r)] * tmp[base + reflect(y + i, H) * W + x];
        im.px[base + y * W + x] = static_cast<float>(a);
      }
  }
}

/// One stochastic view: crop, flip, jitter, grayscale, blur, clamp.
inline Image augment(const Image& src, const AugConfig& cfg, std::mt19937_64& rng, AugRecord* rec = nullptr) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image im = random_resized_crop(src, rng, cfg.crop_scale_min, cfg.crop_scale_max, cfg.crop_ratio_min,
                                 cfg.crop_ratio_max);
  AugRecord r;
  if ((r.flipped = u(rng) < cfg.hflip_p)) hflip(im);
  if ((r.jittered = u(rng) < cfg.jitter_p)) color_jitter(im, rng, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue);
  if ((r.grayscaled = u(rng) < cfg.grayscale_p)) to_grayscale(im);
  if ((r.blurred = u(rng) < cfg.blur_p)) {
    std::uniform_real_distribution<double> sd(cfg.blur_sigma_min, cfg.blur_sigma_max);
    gaussian_blur(im, sd(rng), cfg.blur_kernel);
  }
  for (auto& v : im.px) v = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
  if (rec) *rec = r;
  return im;
}

struct ViewPair {
  Image x1, x2;
};

inline ViewPair two_views(const Image& src, const AugConfig& cfg, std::mt19937_64& rng,
                          AugRecord* r1 = nullptr, AugRecord* r2 = nullptr) {
  Image a = augment(src, cfg, rng, r1);
  Image b = augment(src, cfg, rng, r2);
  return {std::move(a), std::move(b)};
}

// -------------------------------------------------------------------- iteration

/// splitmix64 finaliser over (seed, epoch, index).
inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ epoch) ^ index);
}

/// Sample order of an epoch: a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(sample_seed(seed, epoch, ~std::uint64_t{0}));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

/// A pre-training batch: two augmented views and nothing else.
struct UnlabeledBatch {
  Tensor x1, x2;
};

template <typename B>
concept CarriesLabels = requires(B b) { b.labels; };
static_assert(!CarriesLabels<UnlabeledBatch>, "pre-training batches must not expose labels");

/// Two-view loader for self-supervised training. The augmented sample for
/// (seed, epoch, index) does not depend on iteration order.
class PretrainLoader {
 public:
  PretrainLoader(UnlabeledImages images, AugConfig cfg, std::size_t batch, std::uint64_t seed, Normalization norm)
      : images_(std::move(images)), cfg_(cfg), batch_(batch), seed_(seed), norm_(std::move(norm)) {
    static_assert(!UnlabeledImages::has_labels);
    cfg_.validate();
    if (batch_ < 2) throw ConfigError("pre-training batch size must be at least 2");
    if (images_.count < batch_) throw ConfigError("dataset smaller than one batch");
  }

  std::size_t batches_per_epoch() const { return images_.count / batch_; }

  /// Views of one sample, before normalisation.
  ViewPair views(std::uint64_t epoch, std::size_t index) const {
    std::mt19937_64 rng(sample_seed(seed_, epoch, index));
    return two_views(images_.image(index), cfg_, rng);
  }

  /// Batch `b` of `epoch` (incomplete trailing batch dropped).
  UnlabeledBatch batch(std::uint64_t epoch, std::size_t b) const {
    if (order_epoch_ != epoch || order_.empty()) {
      order_ = epoch_order(images_.count, seed_, epoch);
      order_epoch_ = epoch;
    }
    const auto& s = images_.shape;
    std::vector<float> a(batch_ * s.size()), c(batch_ * s.size());
    for (std::size_t i = 0; i < batch_; ++i) {
      auto v = views(epoch, order_[b * batch_ + i]);
      norm_.apply(v.x1.px, s);
      norm_.apply(v.x2.px, s);
      std::copy(v.x1.px.begin(), v.x1.px.end(), a.begin() + static_cast<std::ptrdiff_t>(i * s.size()));
      std::copy(v.x2.px.begin(), v.x2.px.end(), c.begin() + static_cast<std::ptrdiff_t>(i * s.size()));
    }
    return {Tensor(Shape{batch_, s.c, s.h, s.w}, std::move(a)), Tensor(Shape{batch_, s.c, s.h, s.w}, std::move(c))};
  }

 private:
  UnlabeledImages images_;
  AugConfig cfg_;
  std::size_t batch_;
  std::uint64_t seed_;
  Normalization norm_;
  mutable std::vector<std::size_t> order_;
  mutable std::uint64_t order_epoch_ = ~std::uint64_t{0};
};

struct LabeledBatch {
  Tensor x;
  std::vector<std::int64_t> labels;
};

/// Normalised images [begin, end) with labels, no augmentation.
inline LabeledBatch labeled_batch(const Dataset& d, const std::vector<std::size_t>& index, std::size_t begin,
                                  std::size_t end, const Normalization& norm) {
  const auto& s = d.shape;
  std::vector<float> x((end - begin) * s.size());
  LabeledBatch out;
  for (std::size_t i = begin; i < end; ++i) {
    auto im = d.image(index[i]);
    norm.apply(im.px, s);
    std::copy(im.px.begin(), im.px.end(), x.begin() + static_cast<std::ptrdiff_t>((i - begin) * s.size()));
    out.labels.push_back(d.label(index[i]));
  }
  out.x = Tensor(Shape{end - begin, s.c, s.h, s.w}, std::move(x));
  return out;
}

}  // namespace sbnn
