#pragma once

// Multi-spectral rasters, band manifests, class labels and normalization.
// Channel order is fixed by the manifest: band i of any output corresponds to
// band i of its input unless an operation documents otherwise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "leafseg/error.hpp"

namespace leafseg {

enum class ClassLabel : std::uint8_t { Normal = 0, Chlorosis = 1, PigmentAccumulation = 2, Tipburn = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr std::uint8_t kBackground = 255;
inline constexpr std::array<ClassLabel, kNumClasses> kAllClasses = {
    ClassLabel::Normal, ClassLabel::Chlorosis, ClassLabel::PigmentAccumulation, ClassLabel::Tipburn};

inline constexpr int code(ClassLabel c) { return static_cast<int>(c); }

/// Identifier used in annotation files and CSV reports.
inline std::string_view class_key(ClassLabel c) {
  switch (c) {
    case ClassLabel::Normal: return "normal";
    case ClassLabel::Chlorosis: return "chlorosis";
    case ClassLabel::PigmentAccumulation: return "pigment_accum";
    case ClassLabel::Tipburn: return "tipburn";
  }
  return "?";
}

inline std::string_view class_title(ClassLabel c) {
  switch (c) {
    case ClassLabel::Normal: return "Normal";
    case ClassLabel::Chlorosis: return "Chlorosis";
    case ClassLabel::PigmentAccumulation: return "Pigment Accum.";
    case ClassLabel::Tipburn: return "Tipburn";
  }
  return "?";
}

struct Band {
  int index = 0;                // 1-based
  double wavelength_nm = 0.0;   // centre wavelength
  bool operator==(const Band&) const = default;
};

/// Ordered wavelength list; indices are contiguous from 1 and wavelengths
/// strictly increase.
class BandManifest {
 public:
  BandManifest() = default;
  explicit BandManifest(std::vector<Band> bands) : bands_(std::move(bands)) {
    if (bands_.empty()) throw InvalidArgument("band manifest is empty");
    for (std::size_t i = 0; i < bands_.size(); ++i) {
      if (bands_[i].index != static_cast<int>(i) + 1)
        throw InvalidArgument("band manifest indices must be contiguous from 1; entry " + std::to_string(i) +
                              " has index " + std::to_string(bands_[i].index));
      if (!(bands_[i].wavelength_nm > 0.0)) throw InvalidArgument("band wavelengths must be positive");
      if (i > 0 && !(bands_[i].wavelength_nm > bands_[i - 1].wavelength_nm))
        throw InvalidArgument("band wavelengths must be strictly increasing");
    }
  }

  static BandManifest from_wavelengths(const std::vector<double>& nm) {
    std::vector<Band> b;
    for (std::size_t i = 0; i < nm.size(); ++i) b.push_back({static_cast<int>(i) + 1, nm[i]});
    return BandManifest(std::move(b));
  }

  /// Default nine-band layout from blue through near-infrared.
  static BandManifest canonical() { return from_wavelengths({470, 530, 570, 620, 660, 700, 740, 780, 840}); }

  static BandManifest rgb() { return from_wavelengths({470, 530, 620}); }

  int count() const { return static_cast<int>(bands_.size()); }
  const std::vector<Band>& bands() const { return bands_; }
  double wavelength(int channel) const { return bands_.at(static_cast<std::size_t>(channel)).wavelength_nm; }

  /// 0-based channel of the band centred at `nm` (within half a nanometre).
  std::optional<int> channel_of(double nm) const {
    for (std::size_t i = 0; i < bands_.size(); ++i)
      if (std::abs(bands_[i].wavelength_nm - nm) <= 0.5) return static_cast<int>(i);
    return std::nullopt;
  }

  bool operator==(const BandManifest&) const = default;

  /// Sidecar text: one "<index> <wavelength_nm>" line per band.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& b : bands_) {
      os << b.index << ' ';
      if (b.wavelength_nm == std::floor(b.wavelength_nm)) os << static_cast<long long>(b.wavelength_nm);
      else os << b.wavelength_nm;
      os << '\n';
    }
    return os.str();
  }

  static BandManifest parse(std::string_view text) {
    std::istringstream is{std::string(text)};
    std::string line;
    std::vector<Band> bands;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream ls(line);
      Band b;
      std::string rest;
      if (!(ls >> b.index >> b.wavelength_nm) || (ls >> rest))
        throw FormatError("band manifest line " + std::to_string(lineno) + ": expected '<index> <wavelength_nm>'");
      bands.push_back(b);
    }
    std::sort(bands.begin(), bands.end(), [](const Band& a, const Band& b) { return a.index < b.index; });
    try {
      return BandManifest(std::move(bands));
    } catch (const InvalidArgument& e) {
      throw FormatError(std::string("band manifest: ") + e.what());
    }
  }

 private:
  std::vector<Band> bands_;
};

/// Channel-major [C, H, W] float raster.
struct Raster {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Raster() = default;
  Raster(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  const float* plane(int c) const { return data.data() + static_cast<std::size_t>(c) * plane_size(); }
  float* plane(int c) { return data.data() + static_cast<std::size_t>(c) * plane_size(); }
  bool operator==(const Raster&) const = default;
};

struct MultiSpectralImage {
  Raster pixels;
  BandManifest manifest;
  std::string sample_id;
  std::optional<int> day;
};

/// Per-pixel labels in {0,1,2,3} or kBackground.
struct SemanticMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  SemanticMask() = default;
  SemanticMask(int h, int w, std::uint8_t fill = kBackground)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const SemanticMask&) const = default;

  /// True when every code is a class or background.
  bool codes_valid() const {
    return std::all_of(labels.begin(), labels.end(),
                       [](std::uint8_t v) { return v < kNumClasses || v == kBackground; });
  }
};

/// Single-class pixel set.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1})); }
  bool operator==(const BinaryMask&) const = default;
};

/// Pixels of `mask` carrying class `c`.
inline BinaryMask class_mask(const SemanticMask& mask, ClassLabel c) {
  BinaryMask out(mask.height, mask.width);
  const auto v = static_cast<std::uint8_t>(code(c));
  for (std::size_t i = 0; i < mask.labels.size(); ++i) out.bits[i] = mask.labels[i] == v ? 1 : 0;
  return out;
}

inline constexpr int kDefaultImageSize = 640;

enum class ViolationKind { ChannelCount, BandOrder, BufferSize, SpatialSize, NonFinite, OutOfRange };

struct Violation {
  ViolationKind kind;
  std::string message;
};

/// Reports every invariant the image breaks; an empty result means valid.
inline std::vector<Violation> validate_image(const MultiSpectralImage& img, int expected_size = kDefaultImageSize) {
  std::vector<Violation> out;
  const Raster& r = img.pixels;
  if (r.channels != img.manifest.count())
    out.push_back({ViolationKind::ChannelCount, "image has " + std::to_string(r.channels) +
                                                    " channels but manifest lists " +
                                                    std::to_string(img.manifest.count()) + " bands"});
  const int bands = img.manifest.count();
  if (bands != 9 && bands != 3)
    out.push_back({ViolationKind::ChannelCount, "manifest lists " + std::to_string(bands) +
                                                    " bands; the pipeline accepts 9 or 3"});
  if (bands >= 2 && (!img.manifest.channel_of(470).has_value() || *img.manifest.channel_of(470) != 0 ||
                     !img.manifest.channel_of(530).has_value() || *img.manifest.channel_of(530) != 1))
    out.push_back({ViolationKind::BandOrder, "band 1 must be 470 nm and band 2 must be 530 nm"});
  if (r.data.size() != static_cast<std::size_t>(r.channels) * r.height * r.width) {
    out.push_back({ViolationKind::BufferSize, "pixel buffer size does not match [C, H, W]"});
    return out;
  }
  if (expected_size > 0 && (r.height != expected_size || r.width != expected_size))
    out.push_back({ViolationKind::SpatialSize, "spatial size " + std::to_string(r.height) + "x" +
                                                   std::to_string(r.width) + ", expected " +
                                                   std::to_string(expected_size) + "x" +
                                                   std::to_string(expected_size)});
  std::size_t non_finite = 0, out_of_range = 0;
  for (float v : r.data) {
    if (!std::isfinite(v)) ++non_finite;
    else if (v < 0.0f || v > 1.0f) ++out_of_range;
  }
  if (non_finite)
    out.push_back({ViolationKind::NonFinite, std::to_string(non_finite) + " non-finite pixel value(s)"});
  if (out_of_range)
    out.push_back({ViolationKind::OutOfRange, std::to_string(out_of_range) + " pixel value(s) outside [0, 1]"});
  return out;
}

struct NormalizeMode {
  enum class Kind { PerBandMinMax, GlobalScale };
  Kind kind = Kind::GlobalScale;
  double divisor = 65535.0;

  static NormalizeMode per_band_minmax() { return {Kind::PerBandMinMax, 1.0}; }
  static NormalizeMode global_scale(double divisor) { return {Kind::GlobalScale, divisor}; }
  /// Full-scale divisor of an unsigned sensor with `bits` bits.
  static NormalizeMode bit_depth(int bits) { return {Kind::GlobalScale, std::ldexp(1.0, bits) - 1.0}; }
};

struct NormalizeResult {
  MultiSpectralImage image;
  std::vector<int> degenerate_bands;  // 0-based channels with max == min
};

/// Maps raw sensor values into [0, 1]. Per-band min-max sends each band's
/// minimum to 0 and maximum to 1 (constant bands become 0 and are reported);
/// global scaling divides by `divisor` and clamps.
inline NormalizeResult normalize(const Raster& raw, const BandManifest& manifest, NormalizeMode mode,
                                 std::string sample_id = {}) {
  for (float v : raw.data)
    if (!std::isfinite(v)) throw InvalidArgument("normalize: raw raster contains non-finite values");
  if (mode.kind == NormalizeMode::Kind::GlobalScale && !(mode.divisor > 0.0))
    throw InvalidArgument("normalize: global scale divisor must be positive");
  NormalizeResult res;
  res.image.manifest = manifest;
  res.image.sample_id = std::move(sample_id);
  Raster out(raw.channels, raw.height, raw.width);
  const std::size_t n = raw.plane_size();
  for (int c = 0; c < raw.channels; ++c) {
    const float* src = raw.plane(c);
    float* dst = out.plane(c);
    if (mode.kind == NormalizeMode::Kind::PerBandMinMax) {
      if (n == 0) continue;
      const auto [lo_it, hi_it] = std::minmax_element(src, src + n);
      const double lo = *lo_it, hi = *hi_it;
      if (hi == lo) {
        std::fill_n(dst, n, 0.0f);
        res.degenerate_bands.push_back(c);
        continue;
      }
      for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>((src[i] - lo) / (hi - lo));
    } else {
      for (std::size_t i = 0; i < n; ++i)
        dst[i] = static_cast<float>(std::clamp(static_cast<double>(src[i]) / mode.divisor, 0.0, 1.0));
    }
  }
  res.image.pixels = std::move(out);
  return res;
}

/// The 620/530/470 nm planes as an R, G, B raster; values are copied unchanged.
inline Raster extract_rgb(const MultiSpectralImage& img) {
  static constexpr std::array<double, 3> kRgbNm = {620.0, 530.0, 470.0};
  Raster out(3, img.pixels.height, img.pixels.width);
  for (int i = 0; i < 3; ++i) {
    auto ch = img.manifest.channel_of(kRgbNm[static_cast<std::size_t>(i)]);
    if (!ch)
      throw InvalidArgument("extract_rgb: manifest has no " + std::to_string(static_cast<int>(kRgbNm[static_cast<std::size_t>(i)])) +
                            " nm band");
    if (*ch >= img.pixels.channels) throw InvalidArgument("extract_rgb: raster has fewer channels than manifest");
    std::copy_n(img.pixels.plane(*ch), out.plane_size(), out.plane(i));
  }
  return out;
}

/// Places the R, G, B planes of `rgb` at the 620/530/470 nm positions of a
/// three-band manifest.
inline MultiSpectralImage restack_rgb(const Raster& rgb, const BandManifest& manifest = BandManifest::rgb(),
                                      std::string sample_id = {}) {
  if (rgb.channels != 3 || manifest.count() != 3)
    throw InvalidArgument("restack_rgb: expects a 3-channel raster and a 3-band manifest");
  static constexpr std::array<double, 3> kRgbNm = {620.0, 530.0, 470.0};
  MultiSpectralImage img;
  img.manifest = manifest;
  img.sample_id = std::move(sample_id);
  img.pixels = Raster(3, rgb.height, rgb.width);
  for (int i = 0; i < 3; ++i) {
    auto ch = manifest.channel_of(kRgbNm[static_cast<std::size_t>(i)]);
    if (!ch) throw InvalidArgument("restack_rgb: manifest lacks an RGB band");
    std::copy_n(rgb.plane(i), rgb.plane_size(), img.pixels.plane(*ch));
  }
  return img;
}

/// Bilinear resize with half-pixel centres; used to bring rasters to the
/// network input size.
inline Raster resize_bilinear(const Raster& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  Raster out(src.channels, height, width);
  const double sy = static_cast<double>(src.height) / height, sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    int y0 = std::min(static_cast<int>(fy), src.height - 1);
    int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      int x0 = std::min(static_cast<int>(fx), src.width - 1);
      int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c)
        out.at(c, y, x) = static_cast<float>((1 - wy) * ((1 - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1)) +
                                             wy * ((1 - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1)));
    }
  }
  return out;
}

/// Nearest-neighbour resize for label masks.
inline SemanticMask resize_nearest(const SemanticMask& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  SemanticMask out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / width));
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

}  // namespace leafseg
