#pragma once

// Synthetic multi-spectral plates with exact ground truth.
//
// A plate is a dark matte background with a few thalli (smooth harmonic
// blobs of Normal tissue). Chlorosis and pigment lesions are disjoint blobs
// strictly inside a thallus; tipburn lesions are crescents cut from the
// thallus margin. Normal tissue also carries "pale" patches that share the
// chlorotic shift in the visible bands but keep the healthy NIR plateau, so
// the two can only be told apart with the NIR bands.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "leafseg/annotation.hpp"
#include "leafseg/error.hpp"
#include "leafseg/io/image_io.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::synth {

struct SpectralSignature {
  ClassLabel cls = ClassLabel::Normal;
  std::vector<double> mean_reflectance;
  std::vector<double> noise_sd;
};

/// Per-class signatures plus the background and pale-patch terms.
struct Signatures {
  std::array<SpectralSignature, kNumClasses> classes;
  double background = 0.02;
  double background_sd = 0.005;
  std::vector<double> pale_shift;  // added to Normal inside pale patches
  double chlorosis_rgb_contrast = 0.4;
  double nir_gap = 0.25;

  const SpectralSignature& operator[](ClassLabel c) const { return classes[static_cast<std::size_t>(code(c))]; }
};

inline constexpr double kDefaultRgbContrast = 0.4;

/// Hand-designed reflectance profiles for the canonical nine bands.
/// Chlorosis = Normal shifted up by contrast*gap in the visible bands and down
/// by gap on the NIR plateau.
inline Signatures default_signatures(const BandManifest& manifest,
                                     double chlorosis_rgb_contrast = kDefaultRgbContrast) {
  if (!(manifest == BandManifest::canonical()))
    throw InvalidArgument("default signatures are defined for the canonical 9-band manifest only");
  if (!(chlorosis_rgb_contrast >= 0.0 && chlorosis_rgb_contrast <= 1.0))
    throw InvalidArgument("chlorosis_rgb_contrast must lie in [0, 1]");
  //                                 470   530   570   620   660   700   740   780   840
  const std::vector<double> normal = {0.06, 0.22, 0.16, 0.08, 0.06, 0.20, 0.45, 0.55, 0.58};
  const std::vector<double> pigment = {0.07, 0.07, 0.07, 0.13, 0.11, 0.20, 0.40, 0.48, 0.50};
  const std::vector<double> tipburn = {0.05, 0.06, 0.06, 0.06, 0.06, 0.07, 0.09, 0.10, 0.10};
  const std::vector<double> visible_weight = {0.5, 1.0, 1.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.0};
  const std::vector<double> nir_weight = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 1.0, 1.0};

  Signatures s;
  s.chlorosis_rgb_contrast = chlorosis_rgb_contrast;
  s.pale_shift.resize(9);
  std::vector<double> chlorosis(9);
  for (int b = 0; b < 9; ++b) {
    s.pale_shift[b] = chlorosis_rgb_contrast * s.nir_gap * visible_weight[b];
    chlorosis[b] = normal[b] + s.pale_shift[b] - s.nir_gap * nir_weight[b];
  }
  const std::vector<double> sd(9, 0.01);
  s.classes[0] = {ClassLabel::Normal, normal, sd};
  s.classes[1] = {ClassLabel::Chlorosis, chlorosis, sd};
  s.classes[2] = {ClassLabel::PigmentAccumulation, pigment, sd};
  s.classes[3] = {ClassLabel::Tipburn, tipburn, sd};
  return s;
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct DefectSpec {
  ClassLabel cls = ClassLabel::Chlorosis;
  Range count;      // inclusive integer range
  Range blob_area;  // pixels
};

struct PlateSpec {
  int size = kDefaultImageSize;
  Range n_thalli{2, 4};
  Range thallus_radius{70, 110};
  std::vector<DefectSpec> defects;
  Range pale_patches{1, 4};
  Range pale_area{150, 900};
  int day = 17;  // defect count and area scale with day / 17
  std::uint64_t rng_seed = 0;

  /// Full-size plates matching the 640x640 camera frames.
  static PlateSpec full_scale() {
    PlateSpec s;
    s.defects = {{ClassLabel::Chlorosis, {1, 4}, {150, 900}},
                 {ClassLabel::PigmentAccumulation, {1, 3}, {120, 700}},
                 {ClassLabel::Tipburn, {1, 3}, {150, 700}}};
    return s;
  }

  /// Small plates for CPU-budget experiments.
  static PlateSpec desk_scale(int size = 128) {
    const double k = size / 128.0;
    PlateSpec s;
    s.size = size;
    s.n_thalli = {1, 2};
    s.thallus_radius = {26 * k, 38 * k};
    s.defects = {{ClassLabel::Chlorosis, {1, 3}, {40 * k * k, 140 * k * k}},
                 {ClassLabel::PigmentAccumulation, {1, 2}, {40 * k * k, 120 * k * k}},
                 {ClassLabel::Tipburn, {1, 2}, {40 * k * k, 120 * k * k}}};
    s.pale_patches = {1, 3};
    s.pale_area = {40 * k * k, 140 * k * k};
    return s;
  }
};

struct Plate {
  MultiSpectralImage image;
  SemanticMask mask;
  AnnotationSet annotation;
  BinaryMask pale;       // Normal pixels carrying the visible-band shift
  int dropped_defects = 0;  // lesions that found no free spot
};

namespace detail {

inline constexpr int kReferenceDay = 17;

/// Harmonically perturbed circle r(t) = R (1 + sum a_k cos(k t + phi_k)).
struct Blob {
  double cx = 0, cy = 0, radius = 0;
  std::array<double, 3> amp{};
  std::array<double, 3> phase{};

  double r(double t) const {
    double f = 1.0;
    for (int k = 0; k < 3; ++k) f += amp[k] * std::cos((k + 2) * t + phase[k]);
    return radius * f;
  }
  double r_min() const { return radius * (1.0 - amp[0] - amp[1] - amp[2]); }
  double r_max() const { return radius * (1.0 + amp[0] + amp[1] + amp[2]); }

  std::vector<Point> polygon(int vertices) const {
    std::vector<Point> pts(vertices);
    for (int i = 0; i < vertices; ++i) {
      const double t = 2.0 * std::numbers::pi * i / vertices;
      pts[i] = {cx + r(t) * std::cos(t), cy + r(t) * std::sin(t)};
    }
    return pts;
  }
};

template <typename Rng>
double uniform(Rng& rng, Range r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

template <typename Rng>
int uniform_count(Rng& rng, Range r) {
  const int lo = static_cast<int>(std::lround(r.lo)), hi = static_cast<int>(std::lround(r.hi));
  return std::uniform_int_distribution<int>(lo, std::max(lo, hi))(rng);
}

template <typename Rng>
Blob random_blob(Rng& rng, double radius, double max_amp) {
  Blob b;
  b.radius = radius;
  for (int k = 0; k < 3; ++k) {
    b.amp[k] = std::uniform_real_distribution<double>(0.0, max_amp / (k + 1))(rng);
    b.phase[k] = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  }
  return b;
}

inline double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

inline bool inside(const std::vector<Point>& poly, Point p) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

/// True when the disc (c, r) does not touch the polygon.
inline bool disc_clear_of(const std::vector<Point>& poly, Point c, double r) {
  if (inside(poly, c)) return false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
    if (segment_distance(c, poly[j], poly[i]) <= r) return false;
  return true;
}

/// Crescent hugging the thallus margin between angles t0 -/+ half_width.
inline std::vector<Point> crescent(const Blob& thallus, double t0, double half_width, double depth, int steps) {
  std::vector<Point> pts;
  for (int i = 0; i <= steps; ++i) {
    const double t = t0 - half_width + 2.0 * half_width * i / steps;
    const double r = thallus.r(t);
    pts.push_back({thallus.cx + r * std::cos(t), thallus.cy + r * std::sin(t)});
  }
  for (int i = steps - 1; i >= 1; --i) {
    const double t = t0 - half_width + 2.0 * half_width * i / steps;
    const double u = (t - t0) / half_width;
    const double r = thallus.r(t) - depth * (1.0 - u * u);
    pts.push_back({thallus.cx + r * std::cos(t), thallus.cy + r * std::sin(t)});
  }
  return pts;
}

}  // namespace detail

/// Renders one plate. Deterministic in `spec.rng_seed`.
inline Plate gen_plate(const PlateSpec& spec, const Signatures& sig, const std::string& sample_id = "plate") {
  using namespace detail;
  if (spec.size < 16) throw InvalidArgument("plate size must be at least 16");
  if (spec.thallus_radius.lo <= 0 || spec.thallus_radius.hi < spec.thallus_radius.lo)
    throw InvalidArgument("thallus radius range must be positive and ordered");
  if (2 * spec.thallus_radius.hi * 1.25 + 4 > spec.size) throw InvalidArgument("thalli do not fit within the frame");
  if (spec.n_thalli.lo < 1 || spec.day < 0) throw InvalidArgument("plate needs at least one thallus and day >= 0");

  std::mt19937_64 rng(spec.rng_seed);
  const int S = spec.size;
  const double day_factor = static_cast<double>(spec.day) / kReferenceDay;
  constexpr double kThallusAmp = 0.12;

  // Thalli, placed without overlap.
  std::vector<Blob> thalli;
  const int n_thalli = uniform_count(rng, spec.n_thalli);
  for (int i = 0, tries = 0; i < n_thalli && tries < 500; ++tries) {
    Blob b = random_blob(rng, uniform(rng, spec.thallus_radius), kThallusAmp);
    const double margin = b.r_max() + 2;
    b.cx = std::uniform_real_distribution<double>(margin, S - margin)(rng);
    b.cy = std::uniform_real_distribution<double>(margin, S - margin)(rng);
    const bool clear = std::all_of(thalli.begin(), thalli.end(), [&](const Blob& o) {
      return std::hypot(o.cx - b.cx, o.cy - b.cy) > o.r_max() + b.r_max() + 4;
    });
    if (!clear) continue;
    thalli.push_back(b);
    ++i;
  }
  const int thallus_vertices = std::max(32, static_cast<int>(spec.thallus_radius.hi / 2));

  AnnotationSet ann{sample_id, S, S, {}, 0};
  for (const auto& t : thalli) ann.polygons.push_back({ClassLabel::Normal, t.polygon(thallus_vertices)});

  Plate plate;
  struct Disc {
    Point c;
    double r;
  };
  std::vector<Disc> taken;      // lesions and pale patches
  std::vector<Disc> tip_discs;  // spacing between crescents
  std::vector<std::vector<Point>> crescents;

  auto max_thallus_radius = [&] {
    double m = 0;
    for (const auto& t : thalli) m = std::max(m, t.r_min());
    return m;
  };

  // Places a blob of the given area wholly inside some thallus, clear of all
  // other lesions and patches. Returns an empty polygon when no spot is found.
  auto place_blob = [&](double area) -> std::vector<Point> {
    Blob b = random_blob(rng, std::sqrt(area / std::numbers::pi), 0.2);
    if (b.r_max() + 1.0 > 0.9 * max_thallus_radius())
      throw InvalidArgument("infeasible plate: lesion of area " + std::to_string(area) +
                            " px does not fit inside a thallus");
    for (int tries = 0; tries < 300; ++tries) {
      const Blob& host = thalli[std::uniform_int_distribution<std::size_t>(0, thalli.size() - 1)(rng)];
      const double reach = host.r_min() - b.r_max() - 1.0;
      if (reach <= 0) continue;
      const double rho = reach * std::sqrt(std::uniform_real_distribution<double>(0, 1)(rng));
      const double ang = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);
      const Point c{host.cx + rho * std::cos(ang), host.cy + rho * std::sin(ang)};
      const double r = b.r_max() + 1.5;
      bool ok = std::all_of(taken.begin(), taken.end(),
                            [&](const Disc& d) { return std::hypot(d.c.x - c.x, d.c.y - c.y) > d.r + r; });
      for (const auto& cr : crescents) ok = ok && disc_clear_of(cr, c, r);
      if (!ok) continue;
      b.cx = c.x;
      b.cy = c.y;
      taken.push_back({c, r});
      return b.polygon(std::max(16, static_cast<int>(2 * std::numbers::pi * b.radius / 1.5)));
    }
    return {};
  };

  // Tipburn first: crescents on the margin.
  for (const auto& d : spec.defects) {
    if (d.cls != ClassLabel::Tipburn) continue;
    const int count = static_cast<int>(std::lround(uniform_count(rng, d.count) * day_factor));
    for (int i = 0; i < count; ++i) {
      const double area = uniform(rng, d.blob_area) * day_factor;
      const std::size_t host_index = std::uniform_int_distribution<std::size_t>(0, thalli.size() - 1)(rng);
      const Blob& host = thalli[host_index];
      const double half_width = std::uniform_real_distribution<double>(0.3, 0.7)(rng);
      const double depth = area / (host.radius * half_width * 4.0 / 3.0);
      if (depth > 0.5 * host.r_min())
        throw InvalidArgument("infeasible plate: tipburn area " + std::to_string(area) + " px exceeds the thallus");
      bool placed = false;
      for (int tries = 0; tries < 50 && !placed; ++tries) {
        const double t0 = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);
        const Point mid{host.cx + host.r(t0) * std::cos(t0), host.cy + host.r(t0) * std::sin(t0)};
        const double span = host.radius * half_width + depth + 3;
        const bool ok = std::all_of(tip_discs.begin(), tip_discs.end(), [&](const Disc& t) {
          return std::hypot(t.c.x - mid.x, t.c.y - mid.y) > t.r + span;
        });
        if (!ok) continue;
        const int steps = std::max(12, static_cast<int>(host.radius * half_width));
        crescents.push_back(crescent(host, t0, half_width, depth, steps));
        tip_discs.push_back({mid, span});
        ann.polygons.push_back({ClassLabel::Tipburn, crescents.back()});
        placed = true;
      }
      if (!placed) ++plate.dropped_defects;
    }
  }
  for (const auto& d : spec.defects) {
    if (d.cls == ClassLabel::Tipburn) continue;
    if (d.cls == ClassLabel::Normal) throw InvalidArgument("Normal is not a lesion class");
    const int count = static_cast<int>(std::lround(uniform_count(rng, d.count) * day_factor));
    for (int i = 0; i < count; ++i) {
      auto poly = place_blob(uniform(rng, d.blob_area) * day_factor);
      if (poly.empty()) ++plate.dropped_defects;
      else ann.polygons.push_back({d.cls, std::move(poly)});
    }
  }

  // Pale patches are Normal tissue, so they do not enter the annotation.
  plate.pale = BinaryMask(S, S);
  const int n_pale = uniform_count(rng, spec.pale_patches);
  for (int i = 0; i < n_pale; ++i) {
    auto poly = place_blob(uniform(rng, spec.pale_area));
    if (poly.empty()) continue;
    const auto m = rasterize_polygon({ClassLabel::Normal, poly}, S, S);
    for (std::size_t k = 0; k < m.bits.size(); ++k) plate.pale.bits[k] |= m.bits[k];
  }

  plate.mask = build_semantic_mask(ann);
  for (std::size_t k = 0; k < plate.pale.bits.size(); ++k)
    if (plate.mask.labels[k] != code(ClassLabel::Normal)) plate.pale.bits[k] = 0;

  // Pixels.
  const int nb = static_cast<int>(sig[ClassLabel::Normal].mean_reflectance.size());
  Raster px(nb, S, S);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * S + x;
      const std::uint8_t v = plate.mask.labels[k];
      for (int b = 0; b < nb; ++b) {
        double value;
        if (v == kBackground) {
          value = sig.background + sig.background_sd * gauss(rng);
        } else {
          const auto& s = sig.classes[v];
          value = s.mean_reflectance[b] + s.noise_sd[b] * gauss(rng);
          if (plate.pale.bits[k]) value += sig.pale_shift[b];
        }
        px.at(b, y, x) = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  plate.image = {std::move(px), BandManifest::canonical(), sample_id, spec.day};
  plate.annotation = std::move(ann);
  return plate;
}

struct DatasetEntry {
  std::string sample_id;
  std::string image_path;
  std::string mask_path;
  std::string annotation_path;
  std::uint64_t seed = 0;
  bool operator==(const DatasetEntry&) const = default;
};

struct DatasetManifest {
  std::vector<DatasetEntry> entries;
  ClassStats stats;

  std::string to_csv() const {
    std::string out = "sample_id,image_path,mask_path,annotation_path,seed\n";
    for (const auto& e : entries)
      out += e.sample_id + "," + e.image_path + "," + e.mask_path + "," + e.annotation_path + "," +
             std::to_string(e.seed) + "\n";
    return out;
  }

  static DatasetManifest from_csv(std::string_view text) {
    DatasetManifest m;
    std::istringstream is{std::string(text)};
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (header) {
        header = false;
        if (line.rfind("sample_id,", 0) == 0) continue;
      }
      std::vector<std::string> f;
      std::istringstream ls(line);
      for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
      if (f.size() != 5) throw FormatError("dataset manifest: expected 5 fields in '" + line + "'");
      DatasetEntry e{f[0], f[1], f[2], f[3], 0};
      try {
        e.seed = std::stoull(f[4]);
      } catch (const std::exception&) {
        throw FormatError("dataset manifest: bad seed '" + f[4] + "'");
      }
      m.entries.push_back(std::move(e));
    }
    return m;
  }
};

/// Seed of plate `index` in a dataset generated from `base_seed`.
inline std::uint64_t plate_seed(std::uint64_t base_seed, std::uint64_t index) {
  std::uint64_t z = base_seed * 0x9E3779B97F4A7C15ULL + index + 1;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Writes `n` plates under `out_dir` (images/, masks/, annotations/) together
/// with manifest.csv and class_balance.csv. Paths in the manifest are
/// relative to `out_dir`.
inline DatasetManifest gen_dataset(int n, const PlateSpec& spec_template, const Signatures& sig,
                                   const std::filesystem::path& out_dir, std::uint64_t base_seed = 0) {
  namespace fs = std::filesystem;
  if (n < 1) throw InvalidArgument("dataset size must be at least 1");
  std::error_code ec;
  for (const char* sub : {"images", "masks", "annotations"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  DatasetManifest manifest;
  const int digits = std::max(4, static_cast<int>(std::to_string(n - 1).size()));
  for (int i = 0; i < n; ++i) {
    std::string num = std::to_string(i);
    const std::string id = "plate_" + std::string(digits - num.size(), '0') + num;
    PlateSpec spec = spec_template;
    spec.rng_seed = plate_seed(base_seed, static_cast<std::uint64_t>(i));
    const Plate p = gen_plate(spec, sig, id);
    DatasetEntry e{id, "images/" + id + ".tif", "masks/" + id + "_mask.tif", "annotations/" + id + ".json",
                   spec.rng_seed};
    io::write_image(out_dir / e.image_path, p.image);
    io::write_mask(out_dir / e.mask_path, p.mask);
    io::write_text(out_dir / e.annotation_path, to_labelme(p.annotation, "../" + e.image_path));
    manifest.stats.add(p.annotation, p.mask);
    manifest.entries.push_back(std::move(e));
  }
  io::write_text(out_dir / "manifest.csv", manifest.to_csv());
  io::write_text(out_dir / "class_balance.csv", manifest.stats.to_csv());
  return manifest;
}

}  // namespace leafseg::synth
