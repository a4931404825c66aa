#pragma once

// Geometric and photometric augmentation of image / mask pairs.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "leafseg/spectral.hpp"
#include "leafseg/train/loss.hpp"

namespace leafseg::train {

struct AugmentConfig {
  bool flip = true;           // horizontal and vertical, p = 0.5 each
  bool rotate90 = true;       // uniform multiple of 90 degrees
  bool color_jitter = true;   // per-band gain and offset
  bool free_rotation = false; // additional arbitrary angle, nearest-neighbour labels
  double max_angle_deg = 30.0;
  double gain_lo = 0.9, gain_hi = 1.1;
  double offset_lo = -0.05, offset_hi = 0.05;

  static AugmentConfig none() { return {false, false, false, false}; }
};

/// Square-grid transform: optional flips followed by `quarter_turns` x 90
/// degrees counter-clockwise.
struct GridTransform {
  bool flip_x = false;
  bool flip_y = false;
  int quarter_turns = 0;

  /// Source pixel read by output pixel (y, x) in an n x n grid.
  std::pair<int, int> source(int y, int x, int n) const {
    // Undo the rotation first, then the flips.
    int sy = y, sx = x;
    for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
      const int ny = sx, nx = n - 1 - sy;  // inverse of one counter-clockwise turn
      sy = ny;
      sx = nx;
    }
    if (flip_y) sy = n - 1 - sy;
    if (flip_x) sx = n - 1 - sx;
    return {sy, sx};
  }

  bool identity() const { return !flip_x && !flip_y && quarter_turns % 4 == 0; }
};

template <typename Plane>
void apply_grid(const GridTransform& t, Plane* data, int n, int planes) {
  if (t.identity()) return;
  const std::size_t area = static_cast<std::size_t>(n) * n;
  std::vector<Plane> tmp(area);
  for (int p = 0; p < planes; ++p) {
    Plane* d = data + static_cast<std::size_t>(p) * area;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const auto [sy, sx] = t.source(y, x, n);
        tmp[static_cast<std::size_t>(y) * n + x] = d[static_cast<std::size_t>(sy) * n + sx];
      }
    std::copy(tmp.begin(), tmp.end(), d);
  }
}

inline void require_square(int h, int w) {
  if (h != w) throw InvalidArgument("geometric augmentation needs square images");
}

inline void apply(const GridTransform& t, Raster& img) {
  require_square(img.height, img.width);
  apply_grid(t, img.data.data(), img.height, img.channels);
}
inline void apply(const GridTransform& t, SemanticMask& m) {
  require_square(m.height, m.width);
  apply_grid(t, m.labels.data(), m.height, 1);
}
inline void apply(const GridTransform& t, BinaryMask& m) {
  require_square(m.height, m.width);
  apply_grid(t, m.bits.data(), m.height, 1);
}

/// Rotation by `deg` about the image centre: bilinear for the image, nearest
/// neighbour for labels; pixels from outside the frame become 0 / background.
struct AngleRotation {
  double deg = 0.0;

  template <typename F>
  void for_each(int h, int w, F&& f) const {
    const double a = deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
    const double cy = h / 2.0, cx = w / 2.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        f(y, x, cy + (-s * dx + c * dy) - 0.5, cx + (c * dx + s * dy) - 0.5);
      }
  }

  void apply(Raster& img) const {
    Raster out(img.channels, img.height, img.width, 0.0f);
    for_each(img.height, img.width, [&](int y, int x, double fy, double fx) {
      const int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
      const double wy = fy - y0, wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) {
          const int yy = y0 + k / 2, xx = x0 + k % 2;
          if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) continue;
          acc += (k / 2 ? wy : 1 - wy) * (k % 2 ? wx : 1 - wx) * img.at(c, yy, xx);
        }
        out.at(c, y, x) = static_cast<float>(acc);
      }
    });
    img = std::move(out);
  }

  template <typename Mask, typename V>
  void apply_labels(Mask& m, std::vector<V>& cells, V outside) const {
    std::vector<V> out(cells.size(), outside);
    for_each(m.height, m.width, [&](int y, int x, double fy, double fx) {
      const int sy = static_cast<int>(std::lround(fy)), sx = static_cast<int>(std::lround(fx));
      if (sy >= 0 && sy < m.height && sx >= 0 && sx < m.width)
        out[static_cast<std::size_t>(y) * m.width + x] = cells[static_cast<std::size_t>(sy) * m.width + sx];
    });
    cells = std::move(out);
  }
  void apply(SemanticMask& m) const { apply_labels(m, m.labels, kBackground); }
  void apply(BinaryMask& m) const { apply_labels(m, m.bits, std::uint8_t{0}); }
};

/// Multiplies each band by its gain, adds its offset, clamps to [0, 1].
inline void jitter(Raster& img, const std::vector<double>& gain, const std::vector<double>& offset) {
  if (gain.size() != static_cast<std::size_t>(img.channels) || offset.size() != gain.size())
    throw InvalidArgument("jitter needs one gain and one offset per band");
  for (int c = 0; c < img.channels; ++c) {
    float* p = img.plane(c);
    for (std::size_t i = 0; i < img.plane_size(); ++i)
      p[i] = static_cast<float>(std::clamp(p[i] * gain[static_cast<std::size_t>(c)] + offset[static_cast<std::size_t>(c)],
                                           0.0, 1.0));
  }
}

/// Everything drawn for one augmentation call.
struct AugmentDraw {
  GridTransform grid;
  double angle = 0.0;
  std::vector<double> gain, offset;
};

template <typename Rng>
AugmentDraw draw_augment(Rng& rng, const AugmentConfig& cfg, int channels) {
  AugmentDraw d;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (cfg.flip) {
    d.grid.flip_x = u(rng) < 0.5;
    d.grid.flip_y = u(rng) < 0.5;
  }
  if (cfg.rotate90) d.grid.quarter_turns = static_cast<int>(std::uniform_int_distribution<int>(0, 3)(rng));
  if (cfg.free_rotation) d.angle = std::uniform_real_distribution<double>(-cfg.max_angle_deg, cfg.max_angle_deg)(rng);
  if (cfg.color_jitter) {
    std::uniform_real_distribution<double> g(cfg.gain_lo, cfg.gain_hi), o(cfg.offset_lo, cfg.offset_hi);
    for (int c = 0; c < channels; ++c) {
      d.gain.push_back(g(rng));
      d.offset.push_back(o(rng));
    }
  }
  return d;
}

/// Applies the same geometry to the image, its semantic mask and its
/// instances (boxes are recomputed); jitter touches the image only.
template <typename Rng>
void augment(Raster& img, SemanticMask& mask, std::vector<GtInstance>& instances, Rng& rng, const AugmentConfig& cfg) {
  if (img.height != mask.height || img.width != mask.width) throw InvalidArgument("augment: image and mask differ in size");
  const auto d = draw_augment(rng, cfg, img.channels);
  const bool rotated = d.angle != 0.0;
  apply(d.grid, img);
  apply(d.grid, mask);
  if (rotated) {
    AngleRotation r{d.angle};
    r.apply(img);
    r.apply(mask);
  }
  for (auto& inst : instances) {
    apply(d.grid, inst.mask);
    if (rotated) AngleRotation{d.angle}.apply(inst.mask);
    inst.box = mask_box(inst.mask);
  }
  if (rotated)
    instances.erase(std::remove_if(instances.begin(), instances.end(), [](const GtInstance& g) { return g.mask.count() == 0; }),
                    instances.end());
  if (cfg.color_jitter) jitter(img, d.gain, d.offset);
}

template <typename Rng>
void augment(Raster& img, SemanticMask& mask, Rng& rng, const AugmentConfig& cfg) {
  std::vector<GtInstance> none;
  augment(img, mask, none, rng, cfg);
}

}  // namespace leafseg::train
