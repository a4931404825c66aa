#pragma once

// Raster plots and overlays written as PNG: training curves, confusion
// heatmaps, metric bars, class-coloured mask overlays and triptychs.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "leafseg/error.hpp"
#include "leafseg/metrics.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::report {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kGrey{160, 160, 160};
inline constexpr Rgb kLightGrey{225, 225, 225};
inline constexpr Rgb kBlue{40, 90, 200};
inline constexpr Rgb kOrange{230, 120, 30};

inline Rgb class_color(ClassLabel c) {
  switch (c) {
    case ClassLabel::Normal: return {60, 175, 60};
    case ClassLabel::Chlorosis: return {240, 215, 40};
    case ClassLabel::PigmentAccumulation: return {170, 50, 190};
    case ClassLabel::Tipburn: return {200, 60, 30};
  }
  return kGrey;
}

struct Canvas {
  int width = 0, height = 0;
  std::vector<std::uint8_t> px;  // row-major RGB

  Canvas() = default;
  Canvas(int w, int h, Rgb fill = kWhite) : width(w), height(h), px(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < px.size(); i += 3) std::copy(fill.begin(), fill.end(), px.begin() + static_cast<std::ptrdiff_t>(i));
  }

  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  Rgb get(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {px[i], px[i + 1], px[i + 2]};
  }
  void set(int x, int y, Rgb c) {
    if (!inside(x, y)) return;
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    px[i] = c[0];
    px[i + 1] = c[1];
    px[i + 2] = c[2];
  }
  void fill_rect(int x0, int y0, int w, int h, Rgb c) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) set(x, y, c);
  }
  void frame(int x0, int y0, int w, int h, Rgb c) {
    line(x0, y0, x0 + w - 1, y0, c);
    line(x0, y0 + h - 1, x0 + w - 1, y0 + h - 1, c);
    line(x0, y0, x0, y0 + h - 1, c);
    line(x0 + w - 1, y0, x0 + w - 1, y0 + h - 1, c);
  }
  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  }
  void blit(const Canvas& src, int x0, int y0) {
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) set(x0 + x, y0 + y, src.get(x, y));
  }
};

// ---------------------------------------------------------------------------
// Text: 5x7 bitmap glyphs, one byte per row, bit 4 = leftmost column.

namespace detail {

struct Glyph {
  char ch;
  std::array<std::uint8_t, 7> rows;
};

inline const std::vector<Glyph>& font() {
  static const std::vector<Glyph> f = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}}, {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}}, {'@', {0x0E, 0x11, 0x17, 0x15, 0x17, 0x10, 0x0E}},
  };
  return f;
}

inline const Glyph* glyph(char c) {
  c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : font())
    if (g.ch == c) return &g;
  return nullptr;
}

}  // namespace detail

inline int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }

/// Draws `s` with its top-left corner at (x, y); unknown characters are blank.
inline void draw_text(Canvas& cv, int x, int y, const std::string& s, Rgb color = kBlack, int scale = 1) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto* g = detail::glyph(s[i]);
    if (!g) continue;
    const int ox = x + static_cast<int>(i) * 6 * scale;
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 5; ++c)
        if (g->rows[static_cast<std::size_t>(r)] & (0x10 >> c)) cv.fill_rect(ox + c * scale, y + r * scale, scale, scale, color);
  }
}

// ---------------------------------------------------------------------------
// PNG

inline void write_png(const std::filesystem::path& path, const Canvas& cv) {
  if (cv.width <= 0 || cv.height <= 0) throw InvalidArgument("write_png: empty canvas");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(cv.width);
  img.height = static_cast<png_uint_32>(cv.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, cv.px.data(), 0, nullptr))
    throw IoError("cannot write " + path.string() + ": " + img.message);
}

inline Canvas read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  Canvas cv(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, cv.px.data(), 0, nullptr))
    throw IoError("cannot decode " + path.string() + ": " + img.message);
  return cv;
}

// ---------------------------------------------------------------------------
// Images and masks

/// Three-band view stretched so the brightest value maps to white.
inline Canvas rgb_view(const Raster& rgb) {
  if (rgb.channels != 3) throw InvalidArgument("rgb_view needs 3 channels, got " + std::to_string(rgb.channels));
  float top = 1e-6f;
  for (float v : rgb.data) top = std::max(top, v);
  Canvas cv(rgb.width, rgb.height);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) {
      Rgb c;
      for (int k = 0; k < 3; ++k)
        c[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb.at(k, y, x) / top, 0.0f, 1.0f) * 255));
      cv.set(x, y, c);
    }
  return cv;
}

inline Canvas mask_view(const SemanticMask& m) {
  Canvas cv(m.width, m.height, Rgb{20, 20, 20});
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const auto v = m.at(y, x);
      if (v < kNumClasses) cv.set(x, y, class_color(static_cast<ClassLabel>(v)));
    }
  return cv;
}

/// Class-coloured region boundaries drawn over `base`.
inline Canvas overlay_contours(const Canvas& base, const SemanticMask& m) {
  if (base.width != m.width || base.height != m.height) throw InvalidArgument("overlay: image and mask sizes differ");
  Canvas cv = base;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const auto v = m.at(y, x);
      if (v >= kNumClasses) continue;
      bool edge = false;
      for (auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        const int xx = x + dx, yy = y + dy;
        if (xx < 0 || yy < 0 || xx >= m.width || yy >= m.height || m.at(yy, xx) != v) edge = true;
      }
      if (edge) cv.set(x, y, class_color(static_cast<ClassLabel>(v)));
    }
  return cv;
}

/// Nearest-neighbour enlargement by an integer factor.
inline Canvas upscale(const Canvas& src, int factor) {
  if (factor <= 1) return src;
  Canvas cv(src.width * factor, src.height * factor);
  for (int y = 0; y < cv.height; ++y)
    for (int x = 0; x < cv.width; ++x) cv.set(x, y, src.get(x / factor, y / factor));
  return cv;
}

/// Panels side by side with a caption above each.
inline Canvas side_by_side(const std::vector<Canvas>& panels, const std::vector<std::string>& captions) {
  if (panels.empty()) throw InvalidArgument("side_by_side: no panels");
  const int gap = 8, top = 16;
  int w = gap, h = 0;
  for (const auto& p : panels) {
    w += p.width + gap;
    h = std::max(h, p.height);
  }
  Canvas cv(w, h + top + gap);
  int x = gap;
  for (std::size_t i = 0; i < panels.size(); ++i) {
    if (i < captions.size()) draw_text(cv, x, 4, captions[i]);
    cv.blit(panels[i], x, top);
    x += panels[i].width + gap;
  }
  return cv;
}

inline Canvas legend() {
  Canvas cv(4 * 130, 16);
  for (int k = 0; k < kNumClasses; ++k) {
    const auto c = static_cast<ClassLabel>(k);
    cv.fill_rect(k * 130 + 2, 4, 9, 9, class_color(c));
    draw_text(cv, k * 130 + 16, 5, std::string(class_title(c)));
  }
  return cv;
}

inline Canvas stack_vertical(const Canvas& a, const Canvas& b) {
  Canvas cv(std::max(a.width, b.width), a.height + b.height);
  cv.blit(a, 0, 0);
  cv.blit(b, 0, a.height);
  return cv;
}

// ---------------------------------------------------------------------------
// Charts

inline std::string short_number(double v) {
  if (!std::isfinite(v)) return "NAN";
  char buf[32];
  if (std::abs(v) >= 1000 || (std::abs(v) < 0.01 && v != 0))
    std::snprintf(buf, sizeof buf, "%.1e", v);
  else
    std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Series {
  std::string name;
  std::vector<double> y;
  Rgb color = kBlue;
};

/// One framed panel with a polyline per series over x = 1..n.
inline Canvas line_panel(const std::string& title, const std::vector<Series>& series, int w = 300, int h = 200) {
  Canvas cv(w, h);
  draw_text(cv, 6, 4, title);
  const int l = 44, r = w - 8, t = 18, b = h - 16;
  cv.frame(l, t, r - l + 1, b - t + 1, kGrey);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    for (double v : s.y)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  if (n == 0 || !std::isfinite(lo)) return cv;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  draw_text(cv, 2, t, short_number(hi), kGrey);
  draw_text(cv, 2, b - 7, short_number(lo), kGrey);
  draw_text(cv, l, b + 4, "1", kGrey);
  const std::string last = std::to_string(n);
  draw_text(cv, r - text_width(last), b + 4, last, kGrey);
  auto px = [&](std::size_t i) { return l + 1 + static_cast<int>(std::lround((r - l - 2) * (n > 1 ? double(i) / double(n - 1) : 0.5))); };
  auto py = [&](double v) { return b - 1 - static_cast<int>(std::lround((b - t - 2) * (v - lo) / (hi - lo))); };
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (i > 0 && std::isfinite(s.y[i - 1]))
        cv.line(px(i - 1), py(s.y[i - 1]), px(i), py(s.y[i]), s.color);
      else
        cv.set(px(i), py(s.y[i]), s.color);
    }
  return cv;
}

/// Panels laid out row-major in a grid of `cols` columns.
inline Canvas grid(const std::vector<Canvas>& panels, int cols) {
  if (panels.empty() || cols < 1) throw InvalidArgument("grid: nothing to lay out");
  const int pw = panels[0].width, ph = panels[0].height;
  const int rows = (static_cast<int>(panels.size()) + cols - 1) / cols;
  Canvas cv(pw * cols, ph * rows);
  for (std::size_t i = 0; i < panels.size(); ++i)
    cv.blit(panels[i], static_cast<int>(i % static_cast<std::size_t>(cols)) * pw, static_cast<int>(i / static_cast<std::size_t>(cols)) * ph);
  return cv;
}

/// Column-normalized confusion matrix: rows predicted, columns ground truth.
inline Canvas confusion_heatmap(const metrics::ConfusionMatrix& cm, const std::string& title = "CONFUSION (COLUMNS: GT)") {
  const auto m = cm.normalized();
  const int cell = 64, l = 70, t = 40;
  Canvas cv(l + 4 * cell + 20, t + 4 * cell + 40);
  draw_text(cv, 6, 6, title);
  const char* abbrev[4] = {"NOR", "CHL", "PIG", "TIP"};
  for (int k = 0; k < 4; ++k) {
    draw_text(cv, l + k * cell + (cell - 18) / 2, t - 12, abbrev[k]);
    draw_text(cv, l - 24, t + k * cell + cell / 2 - 3, abbrev[k]);
  }
  draw_text(cv, 4, t + 2 * cell - 3, "PRED");
  draw_text(cv, l + 2 * cell - 6, t + 4 * cell + 8, "GT");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const double v = m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      const auto shade = static_cast<std::uint8_t>(std::lround(255 - 200 * std::clamp(v, 0.0, 1.0)));
      const Rgb fill{shade, shade, 255};
      cv.fill_rect(l + c * cell, t + r * cell, cell - 1, cell - 1, fill);
      const std::string s = metrics::format_fixed(v, 2);
      draw_text(cv, l + c * cell + (cell - text_width(s)) / 2, t + r * cell + cell / 2 - 3, s, v > 0.6 ? kWhite : kBlack);
    }
  for (const auto c : cm.absent()) {
    const int k = code(c);
    draw_text(cv, l + k * cell + 4, t + 4 * cell + 24, "ABSENT", kOrange);
  }
  return cv;
}

struct BarGroup {
  std::string label;
  std::vector<double> values;  // one per model, in [0, 1]
};

/// Grouped bars on a [0, 1] axis, one colour per model.
inline Canvas bar_chart(const std::string& title, const std::vector<BarGroup>& groups, const std::vector<std::string>& models,
                        const std::vector<Rgb>& colors = {kGrey, kBlue}) {
  const int gw = 90, l = 36, t = 34, ph = 200;
  Canvas cv(l + static_cast<int>(groups.size()) * gw + 20, t + ph + 30);
  draw_text(cv, 6, 4, title);
  for (std::size_t m = 0; m < models.size(); ++m) {
    const int x = 6 + static_cast<int>(m) * 140;
    cv.fill_rect(x, 16, 9, 9, colors[m % colors.size()]);
    draw_text(cv, x + 14, 17, models[m]);
  }
  cv.line(l, t, l, t + ph, kGrey);
  cv.line(l, t + ph, cv.width - 10, t + ph, kGrey);
  draw_text(cv, 4, t, "1.0", kGrey);
  draw_text(cv, 4, t + ph - 7, "0.0", kGrey);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const int x0 = l + 6 + static_cast<int>(g) * gw;
    const int nb = std::max<int>(1, static_cast<int>(groups[g].values.size()));
    const int bw = (gw - 16) / nb;
    for (std::size_t m = 0; m < groups[g].values.size(); ++m) {
      const double v = std::clamp(groups[g].values[m], 0.0, 1.0);
      const int bh = static_cast<int>(std::lround(v * ph));
      cv.fill_rect(x0 + static_cast<int>(m) * bw, t + ph - bh, bw - 2, bh, colors[m % colors.size()]);
    }
    draw_text(cv, x0, t + ph + 6, groups[g].label);
  }
  return cv;
}

/// Per-class dice and iou bars for one or more reports (mean as last group).
inline Canvas metric_bars(const std::vector<metrics::MetricReport>& reports, const std::vector<std::string>& names) {
  std::vector<Canvas> panels;
  for (const auto* metric : {"DICE", "IOU"}) {
    std::vector<BarGroup> groups;
    for (int k = 0; k <= kNumClasses; ++k) {
      BarGroup g;
      g.label = k < kNumClasses ? std::string(class_key(static_cast<ClassLabel>(k))).substr(0, 9) : "mean";
      for (const auto& r : reports) {
        const auto& s = k < kNumClasses ? r.per_class[static_cast<std::size_t>(k)] : r.mean;
        g.values.push_back(std::string(metric) == "DICE" ? s.dice : s.iou);
      }
      groups.push_back(std::move(g));
    }
    panels.push_back(bar_chart(metric, groups, names));
  }
  return grid(panels, 1);
}

}  // namespace leafseg::report
