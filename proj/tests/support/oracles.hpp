#pragma once

// Brute-force reference implementations used only by tests.

#include <cmath>
#include <cstdint>
#include <vector>

#include "leafseg/annotation.hpp"

namespace leafseg::testing {

/// Classic crossing-number point-in-polygon test (ray towards +x).
inline bool point_in_polygon(const std::vector<Point>& p, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = p.size() - 1; i < p.size(); j = i++) {
    if (((p[i].y > y) != (p[j].y > y)) && (x < (p[j].x - p[i].x) * (y - p[i].y) / (p[j].y - p[i].y) + p[i].x))
      inside = !inside;
  }
  return inside;
}

inline BinaryMask enumerate_polygon(const PolygonAnnotation& poly, int h, int w) {
  BinaryMask m(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) m.at(r, c) = point_in_polygon(poly.points, c + 0.5, r + 0.5) ? 1 : 0;
  return m;
}

inline double shoelace_area(const std::vector<Point>& p) {
  double a = 0;
  for (std::size_t i = 0, j = p.size() - 1; i < p.size(); j = i++) a += p[j].x * p[i].y - p[i].x * p[j].y;
  return std::abs(a) / 2;
}

/// Per-pixel painter: walks the polygon list for each pixel independently.
inline SemanticMask paint_per_pixel(const AnnotationSet& ann) {
  SemanticMask m(ann.height, ann.width);
  for (int r = 0; r < ann.height; ++r)
    for (int c = 0; c < ann.width; ++c) {
      std::uint8_t v = kBackground;
      for (const auto& poly : ann.polygons) {
        if (!point_in_polygon(poly.points, c + 0.5, r + 0.5)) continue;
        const bool defect_there = v != kBackground && v != 0;
        if (poly.label == ClassLabel::Normal && defect_there) continue;
        v = static_cast<std::uint8_t>(code(poly.label));
      }
      m.at(r, c) = v;
    }
  return m;
}

/// 4-connected component count of the set pixels.
inline int count_components(const BinaryMask& m) {
  std::vector<int> seen(m.bits.size(), 0);
  int n = 0;
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const auto i = static_cast<std::size_t>(r) * m.width + c;
      if (!m.bits[i] || seen[i]) continue;
      ++n;
      stack.push_back({r, c});
      seen[i] = 1;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const int yy = y + dy[k], xx = x + dx[k];
          if (yy < 0 || xx < 0 || yy >= m.height || xx >= m.width) continue;
          const auto j = static_cast<std::size_t>(yy) * m.width + xx;
          if (m.bits[j] && !seen[j]) {
            seen[j] = 1;
            stack.push_back({yy, xx});
          }
        }
      }
    }
  return n;
}

}  // namespace leafseg::testing
