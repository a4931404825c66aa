#pragma once

// Polygon annotations: LabelMe ingestion, even-odd rasterization, semantic
// mask painting and train/validation splitting.

#include <array>
#include <cctype>
#include <cmath>
#include <optional>
#include <random>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "leafseg/spectral.hpp"

namespace leafseg {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct PolygonAnnotation {
  ClassLabel label = ClassLabel::Normal;
  std::vector<Point> points;  // at least 3
  bool operator==(const PolygonAnnotation&) const = default;
};

struct AnnotationSet {
  std::string sample_id;
  int height = 0;
  int width = 0;
  std::vector<PolygonAnnotation> polygons;
  int skipped_shapes = 0;  // non-polygon shapes ignored during parsing
  bool operator==(const AnnotationSet&) const = default;
};

/// Raised for label strings outside the four symptom classes.
class UnknownLabelError : public FormatError {
 public:
  explicit UnknownLabelError(std::vector<std::string> labels)
      : FormatError(message(labels)), labels_(std::move(labels)) {}
  const std::vector<std::string>& labels() const { return labels_; }

 private:
  static std::string message(const std::vector<std::string>& labels) {
    std::string m = "unknown annotation label(s):";
    for (const auto& l : labels) m += " \"" + l + "\"";
    return m;
  }
  std::vector<std::string> labels_;
};

/// Case-insensitive label lookup; '_' and '-' count as spaces, so
/// "Pigment Accumulation", "pigment_accum" and "PIGMENT-ACCUMULATION" agree.
inline std::optional<ClassLabel> label_from_string(std::string_view s) {
  std::string k;
  for (char ch : s) {
    if (ch == '_' || ch == '-') ch = ' ';
    k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  while (!k.empty() && k.back() == ' ') k.pop_back();
  while (!k.empty() && k.front() == ' ') k.erase(k.begin());
  if (k == "normal") return ClassLabel::Normal;
  if (k == "chlorosis") return ClassLabel::Chlorosis;
  if (k == "pigment accumulation" || k == "pigment accum") return ClassLabel::PigmentAccumulation;
  if (k == "tipburn") return ClassLabel::Tipburn;
  return std::nullopt;
}

/// Parses a LabelMe document. Polygon shapes become annotations; other shape
/// types are skipped and counted.
inline AnnotationSet parse_labelme(std::string_view document, std::string sample_id = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("annotation JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("shapes") || !j.contains("imageHeight") || !j.contains("imageWidth"))
    throw FormatError("annotation JSON must contain shapes, imageHeight and imageWidth");
  AnnotationSet set;
  try {
    set.height = j.at("imageHeight").get<int>();
    set.width = j.at("imageWidth").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("imageHeight/imageWidth must be integers");
  }
  if (set.height <= 0 || set.width <= 0) throw FormatError("image size must be positive");
  if (sample_id.empty() && j.contains("imagePath") && j["imagePath"].is_string()) {
    std::string p = j["imagePath"].get<std::string>();
    if (auto slash = p.find_last_of("/\\"); slash != std::string::npos) p = p.substr(slash + 1);
    if (auto dot = p.find_last_of('.'); dot != std::string::npos) p.resize(dot);
    sample_id = p;
  }
  set.sample_id = std::move(sample_id);
  if (!j["shapes"].is_array()) throw FormatError("shapes must be an array");
  std::vector<std::string> unknown;
  for (const auto& shape : j["shapes"]) {
    const std::string type = shape.value("shape_type", std::string("polygon"));
    if (type != "polygon") {
      ++set.skipped_shapes;
      continue;
    }
    if (!shape.contains("label") || !shape["label"].is_string()) throw FormatError("shape without a string label");
    const std::string label = shape["label"].get<std::string>();
    auto cls = label_from_string(label);
    if (!cls) {
      if (std::find(unknown.begin(), unknown.end(), label) == unknown.end()) unknown.push_back(label);
      continue;
    }
    PolygonAnnotation poly;
    poly.label = *cls;
    if (!shape.contains("points") || !shape["points"].is_array()) throw FormatError("polygon without points");
    for (const auto& pt : shape["points"]) {
      if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number())
        throw FormatError("polygon points must be [x, y] pairs");
      poly.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    if (poly.points.size() < 3)
      throw FormatError("polygon labeled \"" + label + "\" has " + std::to_string(poly.points.size()) +
                        " points; at least 3 are required");
    set.polygons.push_back(std::move(poly));
  }
  if (!unknown.empty()) throw UnknownLabelError(std::move(unknown));
  return set;
}

/// LabelMe document for `set`; `image_path` fills the imagePath field.
inline std::string to_labelme(const AnnotationSet& set, const std::string& image_path) {
  nlohmann::ordered_json j;
  j["version"] = "5.2.1";
  j["flags"] = nlohmann::ordered_json::object();
  auto shapes = nlohmann::ordered_json::array();
  for (const auto& p : set.polygons) {
    nlohmann::ordered_json s;
    s["label"] = std::string(class_key(p.label));
    auto pts = nlohmann::ordered_json::array();
    for (const auto& q : p.points) pts.push_back({q.x, q.y});
    s["points"] = std::move(pts);
    s["group_id"] = nullptr;
    s["shape_type"] = "polygon";
    s["flags"] = nlohmann::ordered_json::object();
    shapes.push_back(std::move(s));
  }
  j["shapes"] = std::move(shapes);
  j["imagePath"] = image_path;
  j["imageData"] = nullptr;
  j["imageHeight"] = set.height;
  j["imageWidth"] = set.width;
  return j.dump(1);
}

/// Pixel (r, c) is set iff its centre (c + 0.5, r + 0.5) lies inside the
/// polygon under the even-odd rule. A centre is inside when an odd number of
/// edges cross the horizontal ray to its right; edges use the half-open
/// vertical rule so shared vertices are counted once.
inline BinaryMask rasterize_polygon(const PolygonAnnotation& poly, int height, int width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("rasterize_polygon: size must be positive");
  BinaryMask mask(height, width);
  const auto& p = poly.points;
  const std::size_t n = p.size();
  if (n < 3) return mask;
  double ymin = p[0].y, ymax = p[0].y;
  for (const auto& q : p) {
    ymin = std::min(ymin, q.y);
    ymax = std::max(ymax, q.y);
  }
  const int r0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
  const int r1 = std::min(height - 1, static_cast<int>(std::ceil(ymax)));
  std::vector<double> xs;
  for (int r = r0; r <= r1; ++r) {
    const double y = r + 0.5;
    xs.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const Point& a = p[i];
      const Point& b = p[j];
      if ((a.y > y) != (b.y > y)) xs.push_back((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // centres with xs[k] <= c + 0.5 < xs[k+1]
      const double lo = std::ceil(xs[k] - 0.5), hi = std::ceil(xs[k + 1] - 0.5);
      const int c0 = static_cast<int>(std::max(0.0, lo));
      const int c1 = static_cast<int>(std::min(static_cast<double>(width), hi));
      for (int c = c0; c < c1; ++c) mask.at(r, c) ^= 1;
    }
  }
  return mask;
}

/// Paints polygons in file order onto a background mask; later polygons win
/// except that Normal never overwrites a symptom class.
inline SemanticMask build_semantic_mask(const AnnotationSet& ann) {
  SemanticMask mask(ann.height, ann.width);
  for (const auto& poly : ann.polygons) {
    const BinaryMask m = rasterize_polygon(poly, ann.height, ann.width);
    const auto v = static_cast<std::uint8_t>(code(poly.label));
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
      if (!m.bits[i]) continue;
      auto& cur = mask.labels[i];
      if (poly.label == ClassLabel::Normal && cur != kBackground && cur != code(ClassLabel::Normal)) continue;
      cur = v;
    }
  }
  return mask;
}

struct SplitAssignment {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::uint64_t seed = 0;
};

/// Seeded shuffle, then the first round(val_fraction * n) ids go to validation.
inline SplitAssignment split_dataset(const std::vector<std::string>& ids, double val_fraction, std::uint64_t seed) {
  if (ids.size() < 2) throw InvalidArgument("split_dataset needs at least 2 ids, got " + std::to_string(ids.size()));
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) throw InvalidArgument("val_fraction must be in [0, 1]");
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size())
    throw InvalidArgument("split_dataset: duplicate ids");
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(ids.size())));
  SplitAssignment s;
  s.seed = seed;
  s.val_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  return s;
}

/// Split file: "sample_id,split" rows with split in {train, val}.
inline std::string split_to_csv(const SplitAssignment& s) {
  std::string out = "sample_id,split\n";
  for (const auto& id : s.train_ids) out += id + ",train\n";
  for (const auto& id : s.val_ids) out += id + ",val\n";
  return out;
}

inline SplitAssignment split_from_csv(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  SplitAssignment s;
  bool header = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("sample_id", 0) == 0) continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("split file: malformed line '" + line + "'");
    const std::string id = line.substr(0, comma), which = line.substr(comma + 1);
    if (which == "train") s.train_ids.push_back(id);
    else if (which == "val") s.val_ids.push_back(id);
    else throw FormatError("split file: unknown split '" + which + "'");
  }
  return s;
}

struct ClassStats {
  std::array<std::int64_t, kNumClasses> instances{};
  std::array<std::int64_t, kNumClasses> pixel_area{};

  void add(const AnnotationSet& ann, const SemanticMask& mask) {
    for (const auto& p : ann.polygons) ++instances[static_cast<std::size_t>(code(p.label))];
    for (auto v : mask.labels)
      if (v < kNumClasses) ++pixel_area[v];
  }

  /// CSV "class,instances,pixel_area", one row per class.
  std::string to_csv() const {
    std::string out = "class,instances,pixel_area\n";
    for (auto c : kAllClasses)
      out += std::string(class_key(c)) + "," + std::to_string(instances[static_cast<std::size_t>(code(c))]) + "," +
             std::to_string(pixel_area[static_cast<std::size_t>(code(c))]) + "\n";
    return out;
  }
};

}  // namespace leafseg
