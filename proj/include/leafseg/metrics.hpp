#pragma once

// Pixel metrics, confusion matrix and mask mAP.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "leafseg/error.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::metrics {

/// True positive / false positive / false negative pixel counts.
struct PixelCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  PixelCounts& operator+=(const PixelCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }

  // Empty-set conventions: both masks empty scores 1; only one empty scores 0.
  double iou() const {
    const auto uni = tp + fp + fn;
    return uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
  }
  double dice() const {
    const auto denom = 2 * tp + fp + fn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  double precision() const { return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
};

inline PixelCounts count_pixels(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw InvalidArgument("mask shape mismatch: " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                          " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  PixelCounts c;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0, g = gt.bits[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

inline double iou(const BinaryMask& pred, const BinaryMask& gt) { return count_pixels(pred, gt).iou(); }
inline double dice(const BinaryMask& pred, const BinaryMask& gt) { return count_pixels(pred, gt).dice(); }

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 1.0;
};

inline PrecisionRecall precision_recall(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = count_pixels(pred, gt);
  return {c.precision(), c.recall()};
}

/// Per-class counts of one predicted / ground-truth semantic mask pair.
/// Ground-truth background counts as negative for every class.
inline std::array<PixelCounts, kNumClasses> class_counts(const SemanticMask& pred, const SemanticMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw InvalidArgument("semantic mask shape mismatch");
  std::array<PixelCounts, kNumClasses> c{};
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int p = pred.labels[i], g = gt.labels[i];
    for (int k = 0; k < kNumClasses; ++k) {
      const bool pk = p == k, gk = g == k;
      c[k].tp += pk && gk;
      c[k].fp += pk && !gk;
      c[k].fn += !pk && gk;
    }
  }
  return c;
}

/// Entry (r, c) is the fraction of ground-truth class c pixels predicted as
/// class r. Pixels with background in either mask are left out.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};
  std::array<std::uint64_t, kNumClasses> unassigned{};  // gt class c predicted as background

  void add(const SemanticMask& pred, const SemanticMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width) throw InvalidArgument("semantic mask shape mismatch");
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      const int p = pred.labels[i], g = gt.labels[i];
      if (g >= kNumClasses) continue;
      if (p >= kNumClasses)
        ++unassigned[g];
      else
        ++counts[p][g];
    }
  }

  std::uint64_t column_total(int c) const {
    std::uint64_t s = 0;
    for (int r = 0; r < kNumClasses; ++r) s += counts[r][c];
    return s;
  }

  /// Ground-truth classes with no counted pixels; their columns are zero.
  std::vector<ClassLabel> absent() const {
    std::vector<ClassLabel> out;
    for (int c = 0; c < kNumClasses; ++c)
      if (column_total(c) == 0) out.push_back(static_cast<ClassLabel>(c));
    return out;
  }

  std::array<std::array<double, kNumClasses>, kNumClasses> normalized() const {
    std::array<std::array<double, kNumClasses>, kNumClasses> m{};
    for (int c = 0; c < kNumClasses; ++c) {
      const auto total = column_total(c);
      if (total == 0) continue;
      for (int r = 0; r < kNumClasses; ++r) m[r][c] = static_cast<double>(counts[r][c]) / static_cast<double>(total);
    }
    return m;
  }
};

inline ConfusionMatrix confusion_matrix(const std::vector<SemanticMask>& pred, const std::vector<SemanticMask>& gt) {
  if (pred.size() != gt.size()) throw InvalidArgument("confusion_matrix: prediction and ground-truth counts differ");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < pred.size(); ++i) m.add(pred[i], gt[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Mask average precision

struct ScoredMask {
  ClassLabel cls = ClassLabel::Normal;
  double score = 1.0;
  BinaryMask mask;
};

struct GtMask {
  ClassLabel cls = ClassLabel::Normal;
  BinaryMask mask;
};

/// Area under the 101-point interpolated precision-recall curve.
inline double interpolated_ap(const std::vector<double>& precision, const std::vector<double>& recall) {
  std::vector<double> envelope(precision);
  for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double ap = 0.0;
  std::size_t j = 0;
  for (int t = 0; t <= 100; ++t) {
    const double r = t / 100.0;
    while (j < recall.size() && recall[j] < r - 1e-12) ++j;
    if (j < recall.size()) ap += envelope[j];
  }
  return ap / 101.0;
}

struct ApResult {
  std::array<double, kNumClasses> ap{};
  std::array<bool, kNumClasses> has_gt{};
  double map = 0.0;
};

/// Per class: detections ranked by score are matched greedily to the
/// unmatched ground-truth mask of the same image with the highest IoU, a
/// match needing IoU >= iou_thresh. Classes without ground truth are left
/// out of the mean; with no ground truth at all the result is 1 when there
/// are no detections either and 0 otherwise.
inline ApResult mask_ap(const std::vector<std::vector<ScoredMask>>& preds,
                        const std::vector<std::vector<GtMask>>& gts, double iou_thresh = 0.5) {
  if (preds.size() != gts.size()) throw InvalidArgument("mask_ap: prediction and ground-truth image counts differ");
  ApResult res;
  int classes_with_gt = 0;
  bool any_pred = false;
  for (int k = 0; k < kNumClasses; ++k) {
    const auto cls = static_cast<ClassLabel>(k);
    struct Det {
      double score;
      std::size_t image;
      std::size_t index;
    };
    std::vector<Det> dets;
    std::size_t n_gt = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      for (std::size_t j = 0; j < preds[i].size(); ++j)
        if (preds[i][j].cls == cls) dets.push_back({preds[i][j].score, i, j});
      for (const auto& g : gts[i]) n_gt += g.cls == cls;
    }
    any_pred = any_pred || !dets.empty();
    if (n_gt == 0) continue;
    res.has_gt[k] = true;
    ++classes_with_gt;
    std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < dets.size(); ++r) {
      const auto& d = dets[r];
      const auto& pm = preds[d.image][d.index].mask;
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < gts[d.image].size(); ++j) {
        const auto& g = gts[d.image][j];
        if (g.cls != cls || used[d.image][j]) continue;
        const double v = iou(pm, g.mask);
        if (v > best) best = v, best_j = j;
      }
      if (best >= iou_thresh) {
        used[d.image][best_j] = true;
        ++tp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    res.ap[k] = interpolated_ap(precision, recall);
    res.map += res.ap[k];
  }
  if (classes_with_gt > 0)
    res.map /= classes_with_gt;
  else
    res.map = any_pred ? 0.0 : 1.0;
  return res;
}

inline double map50(const std::vector<std::vector<ScoredMask>>& preds, const std::vector<std::vector<GtMask>>& gts) {
  return mask_ap(preds, gts, 0.5).map;
}

// ---------------------------------------------------------------------------
// Report

/// Rounds to `digits` decimals, ties to even. The value is first snapped to
/// 9 significant decimals so that binary noise does not break decimal ties
/// (0.505 -> 0.50, 0.515 -> 0.52).
inline double round_half_even(double x, int digits) {
  const double scale = std::pow(10.0, digits);
  const double snapped = std::round(x * scale * 1e9) / 1e9;
  const double fl = std::floor(snapped);
  const double frac = snapped - fl;
  double r;
  if (std::abs(frac - 0.5) < 1e-9)
    r = std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
  else
    r = std::round(snapped);
  return r / scale;
}

inline std::string format_fixed(double x, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << round_half_even(x, digits);
  return os.str();
}

struct ClassScores {
  double iou = 0.0;
  double dice = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct MetricReport {
  std::array<ClassScores, kNumClasses> per_class{};
  ClassScores mean;
  double map50 = 0.0;
  std::array<double, kNumClasses> ap{};
  ConfusionMatrix confusion;
  std::vector<ClassLabel> absent_classes;  // no ground-truth pixels in the split

  /// Report from pooled per-class counts; the mean row is the unweighted
  /// average of the four class rows.
  static MetricReport from_counts(const std::array<PixelCounts, kNumClasses>& counts) {
    MetricReport r;
    for (int k = 0; k < kNumClasses; ++k) {
      const auto& c = counts[k];
      r.per_class[k] = {c.iou(), c.dice(), c.precision(), c.recall()};
    }
    r.update_mean();
    return r;
  }

  void update_mean() {
    mean = {};
    for (const auto& c : per_class) {
      mean.iou += c.iou / kNumClasses;
      mean.dice += c.dice / kNumClasses;
      mean.precision += c.precision / kNumClasses;
      mean.recall += c.recall / kNumClasses;
    }
  }

  /// `class,iou,dice,precision,recall` rows plus a mean row; `digits` < 0
  /// writes full precision.
  std::string to_csv(int digits = -1) const {
    std::ostringstream os;
    auto num = [&](double v) {
      if (digits >= 0) return format_fixed(v, digits);
      std::ostringstream s;
      s << std::setprecision(10) << v;
      return s.str();
    };
    os << "class,iou,dice,precision,recall\n";
    for (int k = 0; k < kNumClasses; ++k) {
      const auto& c = per_class[k];
      os << class_key(static_cast<ClassLabel>(k)) << "," << num(c.iou) << "," << num(c.dice) << ","
         << num(c.precision) << "," << num(c.recall) << "\n";
    }
    os << "mean," << num(mean.iou) << "," << num(mean.dice) << "," << num(mean.precision) << "," << num(mean.recall)
       << "\n";
    return os.str();
  }

  /// 4x4 column-normalized matrix; rows are predictions, columns ground truth.
  std::string confusion_csv() const {
    std::ostringstream os;
    const auto m = confusion.normalized();
    os << "predicted\\truth";
    for (auto c : kAllClasses) os << "," << class_key(c);
    os << "\n";
    for (int r = 0; r < kNumClasses; ++r) {
      os << class_key(static_cast<ClassLabel>(r));
      for (int c = 0; c < kNumClasses; ++c) os << "," << std::setprecision(10) << m[r][c];
      os << "\n";
    }
    return os.str();
  }
};

}  // namespace leafseg::metrics
