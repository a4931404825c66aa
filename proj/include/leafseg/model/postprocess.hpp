#pragma once

// Turning raw network outputs into instances and semantic masks.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "leafseg/model/network.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::model {

using Box = std::array<double, 4>;  // x1, y1, x2, y2 in input pixels

struct Instance {
  ClassLabel cls = ClassLabel::Normal;
  double score = 0.0;
  Box box{};
  BinaryMask mask;
};

inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Candidate {
  ClassLabel cls = ClassLabel::Normal;
  double score = 0.0;
  Box box{};
  std::vector<float> coeffs;
};

/// Greedy per-class non-maximum suppression; returns survivors by score.
inline std::vector<Candidate> nms(std::vector<Candidate> c, double iou_thresh, std::size_t max_det = 300) {
  std::stable_sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  std::vector<Candidate> keep;
  for (auto& cand : c) {
    bool suppressed = false;
    for (const auto& k : keep)
      if (k.cls == cand.cls && box_iou(k.box, cand.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) keep.push_back(std::move(cand));
    if (keep.size() >= max_det) break;
  }
  return keep;
}

/// Decodes the detection grids of batch item `b` into scored boxes above
/// `conf_thresh` (score = objectness * best class probability).
template <typename T>
std::vector<Candidate> decode_detections(const ModelOutput<T>& out, const ModelConfig& cfg, std::int64_t b,
                                         double conf_thresh) {
  std::vector<Candidate> cands;
  const int nc = cfg.n_classes, nm = cfg.mask_proto_channels, no = cfg.outputs_per_anchor();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t s = 0; s < out.detections.size(); ++s) {
    const auto& d = out.detections[s];
    const std::int64_t na = d.dim(1), g = d.dim(2);
    const double stride = static_cast<double>(cfg.input_size) / static_cast<double>(g);
    const T* base = d.values().data() + b * na * g * g * no;
    for (std::int64_t a = 0; a < na; ++a)
      for (std::int64_t gy = 0; gy < g; ++gy)
        for (std::int64_t gx = 0; gx < g; ++gx) {
          const T* p = base + ((a * g + gy) * g + gx) * no;
          const double obj = sig(p[4]);
          if (obj <= conf_thresh) continue;
          int best = 0;
          for (int k = 1; k < nc; ++k)
            if (p[5 + k] > p[5 + best]) best = k;
          const double score = obj * sig(p[5 + best]);
          if (score <= conf_thresh) continue;
          const double cx = (sig(p[0]) * 2 - 0.5 + static_cast<double>(gx)) * stride;
          const double cy = (sig(p[1]) * 2 - 0.5 + static_cast<double>(gy)) * stride;
          const double w = std::pow(sig(p[2]) * 2, 2) * cfg.anchors[s][static_cast<std::size_t>(a)][0];
          const double h = std::pow(sig(p[3]) * 2, 2) * cfg.anchors[s][static_cast<std::size_t>(a)][1];
          Candidate c;
          c.cls = static_cast<ClassLabel>(best);
          c.score = score;
          c.box = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
          c.coeffs.assign(p + 5 + nc, p + 5 + nc + nm);
          cands.push_back(std::move(c));
        }
  }
  return cands;
}

/// Mask of one instance: the coefficient-weighted prototype logits are
/// bilinearly upsampled to the input size, thresholded at probability 0.5
/// and restricted to pixels whose centre lies inside the box.
inline BinaryMask compose_mask(const std::vector<float>& coeffs, const float* protos, int nm, int ph, int pw, const Box& box,
                               int height, int width) {
  std::vector<float> logits(static_cast<std::size_t>(ph) * pw, 0.0f);
  for (int k = 0; k < nm; ++k) {
    const float c = coeffs[static_cast<std::size_t>(k)];
    const float* plane = protos + static_cast<std::size_t>(k) * ph * pw;
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += c * plane[i];
  }
  Raster low(1, ph, pw);
  low.data = std::move(logits);
  const Raster up = resize_bilinear(low, height, width);
  BinaryMask m(height, width);
  for (int y = 0; y < height; ++y) {
    const double cy = y + 0.5;
    if (cy < box[1] || cy > box[3]) continue;
    for (int x = 0; x < width; ++x) {
      const double cx = x + 0.5;
      if (cx < box[0] || cx > box[2]) continue;
      m.at(y, x) = up.at(0, y, x) > 0.0f ? 1 : 0;
    }
  }
  return m;
}

/// Instances of batch item `b` after score threshold and per-class NMS.
template <typename T>
std::vector<Instance> compose_instance_masks(const ModelOutput<T>& out, const ModelConfig& cfg, std::int64_t b,
                                             double conf_thresh, double nms_iou, std::size_t max_det = 100) {
  if (!(conf_thresh > 0 && conf_thresh < 1) || !(nms_iou > 0 && nms_iou < 1))
    throw InvalidArgument("thresholds must lie in (0, 1)");
  auto kept = nms(decode_detections(out, cfg, b, conf_thresh), nms_iou, max_det);
  const auto& P = out.prototypes;
  const int nm = static_cast<int>(P.dim(1)), ph = static_cast<int>(P.dim(2)), pw = static_cast<int>(P.dim(3));
  std::vector<float> protos(static_cast<std::size_t>(nm) * ph * pw);
  const T* src = P.values().data() + b * nm * ph * pw;
  std::transform(src, src + protos.size(), protos.begin(), [](T v) { return static_cast<float>(v); });
  std::vector<Instance> res;
  for (auto& c : kept) {
    Instance inst{c.cls, c.score, c.box, compose_mask(c.coeffs, protos.data(), nm, ph, pw, c.box, cfg.input_size, cfg.input_size)};
    res.push_back(std::move(inst));
  }
  return res;
}

/// Per pixel, the class of the highest-scoring instance covering it.
inline SemanticMask semantic_from_instances(const std::vector<Instance>& instances, int height, int width) {
  SemanticMask m(height, width);
  std::vector<double> best(m.size(), -1.0);
  for (const auto& inst : instances) {
    if (inst.mask.height != height || inst.mask.width != width)
      throw InvalidArgument("instance mask size does not match the requested mask");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (inst.mask.bits[i] && inst.score > best[i]) {
        best[i] = inst.score;
        m.labels[i] = static_cast<std::uint8_t>(code(inst.cls));
      }
  }
  return m;
}

/// Semantic map logits [B, 4, H, W] -> mask of batch item `b`: the argmax
/// class where its probability reaches 0.5, background elsewhere.
template <typename T>
SemanticMask semantic_from_map(const Var<T>& semantic, std::int64_t b) {
  const int nc = static_cast<int>(semantic.dim(1)), H = static_cast<int>(semantic.dim(2)),
            W = static_cast<int>(semantic.dim(3));
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const T* p = semantic.values().data() + static_cast<std::size_t>(b) * nc * plane;
  SemanticMask m(H, W);
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    for (int k = 1; k < nc; ++k)
      if (p[k * plane + i] > p[best * plane + i]) best = k;
    if (p[best * plane + i] >= T(0)) m.labels[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

}  // namespace leafseg::model
