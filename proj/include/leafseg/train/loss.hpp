#pragma once

// Training targets and the detection + mask + semantic loss.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "leafseg/annotation.hpp"
#include "leafseg/autograd/nn_ops.hpp"
#include "leafseg/model/network.hpp"
#include "leafseg/model/postprocess.hpp"

namespace leafseg::train {

using ag::make_result;
using ag::Node;
using ag::Var;
using ag::grad_of;
using model::Box;

/// One annotated object: its class, pixel mask and the tight box around it.
struct GtInstance {
  ClassLabel cls = ClassLabel::Normal;
  Box box{};
  BinaryMask mask;
};

/// Tight box [x1, y1, x2, y2] around the set pixels (pixel edges).
inline Box mask_box(const BinaryMask& m) {
  int x1 = m.width, y1 = m.height, x2 = -1, y2 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        x1 = std::min(x1, x);
        x2 = std::max(x2, x);
        y1 = std::min(y1, y);
        y2 = std::max(y2, y);
      }
  if (x2 < 0) return {0, 0, 0, 0};
  return {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1), static_cast<double>(y2 + 1)};
}

/// Instances of an annotated image. Each polygon keeps only the pixels the
/// semantic mask gives to its class, so a thallus excludes its lesions.
inline std::vector<GtInstance> gt_instances(const AnnotationSet& ann, const SemanticMask& mask) {
  std::vector<GtInstance> out;
  for (const auto& poly : ann.polygons) {
    BinaryMask m = rasterize_polygon(poly, mask.height, mask.width);
    const auto v = static_cast<std::uint8_t>(code(poly.label));
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = m.bits[i] && mask.labels[i] == v;
    if (m.count() == 0) continue;
    out.push_back({poly.label, mask_box(m), std::move(m)});
  }
  return out;
}

struct LossConfig {
  double box_weight = 0.05;
  double seg_weight = 1.0;
  double cls_weight = 0.5;
  double obj_weight = 1.0;
  double semantic_weight = 1.0;    // per-pixel term added to the seg component
  double obj_iou_ratio = 1.0;      // objectness target = (1 - r) + r * CIoU
  double anchor_ratio = 4.0;       // largest gt/anchor side ratio still assigned
  std::array<double, 3> obj_balance = {4.0, 1.0, 0.4};
  std::vector<double> class_weights;  // per class on the cls term; empty = unweighted
  std::vector<double> pixel_weights;  // per class then background on the pixel term; empty = unweighted
  bool scale_by_batch = true;      // total *= batch size
};

/// Pixel weights for the four classes and background (last) such that
/// sum_c n_c w_c = sum_c n_c: w_c = N / (5 n_c).
inline std::vector<double> balanced_pixel_weights(const std::array<std::uint64_t, kNumClasses + 1>& counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}));
  std::vector<double> w(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k)
    w[k] = total / (static_cast<double>(counts.size()) * static_cast<double>(std::max<std::uint64_t>(counts[k], 1)));
  return w;
}

/// Mean over pixels of w_y * -log softmax([0, z_1..z_K])_y, where label y is a
/// class code or kBackground (the zero logit). logits: [B, K, H, W];
/// labels: B*H*W codes; weights: K+1 entries (background last) or empty.
template <typename T>
Var<T> pixel_cross_entropy(const Var<T>& logits, const std::vector<std::uint8_t>& labels,
                           const std::vector<double>& weights = {}) {
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  const std::size_t plane = static_cast<std::size_t>(logits.dim(2) * logits.dim(3));
  if (labels.size() != static_cast<std::size_t>(B) * plane) throw InvalidArgument("pixel_cross_entropy: label count mismatch");
  if (!weights.empty() && weights.size() != static_cast<std::size_t>(K) + 1)
    throw InvalidArgument("pixel_cross_entropy: expected " + std::to_string(K + 1) + " weights");
  const auto& z = logits.values();
  const T norm = T(1) / static_cast<T>(labels.size());
  // Softmax probabilities of the class logits, kept for the backward pass.
  std::vector<T> prob(z.size());
  std::vector<T> wpix(labels.size());
  T total = T(0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t pix = static_cast<std::size_t>(b) * plane + i;
      auto at = [&](std::int64_t k) { return (static_cast<std::size_t>(b * K + k)) * plane + i; };
      T mx = T(0);
      for (std::int64_t k = 0; k < K; ++k) mx = std::max(mx, z[at(k)]);
      T denom = std::exp(-mx);
      for (std::int64_t k = 0; k < K; ++k) denom += std::exp(z[at(k)] - mx);
      const T lse = mx + std::log(denom);
      for (std::int64_t k = 0; k < K; ++k) prob[at(k)] = std::exp(z[at(k)] - lse);
      const std::uint8_t y = labels[pix];
      if (y != kBackground && y >= K) throw InvalidArgument("pixel_cross_entropy: bad label " + std::to_string(y));
      const std::size_t wi = y == kBackground ? static_cast<std::size_t>(K) : y;
      wpix[pix] = weights.empty() ? T(1) : static_cast<T>(weights[wi]);
      const T zy = y == kBackground ? T(0) : z[at(y)];
      total += wpix[pix] * (lse - zy);
    }
  return make_result<T>({}, {total * norm}, {logits},
                        [logits, labels, prob = std::move(prob), wpix = std::move(wpix), B, K, plane, norm](Node<T>& o) {
                          auto* g = grad_of(logits);
                          if (!g) return;
                          const T go = o.grad[0] * norm;
                          for (std::int64_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < plane; ++i) {
                              const std::size_t pix = static_cast<std::size_t>(b) * plane + i;
                              const T w = wpix[pix] * go;
                              for (std::int64_t k = 0; k < K; ++k) {
                                const std::size_t a = static_cast<std::size_t>(b * K + k) * plane + i;
                                (*g)[a] += w * (prob[a] - (labels[pix] == k ? T(1) : T(0)));
                              }
                            }
                        });
}

/// Inverse-frequency class weights normalized to mean 1.
inline std::vector<double> inverse_frequency_weights(const std::array<std::uint64_t, kNumClasses>& pixel_counts) {
  std::vector<double> w(kNumClasses, 0.0);
  double total = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    w[k] = 1.0 / static_cast<double>(std::max<std::uint64_t>(pixel_counts[k], 1));
    total += w[k];
  }
  for (auto& v : w) v *= kNumClasses / total;
  return w;
}

template <typename T>
struct LossResult {
  Var<T> total;
  double box = 0.0;
  double seg = 0.0;
  double cls = 0.0;
  double obj = 0.0;
  std::size_t positives = 0;
};

namespace detail {

struct Assignment {
  std::int64_t row;  // flat row in the [B*na*g*g, no] view of the scale
  std::int64_t image;
  int anchor;
  std::size_t gt;
  double tx, ty, tw, th;  // target centre relative to the cell, size, in grid units
  double aw, ah;          // anchor size in grid units
};

inline std::vector<Assignment> assign(const std::vector<std::vector<GtInstance>>& gts, const model::ModelConfig& cfg,
                                      int scale, double anchor_ratio) {
  const int stride = model::kStrides[static_cast<std::size_t>(scale)];
  const int g = cfg.input_size / stride, na = cfg.n_anchors_per_scale;
  std::vector<Assignment> out;
  for (std::size_t b = 0; b < gts.size(); ++b)
    for (std::size_t j = 0; j < gts[b].size(); ++j) {
      const auto& box = gts[b][j].box;
      const double gx = (box[0] + box[2]) / 2 / stride, gy = (box[1] + box[3]) / 2 / stride;
      const double gw = (box[2] - box[0]) / stride, gh = (box[3] - box[1]) / stride;
      if (gw <= 0 || gh <= 0) continue;
      for (int a = 0; a < na; ++a) {
        const double aw = cfg.anchors[static_cast<std::size_t>(scale)][static_cast<std::size_t>(a)][0] / stride;
        const double ah = cfg.anchors[static_cast<std::size_t>(scale)][static_cast<std::size_t>(a)][1] / stride;
        const double r = std::max({gw / aw, aw / gw, gh / ah, ah / gh});
        if (r >= anchor_ratio) continue;
        const int ci = std::clamp(static_cast<int>(std::floor(gx)), 0, g - 1);
        const int cj = std::clamp(static_cast<int>(std::floor(gy)), 0, g - 1);
        std::vector<std::pair<int, int>> cells = {{ci, cj}};
        // Two neighbouring cells nearest to the centre also predict it.
        const double fx = gx - std::floor(gx), fy = gy - std::floor(gy);
        if (fx < 0.5 && gx > 1) cells.emplace_back(ci - 1, cj);
        if (fy < 0.5 && gy > 1) cells.emplace_back(ci, cj - 1);
        if (fx > 0.5 && g - gx > 1) cells.emplace_back(ci + 1, cj);
        if (fy > 0.5 && g - gy > 1) cells.emplace_back(ci, cj + 1);
        for (auto [i, jj] : cells) {
          if (i < 0 || i >= g || jj < 0 || jj >= g) continue;
          Assignment as;
          as.row = ((static_cast<std::int64_t>(b) * na + a) * g + jj) * g + i;
          as.image = static_cast<std::int64_t>(b);
          as.anchor = a;
          as.gt = j;
          as.tx = gx - i;
          as.ty = gy - jj;
          as.tw = gw;
          as.th = gh;
          as.aw = aw;
          as.ah = ah;
          out.push_back(as);
        }
      }
    }
  return out;
}

template <typename T>
Var<T> column(const std::vector<Assignment>& as, double Assignment::*field) {
  std::vector<T> v(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) v[i] = static_cast<T>(as[i].*field);
  return Var<T>::from({static_cast<std::int64_t>(as.size()), 1}, std::move(v));
}

/// Complete IoU of predicted boxes (px, py, pw, ph) against constant targets,
/// all [P, 1] in grid units.
template <typename T>
Var<T> ciou(const Var<T>& px, const Var<T>& py, const Var<T>& pw, const Var<T>& ph, const Var<T>& tx,
            const Var<T>& ty, const Var<T>& tw, const Var<T>& th) {
  const T eps = T(1e-7), half = T(0.5);
  auto p_x1 = px - ag::scale(pw, half), p_x2 = px + ag::scale(pw, half);
  auto p_y1 = py - ag::scale(ph, half), p_y2 = py + ag::scale(ph, half);
  auto t_x1 = tx - ag::scale(tw, half), t_x2 = tx + ag::scale(tw, half);
  auto t_y1 = ty - ag::scale(th, half), t_y2 = ty + ag::scale(th, half);
  auto iw = ag::clamp_min(ag::minimum(p_x2, t_x2) - ag::maximum(p_x1, t_x1), T(0));
  auto ih = ag::clamp_min(ag::minimum(p_y2, t_y2) - ag::maximum(p_y1, t_y1), T(0));
  auto inter = iw * ih;
  auto uni = ag::add_scalar(pw * ph + tw * th - inter, eps);
  auto iou = inter / uni;
  auto cw = ag::maximum(p_x2, t_x2) - ag::minimum(p_x1, t_x1);
  auto ch = ag::maximum(p_y2, t_y2) - ag::minimum(p_y1, t_y1);
  auto c2 = ag::add_scalar(ag::square(cw) + ag::square(ch), eps);
  auto rho2 = ag::square(tx - px) + ag::square(ty - py);
  const T k = static_cast<T>(4.0 / (std::numbers::pi * std::numbers::pi));
  auto v = ag::scale(ag::square(ag::atan(tw / th) - ag::atan(pw / ph)), k);
  auto alpha = v / ag::add_scalar(v - iou, T(1) + eps);
  return iou - (rho2 / c2 + v * alpha);
}

/// Ground-truth mask at prototype resolution: a cell is set when at least
/// half of the input pixels it covers are.
inline std::vector<std::uint8_t> downsample_mask(const BinaryMask& m, int ph, int pw) {
  const int fy = m.height / ph, fx = m.width / pw;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(ph) * pw, 0);
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      int on = 0;
      for (int dy = 0; dy < fy; ++dy)
        for (int dx = 0; dx < fx; ++dx) on += m.at(y * fy + dy, x * fx + dx);
      out[static_cast<std::size_t>(y) * pw + x] = 2 * on >= fy * fx ? 1 : 0;
    }
  return out;
}

}  // namespace detail

/// Loss of a batch. `gts[b]` are the instances of image b and `masks[b]` its
/// semantic mask. Components are reported per scale-summed term before
/// weighting; the total is the weighted sum (times batch size when
/// scale_by_batch is set).
template <typename T>
LossResult<T> total_loss(const model::ModelOutput<T>& out, const model::ModelConfig& cfg,
                         const std::vector<std::vector<GtInstance>>& gts, const std::vector<const SemanticMask*>& masks,
                         const LossConfig& lc = {}) {
  const std::int64_t B = out.semantic.dim(0);
  if (static_cast<std::int64_t>(gts.size()) != B || static_cast<std::int64_t>(masks.size()) != B)
    throw InvalidArgument("total_loss: targets for " + std::to_string(gts.size()) + " images, batch has " +
                          std::to_string(B));
  const int nc = cfg.n_classes, nm = cfg.mask_proto_channels, no = cfg.outputs_per_anchor();
  const bool weighted = !lc.class_weights.empty();
  if (weighted && static_cast<int>(lc.class_weights.size()) != nc)
    throw InvalidArgument("class_weights must have one entry per class");

  const auto& P = out.prototypes;
  const int ph = static_cast<int>(P.dim(2)), pw = static_cast<int>(P.dim(3));
  auto proto_rows = ag::reshape(P, {B * nm, static_cast<std::int64_t>(ph) * pw});
  std::vector<std::vector<std::vector<std::uint8_t>>> low(gts.size());
  for (std::size_t b = 0; b < gts.size(); ++b)
    for (const auto& g : gts[b]) low[b].push_back(detail::downsample_mask(g.mask, ph, pw));
  const double sx = static_cast<double>(pw) / cfg.input_size, sy = static_cast<double>(ph) / cfg.input_size;

  Var<T> lbox = Var<T>::scalar(T(0)), lobj = Var<T>::scalar(T(0)), lcls = Var<T>::scalar(T(0)),
         lseg = Var<T>::scalar(T(0));
  std::size_t positives = 0;

  for (int s = 0; s < static_cast<int>(out.detections.size()); ++s) {
    const auto& det = out.detections[static_cast<std::size_t>(s)];
    const std::int64_t rows = det.size() / no;
    auto flat = ag::reshape(det, {rows, no});
    const auto as = detail::assign(gts, cfg, s, lc.anchor_ratio);
    positives += as.size();
    std::vector<T> tobj(static_cast<std::size_t>(rows), T(0));

    if (!as.empty()) {
      const auto np = static_cast<std::int64_t>(as.size());
      std::vector<std::int64_t> idx(as.size());
      for (std::size_t i = 0; i < as.size(); ++i) idx[i] = as[i].row;
      auto pos = ag::index_rows(flat, idx);  // [P, no]

      auto sxy = ag::add_scalar(ag::scale(ag::sigmoid(ag::slice_last(pos, 0, 2)), T(2)), T(-0.5));
      auto swh = ag::square(ag::scale(ag::sigmoid(ag::slice_last(pos, 2, 2)), T(2)));
      auto px = ag::slice_last(sxy, 0, 1), py = ag::slice_last(sxy, 1, 1);
      auto pw_ = ag::slice_last(swh, 0, 1) * detail::column<T>(as, &detail::Assignment::aw);
      auto ph_ = ag::slice_last(swh, 1, 1) * detail::column<T>(as, &detail::Assignment::ah);
      auto c = detail::ciou(px, py, pw_, ph_, detail::column<T>(as, &detail::Assignment::tx),
                            detail::column<T>(as, &detail::Assignment::ty),
                            detail::column<T>(as, &detail::Assignment::tw),
                            detail::column<T>(as, &detail::Assignment::th));
      lbox = lbox + ag::add_scalar(ag::neg(ag::mean(c)), T(1));
      const double r = lc.obj_iou_ratio;
      for (std::size_t i = 0; i < as.size(); ++i)
        tobj[static_cast<std::size_t>(as[i].row)] =
            static_cast<T>((1.0 - r) + r * std::max(0.0, static_cast<double>(c.at(static_cast<std::int64_t>(i)))));

      std::vector<T> tcls(static_cast<std::size_t>(np * nc), T(0)), wcls;
      for (std::size_t i = 0; i < as.size(); ++i)
        tcls[i * static_cast<std::size_t>(nc) + static_cast<std::size_t>(code(gts[static_cast<std::size_t>(as[i].image)][as[i].gt].cls))] = T(1);
      if (weighted) {
        wcls.resize(tcls.size());
        for (std::size_t i = 0; i < wcls.size(); ++i) wcls[i] = static_cast<T>(lc.class_weights[i % nc]);
      }
      lcls = lcls + ag::scale(ag::bce_with_logits_sum(ag::slice_last(pos, 5, nc), std::move(tcls), std::move(wcls)),
                              T(1) / static_cast<T>(np * nc));

      // Instance masks: coefficients times the image's prototypes, BCE on the
      // cells inside the gt box, normalized by box area and positives.
      auto coeffs = ag::slice_last(pos, 5 + nc, nm);
      for (std::int64_t b = 0; b < B; ++b) {
        std::vector<std::int64_t> mine;
        for (std::size_t i = 0; i < as.size(); ++i)
          if (as[i].image == b) mine.push_back(static_cast<std::int64_t>(i));
        if (mine.empty()) continue;
        std::vector<std::int64_t> prow(static_cast<std::size_t>(nm));
        for (int k = 0; k < nm; ++k) prow[static_cast<std::size_t>(k)] = b * nm + k;
        auto logits = ag::matmul(ag::index_rows(coeffs, mine), ag::index_rows(proto_rows, prow));  // [Pb, ph*pw]
        const std::size_t hw = static_cast<std::size_t>(ph) * pw;
        std::vector<T> target(mine.size() * hw), weight(mine.size() * hw, T(0));
        for (std::size_t m = 0; m < mine.size(); ++m) {
          const auto& a = as[static_cast<std::size_t>(mine[m])];
          const auto& g = gts[static_cast<std::size_t>(b)][a.gt];
          const auto& lm = low[static_cast<std::size_t>(b)][a.gt];
          std::vector<std::size_t> inside;
          for (int y = 0; y < ph; ++y) {
            const double cy = (y + 0.5) / sy;
            if (cy < g.box[1] || cy > g.box[3]) continue;
            for (int x = 0; x < pw; ++x) {
              const double cx = (x + 0.5) / sx;
              if (cx >= g.box[0] && cx <= g.box[2]) inside.push_back(static_cast<std::size_t>(y) * pw + x);
            }
          }
          if (inside.empty()) {
            const int y = std::clamp(static_cast<int>((g.box[1] + g.box[3]) / 2 * sy), 0, ph - 1);
            const int x = std::clamp(static_cast<int>((g.box[0] + g.box[2]) / 2 * sx), 0, pw - 1);
            inside.push_back(static_cast<std::size_t>(y) * pw + x);
          }
          const T wcell = T(1) / static_cast<T>(inside.size() * as.size());
          for (std::size_t i = 0; i < hw; ++i) target[m * hw + i] = static_cast<T>(lm[i]);
          for (auto i : inside) weight[m * hw + i] = wcell;
        }
        lseg = lseg + ag::bce_with_logits_sum(logits, std::move(target), std::move(weight));
      }
    }
    auto obj_logits = ag::slice_last(flat, 4, 1);
    lobj = lobj + ag::scale(ag::bce_with_logits_sum(obj_logits, std::move(tobj)),
                            static_cast<T>(lc.obj_balance[static_cast<std::size_t>(s)] / static_cast<double>(rows)));
  }

  // Per-pixel semantic term: softmax cross-entropy over the class logits
  // and a background logit fixed at zero, averaged over pixels.
  {
    std::vector<std::uint8_t> labels;
    const std::size_t plane = static_cast<std::size_t>(out.semantic.dim(2) * out.semantic.dim(3));
    for (std::int64_t b = 0; b < B; ++b) {
      const auto* m = masks[static_cast<std::size_t>(b)];
      if (!m || m->size() != plane) throw InvalidArgument("total_loss: semantic mask size does not match the output");
      labels.insert(labels.end(), m->labels.begin(), m->labels.end());
    }
    lseg = lseg + ag::scale(pixel_cross_entropy(out.semantic, labels, lc.pixel_weights), static_cast<T>(lc.semantic_weight));
  }

  LossResult<T> res;
  res.box = static_cast<double>(lbox.item());
  res.obj = static_cast<double>(lobj.item());
  res.cls = static_cast<double>(lcls.item());
  res.seg = static_cast<double>(lseg.item());
  res.positives = positives;
  std::string bad;
  for (auto [name, v] : {std::pair{"box", res.box}, {"seg", res.seg}, {"cls", res.cls}, {"obj", res.obj}})
    if (!std::isfinite(v)) bad += (bad.empty() ? "" : ", ") + std::string(name);
  if (!bad.empty()) throw NumericalError("non-finite loss component(s): " + bad);
  auto total = ag::scale(lbox, static_cast<T>(lc.box_weight)) + ag::scale(lobj, static_cast<T>(lc.obj_weight)) +
               ag::scale(lcls, static_cast<T>(lc.cls_weight)) + ag::scale(lseg, static_cast<T>(lc.seg_weight));
  if (lc.scale_by_batch) total = ag::scale(total, static_cast<T>(B));
  res.total = total;
  return res;
}

}  // namespace leafseg::train
