#pragma once

// The segmentation network: Focus stem, CSP backbone with SPP, PANet neck,
// three detection scales with mask coefficients, mask prototypes and a
// semantic map produced through either the transformer head or the plain
// convolutional baseline head.

#include <cmath>
#include <string>
#include <vector>

#include "leafseg/autograd/nn_ops.hpp"
#include "leafseg/model/config.hpp"
#include "leafseg/model/layers.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::model {

template <typename T>
struct ModelOutput {
  std::vector<Var<T>> detections;  // per scale [B, anchors, g, g, 5 + classes + proto]
  Var<T> prototypes;               // [B, proto, H/4, W/4]
  Var<T> semantic;                 // [B, classes, H, W] logits
  std::vector<Var<T>> attention;   // per encoder layer [B*heads, N, N]
};

inline constexpr std::array<int, 3> kStrides = {8, 16, 32};

template <typename T>
class Network {
 public:
  explicit Network(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg), ps_(seed) {
    cfg_.validate();
    const auto& c = cfg_;
    const int c1 = c.width(64), c2 = c.width(128), c3 = c.width(256), c4 = c.width(512), c5 = c.width(1024);
    focus_ = Focus<T>(ps_, "backbone.focus", c.in_channels, c1);
    down1_ = ConvBn<T>(ps_, "backbone.down1", c1, c2, 3, 2);
    csp1_ = C3<T>(ps_, "backbone.csp1", c2, c2, c.depth(3), true);
    down2_ = ConvBn<T>(ps_, "backbone.down2", c2, c3, 3, 2);
    csp2_ = C3<T>(ps_, "backbone.csp2", c3, c3, c.depth(9), true);
    down3_ = ConvBn<T>(ps_, "backbone.down3", c3, c4, 3, 2);
    csp3_ = C3<T>(ps_, "backbone.csp3", c4, c4, c.depth(9), true);
    down4_ = ConvBn<T>(ps_, "backbone.down4", c4, c5, 3, 2);
    spp_ = Spp<T>(ps_, "backbone.spp", c5, c5);
    csp4_ = C3<T>(ps_, "backbone.csp4", c5, c5, c.depth(3), false);

    lat5_ = ConvBn<T>(ps_, "neck.lat5", c5, c4, 1);
    top4_ = C3<T>(ps_, "neck.top4", 2 * c4, c4, c.depth(3), false);
    lat4_ = ConvBn<T>(ps_, "neck.lat4", c4, c3, 1);
    out3_ = C3<T>(ps_, "neck.out3", 2 * c3, c3, c.depth(3), false);
    down3n_ = ConvBn<T>(ps_, "neck.down3", c3, c3, 3, 2);
    out4_ = C3<T>(ps_, "neck.out4", 2 * c3, c4, c.depth(3), false);
    down4n_ = ConvBn<T>(ps_, "neck.down4", c4, c4, 3, 2);
    out5_ = C3<T>(ps_, "neck.out5", 2 * c4, c5, c.depth(3), false);

    const int no = c.outputs_per_anchor(), na = c.n_anchors_per_scale;
    const std::array<int, 3> det_in = {c3, c4, c5};
    for (int s = 0; s < 3; ++s) {
      detect_[s] = Conv<T>(ps_, "detect." + std::to_string(s), det_in[s], na * no, 1);
      // Prior: about 8 objects per image for objectness, and 0.6 / classes for
      // the class scores.
      auto& b = detect_[s].b.values();
      const double cells = std::pow(c.input_size / static_cast<double>(kStrides[s]), 2);
      for (int a = 0; a < na; ++a) {
        b[static_cast<std::size_t>(a * no + 4)] += static_cast<T>(std::log(8.0 / cells));
        for (int k = 0; k < c.n_classes; ++k)
          b[static_cast<std::size_t>(a * no + 5 + k)] += static_cast<T>(std::log(0.6 / (c.n_classes - 0.99)));
      }
    }

    if (c.head == HeadKind::Transformer) {
      patch_ = Conv<T>(ps_, "head.tf.patch", c3, c.tf_dim, c.tf_patch, c.tf_patch);
      const int g = c.input_size / 8 / c.tf_patch;
      pos_ = ps_.normal("head.tf.pos", {g * g, c.tf_dim}, 0.02);
      for (int l = 0; l < c.tf_layers; ++l)
        encoder_.emplace_back(ps_, "head.tf.layer" + std::to_string(l), c.tf_dim, c.tf_heads);
      fuse_ = ConvBn<T>(ps_, "head.fuse", c3 + c.tf_dim, c3, 1);
    } else {
      plain1_ = ConvBn<T>(ps_, "head.conv1", c3, c3, 3);
      plain2_ = ConvBn<T>(ps_, "head.conv2", c3, c3, 3);
      fuse_ = ConvBn<T>(ps_, "head.fuse", 2 * c3, c3, 1);
    }
    const int cp = c.width(256);
    proto1_ = ConvBn<T>(ps_, "head.proto.cv1", c3, cp, 3);
    proto2_ = ConvBn<T>(ps_, "head.proto.cv2", cp, cp, 3);
    proto3_ = ConvBn<T>(ps_, "head.proto.cv3", cp, c.mask_proto_channels, 1);
    semantic_ = Conv<T>(ps_, "head.semantic", cp, c.n_classes, 1);
    if (c.pixel_skip) {
      pix1_ = ConvBn<T>(ps_, "head.pixel.fc1", c.in_channels, 16, 1);
      pix2_ = Conv<T>(ps_, "head.pixel.fc2", 16, c.n_classes, 1);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  /// x: [B, in_channels, S, S] with S == input_size.
  ModelOutput<T> forward(const Var<T>& x, bool training) {
    const auto& c = cfg_;
    if (x.rank() != 4) throw InvalidArgument("network input must be [B, C, H, W]");
    if (x.dim(1) != c.in_channels)
      throw InvalidArgument("channel mismatch: model expects " + std::to_string(c.in_channels) +
                            " input channels, got " + std::to_string(x.dim(1)));
    if (x.dim(2) != c.input_size || x.dim(3) != c.input_size)
      throw InvalidArgument("input must be " + std::to_string(c.input_size) + "x" + std::to_string(c.input_size) +
                            ", got " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
    const std::int64_t B = x.dim(0);

    auto b2 = csp1_(down1_(focus_(x, training), training), training);   // stride 4
    auto b3 = csp2_(down2_(b2, training), training);                     // stride 8
    auto b4 = csp3_(down3_(b3, training), training);                     // stride 16
    auto b5 = csp4_(spp_(down4_(b4, training), training), training);     // stride 32

    auto l5 = lat5_(b5, training);
    auto t4 = top4_(ag::concat<T>({ag::upsample_nearest(l5, 2), b4}, 1), training);
    auto l4 = lat4_(t4, training);
    auto n3 = out3_(ag::concat<T>({ag::upsample_nearest(l4, 2), b3}, 1), training);
    auto n4 = out4_(ag::concat<T>({down3n_(n3, training), l4}, 1), training);
    auto n5 = out5_(ag::concat<T>({down4n_(n4, training), l5}, 1), training);

    ModelOutput<T> out;
    const std::array<Var<T>, 3> neck = {n3, n4, n5};
    const std::int64_t na = c.n_anchors_per_scale, no = c.outputs_per_anchor();
    for (int s = 0; s < 3; ++s) {
      auto p = detect_[s](neck[s]);
      const std::int64_t g = p.dim(2);
      out.detections.push_back(ag::permute(ag::reshape(p, {B, na, no, g, g}), {0, 1, 3, 4, 2}));
    }

    Var<T> ctx;
    if (c.head == HeadKind::Transformer) {
      auto e = patch_(n3);  // [B, d, g, g]
      const std::int64_t d = e.dim(1), g = e.dim(2);
      auto tokens = ag::permute(ag::reshape(e, {B, d, g * g}), {0, 2, 1});
      auto y = tokens + pos_;
      for (const auto& layer : encoder_) {
        Var<T> attn;
        y = layer(y, &attn);
        out.attention.push_back(attn);
      }
      ctx = ag::reshape(ag::permute(y, {0, 2, 1}), {B, d, g, g});
      if (c.tf_patch > 1) ctx = ag::upsample_nearest(ctx, c.tf_patch);
    } else {
      ctx = plain2_(plain1_(n3, training), training);
    }
    auto fused = fuse_(ag::concat<T>({n3, ctx}, 1), training);

    auto f4 = proto2_(ag::upsample_nearest(proto1_(fused, training), 2), training);  // stride 4
    out.prototypes = proto3_(f4, training);
    auto sem = ag::upsample_bilinear(semantic_(f4), 4);
    if (c.pixel_skip) sem = sem + pix2_(pix1_(x, training));
    out.semantic = sem;
    return out;
  }

  /// Stem kernel [out, 4*in_channels, 3, 3] in Focus block order.
  Var<T> stem_weight() const { return focus_.conv.w; }

 private:
  ModelConfig cfg_;
  ParamStore<T> ps_;
  Focus<T> focus_;
  ConvBn<T> down1_, down2_, down3_, down4_;
  C3<T> csp1_, csp2_, csp3_, csp4_;
  Spp<T> spp_;
  ConvBn<T> lat5_, lat4_, down3n_, down4n_;
  C3<T> top4_, out3_, out4_, out5_;
  std::array<Conv<T>, 3> detect_;
  Conv<T> patch_;
  Var<T> pos_;
  std::vector<EncoderLayer<T>> encoder_;
  ConvBn<T> plain1_, plain2_, fuse_;
  ConvBn<T> proto1_, proto2_, proto3_;
  ConvBn<T> pix1_;
  Conv<T> semantic_, pix2_;
};

/// Widens a 3-channel Focus stem kernel [out, 12, k, k] to 9 channels
/// [out, 36, k, k] by applying adapt_first_conv to each parity block.
template <typename T>
std::vector<T> adapt_focus_stem(const std::vector<T>& w12, int out, int k, AdaptMode mode, std::uint64_t seed = 0) {
  const std::size_t kk = static_cast<std::size_t>(k) * k;
  if (w12.size() != static_cast<std::size_t>(out) * 12 * kk) throw InvalidArgument("adapt_focus_stem: expected [out,12,k,k]");
  std::vector<T> w36(static_cast<std::size_t>(out) * 36 * kk);
  for (int j = 0; j < 4; ++j) {
    std::vector<T> w3(static_cast<std::size_t>(out) * 3 * kk);
    for (int o = 0; o < out; ++o)
      std::copy_n(w12.begin() + static_cast<std::ptrdiff_t>((o * 12 + j * 3) * kk), 3 * kk,
                  w3.begin() + static_cast<std::ptrdiff_t>(o * 3 * kk));
    const auto w9 = adapt_first_conv(w3, out, k, mode, seed + static_cast<std::uint64_t>(j));
    for (int o = 0; o < out; ++o)
      std::copy_n(w9.begin() + static_cast<std::ptrdiff_t>(o * 9 * kk), 9 * kk,
                  w36.begin() + static_cast<std::ptrdiff_t>((o * 36 + j * 9) * kk));
  }
  return w36;
}

/// Initializes a 9-channel network from a 3-channel one with the same
/// remaining architecture: every parameter is copied, the stem is widened.
template <typename T>
void init_from_rgb(Network<T>& net9, const Network<T>& net3, AdaptMode mode, std::uint64_t seed = 0) {
  if (net9.config().in_channels != 9 || net3.config().in_channels != 3)
    throw InvalidArgument("init_from_rgb needs a 9-channel target and a 3-channel source");
  for (const auto& name : net3.params().names()) {
    auto src = net3.params().get(name);
    if (!net9.params().contains(name)) continue;
    auto dst = net9.params().get(name);
    if (dst.shape() == src.shape()) dst.values() = src.values();
  }
  auto stem = net9.stem_weight();
  const auto w3 = net3.stem_weight();
  stem.values() = adapt_focus_stem(w3.values(), static_cast<int>(w3.dim(0)), static_cast<int>(w3.dim(2)), mode, seed);
}

/// Stacks images into a [B, C, S, S] tensor.
template <typename T>
Var<T> to_tensor(const std::vector<const Raster*>& images) {
  if (images.empty()) throw InvalidArgument("to_tensor: empty batch");
  const Raster& f = *images.front();
  std::vector<T> v;
  v.reserve(images.size() * f.data.size());
  for (const Raster* r : images) {
    if (r->channels != f.channels || r->height != f.height || r->width != f.width)
      throw InvalidArgument("to_tensor: images in a batch must share their shape");
    v.insert(v.end(), r->data.begin(), r->data.end());
  }
  return Var<T>::from({static_cast<std::int64_t>(images.size()), f.channels, f.height, f.width}, std::move(v));
}

}  // namespace leafseg::model
