#pragma once

// Network hyperparameters and their JSON form.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "leafseg/error.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::model {

enum class HeadKind { ConvBaseline, Transformer };

inline std::string head_name(HeadKind h) { return h == HeadKind::Transformer ? "transformer" : "conv"; }

inline HeadKind parse_head(const std::string& s) {
  if (s == "transformer") return HeadKind::Transformer;
  if (s == "conv" || s == "conv_baseline") return HeadKind::ConvBaseline;
  throw InvalidArgument("unknown head '" + s + "' (expected conv or transformer)");
}

/// Anchor (w, h) pairs in input pixels, three per scale, finest scale first.
using AnchorSet = std::array<std::array<std::array<double, 2>, 3>, 3>;

struct ModelConfig {
  int in_channels = 9;
  int input_size = kDefaultImageSize;
  double width_multiple = 0.5;
  double depth_multiple = 0.33;
  int n_classes = kNumClasses;
  HeadKind head = HeadKind::Transformer;
  int tf_layers = 2;
  int tf_heads = 4;
  int tf_dim = 128;
  int tf_patch = 8;  // patch size on the stride-8 map
  int n_anchors_per_scale = 3;
  int mask_proto_channels = 32;
  bool pixel_skip = true;  // per-pixel spectral path added to the semantic logits
  AnchorSet anchors = default_anchors(kDefaultImageSize);

  static AnchorSet default_anchors(int input_size) {
    const double k = input_size / 640.0;
    static constexpr double kBase[3][3] = {{8, 16, 24}, {32, 48, 64}, {96, 160, 256}};
    AnchorSet a{};
    for (int s = 0; s < 3; ++s)
      for (int i = 0; i < 3; ++i) a[s][i] = {kBase[s][i] * k, kBase[s][i] * k};
    return a;
  }

  /// Smallest sensible network, used by tests and smoke runs.
  static ModelConfig tiny(int in_channels = 9, int input_size = 64, HeadKind head = HeadKind::Transformer) {
    ModelConfig c;
    c.in_channels = in_channels;
    c.input_size = input_size;
    c.width_multiple = 0.125;
    c.depth_multiple = 0.33;
    c.head = head;
    c.tf_layers = 1;
    c.tf_heads = 2;
    c.tf_dim = 16;
    c.tf_patch = std::max(1, input_size / 64);
    c.mask_proto_channels = 8;
    c.anchors = default_anchors(input_size);
    return c;
  }

  /// Configuration used for the desk-scale comparison runs on 128x128 plates.
  static ModelConfig desk(int in_channels, HeadKind head, int input_size = 128) {
    ModelConfig c;
    c.in_channels = in_channels;
    c.input_size = input_size;
    c.width_multiple = 0.25;
    c.depth_multiple = 0.33;
    c.head = head;
    c.tf_layers = 2;
    c.tf_heads = 4;
    c.tf_dim = 64;
    c.tf_patch = std::max(1, input_size / 64);
    c.mask_proto_channels = 16;
    c.anchors = default_anchors(input_size);
    return c;
  }

  int width(int base) const { return static_cast<int>(std::ceil(base * width_multiple / 8.0)) * 8; }
  int depth(int base) const { return std::max(1, static_cast<int>(std::lround(base * depth_multiple))); }
  int outputs_per_anchor() const { return 5 + n_classes + mask_proto_channels; }

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("model config: " + m); };
    if (in_channels != 3 && in_channels != 9) fail("in_channels must be 3 or 9, got " + std::to_string(in_channels));
    if (n_classes != kNumClasses) fail("n_classes must be 4");
    if (input_size < 32 || input_size % 32 != 0) fail("input_size must be a positive multiple of 32");
    if (!(width_multiple > 0) || !(depth_multiple > 0)) fail("width/depth multiples must be positive");
    if (tf_heads < 1 || tf_dim % tf_heads != 0) fail("tf_dim must be divisible by tf_heads");
    if (tf_layers < 0) fail("tf_layers must be >= 0");
    if (tf_patch < 1 || (input_size / 8) % tf_patch != 0) fail("tf_patch must divide input_size / 8");
    if (n_anchors_per_scale != 3) fail("three anchors per scale are supported");
    if (mask_proto_channels < 1) fail("mask_proto_channels must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["in_channels"] = c.in_channels;
  j["input_size"] = c.input_size;
  j["width_multiple"] = c.width_multiple;
  j["depth_multiple"] = c.depth_multiple;
  j["n_classes"] = c.n_classes;
  j["head"] = head_name(c.head);
  j["tf_layers"] = c.tf_layers;
  j["tf_heads"] = c.tf_heads;
  j["tf_dim"] = c.tf_dim;
  j["tf_patch"] = c.tf_patch;
  j["n_anchors_per_scale"] = c.n_anchors_per_scale;
  j["mask_proto_channels"] = c.mask_proto_channels;
  j["pixel_skip"] = c.pixel_skip;
  j["anchors"] = c.anchors;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.input_size = j.at("input_size").get<int>();
    c.width_multiple = j.at("width_multiple").get<double>();
    c.depth_multiple = j.at("depth_multiple").get<double>();
    c.n_classes = j.at("n_classes").get<int>();
    c.head = parse_head(j.at("head").get<std::string>());
    c.tf_layers = j.at("tf_layers").get<int>();
    c.tf_heads = j.at("tf_heads").get<int>();
    c.tf_dim = j.at("tf_dim").get<int>();
    c.tf_patch = j.at("tf_patch").get<int>();
    c.n_anchors_per_scale = j.at("n_anchors_per_scale").get<int>();
    c.mask_proto_channels = j.at("mask_proto_channels").get<int>();
    c.pixel_skip = j.at("pixel_skip").get<bool>();
    c.anchors = j.at("anchors").get<AnchorSet>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

}  // namespace leafseg::model
