#pragma once

// Side-by-side training of the 9-band transformer model and the RGB
// convolutional baseline on one synthetic dataset.

#include <chrono>
#include <functional>
#include <string>

#include "leafseg/synth.hpp"
#include "leafseg/train/trainer.hpp"

namespace leafseg::train {

struct AblationConfig {
  int n_plates = 160;
  int plate_size = 128;
  double rgb_contrast = synth::kDefaultRgbContrast;
  double val_fraction = 0.1;
  std::uint64_t data_seed = 7;
  std::uint64_t model_seed = 1;
  TrainConfig train = smoke_defaults(100);

  /// Desk-scale optimizer settings shared by the smoke and ablation runs.
  static TrainConfig smoke_defaults(int epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.lr = 5e-3;
    t.momentum = 0.9;
    t.max_grad_norm = 10.0;
    t.class_weighting = true;
    return t;
  }
};

struct VariantResult {
  std::string name;
  model::ModelConfig config;
  TrainResult result;
  metrics::MetricReport report;  // best checkpoint on the validation split
  double seconds = 0.0;
};

struct AblationResult {
  VariantResult proposed;  // 9 bands, transformer head
  VariantResult baseline;  // RGB, convolutional head
  double dice_gain() const { return proposed.report.mean.dice - baseline.report.mean.dice; }
  std::array<double, kNumClasses> class_dice_gain() const {
    std::array<double, kNumClasses> g{};
    for (int k = 0; k < kNumClasses; ++k) g[k] = proposed.report.per_class[k].dice - baseline.report.per_class[k].dice;
    return g;
  }
};

using VariantLog = std::function<void(const std::string& variant, const EpochRecord&)>;

inline VariantResult train_variant(const std::string& name, const model::ModelConfig& cfg,
                                   const std::vector<synth::Plate>& plates, const AblationConfig& ac,
                                   const VariantLog& log) {
  std::vector<Sample> samples;
  for (const auto& p : plates) samples.push_back(sample_from_plate(p, cfg.in_channels));
  auto split = split_samples(std::move(samples), ac.val_fraction, ac.data_seed);
  VariantResult v;
  v.name = name;
  v.config = cfg;
  const auto t0 = std::chrono::steady_clock::now();
  model::Network<float> net(cfg, ac.model_seed);
  TrainConfig tc = ac.train;
  if (!tc.out_dir.empty()) tc.out_dir /= name;
  v.result = train(net, split.train, split.val, tc, [&](const EpochRecord& e) {
    if (log) log(name, e);
  });
  auto best = model::network_from<float>(v.result.best);
  v.report = evaluate(best, split.val, tc.eval);
  v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return v;
}

inline std::vector<synth::Plate> ablation_plates(const AblationConfig& ac) {
  const auto sig = synth::default_signatures(BandManifest::canonical(), ac.rgb_contrast);
  auto spec = synth::PlateSpec::desk_scale(ac.plate_size);
  std::vector<synth::Plate> plates;
  for (int i = 0; i < ac.n_plates; ++i) {
    spec.rng_seed = synth::plate_seed(ac.data_seed, static_cast<std::uint64_t>(i));
    std::string num = std::to_string(i);
    plates.push_back(synth::gen_plate(spec, sig, "plate_" + std::string(4 - std::min<std::size_t>(4, num.size()), '0') + num));
  }
  return plates;
}

inline AblationResult run_ablation(const AblationConfig& ac, const VariantLog& log = {}) {
  const auto plates = ablation_plates(ac);
  AblationResult r;
  r.proposed = train_variant("ms9_transformer", model::ModelConfig::desk(9, model::HeadKind::Transformer, ac.plate_size),
                             plates, ac, log);
  r.baseline = train_variant("rgb3_conv", model::ModelConfig::desk(3, model::HeadKind::ConvBaseline, ac.plate_size),
                             plates, ac, log);
  return r;
}

/// Table with one row per class plus the mean: dice and iou of both models
/// and their difference.
inline std::string comparison_csv(const metrics::MetricReport& baseline, const metrics::MetricReport& proposed,
                                  int digits = 4) {
  std::ostringstream os;
  auto f = [&](double v) { return metrics::format_fixed(v, digits); };
  os << "class,baseline_iou,proposed_iou,delta_iou,baseline_dice,proposed_dice,delta_dice\n";
  auto row = [&](const std::string& name, const metrics::ClassScores& b, const metrics::ClassScores& p) {
    os << name << "," << f(b.iou) << "," << f(p.iou) << "," << f(p.iou - b.iou) << "," << f(b.dice) << "," << f(p.dice)
       << "," << f(p.dice - b.dice) << "\n";
  };
  for (int k = 0; k < kNumClasses; ++k)
    row(std::string(class_key(static_cast<ClassLabel>(k))), baseline.per_class[k], proposed.per_class[k]);
  row("mean", baseline.mean, proposed.mean);
  os << "map50,,,,," << f(baseline.map50) << "," << f(proposed.map50) << "\n";
  return os.str();
}

}  // namespace leafseg::train
