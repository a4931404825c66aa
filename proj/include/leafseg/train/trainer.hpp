#pragma once

// Dataset loading, the SGD training loop and split evaluation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "leafseg/annotation.hpp"
#include "leafseg/io/image_io.hpp"
#include "leafseg/metrics.hpp"
#include "leafseg/model/checkpoint.hpp"
#include "leafseg/model/postprocess.hpp"
#include "leafseg/synth.hpp"
#include "leafseg/train/augment.hpp"
#include "leafseg/train/loss.hpp"

namespace leafseg::train {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Data

struct Sample {
  std::string id;
  Raster image;
  SemanticMask mask;
  std::vector<GtInstance> instances;
};

/// Network input for `channels` (9 = all canonical bands, 3 = RGB view).
inline Raster model_input(const MultiSpectralImage& img, int channels) {
  if (channels == 3) return extract_rgb(img);
  if (channels != 9) throw InvalidArgument("channels must be 3 or 9, got " + std::to_string(channels));
  if (!(img.manifest == BandManifest::canonical()))
    throw InvalidArgument(img.sample_id + ": 9-channel input needs the canonical band manifest");
  return img.pixels;
}

inline Sample make_sample(const MultiSpectralImage& img, const SemanticMask& mask, const AnnotationSet& ann,
                          int channels) {
  Sample s;
  s.id = img.sample_id;
  s.image = model_input(img, channels);
  if (mask.height != s.image.height || mask.width != s.image.width)
    throw InvalidArgument(s.id + ": mask and image differ in size");
  s.mask = mask;
  s.instances = gt_instances(ann, mask);
  return s;
}

/// Loads every entry of `root/manifest.csv`.
inline std::vector<Sample> load_dataset(const fs::path& root, int channels) {
  const auto manifest_path = root / "manifest.csv";
  if (!fs::exists(manifest_path)) throw IoError("dataset manifest not found: " + manifest_path.string());
  const auto manifest = synth::DatasetManifest::from_csv(io::read_text(manifest_path));
  if (manifest.entries.empty()) throw InvalidArgument("dataset manifest is empty: " + manifest_path.string());
  std::vector<Sample> out;
  for (const auto& e : manifest.entries) {
    auto img = io::read_image(root / e.image_path);
    img.sample_id = e.sample_id;
    const auto mask = io::read_mask(root / e.mask_path);
    const auto ann = parse_labelme(io::read_text(root / e.annotation_path), e.sample_id);
    out.push_back(make_sample(img, mask, ann, channels));
  }
  return out;
}

inline Sample sample_from_plate(const synth::Plate& p, int channels) {
  return make_sample(p.image, p.mask, p.annotation, channels);
}

struct Split {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

inline Split split_samples(std::vector<Sample> all, double val_fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& s : all) ids.push_back(s.id);
  const auto a = split_dataset(ids, val_fraction, seed);
  Split sp;
  for (auto& s : all) {
    const bool is_val = std::find(a.val_ids.begin(), a.val_ids.end(), s.id) != a.val_ids.end();
    (is_val ? sp.val : sp.train).push_back(std::move(s));
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class SemanticSource { Map, Instances };

struct EvalConfig {
  SemanticSource source = SemanticSource::Map;
  double conf_thresh = 0.001;
  double nms_iou = 0.6;
  std::size_t max_det = 100;
  int batch_size = 4;
};

struct Prediction {
  SemanticMask mask;
  std::vector<model::Instance> instances;
};

inline std::vector<metrics::GtMask> gt_masks(const std::vector<GtInstance>& g) {
  std::vector<metrics::GtMask> out;
  for (const auto& i : g) out.push_back({i.cls, i.mask});
  return out;
}

inline std::vector<metrics::ScoredMask> scored_masks(const std::vector<model::Instance>& p) {
  std::vector<metrics::ScoredMask> out;
  for (const auto& i : p) out.push_back({i.cls, i.score, i.mask});
  return out;
}

/// Report of predictions against the samples' ground truth: pixel counts are
/// pooled over the whole split before the per-class ratios are taken.
inline metrics::MetricReport build_report(const std::vector<Prediction>& preds, const std::vector<Sample>& samples) {
  if (preds.size() != samples.size()) throw InvalidArgument("build_report: prediction count does not match samples");
  std::array<metrics::PixelCounts, kNumClasses> counts{};
  metrics::ConfusionMatrix conf;
  std::vector<std::vector<metrics::ScoredMask>> dets;
  std::vector<std::vector<metrics::GtMask>> gts;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto c = metrics::class_counts(preds[i].mask, samples[i].mask);
    for (int k = 0; k < kNumClasses; ++k) counts[k] += c[k];
    conf.add(preds[i].mask, samples[i].mask);
    dets.push_back(scored_masks(preds[i].instances));
    gts.push_back(gt_masks(samples[i].instances));
  }
  auto r = metrics::MetricReport::from_counts(counts);
  r.confusion = conf;
  r.absent_classes = conf.absent();
  const auto ap = metrics::mask_ap(dets, gts, 0.5);
  r.map50 = ap.map;
  r.ap = ap.ap;
  return r;
}

/// Predictions equal to the ground truth (every instance at score 1).
inline std::vector<Prediction> oracle_predictions(const std::vector<Sample>& samples) {
  std::vector<Prediction> out;
  for (const auto& s : samples) {
    Prediction p;
    p.mask = s.mask;
    for (const auto& g : s.instances) p.instances.push_back({g.cls, 1.0, g.box, g.mask});
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
std::vector<Prediction> predict(model::Network<T>& net, const std::vector<const Raster*>& images,
                                const EvalConfig& ec = {}) {
  ag::NoGradGuard ng;
  std::vector<Prediction> out;
  const auto& cfg = net.config();
  const std::size_t bs = static_cast<std::size_t>(std::max(1, ec.batch_size));
  for (std::size_t i = 0; i < images.size(); i += bs) {
    std::vector<const Raster*> batch(images.begin() + static_cast<std::ptrdiff_t>(i),
                                     images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), i + bs)));
    const auto o = net.forward(model::to_tensor<T>(batch), false);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Prediction p;
      p.instances = model::compose_instance_masks(o, cfg, static_cast<std::int64_t>(b), ec.conf_thresh, ec.nms_iou,
                                                  ec.max_det);
      p.mask = ec.source == SemanticSource::Map
                   ? model::semantic_from_map(o.semantic, static_cast<std::int64_t>(b))
                   : model::semantic_from_instances(p.instances, cfg.input_size, cfg.input_size);
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <typename T>
std::vector<Prediction> predict(model::Network<T>& net, const std::vector<Sample>& samples, const EvalConfig& ec = {}) {
  std::vector<const Raster*> images;
  for (const auto& s : samples) images.push_back(&s.image);
  return predict(net, images, ec);
}

template <typename T>
metrics::MetricReport evaluate(model::Network<T>& net, const std::vector<Sample>& samples, const EvalConfig& ec = {}) {
  if (samples.empty()) throw InvalidArgument("evaluate: empty split");
  for (const auto& s : samples)
    if (s.image.channels != net.config().in_channels)
      throw InvalidArgument("channel mismatch: checkpoint expects " + std::to_string(net.config().in_channels) +
                            " input channels, sample " + s.id + " has " + std::to_string(s.image.channels));
  return build_report(predict(net, samples, ec), samples);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 500;
  double lr = 1e-4;
  double momentum = 0.99;
  double weight_decay = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
  int batch_size = 4;
  AugmentConfig augment;
  LossConfig loss;
  bool class_weighting = false;  // inverse pixel frequency on cls and semantic terms
  EvalConfig eval;
  int eval_every = 1;
  std::uint64_t seed = 0;
  fs::path out_dir;  // empty: keep checkpoints in memory only

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("train config: " + m); };
    if (!(lr > 0)) fail("lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must lie in [0, 1)");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs < 1) fail("epochs must be >= 1");
    if (weight_decay < 0) fail("weight_decay must be >= 0");
    if (eval_every < 1) fail("eval_every must be >= 1");
    if (max_grad_norm < 0) fail("max_grad_norm must be >= 0");
  }
};

struct EpochRecord {
  int epoch = 0;
  double box = 0, seg = 0, cls = 0, obj = 0, total = 0;
  double precision = 0, recall = 0, map50 = 0, dice = 0, iou = 0;
};

struct History {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const {
    std::ostringstream os;
    os << "epoch,box_loss,seg_loss,cls_loss,precision,recall,map50\n" << std::setprecision(10);
    for (const auto& e : epochs)
      os << e.epoch << "," << e.box << "," << e.seg << "," << e.cls << "," << e.precision << "," << e.recall << ","
         << e.map50 << "\n";
    return os.str();
  }
};

struct TrainResult {
  model::Checkpoint best;
  model::Checkpoint last;
  History history;
  metrics::MetricReport best_report;
};

/// Raised when the loss or the weights stop being finite. The last good
/// checkpoint has been written (when an output directory is set) and is
/// carried here.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, model::Checkpoint last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const model::Checkpoint& last_good() const { return last_good_; }

 private:
  model::Checkpoint last_good_;
};

/// SGD with momentum: v = m v + (g + wd p); p -= lr v. With max_grad_norm
/// > 0 the gradient is first rescaled to at most that global L2 norm.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Var<T>> params, double lr, double momentum, double weight_decay, double max_grad_norm = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay), clip_(max_grad_norm) {
    for (const auto& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.size()), T(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Global L2 norm of the current gradients.
  double grad_norm() const {
    double sq = 0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
  }

  void step() {
    const T lr = static_cast<T>(lr_), m = static_cast<T>(momentum_), wd = static_cast<T>(wd_);
    T gs = T(1);
    if (clip_ > 0) {
      const double n = grad_norm();
      if (n > clip_) gs = static_cast<T>(clip_ / n);
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& v = velocity_[i];
      auto& w = p.values();
      const auto g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = m * v[j] + gs * g[j] + wd * w[j];
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double lr_, momentum_, wd_, clip_;
};

template <typename T>
bool weights_finite(const model::Network<T>& net) {
  for (const auto& name : net.params().names())
    for (T v : net.params().get(name).values())
      if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

/// Pixels per class, background last.
inline std::array<std::uint64_t, kNumClasses + 1> class_pixel_counts(const std::vector<Sample>& samples) {
  std::array<std::uint64_t, kNumClasses + 1> c{};
  for (const auto& s : samples)
    for (auto l : s.mask.labels) ++c[l < kNumClasses ? l : kNumClasses];
  return c;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `net` on `train_set`, evaluating on `val_set` (or on the training
/// set when `val_set` is empty). The checkpoint with the best validation
/// mAP@0.5 is kept, ties going to the later epoch.
template <typename T>
TrainResult train(model::Network<T>& net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  tc.validate();
  if (train_set.empty()) throw InvalidArgument("train: empty training set");
  const auto& cfg = net.config();
  for (const auto& s : train_set)
    if (s.image.channels != cfg.in_channels || s.image.height != cfg.input_size || s.image.width != cfg.input_size)
      throw InvalidArgument("sample " + s.id + " is " + std::to_string(s.image.channels) + "x" +
                            std::to_string(s.image.height) + "x" + std::to_string(s.image.width) + ", model expects " +
                            std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.input_size) + "x" +
                            std::to_string(cfg.input_size));
  const auto& eval_set = val_set.empty() ? train_set : val_set;

  LossConfig lc = tc.loss;
  if (tc.class_weighting) {
    const auto counts = class_pixel_counts(train_set);
    lc.class_weights = inverse_frequency_weights({counts[0], counts[1], counts[2], counts[3]});
    lc.pixel_weights = balanced_pixel_weights(counts);
  }
  if (!tc.out_dir.empty()) fs::create_directories(tc.out_dir);

  std::mt19937_64 rng(tc.seed);
  Sgd<T> opt(net.params().trainable(), tc.lr, tc.momentum, tc.weight_decay, tc.max_grad_norm);
  TrainResult res;
  model::Checkpoint last_good = model::snapshot(net, 0);
  double best_map = -1.0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  auto diverged = [&](const std::string& why, int epoch) {
    if (!tc.out_dir.empty()) model::save_checkpoint(tc.out_dir / "last_good.ckpt", last_good);
    throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ": " + why, last_good);
  };

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      std::vector<Raster> images;
      std::vector<SemanticMask> masks;
      std::vector<std::vector<GtInstance>> gts;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train_set[order[i]];
        images.push_back(s.image);
        masks.push_back(s.mask);
        gts.push_back(s.instances);
        augment(images.back(), masks.back(), gts.back(), rng, tc.augment);
      }
      std::vector<const Raster*> ptrs;
      std::vector<const SemanticMask*> mptrs;
      for (std::size_t i = 0; i < images.size(); ++i) {
        ptrs.push_back(&images[i]);
        mptrs.push_back(&masks[i]);
      }
      const auto out = net.forward(model::to_tensor<T>(ptrs), true);
      LossResult<T> loss;
      try {
        loss = total_loss(out, cfg, gts, mptrs, lc);
      } catch (const NumericalError& e) {
        diverged(e.what(), epoch);
      }
      opt.zero_grad();
      loss.total.backward();
      opt.step();
      rec.box += loss.box;
      rec.seg += loss.seg;
      rec.cls += loss.cls;
      rec.obj += loss.obj;
      rec.total += static_cast<double>(loss.total.item());
      ++batches;
    }
    for (double* v : {&rec.box, &rec.seg, &rec.cls, &rec.obj, &rec.total}) *v /= batches;
    if (!weights_finite(net)) diverged("non-finite weights", epoch);
    last_good = model::snapshot(net, epoch);

    if (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
      const auto report = evaluate(net, eval_set, tc.eval);
      rec.precision = report.mean.precision;
      rec.recall = report.mean.recall;
      rec.map50 = report.map50;
      rec.dice = report.mean.dice;
      rec.iou = report.mean.iou;
      if (report.map50 >= best_map) {
        best_map = report.map50;
        res.best = model::snapshot(net, epoch,
                                   {{"map50", report.map50}, {"mean_dice", report.mean.dice}, {"mean_iou", report.mean.iou}});
        res.best_report = report;
        if (!tc.out_dir.empty()) model::save_checkpoint(tc.out_dir / "best.ckpt", res.best);
      }
    } else if (!res.history.epochs.empty()) {
      const auto& prev = res.history.epochs.back();
      rec.precision = prev.precision;
      rec.recall = prev.recall;
      rec.map50 = prev.map50;
      rec.dice = prev.dice;
      rec.iou = prev.iou;
    }
    res.history.epochs.push_back(rec);
    if (!tc.out_dir.empty()) io::write_text(tc.out_dir / "history.csv", res.history.to_csv());
    if (on_epoch) on_epoch(rec);
  }
  res.last = model::snapshot(net, tc.epochs,
                             {{"map50", res.history.epochs.back().map50}, {"mean_dice", res.history.epochs.back().dice}});
  if (!tc.out_dir.empty()) model::save_checkpoint(tc.out_dir / "last.ckpt", res.last);
  return res;
}

}  // namespace leafseg::train
