#pragma once

// Command-line front end: gen-data, ingest, train, eval, predict.
// Each command resolves its settings (defaults < --config file < flags),
// writes them to <out>/run_config.txt and runs. Exit codes: 0 success,
// 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "leafseg/report/render.hpp"
#include "leafseg/synth.hpp"
#include "leafseg/train/ablation.hpp"

namespace leafseg::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

/// Raised for bad flags, bad config values and missing inputs (exit 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Run configuration

/// Flat key=value settings. Lines starting with '#' and blank lines are
/// ignored; keys use '_' (flags use '-').
struct RunConfig {
  std::map<std::string, std::string> values;

  static RunConfig parse(std::string_view text, const std::string& origin = "config") {
    RunConfig c;
    std::istringstream is{std::string(text)};
    std::string line;
    int n = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
      ++n;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw UsageError(origin + ":" + std::to_string(n) + ": expected key=value");
      std::string key = trim(line.substr(0, eq));
      std::replace(key.begin(), key.end(), '-', '_');
      if (key.empty()) throw UsageError(origin + ":" + std::to_string(n) + ": empty key");
      c.values[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  std::string to_text(const std::string& command) const {
    std::string out = "# leafseg " + command + "\ncommand=" + command + "\n";
    for (const auto& [k, v] : values) out += k + "=" + v + "\n";
    return out;
  }

  const std::string& str(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw UsageError("missing setting '" + key + "'");
    return it->second;
  }
  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw UsageError("setting '" + key + "' must be a number, got '" + s + "'");
    }
  }
  long long integer(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw UsageError("setting '" + key + "' must be an integer, got '" + s + "'");
    }
  }
  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw UsageError("setting '" + key + "' must be true or false, got '" + s + "'");
  }
  std::string choice(const std::string& key, std::initializer_list<const char*> allowed) const {
    const auto& s = str(key);
    std::string list;
    for (const char* a : allowed) {
      if (s == a) return s;
      list += (list.empty() ? "" : ", ") + std::string(a);
    }
    throw UsageError("setting '" + key + "' must be one of " + list + ", got '" + s + "'");
  }
};

/// One setting of a command: config key, default and help text.
struct Setting {
  std::string key;
  std::string fallback;
  std::string help;
};

// ---------------------------------------------------------------------------
// Shared helpers

struct Context {
  std::ostream& out;
  std::ostream& err;
};

inline void need_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline std::string joined(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string item; std::getline(is, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline model::Checkpoint read_ckpt(const std::string& path) {
  if (path.empty()) throw UsageError("a checkpoint is required (--ckpt)");
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return model::load_checkpoint(path);
}

inline std::vector<train::Sample> read_dataset(const fs::path& root, int channels) {
  if (root.empty()) throw UsageError("a dataset directory is required (--data)");
  if (!fs::exists(root / "manifest.csv")) throw UsageError("dataset manifest not found: " + (root / "manifest.csv").string());
  const auto first = synth::DatasetManifest::from_csv(io::read_text(root / "manifest.csv"));
  if (!first.entries.empty() && channels == 9) {
    const auto probe = io::read_image(root / first.entries.front().image_path);
    if (probe.pixels.channels != 9)
      throw UsageError("channel mismatch: the model expects 9 input channels, dataset image " +
                       first.entries.front().sample_id + " has " + std::to_string(probe.pixels.channels) + " bands");
  }
  return train::load_dataset(root, channels);
}

/// Train/val split of a dataset directory: split.csv when present,
/// otherwise a seeded split of the manifest order.
inline train::Split dataset_split(std::vector<train::Sample> all, const fs::path& root, double val_fraction,
                                  std::uint64_t seed) {
  const auto file = root / "split.csv";
  if (!fs::exists(file)) return train::split_samples(std::move(all), val_fraction, seed);
  const auto a = split_from_csv(io::read_text(file));
  const std::set<std::string> val(a.val_ids.begin(), a.val_ids.end());
  train::Split sp;
  for (auto& s : all) (val.count(s.id) ? sp.val : sp.train).push_back(std::move(s));
  return sp;
}

inline std::vector<train::Sample> pick(train::Split sp, const std::string& which) {
  if (which == "train") return std::move(sp.train);
  if (which == "val") return std::move(sp.val);
  auto all = std::move(sp.train);
  for (auto& s : sp.val) all.push_back(std::move(s));
  return all;
}

inline void write_report(const fs::path& dir, const std::string& stem, const metrics::MetricReport& r,
                         const std::string& title) {
  io::write_text(dir / (stem + ".csv"), r.to_csv());
  io::write_text(dir / (stem + "_confusion.csv"), r.confusion_csv());
  report::write_png(dir / (stem + "_confusion.png"), report::confusion_heatmap(r.confusion));
  report::write_png(dir / (stem + "_metrics.png"), report::metric_bars({r}, {title}));
}

/// Six panels: box, seg and cls loss, then precision, recall and mAP@0.5.
inline report::Canvas training_curves(const train::History& h) {
  std::vector<double> cols[6];
  for (const auto& e : h.epochs) {
    const double v[6] = {e.box, e.seg, e.cls, e.precision, e.recall, e.map50};
    for (int k = 0; k < 6; ++k) cols[k].push_back(v[k]);
  }
  const char* titles[6] = {"BOX LOSS", "SEG LOSS", "CLS LOSS", "PRECISION", "RECALL", "MAP@0.5"};
  std::vector<report::Canvas> panels;
  for (int k = 0; k < 6; ++k)
    panels.push_back(report::line_panel(titles[k], {{titles[k], cols[k], k < 3 ? report::kOrange : report::kBlue}}));
  return report::grid(panels, 3);
}

inline train::EvalConfig eval_config(const RunConfig& c) {
  train::EvalConfig ec;
  ec.source = c.choice("source", {"map", "instances"}) == "map" ? train::SemanticSource::Map
                                                               : train::SemanticSource::Instances;
  ec.conf_thresh = c.real("conf");
  ec.nms_iou = c.real("nms_iou");
  return ec;
}

inline const std::vector<Setting>& eval_settings() {
  static const std::vector<Setting> s = {
      {"source", "map", "semantic prediction source: map or instances"},
      {"conf", "0.001", "detection confidence threshold"},
      {"nms_iou", "0.6", "NMS IoU threshold"},
  };
  return s;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(const RunConfig& c, const fs::path& out, std::uint64_t seed, Context& ctx) {
  const auto n = c.integer("n");
  if (n < 1) throw UsageError("--n must be at least 1, got " + std::to_string(n));
  const auto size = static_cast<int>(c.integer("size"));
  const auto preset = c.choice("preset", {"desk", "full"});
  if (size < 32 || size % 32 != 0) throw UsageError("--size must be a positive multiple of 32");
  synth::PlateSpec spec = preset == "full" ? synth::PlateSpec::full_scale() : synth::PlateSpec::desk_scale(size);
  if (preset == "full" && size != spec.size) throw UsageError("the full preset has fixed size " + std::to_string(spec.size));
  spec.day = static_cast<int>(c.integer("day"));
  const auto sig = synth::default_signatures(BandManifest::canonical(), c.real("rgb_contrast"));
  const auto manifest = synth::gen_dataset(static_cast<int>(n), spec, sig, out, seed);
  std::vector<std::string> ids;
  for (const auto& e : manifest.entries) ids.push_back(e.sample_id);
  if (ids.size() >= 2) io::write_text(out / "split.csv", split_to_csv(split_dataset(ids, c.real("val_fraction"), seed)));
  ctx.out << "wrote " << n << " plates to " << out.string() << "\n" << manifest.stats.to_csv();
  return kOk;
}

inline int cmd_ingest(const RunConfig& c, const fs::path& out, std::uint64_t seed, Context& ctx) {
  const fs::path ann_dir = c.str("annotations"), img_dir = c.str("images");
  if (ann_dir.empty() || !fs::is_directory(ann_dir)) throw UsageError("annotation directory not found: " + ann_dir.string());
  std::vector<fs::path> docs;
  for (const auto& e : fs::directory_iterator(ann_dir))
    if (e.path().extension() == ".json") docs.push_back(e.path());
  std::sort(docs.begin(), docs.end());
  if (docs.empty()) throw UsageError("no .json annotations in " + ann_dir.string());
  for (const char* sub : {"images", "masks", "annotations"}) need_dir(out / sub);
  synth::DatasetManifest manifest;
  int failures = 0;
  for (const auto& doc : docs) {
    try {
      const auto text = io::read_text(doc);
      auto ann = parse_labelme(text, doc.stem().string());
      fs::path img_path = (img_dir.empty() ? doc.parent_path() : img_dir) / (doc.stem().string() + ".tif");
      if (!fs::exists(img_path)) {
        const auto j = nlohmann::json::parse(text);
        if (j.contains("imagePath") && j["imagePath"].is_string()) img_path = doc.parent_path() / j["imagePath"].get<std::string>();
      }
      if (!fs::exists(img_path)) throw IoError("image for " + doc.filename().string() + " not found");
      auto img = io::read_image(img_path);
      img.sample_id = ann.sample_id;
      if (img.pixels.height != ann.height || img.pixels.width != ann.width)
        throw FormatError(doc.filename().string() + ": annotation is " + std::to_string(ann.width) + "x" +
                          std::to_string(ann.height) + ", image is " + std::to_string(img.pixels.width) + "x" +
                          std::to_string(img.pixels.height));
      const auto mask = build_semantic_mask(ann);
      const std::string id = ann.sample_id;
      synth::DatasetEntry e{id, "images/" + id + ".tif", "masks/" + id + "_mask.tif", "annotations/" + id + ".json", 0};
      io::write_image(out / e.image_path, img);
      io::write_mask(out / e.mask_path, mask);
      io::write_text(out / e.annotation_path, to_labelme(ann, "../" + e.image_path));
      manifest.stats.add(ann, mask);
      manifest.entries.push_back(std::move(e));
    } catch (const Error& e) {
      ++failures;
      ctx.err << "error: " << doc.string() << ": " << e.what() << "\n";
    }
  }
  io::write_text(out / "manifest.csv", manifest.to_csv());
  io::write_text(out / "class_balance.csv", manifest.stats.to_csv());
  std::vector<std::string> ids;
  for (const auto& e : manifest.entries) ids.push_back(e.sample_id);
  if (ids.size() >= 2) io::write_text(out / "split.csv", split_to_csv(split_dataset(ids, c.real("val_fraction"), seed)));
  ctx.out << "ingested " << manifest.entries.size() << " of " << docs.size() << " annotations into " << out.string()
          << "\n";
  return failures ? kFailure : kOk;
}

inline model::ModelConfig model_config(const RunConfig& c, int input_size) {
  const int channels = static_cast<int>(c.integer("channels"));
  if (channels != 3 && channels != 9) throw UsageError("--channels must be 3 or 9");
  const auto head = c.choice("head", {"transformer", "conv"}) == "conv" ? model::HeadKind::ConvBaseline
                                                                         : model::HeadKind::Transformer;
  const auto size = c.choice("model", {"tiny", "desk", "full"});
  model::ModelConfig m;
  if (size == "tiny") {
    m = model::ModelConfig::tiny(channels, input_size, head);
  } else if (size == "desk") {
    m = model::ModelConfig::desk(channels, head, input_size);
  } else {
    m.in_channels = channels;
    m.head = head;
    m.input_size = input_size;
    m.anchors = model::ModelConfig::default_anchors(input_size);
  }
  m.validate();
  return m;
}

inline int cmd_train(const RunConfig& c, const fs::path& out, std::uint64_t seed, Context& ctx) {
  const int channels = static_cast<int>(c.integer("channels"));
  const fs::path data = c.str("data");
  auto all = read_dataset(data, channels);
  const int size = all.front().image.height;
  const auto mcfg = model_config(c, size);
  try {
    model::parse_adapt_mode(c.str("adapt"));
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  auto split = dataset_split(std::move(all), data, c.real("val_fraction"), seed);
  train::TrainConfig tc;
  tc.epochs = static_cast<int>(c.integer("epochs"));
  tc.lr = c.real("lr");
  tc.momentum = c.real("momentum");
  tc.weight_decay = c.real("weight_decay");
  tc.max_grad_norm = c.real("max_grad_norm");
  tc.batch_size = static_cast<int>(c.integer("batch"));
  tc.class_weighting = c.flag("class_weighting");
  tc.eval_every = static_cast<int>(c.integer("eval_every"));
  tc.seed = seed;
  tc.out_dir = out;
  tc.eval = eval_config(c);
  if (!c.flag("augment")) tc.augment = train::AugmentConfig::none();
  tc.augment.free_rotation = c.flag("free_rotation");
  try {
    tc.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  model::Network<float> net(mcfg, seed);
  if (const auto init = c.str("init"); !init.empty()) {
    const auto src = read_ckpt(init);
    if (src.config.in_channels == 3 && mcfg.in_channels == 9) {
      auto net3 = model::network_from<float>(src);
      model::init_from_rgb(net, net3, model::parse_adapt_mode(c.str("adapt")), seed);
    } else {
      model::load_weights(net, src);
    }
  }
  ctx.out << "training " << (mcfg.head == model::HeadKind::Transformer ? "transformer" : "conv") << " head, "
          << mcfg.in_channels << " channels, " << split.train.size() << " train / " << split.val.size()
          << " val samples\n";
  const bool verbose = c.flag("verbose");
  const auto res = train::train(net, split.train, split.val, tc, [&](const train::EpochRecord& e) {
    if (verbose || e.epoch == tc.epochs || e.epoch % 10 == 0)
      ctx.out << "epoch " << e.epoch << " loss " << e.total << " box " << e.box << " seg " << e.seg << " cls " << e.cls
              << " dice " << e.dice << " map50 " << e.map50 << "\n";
  });
  report::write_png(out / "training_curves.png", training_curves(res.history));
  write_report(out, "best_report", res.best_report, "BEST");
  ctx.out << "best epoch " << res.best.epoch << " map50 " << res.best_report.map50 << " mean dice "
          << res.best_report.mean.dice << "\n";
  return kOk;
}

inline int cmd_eval(const RunConfig& c, const fs::path& out, std::uint64_t seed, Context& ctx) {
  const fs::path data = c.str("data");
  const auto which = c.choice("split", {"val", "train", "all"});
  const auto ec = eval_config(c);
  auto samples_for = [&](int channels) {
    auto all = read_dataset(data, channels);
    auto chosen = pick(dataset_split(std::move(all), data, c.real("val_fraction"), seed), which);
    if (chosen.empty()) throw UsageError("the " + which + " split of " + data.string() + " is empty");
    return chosen;
  };
  if (c.flag("oracle")) {
    const auto s = samples_for(9);
    const auto r = train::build_report(train::oracle_predictions(s), s);
    write_report(out, "report", r, "ORACLE");
    ctx.out << r.to_csv(2);
    return kOk;
  }
  const auto compare = split_list(c.str("compare"));
  if (!compare.empty()) {
    if (compare.size() != 2) throw UsageError("--compare takes exactly two checkpoints (baseline, proposed)");
    std::vector<metrics::MetricReport> reports;
    std::vector<std::string> names;
    for (const auto& path : compare) {
      const auto ck = read_ckpt(path);
      auto net = model::network_from<float>(ck);
      reports.push_back(train::evaluate(net, samples_for(ck.config.in_channels), ec));
      names.push_back(fs::path(path).stem().string());
    }
    if (names[0] == names[1])
      for (std::size_t i = 0; i < 2; ++i) {
        const auto dir = fs::path(compare[i]).parent_path().filename().string();
        if (!dir.empty()) names[i] = dir + "/" + names[i];
      }
    write_report(out, "report_baseline", reports[0], names[0]);
    write_report(out, "report_proposed", reports[1], names[1]);
    const auto table = train::comparison_csv(reports[0], reports[1]);
    io::write_text(out / "comparison.csv", table);
    report::write_png(out / "comparison.png", report::metric_bars(reports, names));
    ctx.out << table;
    return kOk;
  }
  const auto ck = read_ckpt(c.str("ckpt"));
  auto net = model::network_from<float>(ck);
  const auto r = train::evaluate(net, samples_for(ck.config.in_channels), ec);
  write_report(out, "report", r, fs::path(c.str("ckpt")).stem().string());
  ctx.out << r.to_csv(2) << "map50," << metrics::format_fixed(r.map50, 2) << "\n";
  return kOk;
}

/// Inputs named by a file, a directory (all .tif inside) or a filename
/// pattern with '*' and '?' wildcards.
inline std::vector<fs::path> expand_inputs(const std::string& spec) {
  std::vector<fs::path> out;
  if (spec.empty()) return out;
  const fs::path p(spec);
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (e.path().extension() == ".tif" || e.path().extension() == ".tiff") out.push_back(e.path());
  } else if (spec.find_first_of("*?") != std::string::npos) {
    const fs::path dir = p.parent_path().empty() ? fs::path(".") : p.parent_path();
    std::string rx;
    for (char ch : p.filename().string()) {
      if (ch == '*') rx += ".*";
      else if (ch == '?') rx += ".";
      else if (std::isalnum(static_cast<unsigned char>(ch))) rx += ch;
      else rx += std::string("\\") + ch;
    }
    const std::regex re(rx);
    if (fs::is_directory(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && std::regex_match(e.path().filename().string(), re)) out.push_back(e.path());
  } else {
    out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline fs::path find_gt_mask(const fs::path& gt, const std::string& id) {
  for (const auto& name : {id + "_mask.tif", id + "_mask.pgm", id + ".tif", id + ".pgm"}) {
    for (const auto& dir : {gt, gt / "masks"})
      if (fs::exists(dir / name)) return dir / name;
  }
  return {};
}

inline int cmd_predict(const RunConfig& c, const fs::path& out, std::uint64_t, Context& ctx) {
  const auto inputs = expand_inputs(c.str("input"));
  if (inputs.empty()) throw UsageError("no input images match '" + c.str("input") + "'");
  const auto ck = read_ckpt(c.str("ckpt"));
  auto net = model::network_from<float>(ck);
  std::optional<model::Network<float>> other;
  if (const auto cmp = c.str("compare"); !cmp.empty()) other.emplace(model::network_from<float>(read_ckpt(cmp)));
  const fs::path gt = c.str("gt");
  const auto ec = eval_config(c);
  const int scale = static_cast<int>(c.integer("scale"));
  int failures = 0, done = 0;
  auto run = [&](model::Network<float>& n, const MultiSpectralImage& img) {
    const int size = n.config().input_size;
    auto x = train::model_input(img, n.config().in_channels);
    x = resize_bilinear(x, size, size);
    auto pred = train::predict(n, std::vector<const Raster*>{&x}, ec).front().mask;
    return resize_nearest(pred, img.pixels.height, img.pixels.width);
  };
  for (const auto& path : inputs) {
    try {
      auto img = io::read_image(path);
      img.sample_id = path.stem().string();
      if (img.pixels.channels != ck.config.in_channels && !(ck.config.in_channels == 3 && img.pixels.channels == 9))
        throw InvalidArgument("channel mismatch: checkpoint expects " + std::to_string(ck.config.in_channels) +
                              " input channels, " + path.filename().string() + " has " +
                              std::to_string(img.pixels.channels));
      const auto id = img.sample_id;
      const auto mask = run(net, img);
      io::write_mask(out / (id + "_pred_mask.tif"), mask);
      const auto rgb = report::rgb_view(extract_rgb(img));
      report::write_png(out / (id + "_overlay.png"),
                        report::upscale(report::overlay_contours(rgb, mask), scale));
      if (!gt.empty() && other) {
        const auto gt_path = find_gt_mask(gt, id);
        if (gt_path.empty()) throw IoError("no ground-truth mask for " + id + " under " + gt.string());
        const auto gm = io::read_mask(gt_path);
        const auto om = run(*other, img);
        auto panel = [&](const SemanticMask& m) { return report::upscale(report::overlay_contours(rgb, m), scale); };
        const auto tri = report::side_by_side({panel(gm), panel(mask), panel(om)},
                                              {"GROUND TRUTH", "PREDICTION", "COMPARISON"});
        report::write_png(out / (id + "_triptych.png"), report::stack_vertical(tri, report::legend()));
      }
      ++done;
    } catch (const Error& e) {
      ++failures;
      ctx.err << "error: " << path.string() << ": " << e.what() << "\n";
    }
  }
  ctx.out << "predicted " << done << " of " << inputs.size() << " images into " << out.string() << "\n";
  return failures ? kFailure : kOk;
}

// ---------------------------------------------------------------------------
// Dispatch

struct Command {
  std::string name;
  std::string help;
  std::vector<Setting> settings;
  std::function<int(const RunConfig&, const fs::path&, std::uint64_t, Context&)> run;
};

inline std::vector<Command> commands() {
  std::vector<Setting> train_s = {
      {"data", "", "dataset directory (manifest.csv)"},
      {"channels", "9", "input channels: 9 or 3"},
      {"head", "transformer", "head: transformer or conv"},
      {"model", "tiny", "network size: tiny, desk or full"},
      {"epochs", "200", "training epochs"},
      {"lr", "1e-4", "SGD learning rate"},
      {"momentum", "0.99", "SGD momentum"},
      {"weight_decay", "0", "L2 weight decay"},
      {"max_grad_norm", "0", "global gradient norm clip, 0 = off"},
      {"batch", "4", "batch size"},
      {"augment", "true", "flips, quarter turns and colour jitter"},
      {"free_rotation", "false", "add arbitrary-angle rotation"},
      {"class_weighting", "false", "inverse-frequency class and pixel weights"},
      {"eval_every", "1", "validate every N epochs"},
      {"val_fraction", "0.1", "validation fraction when the dataset has no split.csv"},
      {"init", "", "checkpoint to start from (a 3-channel one is adapted to 9 channels)"},
      {"adapt", "replicate", "stem adaptation: replicate, average or zero"},
      {"verbose", "false", "log every epoch"},
  };
  std::vector<Setting> eval_s = {
      {"data", "", "dataset directory"},
      {"ckpt", "", "checkpoint to evaluate"},
      {"split", "val", "split: val, train or all"},
      {"val_fraction", "0.1", "validation fraction when the dataset has no split.csv"},
      {"oracle", "false", "score the ground truth against itself"},
      {"compare", "", "two checkpoints, baseline then proposed"},
  };
  std::vector<Setting> predict_s = {
      {"ckpt", "", "checkpoint"},
      {"input", "", "image file, directory or wildcard pattern"},
      {"gt", "", "directory with ground-truth masks (for triptychs)"},
      {"compare", "", "second checkpoint shown in the triptych"},
      {"scale", "2", "overlay enlargement factor"},
  };
  for (const auto& s : eval_settings()) {
    train_s.push_back(s);
    eval_s.push_back(s);
    predict_s.push_back(s);
  }
  return {
      {"gen-data",
       "generate a synthetic dataset",
       {{"n", "160", "number of plates"},
        {"size", "128", "plate size in pixels"},
        {"preset", "desk", "plate layout: desk or full (640 px)"},
        {"day", "17", "acquisition day (lesion scaling)"},
        {"rgb_contrast", std::to_string(synth::kDefaultRgbContrast), "visible-band contrast of chlorosis"},
        {"val_fraction", "0.1", "validation fraction for split.csv"}},
       cmd_gen_data},
      {"ingest",
       "convert LabelMe annotations and images into a dataset",
       {{"annotations", "", "directory of LabelMe .json files"},
        {"images", "", "directory of images (default: next to the annotations)"},
        {"val_fraction", "0.1", "validation fraction for split.csv"}},
       cmd_ingest},
      {"train", "train a model", train_s, cmd_train},
      {"eval", "evaluate checkpoints", eval_s, cmd_eval},
      {"predict", "predict masks and overlays", predict_s, cmd_predict},
  };
}

/// Parses `args` (without the program name) and runs the chosen command.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{out, err};
  CLI::App app{"leafseg: multi-spectral leaf anomaly segmentation"};
  app.require_subcommand(1);
  std::string config_path, out_dir = "out";
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "key=value settings file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "random seed");
  app.add_option("--out", out_dir, "output directory");
  const auto cmds = commands();
  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : cmds) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->fallthrough();
    subs[cmd.name] = sub;
    for (const auto& s : cmd.settings) {
      std::string flag = s.key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      auto& slot = flag_values[cmd.name][s.key];
      if (cmd.name == "eval" && s.key == "compare") {
        sub->add_option_function<std::vector<std::string>>(
               "--" + flag, [&slot](const std::vector<std::string>& v) { slot = joined(v); }, s.help)
            ->expected(2);
      } else if (s.fallback == "true" || s.fallback == "false") {
        sub->add_option("--" + flag, slot, s.help)->expected(0, 1)->default_str("true");
      } else {
        sub->add_option("--" + flag, slot, s.help);
      }
    }
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kUsage;
  }
  const Command* chosen = nullptr;
  for (const auto& cmd : cmds)
    if (subs[cmd.name]->parsed()) chosen = &cmd;
  if (!chosen) return kUsage;
  try {
    RunConfig resolved;
    for (const auto& s : chosen->settings) resolved.values[s.key] = s.fallback;
    if (!config_path.empty()) {
      const auto file = RunConfig::parse(io::read_text(config_path), config_path);
      for (const auto& [k, v] : file.values) {
        if (k == "command") {
          if (v != chosen->name) throw UsageError(config_path + " was written for '" + v + "', not '" + chosen->name + "'");
        } else if (k == "seed") {
          if (app.count("--seed") == 0) seed = static_cast<std::uint64_t>(file.integer("seed"));
        } else if (k == "out") {
          if (app.count("--out") == 0) out_dir = v;
        } else if (resolved.values.count(k)) {
          resolved.values[k] = v;
        } else {
          throw UsageError(config_path + ": unknown setting '" + k + "' for " + chosen->name);
        }
      }
    }
    auto* sub = subs[chosen->name];
    for (const auto& s : chosen->settings) {
      std::string flag = s.key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (sub->count("--" + flag) > 0) {
        const auto& v = flag_values[chosen->name][s.key];
        resolved.values[s.key] = v.empty() ? "true" : v;
      }
    }
    const fs::path out_path(out_dir);
    need_dir(out_path);
    RunConfig stored = resolved;
    stored.values["seed"] = std::to_string(seed);
    stored.values["out"] = out_path.string();
    io::write_text(out_path / "run_config.txt", stored.to_text(chosen->name));
    return chosen->run(resolved, out_path, seed, ctx);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace leafseg::cli
