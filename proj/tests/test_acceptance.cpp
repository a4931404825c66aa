// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any check fails. Pass criterion names as arguments to run a
// subset, e.g. `test_acceptance metrics confusion`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "leafseg/annotation.hpp"
#include "leafseg/metrics.hpp"
#include "leafseg/model/network.hpp"
#include "leafseg/train/ablation.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace leafseg;
using VarD = ag::Var<double>;
using VarF = ag::Var<float>;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

// Collects failures without stopping at the first one.
struct Check {
  bool ok = true;
  std::ostringstream why;
  void expect(bool cond, const std::string& msg) {
    if (!cond && ok) why << msg;
    ok = ok && cond;
  }
  Verdict verdict(const std::string& summary) const { return {ok, ok ? summary : why.str()}; }
};

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::vector<float> uniform(std::size_t n, std::mt19937& rng, float lo, float hi) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// ---------------------------------------------------------------------------

Verdict metric_oracle() {
  Check c;
  std::mt19937 rng(2024);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    BinaryMask pred(32, 32), gt(32, 32);
    const double pp = t % 50 == 0 ? 0.0 : density(rng), pg = t % 70 == 0 ? 0.0 : density(rng);
    std::bernoulli_distribution bp(pp), bg(pg);
    for (auto& b : pred.bits) b = bp(rng);
    for (auto& b : gt.bits) b = bg(rng);
    long tp = 0, fp = 0, fn = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const bool p = pred.at(y, x), g = gt.at(y, x);
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
      }
    const double iou = tp + fp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    const double dice = 2 * tp + fp + fn == 0 ? 1.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    const double prec = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double rec = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double m_iou = metrics::iou(pred, gt), m_dice = metrics::dice(pred, gt);
    const auto pr = metrics::precision_recall(pred, gt);
    c.expect(m_iou == iou && m_dice == dice && pr.precision == prec && pr.recall == rec,
             "pair " + std::to_string(t) + " differs from the pixel count");
    c.expect(std::abs(m_dice - 2 * m_iou / (1 + m_iou)) <= 1e-12, "dice/iou identity broken on pair " + std::to_string(t));
  }
  return c.verdict("500 random 32x32 pairs exact, dice identity within 1e-12");
}

Verdict table_rounding() {
  Check c;
  const std::array<double, 4> target = {0.58, 0.25, 0.51, 0.68};
  SemanticMask gt(4, 100), pred(4, 100);
  for (int k = 0; k < 4; ++k)
    for (int x = 0; x < 100; ++x) {
      gt.at(k, x) = static_cast<std::uint8_t>(k);
      if (x < static_cast<int>(std::lround(target[k] * 100))) pred.at(k, x) = static_cast<std::uint8_t>(k);
    }
  const auto r = metrics::MetricReport::from_counts(metrics::class_counts(pred, gt));
  for (int k = 0; k < 4; ++k)
    c.expect(std::abs(r.per_class[k].iou - target[k]) < 1e-12, "class " + std::to_string(k) + " iou off target");
  const auto shown = metrics::format_fixed(r.mean.iou, 2);
  c.expect(shown == "0.50", "mean shown as " + shown);
  const auto csv = r.to_csv(2);
  c.expect(csv.find("\nmean,0.50,") != std::string::npos, "report mean row is not 0.50");
  return c.verdict("class IoUs 0.58/0.25/0.51/0.68, mean " + num(r.mean.iou, 6) + " reported as " + shown);
}

Verdict attention() {
  Check c;
  std::mt19937 rng(11);
  model::ParamStore<double> ps(3);
  const model::MhsaWeights<double> w(ps, "a", 8, 2);
  double worst = 0;
  for (int n : {1, 2, 7, 16, 33}) {
    auto x = leafseg::testing::random_var({2, n, 8}, rng, -3, 3, false);
    VarD attn;
    model::mhsa(x, w, &attn);
    for (std::int64_t r = 0; r < attn.dim(0) * n; ++r) {
      double s = 0;
      for (int k = 0; k < n; ++k) s += attn.at(r * n + k);
      worst = std::max(worst, std::abs(s - 1));
    }
  }
  c.expect(worst <= 1e-6, "row sum error " + num(worst));

  // N = 1: attention is exactly 1 and the output is the value path.
  const int d = 8;
  auto x1 = leafseg::testing::random_var({1, 1, d}, rng, -1, 1, false);
  VarD a1;
  const auto y1 = model::mhsa(x1, w, &a1);
  for (std::int64_t i = 0; i < a1.size(); ++i) c.expect(a1.at(i) == 1.0, "N=1 attention is not exactly 1");
  std::vector<double> v(d), expect(d);
  for (int i = 0; i < d; ++i) {
    v[i] = w.bv.at(i);
    for (int j = 0; j < d; ++j) v[i] += w.wv.at(i * d + j) * x1.at(j);
  }
  double n1_err = 0;
  for (int i = 0; i < d; ++i) {
    expect[i] = w.bo.at(i);
    for (int j = 0; j < d; ++j) expect[i] += w.wo.at(i * d + j) * v[j];
    n1_err = std::max(n1_err, std::abs(y1.at(i) - expect[i]));
  }
  c.expect(n1_err <= 1e-12, "N=1 output differs from the value path by " + num(n1_err));

  // Permuting tokens permutes outputs.
  const int n = 9;
  auto x = leafseg::testing::random_var({1, n, d}, rng, -2, 2, false);
  const auto y = model::mhsa(x, w);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double perm_err = 0;
  for (int t = 0; t < 10; ++t) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> px(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) px[i * d + k] = x.at(perm[i] * d + k);
    const auto py = model::mhsa(VarD::from({1, n, d}, px), w);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) perm_err = std::max(perm_err, std::abs(py.at(i * d + k) - y.at(perm[i] * d + k)));
  }
  c.expect(perm_err <= 1e-12, "permutation covariance error " + num(perm_err));
  return c.verdict("max row-sum error " + num(worst) + ", N=1 exact, 10 permutations within " + num(perm_err));
}

Verdict gradient_check() {
  Check c;
  const auto sig = synth::default_signatures(BandManifest::canonical());
  auto spec = synth::PlateSpec::desk_scale(64);
  spec.rng_seed = synth::plate_seed(3, 0);
  const auto s = train::sample_from_plate(synth::gen_plate(spec, sig, "g"), 9);
  model::Network<double> net(model::ModelConfig::tiny(9, 64), 2);
  train::LossConfig lc;
  lc.obj_iou_ratio = 0.0;  // fixed objectness targets keep the loss smooth
  const auto x = model::to_tensor<double>({&s.image});
  auto loss_fn = [&] {
    const auto out = net.forward(x, true);
    return train::total_loss(out, net.config(), {s.instances}, {&s.mask}, lc).total;
  };
  std::vector<VarD> picked;
  for (const auto* name : {"backbone.focus.conv.conv.weight", "head.tf.layer0.attn.q.weight", "detect.0.weight",
                           "head.proto.cv3.conv.weight", "head.semantic.weight"}) {
    c.expect(net.params().contains(name), std::string("missing parameter ") + name);
    if (net.params().contains(name)) picked.push_back(net.params().get(name));
  }
  const auto res = leafseg::testing::gradcheck(loss_fn, picked, 1e-5, 4);
  c.expect(res.checked == 20, "checked " + std::to_string(res.checked) + " entries");
  c.expect(res.max_rel_err < 1e-3, "max relative error " + num(res.max_rel_err));
  return c.verdict(std::to_string(res.checked) + " parameters, max relative error " + num(res.max_rel_err, 3));
}

Verdict weight_adaptation() {
  Check c;
  std::mt19937 rng(5);
  const int out = 16, k = 3;
  const auto w3 = uniform(static_cast<std::size_t>(out) * 3 * k * k, rng, -1, 1);
  for (auto mode : {model::AdaptMode::Replicate, model::AdaptMode::Average, model::AdaptMode::Zero}) {
    const auto w9 = model::adapt_first_conv(w3, out, k, mode, 1);
    for (int o = 0; o < out; ++o)
      c.expect(std::memcmp(w9.data() + o * 9 * k * k, w3.data() + o * 3 * k * k, sizeof(float) * 3 * k * k) == 0,
               "first three input channels not copied bitwise");
  }

  // Zero mode: the 9-band conv ignores whatever the extra bands hold.
  const auto w9 = model::adapt_first_conv(w3, out, k, model::AdaptMode::Zero);
  auto wv3 = VarF::from({out, 3, k, k}, w3);
  auto wv9 = VarF::from({out, 9, k, k}, w9);
  double conv_err = 0;
  for (float scale : {1.f, 100.f}) {
    auto x9 = VarF::from({2, 9, 12, 12}, uniform(2 * 9 * 144, rng, -scale, scale));
    std::vector<float> first3;
    for (int b = 0; b < 2; ++b)
      first3.insert(first3.end(), x9.values().begin() + b * 9 * 144, x9.values().begin() + b * 9 * 144 + 3 * 144);
    const auto y9 = ag::conv2d(x9, wv9, VarF(), 1, 1);
    const auto y3 = ag::conv2d(VarF::from({2, 3, 12, 12}, first3), wv3, VarF(), 1, 1);
    for (std::int64_t i = 0; i < y9.size(); ++i) conv_err = std::max(conv_err, static_cast<double>(std::abs(y9.at(i) - y3.at(i))));
  }
  c.expect(conv_err <= 1e-6, "zero-mode stem output differs by " + num(conv_err));

  // The same on the whole network through the Focus stem.
  model::Network<float> net3(model::ModelConfig::tiny(3, 64), 1), net9(model::ModelConfig::tiny(9, 64), 2);
  model::init_from_rgb(net9, net3, model::AdaptMode::Zero);
  auto x9 = VarF::from({1, 9, 64, 64}, uniform(9 * 64 * 64, rng, 0, 1));
  auto x3 = VarF::from({1, 3, 64, 64}, std::vector<float>(x9.values().begin(), x9.values().begin() + 3 * 64 * 64));
  double net_err = 0;
  {
    ag::NoGradGuard ng;
    const auto o9 = net9.forward(x9, false), o3 = net3.forward(x3, false);
    for (int s = 0; s < 3; ++s)
      for (std::int64_t i = 0; i < o9.detections[s].size(); ++i)
        net_err = std::max(net_err, static_cast<double>(std::abs(o9.detections[s].at(i) - o3.detections[s].at(i))));
  }
  c.expect(net_err <= 1e-6, "zero-mode network output differs by " + num(net_err));
  return c.verdict("rgb slices bitwise in all modes, zero-mode stem error " + num(conv_err) + ", network " +
                   num(net_err));
}

Verdict shape_contract() {
  Check c;
  const auto cfg = model::ModelConfig::tiny(9, 640);
  model::Network<float> net(cfg, 1);
  std::mt19937 rng(1);
  auto x = VarF::from({1, 9, 640, 640}, uniform(9 * 640 * 640, rng, 0, 1));
  ag::NoGradGuard ng;
  const auto out = net.forward(x, false);
  const std::array<std::int64_t, 3> grids = {80, 40, 20};
  c.expect(out.detections.size() == 3, "expected 3 detection scales");
  for (std::size_t s = 0; s < out.detections.size() && s < 3; ++s)
    c.expect(out.detections[s].dim(2) == grids[s] && out.detections[s].dim(3) == grids[s],
             "scale " + std::to_string(s) + " grid is wrong");
  c.expect(out.semantic.shape() == ag::Shape{1, 4, 640, 640}, "semantic map is not [4, 640, 640]");
  const auto& v = x.values();
  const auto sliced = model::focus_slice(v, 9, 640, 640);
  c.expect(sliced.size() == 36u * 320 * 320, "focus output size is wrong");
  c.expect(model::focus_unslice(sliced, 9, 640, 640) == v, "focus round trip is not exact");
  return c.verdict("grids 80/40/20, semantic [4, 640, 640], focus round trip exact");
}

Verdict overfit_smoke() {
  Check c;
  const auto sig = synth::default_signatures(BandManifest::canonical());
  auto spec = synth::PlateSpec::desk_scale(64);
  std::vector<train::Sample> s;
  for (int i = 0; i < 8; ++i) {
    spec.rng_seed = synth::plate_seed(1, static_cast<std::uint64_t>(i));
    s.push_back(train::sample_from_plate(synth::gen_plate(spec, sig, "p" + std::to_string(i)), 9));
  }
  model::Network<float> net(model::ModelConfig::tiny(9, 64), 1);
  auto tc = train::AblationConfig::smoke_defaults(200);
  tc.augment = train::AugmentConfig::none();
  tc.eval_every = 50;
  std::vector<double> loss;
  train::train(net, s, {}, tc, [&](const train::EpochRecord& e) { loss.push_back(e.total); });
  const double d = train::evaluate(net, s).mean.dice;
  int violations = 0;
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 9; i < 50; ++i) {
    const double m = std::accumulate(loss.begin() + i - 9, loss.begin() + i + 1, 0.0) / 10;
    if (!(m < prev)) ++violations;
    prev = m;
  }
  c.expect(d >= 0.85, "training dice " + num(d));
  c.expect(violations == 0, std::to_string(violations) + " non-decreasing steps in the 10-epoch moving average");
  return c.verdict("training dice " + num(d) + " after 200 epochs, moving average strictly decreasing to epoch 50");
}

Verdict ablation() {
  Check c;
  train::AblationConfig ac;
  const auto r = train::run_ablation(ac, [](const std::string& v, const train::EpochRecord& e) {
    if (e.epoch % 10 == 0)
      std::cout << "  " << v << " epoch " << e.epoch << " loss " << num(e.total) << " val dice " << num(e.dice) << "\n"
                << std::flush;
  });
  std::cout << train::comparison_csv(r.baseline.report, r.proposed.report);
  const auto gains = r.class_dice_gain();
  const auto best = static_cast<int>(std::max_element(gains.begin(), gains.end()) - gains.begin());
  c.expect(r.dice_gain() >= 0.03, "mean dice gain " + num(r.dice_gain()));
  c.expect(best == code(ClassLabel::Chlorosis),
           "largest gain on " + std::string(class_key(static_cast<ClassLabel>(best))));
  return c.verdict("mean dice " + num(r.baseline.report.mean.dice) + " -> " + num(r.proposed.report.mean.dice) +
                   " (gain " + num(r.dice_gain()) + "), chlorosis gain " + num(gains[1]) + " is the largest");
}

Verdict ingestion() {
  Check c;
  // Rasterized area against the shoelace area of large polygons.
  std::mt19937 rng(21);
  double worst = 0;
  int checked = 0;
  for (int t = 0; t < 20; ++t) {
    std::uniform_real_distribution<double> radius(80, 140), jitter(0.7, 1.0);
    const double r0 = radius(rng);
    const int n = 5 + t % 6;
    PolygonAnnotation p{ClassLabel::Chlorosis, {}};
    for (int i = 0; i < n; ++i) {
      const double a = 2 * M_PI * i / n, r = r0 * jitter(rng);
      p.points.push_back({150 + r * std::cos(a), 150 + r * std::sin(a)});
    }
    const double area = leafseg::testing::shoelace_area(p.points);
    if (area < 1e4) continue;
    const double got = static_cast<double>(rasterize_polygon(p, 300, 300).count());
    ++checked;
    worst = std::max(worst, std::abs(got - area) / area);
  }
  c.expect(checked >= 10, "only " + std::to_string(checked) + " polygons reached 1e4 px");
  c.expect(worst <= 0.02, "area error " + num(worst));

  // Golden LabelMe fixture.
  const auto set = parse_labelme(io::read_text(std::filesystem::path(LEAFSEG_TEST_DATA) / "golden_labelme.json"));
  const std::vector<ClassLabel> labels = {ClassLabel::Normal, ClassLabel::Chlorosis, ClassLabel::PigmentAccumulation,
                                          ClassLabel::Tipburn, ClassLabel::PigmentAccumulation};
  c.expect(set.sample_id == "plate_017" && set.height == 80 && set.width == 100, "fixture header differs");
  c.expect(set.polygons.size() == labels.size() && set.skipped_shapes == 1, "fixture polygon count differs");
  for (std::size_t i = 0; i < std::min(labels.size(), set.polygons.size()); ++i)
    c.expect(set.polygons[i].label == labels[i], "fixture label " + std::to_string(i) + " differs");
  if (set.polygons.size() > 1)
    c.expect(set.polygons[1].points == std::vector<Point>{{20.5, 20.5}, {40.0, 22.0}, {30.0, 40.25}},
             "fixture chlorosis vertices differ");
  c.expect(build_semantic_mask(set).labels == leafseg::testing::paint_per_pixel(set).labels,
           "fixture mask differs from the per-pixel painter");

  std::vector<std::string> ids;
  for (int i = 0; i < 160; ++i) ids.push_back("plate_" + std::to_string(i));
  const auto split = split_dataset(ids, 0.1, 0);
  c.expect(split.train_ids.size() == 144 && split.val_ids.size() == 16, "split is not 144/16");
  return c.verdict("area error " + num(worst, 3) + " on " + std::to_string(checked) + " polygons of at least 1e4 px, golden fixture parsed, split 144/16");
}

Verdict confusion() {
  Check c;
  std::mt19937 rng(9);
  std::uniform_int_distribution<int> lab(0, 4);
  auto random_mask = [&] {
    SemanticMask m(16, 16);
    for (auto& l : m.labels) {
      const int v = lab(rng);
      l = static_cast<std::uint8_t>(v == 4 ? kBackground : v);
    }
    return m;
  };
  for (int t = 0; t < 20; ++t) {
    std::vector<SemanticMask> gts, preds;
    for (int i = 0; i < 3; ++i) {
      gts.push_back(random_mask());
      preds.push_back(random_mask());
    }
    const auto m = metrics::confusion_matrix(preds, gts).normalized();
    for (int col = 0; col < 4; ++col) {
      double s = 0;
      for (int row = 0; row < 4; ++row) s += m[row][col];
      c.expect(std::abs(s - 1) <= 1e-6, "column " + std::to_string(col) + " sums to " + num(s));
    }
    const auto id = metrics::confusion_matrix(gts, gts).normalized();
    for (int row = 0; row < 4; ++row)
      for (int col = 0; col < 4; ++col) c.expect(id[row][col] == (row == col ? 1.0 : 0.0), "perfect case not identity");
  }
  // 100 chlorosis pixels: 30 kept, 70 called normal.
  SemanticMask gt(10, 10, 1), pred(10, 10, 1);
  for (int i = 0; i < 70; ++i) pred.labels[static_cast<std::size_t>(i)] = 0;
  const auto m = metrics::confusion_matrix({pred}, {gt}).normalized();
  c.expect(m[0][1] == 0.7 && m[1][1] == 0.3 && m[2][1] == 0.0 && m[3][1] == 0.0, "30/70 case not reproduced");
  return c.verdict("columns sum to 1, identity on perfect predictions, 30/70 case exact");
}

struct Criterion {
  std::string key;
  std::string title;
  double budget_s;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {"metrics", "metric oracle suite", 10, metric_oracle},
      {"rounding", "table mean rounding convention", 5, table_rounding},
      {"attention", "attention correctness", 30, attention},
      {"gradcheck", "end-to-end gradient check", 300, gradient_check},
      {"adaptation", "weight adaptation preservation", 60, weight_adaptation},
      {"shapes", "shape contract", 60, shape_contract},
      {"smoke", "overfit smoke test", 3600, overfit_smoke},
      {"ablation", "directional ablation", 7200, ablation},
      {"ingestion", "ingestion round trip", 10, ingestion},
      {"confusion", "confusion matrix", 10, confusion},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failed = 0, ran = 0;
  for (const auto& cr : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), cr.key) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = cr.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (v.pass && secs > cr.budget_s) v = {false, "took " + num(secs) + " s, budget " + num(cr.budget_s) + " s"};
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << cr.title << ": " << v.detail << " [" << std::fixed
              << std::setprecision(1) << secs << " s]" << std::defaultfloat << std::endl;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 && ran > 0 ? 0 : 1;
}
