#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "leafseg/synth.hpp"
#include "leafseg/train/trainer.hpp"
#include "support/gradcheck.hpp"

using namespace leafseg;
using namespace leafseg::train;
using leafseg::testing::VarD;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> plates(int n, int size, int channels, std::uint64_t seed = 3) {
  const auto sig = synth::default_signatures(BandManifest::canonical());
  auto spec = synth::PlateSpec::desk_scale(size);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    spec.rng_seed = synth::plate_seed(seed, static_cast<std::uint64_t>(i));
    out.push_back(sample_from_plate(synth::gen_plate(spec, sig, "p" + std::to_string(i)), channels));
  }
  return out;
}

BinaryMask block(int n, int y0, int x0, int side) {
  BinaryMask m(n, n);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
  return m;
}

// Output whose every head agrees with one Chlorosis square at [8, 28)^2.
struct PerfectCase {
  model::ModelConfig cfg = model::ModelConfig::tiny(9, 64);
  std::vector<std::vector<GtInstance>> gts;
  SemanticMask mask{64, 64, kBackground};
  model::ModelOutput<double> out;

  PerfectCase() {
    const auto m = block(64, 8, 8, 20);
    gts = {{{ClassLabel::Chlorosis, train::mask_box(m), m}}};
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) mask.labels[i] = code(ClassLabel::Chlorosis);
    const int no = cfg.outputs_per_anchor(), nm = cfg.mask_proto_channels;
    for (int s = 0; s < 3; ++s) {
      const int g = 64 / model::kStrides[s];
      std::vector<double> v(static_cast<std::size_t>(3 * g * g * no), -20.0);
      for (const auto& a : detail::assign(gts, cfg, s, 4.0)) {
        double* row = v.data() + a.row * no;
        for (int k = 0; k < 4; ++k) row[5 + k] = k == 1 ? 20.0 : -20.0;
        for (int k = 0; k < nm; ++k) row[5 + 4 + k] = k == 0 ? 1.0 : 0.0;
      }
      out.detections.push_back(VarD::from({1, 3, g, g, no}, std::move(v), true));
    }
    std::vector<double> p(static_cast<std::size_t>(nm * 16 * 16), 0.0);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) p[static_cast<std::size_t>(y * 16 + x)] = (y >= 2 && y < 7 && x >= 2 && x < 7) ? 20 : -20;
    out.prototypes = VarD::from({1, nm, 16, 16}, std::move(p), true);
    std::vector<double> z(4 * 64 * 64, -20.0);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) z[64 * 64 + i] = 20.0;
    out.semantic = VarD::from({1, 4, 64, 64}, std::move(z), true);
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Loss

TEST(Loss, PerfectOutputsHaveNearZeroSegAndCls) {
  PerfectCase pc;
  const auto r = total_loss(pc.out, pc.cfg, pc.gts, {&pc.mask});
  EXPECT_GT(r.positives, 0u);
  EXPECT_LT(r.seg, 1e-3);
  EXPECT_LT(r.cls, 1e-3);
}

TEST(Loss, EmptyTargetHasOnlyObjectness) {
  PerfectCase pc;
  for (auto& d : pc.out.detections) std::fill(d.values().begin(), d.values().end(), 0.0);
  SemanticMask bg(64, 64, kBackground);
  const auto r = total_loss(pc.out, pc.cfg, {{}}, {&bg});
  EXPECT_EQ(r.positives, 0u);
  EXPECT_EQ(r.box, 0.0);
  EXPECT_EQ(r.cls, 0.0);
  EXPECT_GT(r.obj, 0.0);
  // Zero objectness logits against all-zero targets: balance sums to 5.4 log 2.
  EXPECT_NEAR(r.obj, 5.4 * std::log(2.0), 1e-12);
}

TEST(Loss, TotalIsWeightedSumTimesBatch) {
  PerfectCase pc;
  LossConfig lc;
  const auto r = total_loss(pc.out, pc.cfg, pc.gts, {&pc.mask}, lc);
  EXPECT_NEAR(r.total.item(), 0.05 * r.box + 1.0 * r.obj + 0.5 * r.cls + 1.0 * r.seg, 1e-12);
  EXPECT_THROW(total_loss(pc.out, pc.cfg, {}, {}, lc), InvalidArgument);
}

TEST(Loss, NonFiniteComponentIsNamed) {
  PerfectCase pc;
  pc.out.semantic.values()[5] = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(pc.out, pc.cfg, pc.gts, {&pc.mask});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("seg"), std::string::npos);
    EXPECT_EQ(std::string(e.what()).find("box"), std::string::npos);
  }
}

TEST(Loss, PixelCrossEntropyMatchesHandValue) {
  // Logits (1, 0, 0, 0) with label 0: -log(e / (e + 4)).
  auto z = VarD::from({1, 4, 1, 2}, {1, 0, 0, 0, 0, 0, 0, 0}, true);
  const auto l = pixel_cross_entropy(z, {0, kBackground});
  const double e = std::exp(1.0);
  EXPECT_NEAR(l.item(), 0.5 * (-std::log(e / (e + 4)) + -std::log(1.0 / 5)), 1e-12);
  const auto w = pixel_cross_entropy(z, {0, kBackground}, {2, 1, 1, 1, 3});
  EXPECT_NEAR(w.item(), 0.5 * (-2 * std::log(e / (e + 4)) - 3 * std::log(1.0 / 5)), 1e-12);
  EXPECT_THROW(pixel_cross_entropy(z, {0}), InvalidArgument);
  EXPECT_THROW(pixel_cross_entropy(z, {0, 7}), InvalidArgument);
}

TEST(Loss, PixelCrossEntropyGradcheck) {
  std::mt19937 rng(4);
  auto z = leafseg::testing::random_var({2, 4, 3, 3}, rng, -3, 3);
  std::vector<std::uint8_t> labels;
  std::uniform_int_distribution<int> lab(0, 4);
  for (int i = 0; i < 18; ++i) {
    const int v = lab(rng);
    labels.push_back(v == 4 ? kBackground : static_cast<std::uint8_t>(v));
  }
  const std::vector<double> w = {1.5, 0.5, 2.0, 1.0, 0.7};
  const auto res = leafseg::testing::gradcheck([&] { return pixel_cross_entropy(z, labels, w); }, {z}, 1e-6, 72);
  EXPECT_EQ(res.checked, 72);
  EXPECT_LT(res.max_rel_err, 1e-6);
}

TEST(Loss, EndToEndGradientMatchesFiniteDifferences) {
  // Double-precision tiny network on one plate; objectness targets fixed at 1
  // so that the loss is a smooth function of the weights.
  auto samples = plates(1, 64, 9);
  model::Network<double> net(model::ModelConfig::tiny(9, 64), 2);
  LossConfig lc;
  lc.obj_iou_ratio = 0.0;
  const auto x = model::to_tensor<double>({&samples[0].image});
  auto loss_fn = [&] {
    const auto out = net.forward(x, true);
    return total_loss(out, net.config(), {samples[0].instances}, {&samples[0].mask}, lc).total;
  };
  std::vector<VarD> picked;
  for (const auto* name : {"backbone.focus.conv.conv.weight", "head.tf.layer0.attn.q.weight", "detect.0.weight",
                           "head.proto.cv3.conv.weight", "head.semantic.weight"})
    if (net.params().contains(name)) picked.push_back(net.params().get(name));
  ASSERT_EQ(picked.size(), 5u);
  const auto res = leafseg::testing::gradcheck(loss_fn, picked, 1e-5, 4);
  EXPECT_EQ(res.checked, 20);
  EXPECT_LT(res.max_rel_err, 1e-3);
}

TEST(Loss, ClassWeightsFollowInverseFrequency) {
  const auto w = inverse_frequency_weights({100, 50, 25, 0});
  double mean = 0;
  for (double v : w) mean += v / 4;
  EXPECT_NEAR(mean, 1.0, 1e-12);
  EXPECT_NEAR(w[1] / w[0], 2.0, 1e-12);
  EXPECT_NEAR(w[2] / w[0], 4.0, 1e-12);
  const std::array<std::uint64_t, 5> counts = {400, 40, 20, 10, 1530};
  const auto pw = balanced_pixel_weights(counts);
  double weighted = 0;
  for (int k = 0; k < 5; ++k) weighted += pw[k] * static_cast<double>(counts[k]);
  EXPECT_NEAR(weighted, 2000.0, 1e-9);
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(pw[k] * static_cast<double>(counts[k]), 400.0, 1e-9);
}

TEST(Loss, GtInstancesKeepOnlyTheirClassPixels) {
  const auto s = plates(1, 64, 9)[0];
  ASSERT_FALSE(s.instances.empty());
  for (const auto& g : s.instances) {
    const auto v = static_cast<std::uint8_t>(code(g.cls));
    for (std::size_t i = 0; i < g.mask.bits.size(); ++i)
      if (g.mask.bits[i]) ASSERT_EQ(s.mask.labels[i], v);
    const auto b = g.box;
    EXPECT_GT(b[2], b[0]);
    EXPECT_GT(b[3], b[1]);
  }
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

// numpy-style rot90 (counter-clockwise) of pixel (r, c) in an n x n grid.
std::pair<int, int> ccw(int r, int c, int n) { return {n - 1 - c, r}; }

std::pair<int, int> forward_map(const GridTransform& t, int r, int c, int n) {
  if (t.flip_x) c = n - 1 - c;
  if (t.flip_y) r = n - 1 - r;
  for (int k = 0; k < t.quarter_turns; ++k) std::tie(r, c) = ccw(r, c, n);
  return {r, c};
}

SemanticMask random_labels(int n, std::mt19937& rng) {
  SemanticMask m(n, n);
  std::uniform_int_distribution<int> d(0, 4);
  for (auto& l : m.labels) {
    const int v = d(rng);
    l = v == 4 ? kBackground : static_cast<std::uint8_t>(v);
  }
  return m;
}

}  // namespace

TEST(Augment, GridTransformsMatchForwardOracle) {
  std::mt19937 rng(8);
  const int n = 7;
  const auto m = random_labels(n, rng);
  for (int fx = 0; fx < 2; ++fx)
    for (int fy = 0; fy < 2; ++fy)
      for (int q = 0; q < 4; ++q) {
        const GridTransform t{fx == 1, fy == 1, q};
        auto out = m;
        apply(t, out);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < n; ++c) {
            const auto [dr, dc] = forward_map(t, r, c, n);
            ASSERT_EQ(out.at(dr, dc), m.at(r, c)) << fx << fy << q;
          }
      }
}

TEST(Augment, DoubleFlipIsIdentity) {
  std::mt19937 rng(9);
  const auto m = random_labels(6, rng);
  for (const GridTransform t : {GridTransform{true, false, 0}, GridTransform{false, true, 0}}) {
    auto out = m;
    apply(t, out);
    EXPECT_NE(out.labels, m.labels);
    apply(t, out);
    EXPECT_EQ(out.labels, m.labels);
  }
  auto r = m;
  for (int k = 0; k < 4; ++k) apply(GridTransform{false, false, 1}, r);
  EXPECT_EQ(r.labels, m.labels);
}

TEST(Augment, QuarterAngleRotationMatchesGrid) {
  std::mt19937 rng(10);
  const auto m = random_labels(8, rng);
  auto a = m, b = m;
  AngleRotation{-90}.apply(a);
  apply(GridTransform{false, false, 1}, b);
  EXPECT_EQ(a.labels, b.labels);
  a = m;
  b = m;
  AngleRotation{90}.apply(a);
  apply(GridTransform{false, false, 3}, b);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Augment, KeepsImageMaskAndInstancesAligned) {
  auto s = plates(1, 64, 9, 5)[0];
  std::mt19937_64 rng(1);
  AugmentConfig cfg;
  cfg.color_jitter = false;
  for (int trial = 0; trial < 8; ++trial) {
    auto img = s.image;
    auto mask = s.mask;
    auto inst = s.instances;
    augment(img, mask, inst, rng, cfg);
    std::array<int, 256> before{}, after{};
    for (auto l : s.mask.labels) ++before[l];
    for (auto l : mask.labels) ++after[l];
    EXPECT_EQ(before, after);
    ASSERT_EQ(inst.size(), s.instances.size());
    for (const auto& g : inst) {
      EXPECT_EQ(g.box, train::mask_box(g.mask));
      for (std::size_t i = 0; i < g.mask.bits.size(); ++i)
        if (g.mask.bits[i]) ASSERT_EQ(mask.labels[i], code(g.cls));
    }
    // Band values travel with their labels: compare sorted band 0 per class.
    for (int k = 0; k < kNumClasses; ++k) {
      std::multiset<float> a, b;
      for (std::size_t i = 0; i < mask.labels.size(); ++i) {
        if (s.mask.labels[i] == k) a.insert(s.image.plane(0)[i]);
        if (mask.labels[i] == k) b.insert(img.plane(0)[i]);
      }
      EXPECT_EQ(a, b);
    }
  }
}

TEST(Augment, JitterScalesAndClamps) {
  Raster r(2, 1, 2, 0.5f);
  r.at(1, 0, 1) = 0.95f;
  jitter(r, {1.1, 1.1}, {0.0, 0.05});
  EXPECT_NEAR(r.at(0, 0, 0), 0.55, 1e-6);
  EXPECT_NEAR(r.at(1, 0, 0), 0.6, 1e-6);
  EXPECT_EQ(r.at(1, 0, 1), 1.0f);
  EXPECT_THROW(jitter(r, {1.0}, {0.0}), InvalidArgument);
}

TEST(Augment, RejectsNonSquare) {
  SemanticMask m(4, 5);
  EXPECT_THROW(apply(GridTransform{true, false, 0}, m), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Evaluation and training

TEST(Evaluate, OraclePredictionsScorePerfectly) {
  const auto s = plates(3, 64, 9);
  const auto r = build_report(oracle_predictions(s), s);
  for (int k = 0; k < kNumClasses; ++k) {
    EXPECT_DOUBLE_EQ(r.per_class[k].iou, 1.0);
    EXPECT_DOUBLE_EQ(r.per_class[k].dice, 1.0);
  }
  EXPECT_DOUBLE_EQ(r.map50, 1.0);
  const auto m = r.confusion.normalized();
  for (int a = 0; a < kNumClasses; ++a)
    for (int b = 0; b < kNumClasses; ++b)
      if (r.confusion.column_total(b) > 0) EXPECT_DOUBLE_EQ(m[a][b], a == b ? 1.0 : 0.0);
}

TEST(Evaluate, ChannelMismatchIsReported) {
  const auto s = plates(1, 64, 3);
  model::Network<float> net(model::ModelConfig::tiny(9, 64), 1);
  EXPECT_THROW(evaluate(net, s), InvalidArgument);
}

TEST(Split, IsDisjointAndSharedAcrossChannelCounts) {
  auto a = split_samples(plates(10, 64, 9), 0.2, 4);
  auto b = split_samples(plates(10, 64, 3), 0.2, 4);
  ASSERT_EQ(a.val.size(), 2u);
  ASSERT_EQ(a.train.size(), 8u);
  for (std::size_t i = 0; i < a.val.size(); ++i) EXPECT_EQ(a.val[i].id, b.val[i].id);
  for (const auto& v : a.val)
    for (const auto& t : a.train) EXPECT_NE(v.id, t.id);
}

namespace {

TrainConfig quick(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.lr = 5e-3;
  tc.momentum = 0.9;
  tc.max_grad_norm = 10;
  tc.batch_size = 2;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST(Train, SameSeedGivesSameFirstEpoch) {
  const auto s = plates(4, 64, 9);
  std::vector<double> totals;
  for (int run = 0; run < 2; ++run) {
    model::Network<float> net(model::ModelConfig::tiny(9, 64), 7);
    totals.push_back(train::train(net, s, {}, quick(1)).history.epochs[0].total);
  }
  EXPECT_EQ(totals[0], totals[1]);
}

TEST(Train, WritesHistoryAndCheckpoints) {
  const auto dir = fs::temp_directory_path() / "leafseg_train_test";
  fs::remove_all(dir);
  const auto s = plates(4, 64, 9);
  model::Network<float> net(model::ModelConfig::tiny(9, 64), 7);
  auto tc = quick(3);
  tc.out_dir = dir;
  const auto r = train::train(net, {s[0], s[1], s[2]}, {s[3]}, tc);
  ASSERT_EQ(r.history.epochs.size(), 3u);
  const auto csv = io::read_text(dir / "history.csv");
  std::istringstream is(csv);
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,box_loss,seg_loss,cls_loss,precision,recall,map50");
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "last.ckpt"));
  const auto best = model::load_checkpoint(dir / "best.ckpt");
  double top = -1;
  for (const auto& e : r.history.epochs) top = std::max(top, e.map50);
  EXPECT_DOUBLE_EQ(best.metrics.at("map50"), top);
  fs::remove_all(dir);
}

TEST(Train, DivergenceKeepsLastGoodCheckpoint) {
  const auto dir = fs::temp_directory_path() / "leafseg_diverge_test";
  fs::remove_all(dir);
  const auto s = plates(2, 64, 9);
  model::Network<float> net(model::ModelConfig::tiny(9, 64), 7);
  auto tc = quick(3);
  tc.lr = 1e30;
  tc.max_grad_norm = 0;
  tc.out_dir = dir;
  try {
    train::train(net, s, {}, tc);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "last_good.ckpt"));
    auto good = model::network_from<float>(e.last_good());
    EXPECT_TRUE(weights_finite(good));
  }
  fs::remove_all(dir);
}

TEST(Train, RejectsBadConfig) {
  const auto s = plates(1, 64, 9);
  model::Network<float> net(model::ModelConfig::tiny(9, 64), 7);
  auto tc = quick(1);
  tc.lr = 0;
  EXPECT_THROW(train::train(net, s, {}, tc), InvalidArgument);
  tc = quick(1);
  EXPECT_THROW(train::train(net, {}, {}, tc), InvalidArgument);
  const auto rgb = plates(1, 64, 3);
  EXPECT_THROW(train::train(net, rgb, {}, tc), InvalidArgument);
}

TEST(Sgd, ClipsToGlobalNorm) {
  auto p = VarD::from({2}, {0.0, 0.0}, true);
  Sgd<double> opt({p}, 1.0, 0.0, 0.0, 1.0);
  auto l = ag::sum(ag::mul(p, VarD::from({2}, {3.0, 4.0}, false)));
  l.backward();
  EXPECT_NEAR(opt.grad_norm(), 5.0, 1e-12);
  opt.step();
  EXPECT_NEAR(p.values()[0], -0.6, 1e-12);
  EXPECT_NEAR(p.values()[1], -0.8, 1e-12);
}
