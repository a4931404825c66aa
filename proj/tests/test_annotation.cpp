#include <gtest/gtest.h>

#include <random>

#include "leafseg/annotation.hpp"
#include "leafseg/io/image_io.hpp"
#include "support/oracles.hpp"

using namespace leafseg;
using leafseg::testing::enumerate_polygon;
using leafseg::testing::paint_per_pixel;
using leafseg::testing::shoelace_area;

namespace {

std::string fixture(const std::string& name) {
  return io::read_text(std::filesystem::path(LEAFSEG_TEST_DATA) / name);
}

PolygonAnnotation poly(ClassLabel l, std::vector<Point> pts) { return {l, std::move(pts)}; }

PolygonAnnotation random_polygon(std::mt19937& rng, int h, int w) {
  std::uniform_real_distribution<double> ux(-3, w + 3), uy(-3, h + 3);
  std::uniform_int_distribution<int> un(3, 9);
  PolygonAnnotation p;
  p.label = ClassLabel::Chlorosis;
  const int n = un(rng);
  for (int i = 0; i < n; ++i) p.points.push_back({ux(rng), uy(rng)});
  return p;
}

}  // namespace

TEST(LabelMe, GoldenFixture) {
  const auto set = parse_labelme(fixture("golden_labelme.json"));
  EXPECT_EQ(set.sample_id, "plate_017");
  EXPECT_EQ(set.height, 80);
  EXPECT_EQ(set.width, 100);
  EXPECT_EQ(set.skipped_shapes, 1);
  ASSERT_EQ(set.polygons.size(), 5u);
  const std::vector<ClassLabel> labels = {ClassLabel::Normal, ClassLabel::Chlorosis, ClassLabel::PigmentAccumulation,
                                          ClassLabel::Tipburn, ClassLabel::PigmentAccumulation};
  for (std::size_t i = 0; i < labels.size(); ++i) EXPECT_EQ(set.polygons[i].label, labels[i]);
  EXPECT_EQ(set.polygons[1].points, (std::vector<Point>{{20.5, 20.5}, {40.0, 22.0}, {30.0, 40.25}}));
  EXPECT_EQ(set.polygons[2].points.size(), 4u);
}

TEST(LabelMe, SingleTipburnShape) {
  const char* doc = R"({"shapes":[{"label":"tipburn","points":[[1,1],[5,1],[5,5],[1,5]],"shape_type":"polygon"}],
                        "imageHeight":8,"imageWidth":8})";
  const auto set = parse_labelme(doc, "x");
  ASSERT_EQ(set.polygons.size(), 1u);
  EXPECT_EQ(set.polygons[0].label, ClassLabel::Tipburn);
  EXPECT_EQ(set.polygons[0].points.size(), 4u);
}

TEST(LabelMe, NoShapes) {
  const auto set = parse_labelme(R"({"shapes":[],"imageHeight":4,"imageWidth":4})");
  EXPECT_TRUE(set.polygons.empty());
}

TEST(LabelMe, UnknownLabelIsNamed) {
  const char* doc = R"({"shapes":[{"label":"rust","points":[[1,1],[5,1],[5,5]],"shape_type":"polygon"}],
                        "imageHeight":8,"imageWidth":8})";
  try {
    parse_labelme(doc);
    FAIL() << "expected UnknownLabelError";
  } catch (const UnknownLabelError& e) {
    EXPECT_EQ(e.labels(), std::vector<std::string>{"rust"});
    EXPECT_NE(std::string(e.what()).find("rust"), std::string::npos);
  }
}

TEST(LabelMe, MalformedDocuments) {
  EXPECT_THROW(parse_labelme("{"), FormatError);
  EXPECT_THROW(parse_labelme(R"({"shapes":[]})"), FormatError);
  EXPECT_THROW(parse_labelme(R"({"shapes":[{"label":"normal","points":[[1,1],[2,2]]}],"imageHeight":4,"imageWidth":4})"),
               FormatError);
}

TEST(LabelMe, WriterRoundTrip) {
  auto set = parse_labelme(fixture("golden_labelme.json"));
  set.skipped_shapes = 0;
  const auto again = parse_labelme(to_labelme(set, "plate_017.tif"));
  EXPECT_EQ(again, set);
}

TEST(Rasterize, SquareMatchesEnumeration) {
  const auto sq = poly(ClassLabel::Normal, {{1, 1}, {5, 1}, {5, 5}, {1, 5}});
  const auto m = rasterize_polygon(sq, 8, 8);
  EXPECT_EQ(m, enumerate_polygon(sq, 8, 8));
  EXPECT_EQ(m.count(), 16u);
  for (int r = 1; r < 5; ++r)
    for (int c = 1; c < 5; ++c) EXPECT_EQ(m.at(r, c), 1);
}

TEST(Rasterize, CollinearPolygonIsEmpty) {
  EXPECT_EQ(rasterize_polygon(poly(ClassLabel::Normal, {{0, 0}, {3, 3}, {6, 6}}), 8, 8).count(), 0u);
}

TEST(Rasterize, FullFrame) {
  const int H = 13, W = 17;
  EXPECT_EQ(rasterize_polygon(poly(ClassLabel::Normal, {{0, 0}, {W, 0}, {W, H}, {0, H}}), H, W).count(),
            static_cast<std::size_t>(H * W));
}

TEST(Rasterize, RandomPolygonsMatchPointInPolygonOracle) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const auto p = random_polygon(rng, 21, 25);
    ASSERT_EQ(rasterize_polygon(p, 21, 25), enumerate_polygon(p, 21, 25)) << "trial " << trial;
  }
  // Vertices exactly on pixel centres.
  const auto diamond = poly(ClassLabel::Normal, {{4.5, 0.5}, {8.5, 4.5}, {4.5, 8.5}, {0.5, 4.5}});
  EXPECT_EQ(rasterize_polygon(diamond, 10, 10), enumerate_polygon(diamond, 10, 10));
}

TEST(Rasterize, AreaConvergesForConvexPolygons) {
  const std::vector<Point> hexagon = {{1, 0}, {0.5, 0.866}, {-0.5, 0.9}, {-1, 0.1}, {-0.6, -0.8}, {0.4, -0.9}};
  for (double s : {80.0, 120.0, 200.0}) {
    PolygonAnnotation p;
    for (const auto& q : hexagon) p.points.push_back({q.x * s + s + 3.3, q.y * s + s + 2.7});
    const double area = shoelace_area(p.points);
    ASSERT_GE(area, 1e4);
    const auto n = static_cast<double>(rasterize_polygon(p, static_cast<int>(2 * s + 8), static_cast<int>(2 * s + 8)).count());
    EXPECT_LT(std::abs(n - area) / area, 0.02) << "scale " << s;
  }
}

TEST(SemanticMask, SingleTipburnPolygon) {
  AnnotationSet ann{"s", 640, 640, {poly(ClassLabel::Tipburn, {{100, 100}, {105, 100}, {105, 102}, {100, 102}})}, 0};
  const auto m = build_semantic_mask(ann);
  std::size_t n3 = 0, nbg = 0;
  for (auto v : m.labels) (v == 3 ? n3 : nbg) += (v == 3 || v == kBackground) ? 1 : 0;
  EXPECT_EQ(n3, 10u);
  EXPECT_EQ(nbg, 640u * 640u - 10u);
}

TEST(SemanticMask, NormalNeverOverwritesDefect) {
  AnnotationSet ann{"s", 10, 10,
                    {poly(ClassLabel::Chlorosis, {{2, 2}, {6, 2}, {6, 6}, {2, 6}}),
                     poly(ClassLabel::Normal, {{0, 0}, {10, 0}, {10, 10}, {0, 10}})},
                    0};
  const auto m = build_semantic_mask(ann);
  EXPECT_EQ(class_mask(m, ClassLabel::Chlorosis).count(), 16u);
  EXPECT_EQ(class_mask(m, ClassLabel::Normal).count(), 84u);
}

TEST(SemanticMask, LaterDefectWins) {
  AnnotationSet ann{"s", 10, 10,
                    {poly(ClassLabel::Chlorosis, {{2, 2}, {6, 2}, {6, 6}, {2, 6}}),
                     poly(ClassLabel::Tipburn, {{4, 4}, {8, 4}, {8, 8}, {4, 8}})},
                    0};
  const auto m = build_semantic_mask(ann);
  EXPECT_EQ(m.at(4, 4), 3);
  EXPECT_EQ(class_mask(m, ClassLabel::Chlorosis).count(), 12u);
}

TEST(SemanticMask, DisjointPolygonsPixelCounts) {
  const auto a = poly(ClassLabel::Chlorosis, {{3.2, 4.1}, {20.7, 6.3}, {11.0, 18.9}});
  const auto b = poly(ClassLabel::PigmentAccumulation, {{25, 25}, {38, 27}, {36, 39}, {27, 37}});
  const auto m = build_semantic_mask({"s", 40, 40, {a, b}, 0});
  std::set<int> codes(m.labels.begin(), m.labels.end());
  EXPECT_EQ(codes, (std::set<int>{1, 2, 255}));
  EXPECT_EQ(class_mask(m, ClassLabel::Chlorosis).count(), rasterize_polygon(a, 40, 40).count());
  EXPECT_EQ(class_mask(m, ClassLabel::PigmentAccumulation).count(), rasterize_polygon(b, 40, 40).count());
}

TEST(SemanticMask, MatchesPerPixelPainterOnRandomSets) {
  std::mt19937 rng(5);
  std::uniform_int_distribution<int> ul(0, 3);
  for (int trial = 0; trial < 40; ++trial) {
    AnnotationSet ann{"s", 24, 30, {}, 0};
    for (int k = 0; k < 5; ++k) {
      auto p = random_polygon(rng, 24, 30);
      p.label = static_cast<ClassLabel>(ul(rng));
      ann.polygons.push_back(p);
    }
    ASSERT_EQ(build_semantic_mask(ann), paint_per_pixel(ann)) << "trial " << trial;
  }
  const auto golden = parse_labelme(fixture("golden_labelme.json"));
  EXPECT_EQ(build_semantic_mask(golden), paint_per_pixel(golden));
}

TEST(Split, OneHundredSixtyIds) {
  std::vector<std::string> ids;
  for (int i = 0; i < 160; ++i) ids.push_back("p" + std::to_string(i));
  const auto s = split_dataset(ids, 0.1, 3);
  EXPECT_EQ(s.train_ids.size(), 144u);
  EXPECT_EQ(s.val_ids.size(), 16u);
}

TEST(Split, DeterministicAndSeedSensitive) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back(std::to_string(i));
  const auto a = split_dataset(ids, 0.1, 0);
  const auto b = split_dataset(ids, 0.1, 0);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.val_ids, b.val_ids);
  const auto c = split_dataset(ids, 0.1, 1);
  EXPECT_NE(a.val_ids, c.val_ids);
}

TEST(Split, IsAPartition) {
  std::mt19937 rng(2);
  for (int n = 2; n < 60; ++n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
    const auto s = split_dataset(ids, 0.1, rng());
    std::set<std::string> all(s.train_ids.begin(), s.train_ids.end());
    for (const auto& v : s.val_ids) EXPECT_TRUE(all.insert(v).second);
    EXPECT_EQ(all, std::set<std::string>(ids.begin(), ids.end()));
    EXPECT_EQ(static_cast<long>(s.val_ids.size()), std::lround(0.1 * n));
  }
  EXPECT_THROW(split_dataset({"a"}, 0.1, 0), InvalidArgument);
}

TEST(Split, CsvRoundTrip) {
  const auto s = split_dataset({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}, 0.1, 4);
  const auto back = split_from_csv(split_to_csv(s));
  EXPECT_EQ(back.train_ids, s.train_ids);
  EXPECT_EQ(back.val_ids, s.val_ids);
}

TEST(ClassStats, CountsInstancesAndArea) {
  const auto ann = parse_labelme(fixture("golden_labelme.json"));
  ClassStats st;
  st.add(ann, build_semantic_mask(ann));
  EXPECT_EQ(st.instances[0], 1);
  EXPECT_EQ(st.instances[2], 2);
  EXPECT_EQ(st.to_csv().substr(0, 27), "class,instances,pixel_area\n");
}
