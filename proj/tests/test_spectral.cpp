#include <gtest/gtest.h>

#include <random>

#include "leafseg/io/image_io.hpp"
#include "leafseg/spectral.hpp"

using namespace leafseg;

namespace {

MultiSpectralImage random_image(int bands, int size, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  MultiSpectralImage img;
  img.manifest = bands == 9 ? BandManifest::canonical() : BandManifest::rgb();
  img.pixels = Raster(bands, size, size);
  for (auto& v : img.pixels.data) v = u(rng);
  return img;
}

bool has_kind(const std::vector<Violation>& v, ViolationKind k) {
  return std::any_of(v.begin(), v.end(), [k](const Violation& x) { return x.kind == k; });
}

}  // namespace

TEST(BandManifest, CanonicalLayoutAndContract) {
  const auto m = BandManifest::canonical();
  EXPECT_EQ(m.count(), 9);
  EXPECT_EQ(m.wavelength(0), 470.0);
  EXPECT_EQ(m.wavelength(1), 530.0);
  EXPECT_EQ(*m.channel_of(620), 3);
  EXPECT_EQ(BandManifest::rgb().count(), 3);
}

TEST(BandManifest, RejectsBadOrdering) {
  EXPECT_THROW(BandManifest::from_wavelengths({530, 470}), InvalidArgument);
  EXPECT_THROW(BandManifest({{1, 470}, {3, 530}}), InvalidArgument);
  EXPECT_THROW(BandManifest(std::vector<Band>{}), InvalidArgument);
}

TEST(BandManifest, SidecarTextRoundTrip) {
  const auto m = BandManifest::canonical();
  EXPECT_EQ(m.to_text().substr(0, 12), "1 470\n2 530\n");
  EXPECT_EQ(BandManifest::parse(m.to_text()), m);
  EXPECT_EQ(BandManifest::parse("2 530\n# comment\n1 470.5\n").wavelength(0), 470.5);
  EXPECT_THROW(BandManifest::parse("1 470 extra\n"), FormatError);
  EXPECT_THROW(BandManifest::parse("1 530\n2 470\n"), FormatError);
}

TEST(ValidateImage, WellFormedImageIsClean) {
  EXPECT_TRUE(validate_image(random_image(9, 640, 1)).empty());
}

TEST(ValidateImage, ChannelCountMismatch) {
  auto img = random_image(3, 640, 2);
  img.manifest = BandManifest::canonical();
  EXPECT_TRUE(has_kind(validate_image(img), ViolationKind::ChannelCount));
}

TEST(ValidateImage, NonFinitePixel) {
  auto img = random_image(9, 640, 3);
  img.pixels.at(4, 10, 20) = std::numeric_limits<float>::quiet_NaN();
  const auto v = validate_image(img);
  EXPECT_TRUE(has_kind(v, ViolationKind::NonFinite));
  EXPECT_EQ(v.size(), 1u);
}

TEST(ValidateImage, RangeSizeAndBandOrder) {
  auto img = random_image(9, 32, 4);
  img.pixels.at(0, 0, 0) = 1.5f;
  auto v = validate_image(img);
  EXPECT_TRUE(has_kind(v, ViolationKind::OutOfRange));
  EXPECT_TRUE(has_kind(v, ViolationKind::SpatialSize));
  EXPECT_TRUE(validate_image(random_image(9, 32, 4), 32).empty());
  img = random_image(9, 32, 5);
  img.manifest = BandManifest::from_wavelengths({450, 470, 530, 620, 660, 700, 740, 780, 840});
  EXPECT_TRUE(has_kind(validate_image(img, 32), ViolationKind::BandOrder));
}

TEST(Normalize, PerBandMinMaxEndpoints) {
  Raster raw(1, 1, 3);
  raw.data = {0, 50, 100};
  auto res = normalize(raw, BandManifest::from_wavelengths({470}), NormalizeMode::per_band_minmax());
  EXPECT_EQ(res.image.pixels.data, (std::vector<float>{0.0f, 0.5f, 1.0f}));
  EXPECT_TRUE(res.degenerate_bands.empty());
}

TEST(Normalize, ConstantBandIsFlagged) {
  Raster raw(1, 1, 3);
  raw.data = {7, 7, 7};
  auto res = normalize(raw, BandManifest::from_wavelengths({470}), NormalizeMode::per_band_minmax());
  EXPECT_EQ(res.image.pixels.data, (std::vector<float>{0, 0, 0}));
  EXPECT_EQ(res.degenerate_bands, std::vector<int>{0});
}

TEST(Normalize, GlobalScale) {
  Raster raw(1, 1, 4);
  raw.data = {0, 128, 255, 400};
  auto res = normalize(raw, BandManifest::from_wavelengths({470}), NormalizeMode::global_scale(255));
  EXPECT_FLOAT_EQ(res.image.pixels.data[0], 0.0f);
  EXPECT_NEAR(res.image.pixels.data[1], 0.50196, 1e-5);  // 128 / 255 by hand
  EXPECT_FLOAT_EQ(res.image.pixels.data[2], 1.0f);
  EXPECT_FLOAT_EQ(res.image.pixels.data[3], 1.0f);
  EXPECT_THROW(normalize(raw, BandManifest::from_wavelengths({470}), NormalizeMode::global_scale(0)), InvalidArgument);
  raw.data[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(normalize(raw, BandManifest::from_wavelengths({470}), NormalizeMode::global_scale(1)), InvalidArgument);
}

TEST(Normalize, MinMaxIsIdempotentAndKeepsChannelOrder) {
  std::mt19937 rng(9);
  std::uniform_real_distribution<float> u(0, 4000);
  for (int trial = 0; trial < 20; ++trial) {
    Raster raw(9, 7, 5);
    for (int c = 0; c < 9; ++c)
      for (std::size_t i = 0; i < raw.plane_size(); ++i) raw.plane(c)[i] = u(rng) + 1000.0f * static_cast<float>(c);
    const auto m = BandManifest::canonical();
    auto once = normalize(raw, m, NormalizeMode::per_band_minmax()).image;
    auto twice = normalize(once.pixels, m, NormalizeMode::per_band_minmax()).image;
    EXPECT_EQ(once.pixels, twice.pixels);
    // Order check: every band maps its own argmax to 1.
    for (int c = 0; c < 9; ++c) {
      const float* p = raw.plane(c);
      auto imax = std::max_element(p, p + raw.plane_size()) - p;
      EXPECT_EQ(once.pixels.plane(c)[imax], 1.0f);
    }
  }
}

TEST(ExtractRgb, ChannelsAreRedGreenBlue) {
  auto img = random_image(9, 16, 10);
  auto rgb = extract_rgb(img);
  ASSERT_EQ(rgb.channels, 3);
  EXPECT_TRUE(std::equal(rgb.plane(0), rgb.plane(0) + rgb.plane_size(), img.pixels.plane(3)));  // 620 nm
  EXPECT_TRUE(std::equal(rgb.plane(1), rgb.plane(1) + rgb.plane_size(), img.pixels.plane(1)));  // 530 nm
  EXPECT_TRUE(std::equal(rgb.plane(2), rgb.plane(2) + rgb.plane_size(), img.pixels.plane(0)));  // 470 nm
}

TEST(ExtractRgb, IdenticalPlanesGiveEqualChannels) {
  auto img = random_image(9, 8, 11);
  for (int c : {0, 1, 3}) std::fill_n(img.pixels.plane(c), img.pixels.plane_size(), 0.3f);
  auto rgb = extract_rgb(img);
  EXPECT_TRUE(std::equal(rgb.plane(0), rgb.plane(0) + rgb.plane_size(), rgb.plane(1)));
  EXPECT_TRUE(std::equal(rgb.plane(1), rgb.plane(1) + rgb.plane_size(), rgb.plane(2)));
}

TEST(ExtractRgb, MissingBandIsNamed) {
  auto img = random_image(9, 8, 12);
  img.manifest = BandManifest::from_wavelengths({470, 530, 570, 600, 660, 700, 740, 780, 840});
  try {
    extract_rgb(img);
    FAIL() << "expected missing-band error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("620"), std::string::npos);
  }
}

TEST(ExtractRgb, RestackYieldsValidImage) {
  for (unsigned s = 0; s < 5; ++s) {
    auto img = random_image(9, 24, 20 + s);
    auto back = restack_rgb(extract_rgb(img));
    EXPECT_TRUE(validate_image(back, 24).empty());
    EXPECT_EQ(extract_rgb(back), extract_rgb(img));
  }
}

TEST(ImageIo, TiffAndSidecarRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "leafseg_test_io";
  std::filesystem::create_directories(dir);
  auto img = random_image(9, 12, 30);
  io::write_image(dir / "a.tif", img);
  auto back = io::read_image(dir / "a.tif");
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(back.manifest, img.manifest);
  EXPECT_EQ(back.sample_id, "a");

  // 16-bit storage is normalized by its full scale.
  io::write_image(dir / "b.tif", img, io::SampleType::U16);
  auto b16 = io::read_image(dir / "b.tif");
  for (std::size_t i = 0; i < img.pixels.data.size(); ++i) EXPECT_NEAR(b16.pixels.data[i], img.pixels.data[i], 1e-4);

  SemanticMask m(5, 7);
  m.at(2, 3) = 1;
  m.at(4, 6) = 3;
  io::write_mask(dir / "m.tif", m);
  io::write_mask(dir / "m.pgm", m);
  EXPECT_EQ(io::read_mask(dir / "m.tif"), m);
  EXPECT_EQ(io::read_mask(dir / "m.pgm"), m);
  m.at(0, 0) = 9;
  io::write_mask(dir / "bad.pgm", m);
  EXPECT_THROW(io::read_mask(dir / "bad.pgm"), FormatError);
  EXPECT_THROW(io::read_image(dir / "missing.tif"), IoError);
}

TEST(ImageIo, BigEndianTiffIsReadable) {
  // Hand-built 2x1 big-endian 16-bit page.
  std::vector<std::uint8_t> b = {'M', 'M', 0, 42, 0, 0, 0, 12, 0x01, 0x00, 0xff, 0xff};
  auto entry = [&](std::uint16_t tag, std::uint16_t type, std::uint32_t v) {
    b.insert(b.end(), {static_cast<std::uint8_t>(tag >> 8), static_cast<std::uint8_t>(tag), 0,
                       static_cast<std::uint8_t>(type), 0, 0, 0, 1});
    if (type == 3) b.insert(b.end(), {static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v), 0, 0});
    else b.insert(b.end(), {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                            static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)});
  };
  b.insert(b.end(), {0, 6});
  entry(256, 3, 2);
  entry(257, 3, 1);
  entry(258, 3, 16);
  entry(273, 4, 8);
  entry(277, 3, 1);
  entry(279, 4, 4);
  b.insert(b.end(), {0, 0, 0, 0});
  auto st = io::decode_tiff(b);
  EXPECT_EQ(st.width, 2);
  EXPECT_EQ(st.data, (std::vector<float>{256.0f, 65535.0f}));
}
