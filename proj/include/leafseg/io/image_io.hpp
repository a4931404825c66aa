#pragma once

// On-disk forms of images and masks: multi-page TIFF (page order == band
// order) with a "<stem>.bands.txt" manifest sidecar, and 8-bit masks as TIFF
// or binary PGM.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "leafseg/io/tiff.hpp"
#include "leafseg/spectral.hpp"

namespace leafseg::io {

namespace fs = std::filesystem;

inline fs::path manifest_sidecar(const fs::path& image_path) {
  fs::path p = image_path;
  p.replace_extension(".bands.txt");
  return p;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline BandManifest read_manifest(const fs::path& path) { return BandManifest::parse(read_text(path)); }

inline void write_manifest(const fs::path& path, const BandManifest& m) { write_text(path, m.to_text()); }

/// Writes reflectance as float32 pages plus the manifest sidecar.
inline void write_image(const fs::path& path, const MultiSpectralImage& img, SampleType type = SampleType::F32) {
  const Raster& r = img.pixels;
  if (type == SampleType::F32) {
    write_tiff(path, r.data, r.channels, r.height, r.width, type);
  } else {
    const float scale = type == SampleType::U8 ? 255.0f : 65535.0f;
    std::vector<float> scaled(r.data.size());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = r.data[i] * scale;
    write_tiff(path, scaled, r.channels, r.height, r.width, type);
  }
  write_manifest(manifest_sidecar(path), img.manifest);
}

/// Reads an image stack. Integer samples are normalized with `mode`
/// (default: full scale of the stored bit depth); float samples are taken as
/// reflectance and clamped to [0, 1]. Without a sidecar, 9- and 3-page stacks
/// get the canonical and RGB manifests respectively.
inline MultiSpectralImage read_image(const fs::path& path, std::optional<NormalizeMode> mode = std::nullopt) {
  TiffStack st = read_tiff(path);
  BandManifest manifest;
  const fs::path side = manifest_sidecar(path);
  if (fs::exists(side)) manifest = read_manifest(side);
  else if (st.pages == 9) manifest = BandManifest::canonical();
  else if (st.pages == 3) manifest = BandManifest::rgb();
  else throw FormatError("no band manifest next to " + path.string() + " and " + std::to_string(st.pages) +
                         " pages do not match a default layout");
  if (manifest.count() != st.pages)
    throw FormatError(path.string() + ": " + std::to_string(st.pages) + " pages but manifest lists " +
                      std::to_string(manifest.count()) + " bands");
  Raster raw(st.pages, st.height, st.width);
  raw.data = std::move(st.data);
  NormalizeMode m = mode.value_or(st.type == SampleType::U8    ? NormalizeMode::bit_depth(8)
                                  : st.type == SampleType::U16 ? NormalizeMode::bit_depth(16)
                                                               : NormalizeMode::global_scale(1.0));
  auto res = normalize(raw, manifest, m, path.stem().string());
  return std::move(res.image);
}

inline std::vector<std::uint8_t> encode_pgm(const SemanticMask& m) {
  std::string header = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), m.labels.begin(), m.labels.end());
  return out;
}

inline SemanticMask decode_pgm(const std::vector<std::uint8_t>& buf, const std::string& name) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < buf.size() && !std::isspace(buf[pos])) t.push_back(static_cast<char>(buf[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError(name + ": not a binary PGM");
  int w = 0, h = 0, maxv = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxv = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(name + ": bad PGM header");
  }
  if (maxv != 255 || w <= 0 || h <= 0) throw FormatError(name + ": only 8-bit PGM masks are supported");
  ++pos;
  if (buf.size() < pos + static_cast<std::size_t>(w) * h) throw FormatError(name + ": truncated PGM");
  SemanticMask m(h, w);
  std::copy_n(buf.begin() + static_cast<std::ptrdiff_t>(pos), m.labels.size(), m.labels.begin());
  return m;
}

/// Writes a mask; the extension picks the format (.pgm, otherwise 8-bit TIFF).
inline void write_mask(const fs::path& path, const SemanticMask& m) {
  if (path.extension() == ".pgm") {
    write_file(path, encode_pgm(m));
    return;
  }
  std::vector<float> v(m.labels.begin(), m.labels.end());
  write_tiff(path, v, 1, m.height, m.width, SampleType::U8);
}

inline SemanticMask read_mask(const fs::path& path) {
  SemanticMask m;
  if (path.extension() == ".pgm") {
    m = decode_pgm(read_file(path), path.string());
  } else {
    TiffStack st = read_tiff(path);
    if (st.pages != 1 || st.type != SampleType::U8) throw FormatError(path.string() + ": mask must be one 8-bit page");
    m = SemanticMask(st.height, st.width);
    for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(st.data[i]);
  }
  if (!m.codes_valid()) throw FormatError(path.string() + ": mask contains codes other than 0-3 and 255");
  return m;
}

}  // namespace leafseg::io
