#pragma once

// Minimal baseline TIFF: uncompressed, one sample per pixel, one page per
// band. Writes little-endian files with a single strip per page; reads either
// byte order and any strip layout.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "leafseg/error.hpp"

namespace leafseg::io {

enum class SampleType { U8, U16, F32 };

inline int bytes_per_sample(SampleType t) { return t == SampleType::U8 ? 1 : t == SampleType::U16 ? 2 : 4; }

/// Decoded stack of equally sized pages; samples widened to float.
struct TiffStack {
  int pages = 0;
  int height = 0;
  int width = 0;
  SampleType type = SampleType::F32;
  std::vector<float> data;  // [pages, height, width]
};

namespace detail {

inline void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void patch32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
}

}  // namespace detail

/// Encodes `pages` planes of height x width samples (values are converted to
/// the sample type: rounded and clamped for integer types).
inline std::vector<std::uint8_t> encode_tiff(const std::vector<float>& data, int pages, int height, int width,
                                             SampleType type) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (data.size() != plane * static_cast<std::size_t>(pages)) throw InvalidArgument("encode_tiff: size mismatch");
  const int bps = bytes_per_sample(type);
  std::vector<std::uint8_t> out = {'I', 'I', 42, 0};
  const std::size_t first_ifd_slot = out.size();
  detail::put32(out, 0);
  std::size_t prev_next_slot = first_ifd_slot;
  for (int p = 0; p < pages; ++p) {
    const auto strip_offset = static_cast<std::uint32_t>(out.size());
    for (std::size_t i = 0; i < plane; ++i) {
      const float v = data[static_cast<std::size_t>(p) * plane + i];
      if (type == SampleType::F32) {
        detail::put32(out, std::bit_cast<std::uint32_t>(v));
      } else {
        const float hi = type == SampleType::U8 ? 255.0f : 65535.0f;
        const float c = std::min(std::max(std::nearbyint(v), 0.0f), hi);
        if (type == SampleType::U8) out.push_back(static_cast<std::uint8_t>(c));
        else detail::put16(out, static_cast<std::uint16_t>(c));
      }
    }
    if (out.size() % 2) out.push_back(0);
    const auto ifd_offset = static_cast<std::uint32_t>(out.size());
    detail::patch32(out, prev_next_slot, ifd_offset);
    struct Entry {
      std::uint16_t tag, type;
      std::uint32_t count, value;
    };
    const std::uint16_t sample_format = type == SampleType::F32 ? 3 : 1;
    const Entry entries[] = {
        {254, 4, 1, pages > 1 ? 2u : 0u},  // NewSubfileType: page of multi-page
        {256, 4, 1, static_cast<std::uint32_t>(width)},
        {257, 4, 1, static_cast<std::uint32_t>(height)},
        {258, 3, 1, static_cast<std::uint32_t>(8 * bps)},
        {259, 3, 1, 1},  // no compression
        {262, 3, 1, 1},  // black is zero
        {273, 4, 1, strip_offset},
        {277, 3, 1, 1},
        {278, 4, 1, static_cast<std::uint32_t>(height)},
        {279, 4, 1, static_cast<std::uint32_t>(plane * static_cast<std::size_t>(bps))},
        {284, 3, 1, 1},
        {297, 3, 2, static_cast<std::uint32_t>(p) | (static_cast<std::uint32_t>(pages) << 16)},
        {339, 3, 1, sample_format},
    };
    detail::put16(out, static_cast<std::uint16_t>(std::size(entries)));
    for (const auto& e : entries) {
      detail::put16(out, e.tag);
      detail::put16(out, e.type);
      detail::put32(out, e.count);
      detail::put32(out, e.value);  // SHORT values are left-justified in little-endian
    }
    prev_next_slot = out.size();
    detail::put32(out, 0);
  }
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_tiff(const std::filesystem::path& path, const std::vector<float>& data, int pages, int height,
                       int width, SampleType type) {
  write_file(path, encode_tiff(data, pages, height, width, type));
}

inline TiffStack decode_tiff(const std::vector<std::uint8_t>& buf, const std::string& name = "<memory>") {
  auto fail = [&](const std::string& why) { return FormatError("TIFF " + name + ": " + why); };
  if (buf.size() < 8) throw fail("file too short");
  bool le;
  if (buf[0] == 'I' && buf[1] == 'I') le = true;
  else if (buf[0] == 'M' && buf[1] == 'M') le = false;
  else throw fail("bad byte-order mark");
  auto need = [&](std::size_t off, std::size_t n) {
    if (off + n > buf.size()) throw fail("truncated");
  };
  auto rd16 = [&](std::size_t off) -> std::uint32_t {
    need(off, 2);
    return le ? (buf[off] | (buf[off + 1] << 8)) : ((buf[off] << 8) | buf[off + 1]);
  };
  auto rd32 = [&](std::size_t off) -> std::uint32_t {
    need(off, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(buf[off + static_cast<std::size_t>(i)]) << (le ? 8 * i : 8 * (3 - i));
    return v;
  };
  if (rd16(2) != 42) throw fail("not a classic TIFF");
  TiffStack st;
  std::size_t ifd = rd32(4);
  int guard = 0;
  while (ifd != 0) {
    if (++guard > 100000) throw fail("IFD loop");
    const std::uint32_t n = rd16(ifd);
    std::uint32_t width = 0, height = 0, bits = 1, compression = 1, spp = 1, fmt = 1;
    std::uint32_t rows_per_strip = 0xffffffffu;
    std::vector<std::uint32_t> offsets, counts;
    for (std::uint32_t e = 0; e < n; ++e) {
      const std::size_t at = ifd + 2 + 12 * static_cast<std::size_t>(e);
      const std::uint32_t tag = rd16(at), type = rd16(at + 2), count = rd32(at + 4);
      const std::size_t tsize = type == 3 ? 2 : type == 4 ? 4 : 1;
      const std::size_t data_at = tsize * count <= 4 ? at + 8 : rd32(at + 8);
      auto value = [&](std::uint32_t i) -> std::uint32_t {
        return type == 3 ? rd16(data_at + 2 * i) : type == 4 ? rd32(data_at + 4 * i) : buf.at(data_at + i);
      };
      switch (tag) {
        case 256: width = value(0); break;
        case 257: height = value(0); break;
        case 258: bits = value(0); break;
        case 259: compression = value(0); break;
        case 273: for (std::uint32_t i = 0; i < count; ++i) offsets.push_back(value(i)); break;
        case 277: spp = value(0); break;
        case 278: rows_per_strip = value(0); break;
        case 279: for (std::uint32_t i = 0; i < count; ++i) counts.push_back(value(i)); break;
        case 339: fmt = value(0); break;
        default: break;
      }
    }
    if (compression != 1) throw fail("compressed TIFF is not supported");
    if (spp != 1) throw fail("only one sample per pixel is supported");
    SampleType type;
    if (bits == 8 && fmt == 1) type = SampleType::U8;
    else if (bits == 16 && fmt == 1) type = SampleType::U16;
    else if (bits == 32 && fmt == 3) type = SampleType::F32;
    else throw fail("unsupported sample layout (" + std::to_string(bits) + " bits, format " + std::to_string(fmt) + ")");
    if (st.pages == 0) {
      st.width = static_cast<int>(width);
      st.height = static_cast<int>(height);
      st.type = type;
    } else if (st.width != static_cast<int>(width) || st.height != static_cast<int>(height) || st.type != type) {
      throw fail("pages differ in size or sample type");
    }
    if (offsets.empty() || offsets.size() != counts.size()) throw fail("missing strip layout");
    (void)rows_per_strip;
    const int bps = bytes_per_sample(type);
    const std::size_t plane = static_cast<std::size_t>(width) * height;
    std::size_t got = 0;
    st.data.reserve(st.data.size() + plane);
    for (std::size_t s = 0; s < offsets.size() && got < plane; ++s) {
      const std::size_t samples = std::min<std::size_t>(counts[s] / static_cast<std::uint32_t>(bps), plane - got);
      need(offsets[s], samples * static_cast<std::size_t>(bps));
      for (std::size_t i = 0; i < samples; ++i) {
        const std::size_t off = offsets[s] + i * static_cast<std::size_t>(bps);
        if (type == SampleType::U8) st.data.push_back(buf[off]);
        else if (type == SampleType::U16) st.data.push_back(static_cast<float>(rd16(off)));
        else st.data.push_back(std::bit_cast<float>(rd32(off)));
      }
      got += samples;
    }
    if (got != plane) throw fail("strip data shorter than the page");
    ++st.pages;
    ifd = rd32(ifd + 2 + 12 * static_cast<std::size_t>(n));
  }
  if (st.pages == 0) throw fail("no pages");
  return st;
}

inline TiffStack read_tiff(const std::filesystem::path& path) { return decode_tiff(read_file(path), path.string()); }

}  // namespace leafseg::io
