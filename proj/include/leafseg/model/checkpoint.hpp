#pragma once

// Checkpoint container:
//   8 bytes   magic "LEAFSEG\0"
//   u32       format version
//   u64       header length
//   header    JSON {config, epoch, metrics, tensors: [{name, shape, offset}]}
//   payload   float32 little-endian values, tensors back to back
// All integers are little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "leafseg/error.hpp"
#include "leafseg/io/tiff.hpp"
#include "leafseg/model/config.hpp"
#include "leafseg/model/network.hpp"

namespace leafseg::model {

inline constexpr char kCheckpointMagic[8] = {'L', 'E', 'A', 'F', 'S', 'E', 'G', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorData {
  std::vector<std::int64_t> shape;
  std::vector<float> values;
  bool operator==(const TensorData&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  int epoch = 0;
  std::map<std::string, double> metrics;
  std::vector<std::string> order;  // tensor names in file order
  std::map<std::string, TensorData> weights;
};

template <typename T>
Checkpoint snapshot(const Network<T>& net, int epoch, std::map<std::string, double> metrics = {}) {
  Checkpoint c;
  c.config = net.config();
  c.epoch = epoch;
  c.metrics = std::move(metrics);
  for (const auto& name : net.params().names()) {
    const auto v = net.params().get(name);
    TensorData t{v.shape(), std::vector<float>(v.values().begin(), v.values().end())};
    c.order.push_back(name);
    c.weights.emplace(name, std::move(t));
  }
  return c;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  nlohmann::json header;
  header["config"] = to_json(c.config);
  header["epoch"] = c.epoch;
  header["metrics"] = c.metrics;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& name : c.order) {
    const auto& t = c.weights.at(name);
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  header["tensors"] = tensors;
  const std::string h = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  auto put = [&out](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(kCheckpointVersion, 4);
  put(h.size(), 8);
  out.insert(out.end(), h.begin(), h.end());
  out.reserve(out.size() + offset * 4);
  for (const auto& name : c.order)
    for (float f : c.weights.at(name).values) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put(bits, 4);
    }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& buf, const std::string& name = "checkpoint") {
  auto fail = [&](const std::string& m) -> FormatError { return FormatError(name + ": " + m); };
  if (buf.size() < 20 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) throw fail("not a leafseg checkpoint");
  auto get = [&buf](std::size_t pos, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    return v;
  };
  const auto version = static_cast<std::uint32_t>(get(8, 4));
  if (version != kCheckpointVersion)
    throw fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t hlen = get(12, 8);
  if (20 + hlen > buf.size()) throw fail("truncated header");
  Checkpoint c;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 20, buf.begin() + static_cast<std::ptrdiff_t>(20 + hlen));
    c.config = config_from_json(header.at("config"));
    c.epoch = header.at("epoch").get<int>();
    c.metrics = header.at("metrics").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  const std::size_t payload = 20 + hlen;
  for (const auto& t : header.at("tensors")) {
    TensorData td;
    const auto tname = t.at("name").get<std::string>();
    td.shape = t.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto count = static_cast<std::size_t>(ag::numel(td.shape));
    if (payload + (offset + count) * 4 > buf.size()) throw fail("tensor " + tname + " extends past end of file");
    td.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto bits = static_cast<std::uint32_t>(get(payload + (offset + i) * 4, 4));
      std::memcpy(&td.values[i], &bits, 4);
    }
    c.order.push_back(tname);
    c.weights.emplace(tname, std::move(td));
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  io::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// Copies checkpoint weights into a network built from the same config.
template <typename T>
void load_weights(Network<T>& net, const Checkpoint& c) {
  if (!(net.config() == c.config)) throw InvalidArgument("checkpoint config does not match the network");
  for (const auto& name : net.params().names()) {
    auto it = c.weights.find(name);
    if (it == c.weights.end()) throw FormatError("checkpoint lacks tensor " + name);
    auto v = net.params().get(name);
    if (it->second.shape != v.shape())
      throw FormatError("tensor " + name + " has shape " + ag::shape_str(it->second.shape) + ", network expects " +
                        ag::shape_str(v.shape()));
    std::transform(it->second.values.begin(), it->second.values.end(), v.values().begin(),
                   [](float f) { return static_cast<T>(f); });
  }
}

template <typename T = float>
Network<T> network_from(const Checkpoint& c) {
  Network<T> net(c.config, 0);
  load_weights(net, c);
  return net;
}

}  // namespace leafseg::model
