#pragma once

// Checkpoint archive: 8-byte magic, u32 format version, u64 manifest length,
// the JSON manifest, then raw little-endian tensor payloads in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "rgbdvit/error.hpp"
#include "rgbdvit/util.hpp"
#include "rgbdvit/vit.hpp"

namespace rgbdvit::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'R', 'G', 'B', 'D', 'V', 'I', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class T>
struct Checkpoint {
  ModelSpec spec;
  ModelParams<T> params;
  nlohmann::json extra = nlohmann::json::object();  // fusion spec, provenance
  std::string stored_dtype = dtype_name<T>();
};

namespace detail {

template <class U>
void append_pod(std::vector<std::uint8_t>& out, const U& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelSpec& spec, const ModelParams<T>& params,
                                               const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["dtype"] = dtype_name<T>();
  manifest["spec"] = spec;
  manifest["extra"] = extra;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [path, t] : params) {
    std::uint64_t nbytes = t.numel() * sizeof(T);
    manifest["tensors"].push_back({{"path", path}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::append_pod(out, kCheckpointVersion);
  detail::append_pod(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [path, t] : params) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), p, p + t.numel() * sizeof(T));
  }
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams<T>& params,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  write_file(path, serialize_checkpoint(spec, params, extra));
}

// Loads into precision T, converting if the archive holds the other dtype.
template <class T>
Checkpoint<T> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 8 + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IncompatibleCheckpoint("not a checkpoint archive");
  std::uint32_t version;
  std::uint64_t mlen;
  std::memcpy(&version, bytes.data() + 8, sizeof version);
  std::memcpy(&mlen, bytes.data() + 12, sizeof mlen);
  if (version != kCheckpointVersion)
    throw IncompatibleCheckpoint("unsupported checkpoint format version " + std::to_string(version));
  if (bytes.size() < header + mlen) throw IncompatibleCheckpoint("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + header + mlen);
  } catch (const nlohmann::json::exception& e) {
    throw IncompatibleCheckpoint(std::string("bad checkpoint manifest: ") + e.what());
  }
  Checkpoint<T> ck;
  ck.spec = manifest.at("spec").get<ModelSpec>();
  ck.extra = manifest.value("extra", nlohmann::json::object());
  ck.stored_dtype = manifest.at("dtype").get<std::string>();
  const std::size_t elem = ck.stored_dtype == "f32" ? 4 : ck.stored_dtype == "f64" ? 8 : 0;
  if (elem == 0) throw IncompatibleCheckpoint("unknown dtype " + ck.stored_dtype);
  const std::uint8_t* payload = bytes.data() + header + mlen;
  const std::size_t payload_size = bytes.size() - header - mlen;
  for (const auto& t : manifest.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    std::uint64_t off = t.at("offset"), nbytes = t.at("nbytes");
    if (off + nbytes > payload_size || nbytes != shape_numel(shape) * elem)
      throw IncompatibleCheckpoint("tensor payload out of bounds for " + t.at("path").get<std::string>());
    Tensor<T> tensor(shape);
    if (elem == sizeof(T)) {
      std::memcpy(tensor.data.data(), payload + off, nbytes);
    } else if (elem == 4) {
      for (std::size_t i = 0; i < tensor.numel(); ++i) {
        float v;
        std::memcpy(&v, payload + off + 4 * i, 4);
        tensor.data[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < tensor.numel(); ++i) {
        double v;
        std::memcpy(&v, payload + off + 8 * i, 8);
        tensor.data[i] = static_cast<T>(v);
      }
    }
    ck.params.emplace(t.at("path").get<std::string>(), std::move(tensor));
  }
  return ck;
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw IncompatibleCheckpoint(e.what());
  }
  return parse_checkpoint<T>(bytes);
}

}  // namespace rgbdvit::nn
