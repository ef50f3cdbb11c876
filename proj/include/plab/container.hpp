#pragma once

// Binary tensor container shared by model files (magic PLABMDL1) and cache
// spills (magic PLABCCH1):
//
//   [8 bytes magic][u32 LE manifest length][manifest JSON, UTF-8]
//   [zero padding to a 64-byte boundary][tensor blob]
//
// The manifest is {"config": {...}, "tensors": {name: {"dtype": "f32",
// "shape": [r, c], "offset": o, "byte_len": n}}, "metadata": {...}}. Offsets
// are relative to the start of the blob and are multiples of 64. Tensor data
// is little-endian f32, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "plab/error.hpp"
#include "plab/tensor.hpp"

namespace plab {

inline constexpr std::string_view kModelMagic = "PLABMDL1";
inline constexpr std::string_view kCacheMagic = "PLABCCH1";
inline constexpr std::size_t kBlobAlignment = 64;

struct Container {
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor2D> tensors;
};

namespace detail {

inline std::size_t align_up(std::size_t n, std::size_t a) {
  return (n + a - 1) / a * a;
}

inline void put_f32_le(std::span<const float> src, char* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src.data(), src.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(src[i]);
      for (int b = 0; b < 4; ++b) dst[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

inline void get_f32_le(const char* src, std::span<float> dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst.data(), src, dst.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      dst[i] = std::bit_cast<float>(bits);
    }
  }
}

}  // namespace detail

/// Builds the manifest (with offsets) for a container. Deterministic: tensors
/// are laid out in name order.
inline nlohmann::json container_manifest(const Container& c) {
  nlohmann::json table = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    const std::size_t bytes = t.size() * sizeof(float);
    table[name] = {{"dtype", "f32"},
                   {"shape", {t.rows(), t.cols()}},
                   {"offset", offset},
                   {"byte_len", bytes}};
    offset = detail::align_up(offset + bytes, kBlobAlignment);
  }
  return {{"config", c.config}, {"tensors", table}, {"metadata", c.metadata}};
}

inline std::string serialize_container(const Container& c, std::string_view magic) {
  const std::string manifest = container_manifest(c).dump();
  const std::size_t blob_start =
      detail::align_up(magic.size() + 4 + manifest.size(), kBlobAlignment);
  std::size_t blob_size = 0;
  for (const auto& [name, t] : c.tensors) {
    blob_size = detail::align_up(blob_size + t.size() * sizeof(float), kBlobAlignment);
  }
  std::string out(blob_start + blob_size, '\0');
  std::memcpy(out.data(), magic.data(), magic.size());
  const auto len = static_cast<std::uint32_t>(manifest.size());
  for (int b = 0; b < 4; ++b) out[magic.size() + b] = static_cast<char>((len >> (8 * b)) & 0xff);
  std::memcpy(out.data() + magic.size() + 4, manifest.data(), manifest.size());
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    detail::put_f32_le(t.data(), out.data() + blob_start + offset);
    offset = detail::align_up(offset + t.size() * sizeof(float), kBlobAlignment);
  }
  return out;
}

inline void write_container(const std::string& path, const Container& c,
                            std::string_view magic) {
  const std::string bytes = serialize_container(c, magic);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::load, "cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::load, "short write to " + path);
}

inline Container parse_container(std::string_view bytes, std::string_view magic,
                                 const std::string& source) {
  const std::size_t prefix = magic.size() + 4;
  if (bytes.size() < prefix || bytes.substr(0, magic.size()) != magic) {
    fail(ErrorKind::load, source + ": bad magic or version (expected " +
                              std::string(magic) + ")");
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b)
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[magic.size() + b])) << (8 * b);
  if (bytes.size() < prefix + len) fail(ErrorKind::load, source + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(prefix, len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::load, source + ": manifest is not valid JSON: " + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("tensors") ||
      !manifest["tensors"].is_object()) {
    fail(ErrorKind::load, source + ": manifest has no tensor table");
  }
  const std::size_t blob_start = detail::align_up(prefix + len, kBlobAlignment);
  const std::size_t blob_size = bytes.size() > blob_start ? bytes.size() - blob_start : 0;

  Container c;
  c.config = manifest.value("config", nlohmann::json::object());
  c.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& [name, entry] : manifest["tensors"].items()) {
    try {
      if (entry.at("dtype").get<std::string>() != "f32") {
        fail(ErrorKind::load, "tensor " + name + ": unsupported dtype");
      }
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) fail(ErrorKind::load, "tensor " + name + ": shape must be 2-D");
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto byte_len = entry.at("byte_len").get<std::size_t>();
      if (offset % kBlobAlignment != 0) {
        fail(ErrorKind::load, "tensor " + name + ": offset not 64-byte aligned");
      }
      if (byte_len != shape[0] * shape[1] * sizeof(float)) {
        fail(ErrorKind::load, "tensor " + name + ": byte_len does not match shape");
      }
      if (offset + byte_len > blob_size) {
        fail(ErrorKind::load, "tensor " + name + ": data truncated");
      }
      std::vector<float> data(shape[0] * shape[1]);
      detail::get_f32_le(bytes.data() + blob_start + offset, data);
      c.tensors.emplace(name, Tensor2D(shape[0], shape[1], std::move(data)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::load, source + ": tensor " + name + ": malformed entry: " + e.what());
    }
  }
  return c;
}

inline std::string read_file_bytes(const std::string& path, ErrorKind kind) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(kind, "cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Container read_container(const std::string& path, std::string_view magic) {
  return parse_container(read_file_bytes(path, ErrorKind::load), magic, path);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Content hash of a container: its manifest followed by every tensor's
/// little-endian bytes in name order.
inline std::uint64_t container_fingerprint(const Container& c) {
  std::uint64_t h = fnv1a(container_manifest(c).dump());
  std::vector<char> buf;
  for (const auto& [name, t] : c.tensors) {
    buf.resize(t.size() * sizeof(float));
    detail::put_f32_le(t.data(), buf.data());
    h = fnv1a(std::string_view(buf.data(), buf.size()), h);
  }
  return h;
}

}  // namespace plab
