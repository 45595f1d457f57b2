#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace rfbd {

static_assert(std::endian::native == std::endian::little,
              "file containers are little-endian; big-endian hosts are unsupported");

// All on-disk artifacts share one container layout:
//   bytes  0..7   ASCII magic identifying the artifact kind
//   bytes  8..11  u32 container version
//   bytes 12..15  u32 byte length of the JSON metadata block
//   then the UTF-8 JSON metadata, then a float32 payload to end of file.
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kMagicDataset[9] = "RFBDDSET";
inline constexpr char kMagicCheckpoint[9] = "RFBDCKPT";
inline constexpr char kMagicTriggers[9] = "RFBDTRIG";

struct Container {
  std::uint32_t version = kContainerVersion;
  nlohmann::json meta;
  std::vector<float> payload;
};

inline void write_container(const std::string& path, const char* magic8,
                            const nlohmann::json& meta, const float* payload,
                            std::size_t payload_count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  char header[16] = {};
  std::memcpy(header, magic8, 8);
  const std::string meta_str = meta.dump();
  const std::uint32_t version = kContainerVersion;
  const std::uint32_t json_len = static_cast<std::uint32_t>(meta_str.size());
  std::memcpy(header + 8, &version, 4);
  std::memcpy(header + 12, &json_len, 4);
  out.write(header, 16);
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  if (payload_count > 0)
    out.write(reinterpret_cast<const char*>(payload),
              static_cast<std::streamsize>(payload_count * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Container read_container(const std::string& path, const char* expected_magic8) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char header[16] = {};
  in.read(header, 16);
  if (in.gcount() != 16) throw std::runtime_error("truncated container header: " + path);
  if (std::memcmp(header, expected_magic8, 8) != 0)
    throw std::runtime_error("bad magic in " + path);
  Container c;
  std::uint32_t json_len = 0;
  std::memcpy(&c.version, header + 8, 4);
  std::memcpy(&json_len, header + 12, 4);
  if (c.version != kContainerVersion)
    throw std::runtime_error("unsupported container version in " + path);
  std::string meta_str(json_len, '\0');
  in.read(meta_str.data(), json_len);
  if (in.gcount() != static_cast<std::streamsize>(json_len))
    throw std::runtime_error("truncated metadata in " + path);
  c.meta = nlohmann::json::parse(meta_str);
  // Remainder of the file is the float32 payload.
  const std::streampos here = in.tellg();
  in.seekg(0, std::ios::end);
  const std::streamoff bytes = in.tellg() - here;
  in.seekg(here);
  if (bytes % static_cast<std::streamoff>(sizeof(float)) != 0)
    throw std::runtime_error("payload not a whole number of float32 in " + path);
  c.payload.resize(static_cast<std::size_t>(bytes) / sizeof(float));
  if (bytes > 0) in.read(reinterpret_cast<char*>(c.payload.data()), bytes);
  if (!in) throw std::runtime_error("read failed: " + path);
  return c;
}

// FNV-1a, used for artifact checksums and config hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for checksum: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

}  // namespace rfbd
