#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "aesr/nn.hpp"

namespace aesr {

/// Named float tensors plus string metadata. On disk:
///   "AESRCKPT" | u32 version | u32 n_meta | (str key, str value)* |
///   u32 n_tensors | (str name, u8 dtype, i32 n,c,h,w, f32 data)* | u32 crc32
/// with little-endian integers and u32-length-prefixed strings. The CRC covers
/// every byte before it.
struct Archive {
  std::map<std::string, std::string> metadata;
  TensorMap tensors;

  const std::string& meta(const std::string& key) const;
  const Tensor<float>& tensor(const std::string& name) const;

  friend bool operator==(const Archive&, const Archive&) = default;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

std::vector<std::uint8_t> encode_archive(const Archive& archive);
/// Throws IntegrityError on a bad magic, checksum mismatch, truncation or
/// unknown version.
Archive decode_archive(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

}  // namespace aesr
