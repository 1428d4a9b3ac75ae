#include "aesr/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace aesr {

static_assert(std::endian::native == std::endian::little, "archive code assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'E', 'S', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kFloat32 = 1;

class Writer {
 public:
  template <typename V>
  void pod(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end, const std::string& src) : bytes(b), limit(end), source(src) {}

  void need(std::size_t n) const {
    if (n > limit - pos) throw IntegrityError(source + ": archive truncated");
  }
  template <typename V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }

  const std::vector<std::uint8_t>& bytes;
  std::size_t limit;
  std::size_t pos = 0;
  const std::string& source;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

const std::string& Archive::meta(const std::string& key) const {
  const auto it = metadata.find(key);
  if (it == metadata.end()) throw IntegrityError("archive has no metadata '" + key + "'");
  return it->second;
}

const Tensor<float>& Archive::tensor(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw IntegrityError("archive has no tensor '" + name + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
  Writer w;
  w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
  w.pod(kArchiveVersion);
  w.pod(static_cast<std::uint32_t>(archive.metadata.size()));
  for (const auto& [k, v] : archive.metadata) {
    w.str(k);
    w.str(v);
  }
  w.pod(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, t] : archive.tensors) {
    w.str(name);
    w.pod(kFloat32);
    for (int d : {t.batch(), t.channels(), t.height(), t.width()}) w.pod(static_cast<std::int32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    w.out.insert(w.out.end(), p, p + t.size() * sizeof(float));
  }
  w.pod(crc_of(w.out.data(), w.out.size()));
  return std::move(w.out);
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError(source + ": not a checkpoint archive");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (stored != crc_of(bytes.data(), body)) throw IntegrityError(source + ": checksum mismatch");

  Reader r(bytes, body, source);
  r.pos = sizeof(kMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kArchiveVersion) {
    throw IntegrityError(source + ": unsupported archive version " + std::to_string(version));
  }
  Archive a;
  for (auto n = r.pod<std::uint32_t>(); n > 0; --n) {
    std::string k = r.str();
    a.metadata[std::move(k)] = r.str();
  }
  for (auto n = r.pod<std::uint32_t>(); n > 0; --n) {
    std::string name = r.str();
    if (r.pod<std::uint8_t>() != kFloat32) throw IntegrityError(source + ": tensor '" + name + "' has unknown dtype");
    Shape s;
    s.n = r.pod<std::int32_t>();
    s.c = r.pod<std::int32_t>();
    s.h = r.pod<std::int32_t>();
    s.w = r.pod<std::int32_t>();
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw IntegrityError(source + ": negative tensor dimension");
    r.need(s.numel() * sizeof(float));
    std::vector<float> v(s.numel());
    std::memcpy(v.data(), bytes.data() + r.pos, v.size() * sizeof(float));
    r.pos += v.size() * sizeof(float);
    a.tensors.emplace(std::move(name), Tensor<float>(s, std::move(v)));
  }
  if (r.pos != body) throw IntegrityError(source + ": trailing bytes in archive");
  return a;
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_archive(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_archive(bytes, path.string());
}

}  // namespace aesr
