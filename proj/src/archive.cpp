#include "tasl/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "tasl/error.hpp"

namespace tasl {

namespace {

constexpr char kMagic[8] = {'T', 'A', 'S', 'L', 'A', 'R', 'C', '\0'};

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& what) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("truncated archive while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

const ArchiveArray* Archive::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const ArchiveArray& Archive::get(const std::string& name) const {
  if (const auto* a = find(name)) return *a;
  throw FormatError("archive has no array named '" + name + "'");
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json meta = archive.meta;
  meta["arrays"] = nlohmann::json::array();
  for (const auto& a : archive.arrays) {
    if (element_count(a.shape) != static_cast<std::int64_t>(a.values.size())) {
      throw ShapeError("archive array '" + a.name + "' shape does not match its value count");
    }
    meta["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
  }
  const std::string text = meta.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kArchiveVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : archive.arrays) {
    put<std::uint64_t>(os, a.values.size());
    for (double v : a.values) put<double>(os, v);
  }
  if (!os) throw IoError("write failed for " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a tasl archive");
  }
  const auto version = take<std::uint32_t>(is, "version");
  if (version != kArchiveVersion) {
    throw FormatError("unsupported archive version " + std::to_string(version));
  }
  const auto meta_len = take<std::uint64_t>(is, "metadata length");
  std::string text(meta_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(meta_len))) throw FormatError("truncated archive metadata");

  Archive archive;
  try {
    archive.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive metadata is not valid JSON: ") + e.what());
  }
  for (const auto& entry : archive.meta.at("arrays")) {
    ArchiveArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto n = take<std::uint64_t>(is, a.name);
    if (static_cast<std::int64_t>(n) != element_count(a.shape)) {
      throw FormatError("array '" + a.name + "' length disagrees with declared shape");
    }
    a.values.resize(n);
    for (auto& v : a.values) v = take<double>(is, a.name);
    archive.arrays.push_back(std::move(a));
  }
  archive.meta.erase("arrays");
  return archive;
}

}  // namespace tasl
