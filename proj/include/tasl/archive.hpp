#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace tasl {

/// Single-file container used for checkpoints and preprocessing caches.
///
/// Layout (all integers and floats little-endian):
///   8 bytes   magic "TASLARC\0"
///   u32       format version (currently 1)
///   u64       byte length L of the metadata block
///   L bytes   UTF-8 JSON metadata; its "arrays" member lists
///             {"name", "shape"} for every array in storage order
///   per array: u64 element count N, then N IEEE-754 binary64 values
struct ArchiveArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> values;
};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArchiveArray> arrays;

  const ArchiveArray& get(const std::string& name) const;
  const ArchiveArray* find(const std::string& name) const;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace tasl
