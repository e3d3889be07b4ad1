#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tasl {

/// `key = value` lines; `#` starts a comment, blank lines are ignored.
/// Keys are kept in sorted order so the rendered text is canonical.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text);
  static FlatConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::optional<std::string> raw(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string get(const std::string& key, const std::string& fallback) const;
  double get(const std::string& key, double fallback) const;
  int get(const std::string& key, int fallback) const;
  std::uint64_t get(const std::string& key, std::uint64_t fallback) const;
  bool get(const std::string& key, bool fallback) const;
  std::vector<int> get(const std::string& key, const std::vector<int>& fallback) const;

  /// Keys not in `known` (typos are errors, not silently ignored).
  std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

  std::string render() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Seed from the TASL_SEED environment variable, if set.
std::optional<std::uint64_t> env_seed();

}  // namespace tasl
