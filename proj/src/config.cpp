#include "tasl/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tasl/error.hpp"

namespace tasl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

}  // namespace

FlatConfig FlatConfig::parse(const std::string& text) {
  FlatConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (cfg.values_.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    cfg.values_[key] = trim(line.substr(eq + 1));
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::optional<std::string> FlatConfig::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

void FlatConfig::set(const std::string& key, const std::string& value) { values_[key] = value; }

std::string FlatConfig::get(const std::string& key, const std::string& fallback) const {
  return raw(key).value_or(fallback);
}

double FlatConfig::get(const std::string& key, double fallback) const {
  const auto v = raw(key);
  return v ? parse_number<double>(key, *v) : fallback;
}

int FlatConfig::get(const std::string& key, int fallback) const {
  const auto v = raw(key);
  return v ? parse_number<int>(key, *v) : fallback;
}

std::uint64_t FlatConfig::get(const std::string& key, std::uint64_t fallback) const {
  const auto v = raw(key);
  if (v && !v->empty() && v->front() == '-') throw ConfigError("config key '" + key + "' must be non-negative");
  return v ? parse_number<std::uint64_t>(key, *v) : fallback;
}

bool FlatConfig::get(const std::string& key, bool fallback) const {
  const auto v = raw(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + *v + "'");
}

std::vector<int> FlatConfig::get(const std::string& key, const std::vector<int>& fallback) const {
  const auto v = raw(key);
  if (!v) return fallback;
  std::vector<int> out;
  std::string item;
  std::istringstream is(*v);
  while (std::getline(is, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::vector<std::string> FlatConfig::unknown_keys(const std::vector<std::string>& known) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) {
    if (std::find(known.begin(), known.end(), k) == known.end()) out.push_back(k);
  }
  return out;
}

std::string FlatConfig::render() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("TASL_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    return parse_number<std::uint64_t>("TASL_SEED", s);
  } catch (const ConfigError&) {
    throw ConfigError(std::string("TASL_SEED is not a non-negative integer: '") + s + "'");
  }
}

}  // namespace tasl
