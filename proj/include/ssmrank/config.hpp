#pragma once

// Flat key=value configuration text. '#' starts a comment; blank lines are
// ignored; every key must be consumed by some typed getter or `finish()`
// rejects the file.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "ssmrank/error.hpp"

namespace ssmrank {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::istream& in) {
    KeyValueConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ParseError("config: expected key=value", lineno);
      std::string key = trim(body.substr(0, eq));
      if (key.empty()) throw ParseError("config: empty key", lineno);
      if (cfg.values_.count(key)) throw ParseError("config: duplicate key '" + key + "'", lineno);
      cfg.values_[key] = trim(body.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("config: cannot open " + path);
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw InputError("config: key '" + key + "' expects a number, got '" + it->second + "'");
    }
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::uint64_t v = 0;
    const auto& s = it->second;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw InputError("config: key '" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw InputError("config: key '" + key + "' expects true/false, got '" + it->second + "'");
  }

  /// Throws if any key was never read.
  void finish() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw InputError("config: unknown key '" + k + "'");
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace ssmrank
