#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "umr/errors.hpp"

namespace umr {

/// Ordered `key = value` pairs. `#` starts a comment; blank lines are ignored.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(std::istream& in, const std::string& origin = "<config>") {
  KeyValues out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigurationError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigurationError(origin + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot read config file " + path.string());
  return parse_key_values(in, path.string());
}

/// Throws on the first key that is not in `allowed`.
inline void reject_unknown_keys(const KeyValues& kv, const std::set<std::string>& allowed, const std::string& origin) {
  for (const auto& [k, v] : kv) {
    if (!allowed.count(k)) throw ConfigurationError(origin + ": unknown key '" + k + "'");
  }
}

}  // namespace umr
