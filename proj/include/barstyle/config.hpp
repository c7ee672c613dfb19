/**
 * @file config.hpp
 * @brief Line-oriented key=value configuration text.
 */
#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "barstyle/error.hpp"

namespace barstyle {

/// Ordered key=value pairs; '#' starts a comment line.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << to_text();
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  template <class T>
  void set(const std::string& key, T value) {
    if constexpr (std::is_same_v<T, bool>) {
      values_[key] = value ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      std::ostringstream os;
      os.precision(17);
      os << value;
      values_[key] = os.str();
    } else {
      values_[key] = std::to_string(value);
    }
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& items() const { return values_; }

  /// Copy with every key prefixed by `prefix`.
  KeyValues prefixed(const std::string& prefix) const {
    KeyValues out;
    for (const auto& [k, v] : values_) out.values_[prefix + k] = v;
    return out;
  }

  /// Keys starting with `prefix`, with the prefix removed.
  KeyValues section(const std::string& prefix) const {
    KeyValues out;
    for (const auto& [k, v] : values_)
      if (k.rfind(prefix, 0) == 0) out.values_[k.substr(prefix.size())] = v;
    return out;
  }

  /// Overlays every key of `other` onto this one.
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::string get(const std::string& key, const char* fallback) const { return get(key, std::string(fallback)); }

  template <class T>
  T get(const std::string& key, T fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return convert<T>(key, it->second);
  }

  template <class T>
  T require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return convert<T>(key, it->second);
  }

  /// Throws ConfigError naming the first key outside `known` (prefix match when a known entry ends in '.').
  void reject_unknown(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (known.count(k)) continue;
      bool ok = false;
      for (const auto& pre : known)
        if (!pre.empty() && pre.back() == '.' && k.rfind(pre, 0) == 0) ok = true;
      if (!ok) throw ConfigError("unknown config key '" + k + "'");
    }
  }

 private:
  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  template <class T>
  static T convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError("key '" + key + "': expected a boolean, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      try {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return static_cast<T>(v);
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
      }
    } else {
      T v{};
      auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + text + "'");
      return v;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace barstyle
