#pragma once

// Flat key=value configuration files with dotted keys.
//
//   # comment
//   grpo.clip_eps = 1e-4
//   data.means = 1,1; -1,1; -1,-1; 1,-1

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flowgrpo/errors.hpp"

namespace flowgrpo {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

// Parsed key=value pairs. Every getter marks its key as consumed so that
// misspelled keys can be reported by check_all_used().
class ConfigMap {
 public:
  static ConfigMap parse(std::string_view text) {
    ConfigMap m;
    std::size_t line_no = 0, start = 0;
    while (start <= text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(start, end - start);
      start = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos)
        line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
      const std::string key(detail::trim(line.substr(0, eq)));
      const std::string value(detail::trim(line.substr(eq + 1)));
      if (key.empty())
        throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      if (!m.values_.emplace(key, value).second)
        throw ConfigError("line " + std::to_string(line_no) + ": duplicate key " + key);
    }
    return m;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& def) const {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  std::string require_string(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing required key " + key);
    return get_string(key, "");
  }

  double get_double(const std::string& key, double def) const {
    if (!has(key)) {
      used_.insert(key);
      return def;
    }
    return to_double(key, get_string(key, ""));
  }

  std::size_t get_size(const std::string& key, std::size_t def) const {
    if (!has(key)) {
      used_.insert(key);
      return def;
    }
    return to_size(key, get_string(key, ""));
  }

  std::uint64_t require_u64(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing required key " + key);
    const std::string v = get_string(key, "");
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    return out;
  }

  bool get_bool(const std::string& key, bool def) const {
    if (!has(key)) {
      used_.insert(key);
      return def;
    }
    const std::string v = get_string(key, "");
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  // "1, 2.5, 3"
  std::vector<double> get_doubles(const std::string& key,
                                  std::vector<double> def) const {
    if (!has(key)) {
      used_.insert(key);
      return def;
    }
    std::vector<double> out;
    for (const auto& part : detail::split(get_string(key, ""), ','))
      out.push_back(to_double(key, part));
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key,
                                     std::vector<std::size_t> def) const {
    if (!has(key)) {
      used_.insert(key);
      return def;
    }
    std::vector<std::size_t> out;
    for (const auto& part : detail::split(get_string(key, ""), ','))
      out.push_back(to_size(key, part));
    return out;
  }

  // Semicolon-separated vectors: "1,1; -1,1"
  std::vector<std::vector<double>> get_vectors(
      const std::string& key, std::vector<std::vector<double>> def) const {
    if (!has(key)) {
      used_.insert(key);
      return def;
    }
    std::vector<std::vector<double>> out;
    for (const auto& row : detail::split(get_string(key, ""), ';')) {
      std::vector<double> v;
      for (const auto& part : detail::split(row, ',')) v.push_back(to_double(key, part));
      out.push_back(std::move(v));
    }
    return out;
  }

  void check_all_used() const {
    for (const auto& [k, _] : values_)
      if (!used_.count(k)) throw ConfigError("unknown config key " + k);
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  }

  static std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace flowgrpo
