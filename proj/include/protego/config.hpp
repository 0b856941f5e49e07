#pragma once

// Experiment config files.
//
//   file    := line*
//   line    := blank | comment | section | entry
//   comment := ('#' | ';') text
//   section := '[' name ']'
//   entry   := key '=' value
//
// Whitespace around names, keys and values is trimmed. Entries before the
// first section belong to the section "". A repeated key in one section is an
// error, as is a repeated section header.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "protego/error.hpp"

namespace protego {

class Config {
 public:
  using Section = std::map<std::string, std::string>;

  static Config parse(std::string_view text, const std::string& origin = "<config>") {
    Config cfg;
    cfg.origin_ = origin;
    std::string current;
    std::set<std::string> opened;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string raw; std::getline(in, raw);) {
      ++line_no;
      const std::string line = trim(raw);
      const std::string where = origin + ":" + std::to_string(line_no) + ": ";
      if (line.empty() || line[0] == '#' || line[0] == ';') continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + "unterminated section header");
        current = trim(line.substr(1, line.size() - 2));
        if (current.empty()) throw ConfigError(where + "empty section name");
        if (!opened.insert(current).second) throw ConfigError(where + "section [" + current + "] repeated");
        cfg.sections_[current];
        cfg.order_.push_back(current);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(where + "empty key");
      if (!cfg.sections_[current].emplace(key, value).second) {
        throw ConfigError(where + "key '" + key + "' repeated in [" + current + "]");
      }
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
  }

  bool has_section(const std::string& section) const { return sections_.count(section) != 0; }

  bool has(const std::string& section, const std::string& key) const {
    const auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) != 0;
  }

  /// Sections in file order.
  const std::vector<std::string>& sections() const { return order_; }

  const Section& section(const std::string& name) const {
    static const Section empty;
    const auto it = sections_.find(name);
    return it == sections_.end() ? empty : it->second;
  }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto it = sections_.find(section);
    if (it == sections_.end()) return std::nullopt;
    const auto kv = it->second.find(key);
    if (kv == it->second.end()) return std::nullopt;
    used_.insert(section + "\x1f" + key);
    return kv->second;
  }

  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
    return raw(section, key).value_or(fallback);
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    const auto v = raw(section, key);
    return v ? to_double(*v, section, key) : fallback;
  }

  std::optional<double> get_optional_double(const std::string& section, const std::string& key) const {
    const auto v = raw(section, key);
    if (!v) return std::nullopt;
    return to_double(*v, section, key);
  }

  std::size_t get_size(const std::string& section, const std::string& key, std::size_t fallback) const {
    const auto v = raw(section, key);
    return v ? to_size(*v, section, key) : fallback;
  }

  std::optional<std::size_t> get_optional_size(const std::string& section, const std::string& key) const {
    const auto v = raw(section, key);
    if (!v) return std::nullopt;
    return to_size(*v, section, key);
  }

  std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || p != v->data() + v->size()) throw bad_value(section, key, *v, "an unsigned integer");
    return out;
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    if (*v == "true" || *v == "yes" || *v == "on" || *v == "1") return true;
    if (*v == "false" || *v == "no" || *v == "off" || *v == "0") return false;
    throw bad_value(section, key, *v, "a boolean");
  }

  /// Comma-separated list; empty items are dropped.
  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    const std::vector<std::string>& fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    std::vector<std::string> out;
    std::stringstream ss(*v);
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    if (!sections_.count(section)) order_.push_back(section);
    sections_[section][key] = value;
  }

  /// Keys never read through a getter, as "[section] key".
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [name, entries] : sections_)
      for (const auto& [key, value] : entries)
        if (!used_.count(name + "\x1f" + key)) out.push_back("[" + name + "] " + key);
    return out;
  }

  /// Canonical text: sections and keys sorted, one "key = value" per line.
  std::string canonical() const {
    std::ostringstream out;
    for (const auto& [name, entries] : sections_) {
      out << '[' << name << "]\n";
      for (const auto& [key, value] : entries) out << key << " = " << value << '\n';
    }
    return out.str();
  }

  const std::string& origin() const { return origin_; }

 private:
  static std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
  }

  ConfigError bad_value(const std::string& section, const std::string& key, const std::string& value,
                        const char* what) const {
    return ConfigError(origin_ + ": [" + section + "] " + key + " = '" + value + "' is not " + what);
  }

  double to_double(const std::string& v, const std::string& section, const std::string& key) const {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw bad_value(section, key, v, "a number");
  }

  std::size_t to_size(const std::string& v, const std::string& section, const std::string& key) const {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw bad_value(section, key, v, "a non-negative integer");
    return out;
  }

  std::map<std::string, Section> sections_;
  std::vector<std::string> order_;
  std::string origin_;
  mutable std::set<std::string> used_;
};

}  // namespace protego
