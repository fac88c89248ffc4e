#pragma once

// Plain-text key/value configuration files. Syntax is INI: `key = value`
// lines, `[section]` headers for nested keys (read as `section.key`), `;` or
// `#` comments. Every file carries a `format` version field.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cctype>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mkst/errors.hpp"

namespace mkst {

inline constexpr int kConfigFormatVersion = 1;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\"");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::string cleaned = trim(s);
  if (!cleaned.empty() && cleaned.front() == '[' && cleaned.back() == ']') cleaned = cleaned.substr(1, cleaned.size() - 2);
  std::stringstream ss(cleaned);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Reads typed values and accumulates every problem so callers can report
/// all of them at once via `throw_if_errors`.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig from_file(const std::filesystem::path& path) {
    KeyValueConfig c;
    c.path_ = path;
    try {
      boost::property_tree::ini_parser::read_ini(path.string(), c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ValidationError("cannot parse config " + path.string() + ": " + e.message() + " (line " +
                            std::to_string(e.line()) + ")");
    }
    c.check_format();
    return c;
  }

  static KeyValueConfig from_string(const std::string& text, std::filesystem::path origin = {}) {
    KeyValueConfig c;
    c.path_ = std::move(origin);
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ValidationError("cannot parse config: " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    c.check_format();
    return c;
  }

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path base_dir() const { return path_.empty() ? std::filesystem::path(".") : path_.parent_path(); }

  bool has(const std::string& key) const { return tree_.get_optional<std::string>(key).has_value(); }

  std::optional<std::string> raw(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return strip_comment(*v);
  }

  template <typename V>
  V required(const std::string& key) {
    auto v = raw(key);
    if (!v) {
      errors_.push_back("missing required key `" + key + "`");
      return V{};
    }
    return convert<V>(key, *v, V{});
  }

  template <typename V>
  V optional(const std::string& key, V fallback) {
    auto v = raw(key);
    if (!v) return fallback;
    return convert<V>(key, *v, fallback);
  }

  std::vector<std::string> list(const std::string& key, bool is_required) {
    auto v = raw(key);
    if (!v) {
      if (is_required) errors_.push_back("missing required key `" + key + "`");
      return {};
    }
    return split_list(*v);
  }

  std::vector<std::size_t> size_list(const std::string& key, std::vector<std::size_t> fallback) {
    auto v = raw(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    for (const auto& item : split_list(*v)) out.push_back(convert<std::size_t>(key, item, 0));
    return out;
  }

  /// Keys directly under `[section]`.
  std::vector<std::pair<std::string, std::string>> section(const std::string& name) const {
    std::vector<std::pair<std::string, std::string>> out;
    if (auto child = tree_.get_child_optional(name))
      for (const auto& [k, v] : *child) out.emplace_back(k, strip_comment(v.data()));
    return out;
  }

  void error(std::string message) { errors_.push_back(std::move(message)); }
  const std::vector<std::string>& errors() const { return errors_; }

  void throw_if_errors(const std::string& what) const {
    if (errors_.empty()) return;
    std::string msg = what + " validation failed (" + std::to_string(errors_.size()) + " problem" +
                      (errors_.size() == 1 ? "" : "s") + "):";
    for (const auto& e : errors_) msg += "\n  - " + e;
    throw ValidationError(msg);
  }

 private:
  // `;` or `#` after whitespace starts a trailing comment.
  static std::string strip_comment(const std::string& value) {
    for (std::size_t i = 1; i < value.size(); ++i)
      if ((value[i] == ';' || value[i] == '#') && std::isspace(static_cast<unsigned char>(value[i - 1])))
        return trim(value.substr(0, i));
    return trim(value);
  }

  void check_format() {
    auto f = raw("format");
    if (!f) {
      errors_.push_back("missing required key `format`");
      return;
    }
    if (*f != std::to_string(kConfigFormatVersion))
      errors_.push_back("unsupported config format `" + *f + "` (expected " + std::to_string(kConfigFormatVersion) + ")");
  }

  template <typename V>
  V convert(const std::string& key, const std::string& text, V fallback) {
    if constexpr (std::is_same_v<V, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      errors_.push_back("key `" + key + "`: expected boolean, got `" + text + "`");
      return fallback;
    } else {
      std::istringstream in(text);
      V v{};
      if constexpr (std::is_unsigned_v<V>) {
        if (!text.empty() && text.front() == '-') {
          errors_.push_back("key `" + key + "`: expected non-negative integer, got `" + text + "`");
          return fallback;
        }
      }
      in >> v;
      if (in.fail() || !in.eof()) {
        errors_.push_back("key `" + key + "`: cannot parse `" + text + "`");
        return fallback;
      }
      return v;
    }
  }

  std::filesystem::path path_;
  boost::property_tree::ptree tree_;
  std::vector<std::string> errors_;
};

}  // namespace mkst
