#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vcnn {

// Line-based `key = value` configuration with [section] headers. '#' starts
// a comment. Keys are addressed as "section.key"; keys before any section
// header live in the "" section.
class ConfigMap {
 public:
  static ConfigMap parse_file(const std::string& path);
  static ConfigMap parse_text(const std::string& text);

  bool has(const std::string& key) const;

  // Typed getters with defaults; throw ConfigError on malformed values.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_flag(const std::string& key, bool fallback) const;  // on/off, true/false, 1/0
  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& fallback) const;  // comma separated

  void set(const std::string& key, const std::string& value);

  // Keys never read back; used to reject typos after a stage configures itself.
  std::vector<std::string> unread_keys() const;

  // Canonical "key = value" dump in sorted key order (stage hashing input).
  std::string canonical() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> read_;
};

}  // namespace vcnn
