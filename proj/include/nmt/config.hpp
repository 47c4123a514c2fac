#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nmt {

// Flat "key = value" text, one entry per line, '#' comments. Later lines
// override earlier ones. Environment variables are never consulted.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text, std::string_view source_name = "<text>");
  static KeyValueConfig load(const std::string &path);

  bool has(std::string_view key) const;
  std::optional<std::string> get(std::string_view key) const;
  // Throws ConfigError naming the missing key.
  std::string require(std::string_view key) const;

  std::string get_or(std::string_view key, std::string fallback) const;
  long long get_int(std::string_view key, long long fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  void set(std::string key, std::string value);

  // Keys starting with `prefix`, in sorted order.
  std::vector<std::string> keys_with_prefix(std::string_view prefix) const;
  const std::map<std::string, std::string> &entries() const { return entries_; }
  const std::string &source() const { return source_; }

  std::string serialize() const;

 private:
  std::map<std::string, std::string> entries_;
  std::string source_ = "<text>";
};

}  // namespace nmt
