#include "nmt/config.hpp"

#include <charconv>

#include <fmt/core.h>

#include "nmt/error.hpp"
#include "nmt/text.hpp"

namespace nmt {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string_view source_name) {
  KeyValueConfig cfg;
  cfg.source_ = std::string(source_name);
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (!body.empty()) {
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(fmt::format("{}:{}: expected 'key = value'", source_name, line_no));
      }
      std::string key = trim(std::string_view(body).substr(0, eq));
      if (key.empty()) throw ConfigError(fmt::format("{}:{}: empty key", source_name, line_no));
      cfg.entries_[std::move(key)] = trim(std::string_view(body).substr(eq + 1));
    }
    start = end + 1;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string &path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError &) {
    throw ConfigError(fmt::format("cannot read config '{}'", path));
  }
  return parse(text, path);
}

bool KeyValueConfig::has(std::string_view key) const { return entries_.contains(std::string(key)); }

std::optional<std::string> KeyValueConfig::get(std::string_view key) const {
  auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::require(std::string_view key) const {
  auto v = get(key);
  if (!v) throw ConfigError(fmt::format("{}: missing required key '{}'", source_, key));
  return *v;
}

std::string KeyValueConfig::get_or(std::string_view key, std::string fallback) const {
  auto v = get(key);
  return v ? *v : std::move(fallback);
}

long long KeyValueConfig::get_int(std::string_view key, long long fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) {
    throw ConfigError(fmt::format("{}: key '{}' expects an integer, got '{}'", source_, key, *v));
  }
  return out;
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  double out = 0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) {
    throw ConfigError(fmt::format("{}: key '{}' expects a number, got '{}'", source_, key, *v));
  }
  return out;
}

bool KeyValueConfig::get_bool(std::string_view key, bool fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError(fmt::format("{}: key '{}' expects true/false, got '{}'", source_, key, *v));
}

void KeyValueConfig::set(std::string key, std::string value) {
  entries_[std::move(key)] = std::move(value);
}

std::vector<std::string> KeyValueConfig::keys_with_prefix(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto &[k, v] : entries_) {
    if (std::string_view(k).starts_with(prefix)) out.push_back(k);
  }
  return out;
}

std::string KeyValueConfig::serialize() const {
  std::string out;
  for (const auto &[k, v] : entries_) out += fmt::format("{} = {}\n", k, v);
  return out;
}

}  // namespace nmt
