#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace nmt {

// Byte offset of the first invalid UTF-8 sequence, or npos if valid.
std::size_t find_invalid_utf8(std::string_view s);

// Splits valid UTF-8 into one view per code point. Invalid bytes come back
// as single-byte pieces.
std::vector<std::string_view> code_points(std::string_view s);

// Splits on ASCII whitespace, dropping empty fields.
std::vector<std::string> split_words(std::string_view s);

// Collapses runs of whitespace to one space and trims both ends.
std::string normalize_space(std::string_view s);

std::string join(const std::vector<std::string> &parts, std::string_view sep);

// ASCII-only lowercasing; bytes >= 0x80 pass through.
std::string ascii_lower(std::string_view s);

// 64-bit FNV-1a; stable across platforms, used for content hashes.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

std::string read_file(const std::string &path);
void write_file(const std::string &path, std::string_view contents);

}  // namespace nmt
