#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nmt/special_tokens.hpp"

namespace nmt {

// Marks the end of a word. It is its own symbol before merging, so a
// trained model can always rebuild word boundaries; text containing it is
// outside the alphabet.
inline constexpr std::string_view kEndOfWord = "\xe2\x96\x81";  // U+2581

struct SubwordOptions {
  bool lowercase = false;
};

// Byte-pair-encoding model: ordered merges plus a token<->id vocabulary.
// Ids 0-3 are BOS/EOS/PAD/UNK, then one atomic tag per target language
// (e.g. "<2zu>"), then the alphabet, then merged tokens. Immutable once
// built, so concurrent reads are safe.
class SubwordModel {
 public:
  using Merge = std::pair<std::string, std::string>;

  // Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go
  // to the lexicographically smallest pair) until the vocabulary holds
  // `vocab_size` entries or no pair occurs at least twice.
  static SubwordModel train(std::span<const std::string> sentences, int vocab_size,
                            std::span<const std::string> languages = {},
                            SubwordOptions options = {});

  // Merges are applied in rank order; unknown code points become UNK. No
  // BOS/EOS framing is added.
  std::vector<int> encode(std::string_view text) const;

  // Inverse of encode for in-alphabet text; reserved ids and tags are
  // skipped and UNK renders as "<unk>".
  std::string decode(std::span<const int> ids) const;

  // Prepends the tag for `language`. Rejects unknown languages and input
  // that already starts with a tag.
  std::vector<int> tag_source(std::span<const int> ids, std::string_view language) const;

  bool has_language(std::string_view language) const;
  int tag_id(std::string_view language) const;
  bool is_tag(int id) const;
  const std::vector<std::string> &languages() const { return languages_; }
  static std::string tag_token(std::string_view language);

  int vocab_size() const { return static_cast<int>(tokens_.size()); }
  const std::string &token(int id) const;
  std::optional<int> find(std::string_view token) const;
  const std::vector<Merge> &merges() const { return merges_; }
  const SubwordOptions &options() const { return options_; }

  // Text form: a header line, one merge per line, then "token<TAB>id" lines.
  std::string serialize() const;
  static SubwordModel parse(std::string_view text);
  void save(const std::string &path) const;
  static SubwordModel load(const std::string &path);

  // FNV-1a of serialize(); two models with equal hashes encode identically.
  std::uint64_t content_hash() const;

  bool operator==(const SubwordModel &other) const { return serialize() == other.serialize(); }

 private:
  struct PairHash {
    std::size_t operator()(const Merge &m) const;
  };

  void add_token(const std::string &tok);
  void index_merges();
  std::vector<std::string> segment(std::string_view word) const;

  SubwordOptions options_;
  std::vector<std::string> languages_;
  std::vector<Merge> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::unordered_map<Merge, int, PairHash> ranks_;
  int num_tags_ = 0;
};

}  // namespace nmt
