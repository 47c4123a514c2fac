#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nmt {

// Sentence-aligned bitext: source[i] translates to target[i].
struct ParallelCorpus {
  std::string src_lang;
  std::string tgt_lang;
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::vector<std::string> notes;

  std::size_t size() const { return source.size(); }
  bool empty() const { return source.empty(); }
  std::string direction() const { return src_lang + "-" + tgt_lang; }

  // Throws AlignmentError naming the first unpaired line.
  void check_aligned() const;
  void add(std::string src, std::string tgt);
};

// Whole-token rewrites such as "don't" -> "do not". A capitalized token
// matches a lowercase rule and keeps its capital; leading/trailing
// punctuation is preserved around the match.
class ContractionTable {
 public:
  ContractionTable() = default;
  explicit ContractionTable(std::vector<std::pair<std::string, std::string>> rules);

  // One "contraction<TAB>expansion" per line; '#' starts a comment.
  static ContractionTable parse(std::string_view text, std::string_view source_name = "<text>");
  static ContractionTable load(const std::string &path);

  std::string expand(std::string_view sentence) const;
  bool empty() const { return rules_.empty(); }
  std::size_t size() const { return rules_.size(); }

 private:
  std::vector<std::pair<std::string, std::string>> rules_;
};

struct CleaningConfig {
  ContractionTable source_contractions;
  ContractionTable target_contractions;
  std::size_t max_tokens = 80;
};

// Normalizes whitespace, expands contractions, drops empty or overlong
// pairs, then drops exact duplicate pairs keeping the first occurrence.
ParallelCorpus clean(const ParallelCorpus &raw, const CleaningConfig &rules);

struct SplitSizes {
  std::size_t train = 0, valid = 0, test = 0;
  bool operator==(const SplitSizes &) const = default;
};

// 14:3:3 partition sizes: train = round(0.7 N); the rest is halved with
// the odd pair going to valid.
SplitSizes split_sizes(std::size_t n);

struct SplitCorpus {
  ParallelCorpus train, valid, test;
  std::uint64_t seed = 0;
  std::string ratio = "14:3:3";
};

// Seeded shuffle followed by the split_sizes() partition. Requires N >= 20.
SplitCorpus split(const ParallelCorpus &corpus, std::uint64_t seed);

struct CorpusStats {
  std::size_t sentences = 0;
  std::size_t source_types = 0;
  std::size_t target_types = 0;
  bool operator==(const CorpusStats &) const = default;
};

// Word-level (whitespace token) type counts, before subword segmentation.
CorpusStats stats(const ParallelCorpus &corpus);

// One sentence per line, UTF-8, LF or CRLF. Trailing blank lines are
// ignored in both files.
ParallelCorpus load_parallel(const std::string &src_path, const std::string &tgt_path,
                             std::string src_lang, std::string tgt_lang);

// Writes {train,valid,test}.{src,tgt} plus split.meta (seed, counts) to dir.
void write_split(const SplitCorpus &split, const CorpusStats &corpus_stats,
                 const std::string &dir);
SplitCorpus read_split(const std::string &dir);

// One entry per line, empty lines included; a final newline ends the last
// line rather than starting another.
std::vector<std::string> read_lines(const std::string &path);
void write_lines(const std::string &path, const std::vector<std::string> &lines);

}  // namespace nmt
