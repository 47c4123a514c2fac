#include "nmt/corpus.hpp"

#include <filesystem>
#include <numeric>
#include <set>
#include <unordered_set>

#include <fmt/core.h>

#include "nmt/config.hpp"
#include "nmt/error.hpp"
#include "nmt/rng.hpp"
#include "nmt/text.hpp"

namespace nmt {

namespace fs = std::filesystem;

void ParallelCorpus::check_aligned() const {
  if (source.size() != target.size()) {
    throw AlignmentError(fmt::format(
        "{}: line {}: source has {} sentences but target has {}", direction(),
        std::min(source.size(), target.size()) + 1, source.size(), target.size()));
  }
}

void ParallelCorpus::add(std::string src, std::string tgt) {
  source.push_back(std::move(src));
  target.push_back(std::move(tgt));
}

ContractionTable::ContractionTable(std::vector<std::pair<std::string, std::string>> rules)
    : rules_(std::move(rules)) {}

ContractionTable ContractionTable::parse(std::string_view text, std::string_view source_name) {
  std::vector<std::pair<std::string, std::string>> rules;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw DataError(fmt::format("{}:{}: expected 'contraction<TAB>expansion'", source_name,
                                  line_no));
    }
    std::string from = normalize_space(line.substr(0, tab));
    std::string to = normalize_space(line.substr(tab + 1));
    if (from.empty() || to.empty() || from.find(' ') != std::string::npos) {
      throw DataError(fmt::format("{}:{}: contraction must be one token", source_name, line_no));
    }
    rules.emplace_back(std::move(from), std::move(to));
  }
  return ContractionTable(std::move(rules));
}

ContractionTable ContractionTable::load(const std::string &path) {
  return parse(read_file(path), path);
}

namespace {

bool is_edge_punct(char c) {
  return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':' || c == '"' ||
         c == '(' || c == ')' || c == '[' || c == ']';
}

}  // namespace

std::string ContractionTable::expand(std::string_view sentence) const {
  std::vector<std::string> words = split_words(sentence);
  if (rules_.empty()) return join(words, " ");
  for (auto &w : words) {
    std::size_t b = 0, e = w.size();
    while (b < e && is_edge_punct(w[b])) ++b;
    while (e > b && is_edge_punct(w[e - 1])) --e;
    const std::string core = w.substr(b, e - b);
    if (core.empty()) continue;
    const bool capital = core[0] >= 'A' && core[0] <= 'Z';
    std::string lowered = core;
    if (capital) lowered[0] = static_cast<char>(lowered[0] - 'A' + 'a');
    for (const auto &[from, to] : rules_) {
      std::string replacement;
      if (core == from) {
        replacement = to;
      } else if (capital && lowered == from) {
        replacement = to;
        if (replacement[0] >= 'a' && replacement[0] <= 'z') {
          replacement[0] = static_cast<char>(replacement[0] - 'a' + 'A');
        }
      } else {
        continue;
      }
      w = w.substr(0, b) + replacement + w.substr(e);
      break;
    }
  }
  return join(words, " ");
}

ParallelCorpus clean(const ParallelCorpus &raw, const CleaningConfig &rules) {
  raw.check_aligned();
  ParallelCorpus out;
  out.src_lang = raw.src_lang;
  out.tgt_lang = raw.tgt_lang;
  out.notes = raw.notes;
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t dropped_long = 0, dropped_empty = 0, dropped_dup = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::string src = rules.source_contractions.expand(raw.source[i]);
    std::string tgt = rules.target_contractions.expand(raw.target[i]);
    if (src.empty() || tgt.empty()) {
      ++dropped_empty;
      continue;
    }
    if (split_words(src).size() > rules.max_tokens || split_words(tgt).size() > rules.max_tokens) {
      ++dropped_long;
      continue;
    }
    if (!seen.emplace(src, tgt).second) {
      ++dropped_dup;
      continue;
    }
    out.add(std::move(src), std::move(tgt));
  }
  if (dropped_empty + dropped_long + dropped_dup > 0) {
    out.notes.push_back(fmt::format("clean: dropped {} empty, {} overlong (> {} tokens), {} duplicate",
                                    dropped_empty, dropped_long, rules.max_tokens, dropped_dup));
  }
  return out;
}

SplitSizes split_sizes(std::size_t n) {
  SplitSizes s;
  s.train = (7 * n + 5) / 10;
  const std::size_t rest = n - s.train;
  s.test = rest / 2;
  s.valid = rest - s.test;
  return s;
}

SplitCorpus split(const ParallelCorpus &corpus, std::uint64_t seed) {
  corpus.check_aligned();
  if (corpus.size() < 20) {
    throw UsageError(fmt::format("split: need at least 20 pairs, got {}", corpus.size()));
  }
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  const SplitSizes sizes = split_sizes(corpus.size());
  SplitCorpus out;
  out.seed = seed;
  for (ParallelCorpus *part : {&out.train, &out.valid, &out.test}) {
    part->src_lang = corpus.src_lang;
    part->tgt_lang = corpus.tgt_lang;
  }
  for (std::size_t k = 0; k < order.size(); ++k) {
    ParallelCorpus &part = k < sizes.train                 ? out.train
                           : k < sizes.train + sizes.valid ? out.valid
                                                           : out.test;
    part.add(corpus.source[order[k]], corpus.target[order[k]]);
  }
  return out;
}

CorpusStats stats(const ParallelCorpus &corpus) {
  std::unordered_set<std::string> src, tgt;
  for (const auto &s : corpus.source) {
    for (auto &w : split_words(s)) src.insert(std::move(w));
  }
  for (const auto &t : corpus.target) {
    for (auto &w : split_words(t)) tgt.insert(std::move(w));
  }
  return {corpus.size(), src.size(), tgt.size()};
}

std::vector<std::string> read_lines(const std::string &path) {
  if (!fs::exists(path)) throw DataError(fmt::format("no such file: '{}'", path));
  const std::string text = read_file(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (const auto bad = find_invalid_utf8(line); bad != std::string::npos) {
      throw EncodingError(fmt::format("{}:{}: invalid UTF-8 at byte {}", path, lines.size() + 1,
                                      bad + 1));
    }
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

void write_lines(const std::string &path, const std::vector<std::string> &lines) {
  std::string text;
  for (const auto &l : lines) {
    text += l;
    text += '\n';
  }
  write_file(path, text);
}

ParallelCorpus load_parallel(const std::string &src_path, const std::string &tgt_path,
                             std::string src_lang, std::string tgt_lang) {
  ParallelCorpus corpus;
  corpus.src_lang = std::move(src_lang);
  corpus.tgt_lang = std::move(tgt_lang);
  corpus.source = read_lines(src_path);
  corpus.target = read_lines(tgt_path);
  // Blank lines at the end of a raw file are editor noise, not pairs.
  for (auto *side : {&corpus.source, &corpus.target}) {
    while (!side->empty() && side->back().empty()) side->pop_back();
  }
  if (corpus.source.size() != corpus.target.size()) {
    throw AlignmentError(fmt::format("'{}' has {} lines but '{}' has {}", src_path,
                                     corpus.source.size(), tgt_path, corpus.target.size()));
  }
  corpus.notes.push_back(fmt::format("loaded from {} / {}", src_path, tgt_path));
  return corpus;
}

void write_split(const SplitCorpus &s, const CorpusStats &corpus_stats, const std::string &dir) {
  fs::create_directories(dir);
  const std::pair<const char *, const ParallelCorpus *> parts[] = {
      {"train", &s.train}, {"valid", &s.valid}, {"test", &s.test}};
  for (const auto &[name, part] : parts) {
    write_lines((fs::path(dir) / fmt::format("{}.src", name)).string(), part->source);
    write_lines((fs::path(dir) / fmt::format("{}.tgt", name)).string(), part->target);
  }
  KeyValueConfig meta;
  meta.set("src_lang", s.train.src_lang);
  meta.set("tgt_lang", s.train.tgt_lang);
  meta.set("seed", std::to_string(s.seed));
  meta.set("ratio", s.ratio);
  meta.set("total", std::to_string(s.train.size() + s.valid.size() + s.test.size()));
  meta.set("train", std::to_string(s.train.size()));
  meta.set("valid", std::to_string(s.valid.size()));
  meta.set("test", std::to_string(s.test.size()));
  meta.set("sentences", std::to_string(corpus_stats.sentences));
  meta.set("source_types", std::to_string(corpus_stats.source_types));
  meta.set("target_types", std::to_string(corpus_stats.target_types));
  write_file((fs::path(dir) / "split.meta").string(), meta.serialize());
}

SplitCorpus read_split(const std::string &dir) {
  const std::string meta_path = (fs::path(dir) / "split.meta").string();
  if (!fs::exists(meta_path)) throw DataError(fmt::format("no split.meta in '{}'", dir));
  const KeyValueConfig meta = KeyValueConfig::load(meta_path);
  SplitCorpus s;
  s.seed = static_cast<std::uint64_t>(meta.get_int("seed", 0));
  s.ratio = meta.get_or("ratio", "14:3:3");
  const std::string src_lang = meta.require("src_lang");
  const std::string tgt_lang = meta.require("tgt_lang");
  const std::pair<const char *, ParallelCorpus *> parts[] = {
      {"train", &s.train}, {"valid", &s.valid}, {"test", &s.test}};
  for (const auto &[name, part] : parts) {
    *part = load_parallel((fs::path(dir) / fmt::format("{}.src", name)).string(),
                          (fs::path(dir) / fmt::format("{}.tgt", name)).string(), src_lang,
                          tgt_lang);
    part->notes.clear();
  }
  return s;
}

}  // namespace nmt
