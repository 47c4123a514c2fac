#include "nmt/subword.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <unordered_set>

#include <fmt/core.h>

#include "nmt/error.hpp"
#include "nmt/text.hpp"

namespace nmt {

namespace {

constexpr std::string_view kHeaderMagic = "bpe-v1";

void check_language_code(std::string_view lang) {
  if (lang.empty()) throw UsageError("empty language code");
  for (char c : lang) {
    if (c == ',' || c == '<' || c == '>' || c == ' ' || c == '\t' || c == '\n' || c == '=') {
      throw UsageError(fmt::format("invalid character in language code '{}'", lang));
    }
  }
}

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

int parse_int(std::string_view s, std::string_view what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError(fmt::format("subword model: bad {} '{}'", what, s));
  }
  return v;
}

// Pair statistics for training, keyed by interned symbol ids.
class PairTable {
 public:
  explicit PairTable(const std::vector<std::string> &symbols)
      : symbols_(symbols), queue_(Order{&symbols_}) {}

  static std::uint64_t key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  void update(int a, int b, long delta, int word) {
    const std::uint64_t k = key(a, b);
    long &count = counts_[k];
    if (count > 0 && !banned_.contains(k)) queue_.erase({count, a, b});
    count += delta;
    if (count > 0 && !banned_.contains(k)) queue_.insert({count, a, b});
    if (delta > 0) where_[k].insert(word);
  }

  void ban(int a, int b) {
    const std::uint64_t k = key(a, b);
    if (auto it = counts_.find(k); it != counts_.end() && it->second > 0) {
      queue_.erase({it->second, a, b});
    }
    banned_.insert(k);
  }

  struct Entry {
    long count;
    int a, b;
  };

  const Entry *best() const { return queue_.empty() ? nullptr : &*queue_.begin(); }

  std::vector<int> words_with(int a, int b) {
    auto it = where_.find(key(a, b));
    if (it == where_.end()) return {};
    std::vector<int> ws(it->second.begin(), it->second.end());
    std::sort(ws.begin(), ws.end());
    return ws;
  }

 private:
  struct Order {
    const std::vector<std::string> *symbols;
    bool operator()(const Entry &x, const Entry &y) const {
      if (x.count != y.count) return x.count > y.count;
      const auto &sx = (*symbols)[x.a];
      const auto &sy = (*symbols)[y.a];
      if (sx != sy) return sx < sy;
      return (*symbols)[x.b] < (*symbols)[y.b];
    }
  };

  const std::vector<std::string> &symbols_;
  std::unordered_map<std::uint64_t, long> counts_;
  std::unordered_map<std::uint64_t, std::unordered_set<int>> where_;
  std::unordered_set<std::uint64_t> banned_;
  std::set<Entry, Order> queue_;
};

}  // namespace

std::size_t SubwordModel::PairHash::operator()(const Merge &m) const {
  return std::hash<std::string>()(m.first) * 31 + std::hash<std::string>()(m.second);
}

std::string SubwordModel::tag_token(std::string_view language) {
  return fmt::format("<2{}>", language);
}

void SubwordModel::add_token(const std::string &tok) {
  if (ids_.contains(tok)) return;
  ids_.emplace(tok, static_cast<int>(tokens_.size()));
  tokens_.push_back(tok);
}

void SubwordModel::index_merges() {
  ranks_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    ranks_.emplace(merges_[r], static_cast<int>(r));
  }
}

SubwordModel SubwordModel::train(std::span<const std::string> sentences, int vocab_size,
                                 std::span<const std::string> languages,
                                 SubwordOptions options) {
  SubwordModel model;
  model.options_ = options;
  for (const auto &lang : languages) check_language_code(lang);
  model.languages_.assign(languages.begin(), languages.end());
  std::sort(model.languages_.begin(), model.languages_.end());
  model.languages_.erase(std::unique(model.languages_.begin(), model.languages_.end()),
                         model.languages_.end());
  model.num_tags_ = static_cast<int>(model.languages_.size());

  for (const char *tok : {kBosToken, kEosToken, kPadToken, kUnkToken}) model.add_token(tok);
  for (const auto &lang : model.languages_) model.add_token(tag_token(lang));
  const std::set<std::string> reserved(model.tokens_.begin(), model.tokens_.end());

  std::map<std::string, long> word_freq;
  for (const auto &s : sentences) {
    for (auto &w : split_words(options.lowercase ? ascii_lower(s) : s)) ++word_freq[w];
  }
  if (word_freq.empty()) throw UsageError("train_bpe: empty corpus");

  std::set<std::string> alphabet;
  for (const auto &[w, f] : word_freq) {
    for (auto cp : code_points(w)) {
      if (cp != kEndOfWord) alphabet.emplace(cp);
    }
  }
  const std::size_t base = model.tokens_.size() + 1 + alphabet.size();
  if (vocab_size <= static_cast<int>(base)) {
    throw UsageError(fmt::format(
        "train_bpe: vocab_size {} leaves no room beyond {} reserved/tag/alphabet entries",
        vocab_size, base));
  }
  model.add_token(std::string(kEndOfWord));
  for (const auto &c : alphabet) model.add_token(c);

  // Symbol -1 stands for an out-of-alphabet code point and never pairs.
  std::vector<std::string> symbols;
  std::unordered_map<std::string, int> symbol_ids;
  auto intern = [&](const std::string &s) {
    auto [it, inserted] = symbol_ids.emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  };
  std::vector<std::vector<int>> words;
  std::vector<long> freqs;
  for (const auto &[w, f] : word_freq) {
    std::vector<int> seq;
    for (auto cp : code_points(w)) seq.push_back(cp == kEndOfWord ? -1 : intern(std::string(cp)));
    seq.push_back(intern(std::string(kEndOfWord)));
    words.push_back(std::move(seq));
    freqs.push_back(f);
  }

  PairTable table(symbols);
  auto add_word = [&](int w, long sign) {
    const auto &seq = words[w];
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      if (seq[i] >= 0 && seq[i + 1] >= 0) table.update(seq[i], seq[i + 1], sign * freqs[w], w);
    }
  };
  for (int w = 0; w < static_cast<int>(words.size()); ++w) add_word(w, +1);

  while (model.vocab_size() < vocab_size) {
    const auto *top = table.best();
    if (top == nullptr || top->count < 2) break;
    const int a = top->a, b = top->b;
    const std::string merged = symbols[a] + symbols[b];
    if (reserved.contains(merged)) {
      table.ban(a, b);
      continue;
    }
    const int c = intern(merged);
    model.merges_.emplace_back(symbols[a], symbols[b]);
    model.add_token(merged);
    for (int w : table.words_with(a, b)) {
      add_word(w, -1);
      auto &seq = words[w];
      std::vector<int> next;
      next.reserve(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
          next.push_back(c);
          ++i;
        } else {
          next.push_back(seq[i]);
        }
      }
      seq = std::move(next);
      add_word(w, +1);
    }
  }
  model.index_merges();
  return model;
}

std::vector<std::string> SubwordModel::segment(std::string_view word) const {
  // Empty strings mark unknown code points; they never match a merge.
  std::vector<std::string> syms;
  for (auto cp : code_points(word)) {
    if (cp == kEndOfWord || !ids_.contains(std::string(cp))) {
      syms.emplace_back();
    } else {
      syms.emplace_back(cp);
    }
  }
  syms.emplace_back(kEndOfWord);
  while (syms.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      if (syms[i].empty() || syms[i + 1].empty()) continue;
      auto it = ranks_.find({syms[i], syms[i + 1]});
      if (it != ranks_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const Merge &m = merges_[best_rank];
    std::vector<std::string> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == m.first && syms[i + 1] == m.second) {
        next.push_back(syms[i] + syms[i + 1]);
        ++i;
      } else {
        next.push_back(std::move(syms[i]));
      }
    }
    syms = std::move(next);
  }
  return syms;
}

std::vector<int> SubwordModel::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto &word : split_words(options_.lowercase ? ascii_lower(text) : text)) {
    for (const auto &piece : segment(word)) {
      auto it = ids_.find(piece);
      // A piece equal to a tag string can only come from the alphabet-level
      // fallback and is never emitted as the tag.
      if (piece.empty() || it == ids_.end() || is_tag(it->second) || it->second < kNumReserved) {
        ids.push_back(kUnkId);
      } else {
        ids.push_back(it->second);
      }
    }
  }
  return ids;
}

std::string SubwordModel::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kUnkId) {
      out += kUnkToken;
      continue;
    }
    if (id < kNumReserved || is_tag(id)) continue;
    const std::string &tok = token(id);
    std::size_t pos = 0;
    while (pos < tok.size()) {
      const std::size_t hit = tok.find(kEndOfWord, pos);
      if (hit == std::string::npos) {
        out.append(tok, pos, std::string::npos);
        break;
      }
      out.append(tok, pos, hit - pos);
      out += ' ';
      pos = hit + kEndOfWord.size();
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

bool SubwordModel::has_language(std::string_view language) const {
  return std::find(languages_.begin(), languages_.end(), language) != languages_.end();
}

int SubwordModel::tag_id(std::string_view language) const {
  auto it = std::find(languages_.begin(), languages_.end(), language);
  if (it == languages_.end()) {
    throw UsageError(fmt::format("language '{}' has no tag in this subword model", language));
  }
  return kNumReserved + static_cast<int>(it - languages_.begin());
}

bool SubwordModel::is_tag(int id) const { return id >= kNumReserved && id < kNumReserved + num_tags_; }

std::vector<int> SubwordModel::tag_source(std::span<const int> ids,
                                          std::string_view language) const {
  const int tag = tag_id(language);
  if (!ids.empty() && is_tag(ids.front())) {
    throw UsageError(fmt::format("sequence already starts with tag {}", token(ids.front())));
  }
  std::vector<int> out;
  out.reserve(ids.size() + 1);
  out.push_back(tag);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

const std::string &SubwordModel::token(int id) const {
  if (id < 0 || id >= vocab_size()) {
    throw IndexError(fmt::format("token id {} outside vocabulary of size {}", id, vocab_size()));
  }
  return tokens_[id];
}

std::optional<int> SubwordModel::find(std::string_view tok) const {
  auto it = ids_.find(std::string(tok));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::string SubwordModel::serialize() const {
  std::vector<std::string> tags;
  for (const auto &lang : languages_) tags.push_back(tag_token(lang));
  std::string out = fmt::format("{} bos={} eos={} pad={} unk={} lowercase={} tags={} merges={} vocab={}\n",
                                kHeaderMagic, kBosId, kEosId, kPadId, kUnkId,
                                options_.lowercase ? 1 : 0, join(tags, ","), merges_.size(),
                                tokens_.size());
  for (const auto &[l, r] : merges_) out += fmt::format("{} {}\n", l, r);
  for (std::size_t i = 0; i < tokens_.size(); ++i) out += fmt::format("{}\t{}\n", tokens_[i], i);
  return out;
}

SubwordModel SubwordModel::parse(std::string_view text) {
  if (text.empty() || text.back() != '\n') throw DataError("subword model: truncated file");
  auto lines = split_on(text.substr(0, text.size() - 1), '\n');
  auto fields = split_on(lines.front(), ' ');
  if (fields.size() != 9 || fields[0] != kHeaderMagic) {
    throw DataError("subword model: unrecognized header");
  }
  auto value = [&](std::size_t i, std::string_view key) {
    const std::string prefix = std::string(key) + "=";
    if (!fields[i].starts_with(prefix)) {
      throw DataError(fmt::format("subword model: expected '{}' in header", key));
    }
    return fields[i].substr(prefix.size());
  };
  if (parse_int(value(1, "bos"), "bos") != kBosId || parse_int(value(2, "eos"), "eos") != kEosId ||
      parse_int(value(3, "pad"), "pad") != kPadId || parse_int(value(4, "unk"), "unk") != kUnkId) {
    throw DataError("subword model: reserved ids differ from this build");
  }
  SubwordModel model;
  model.options_.lowercase = parse_int(value(5, "lowercase"), "lowercase") != 0;
  const std::string_view tags = value(6, "tags");
  if (!tags.empty()) {
    for (auto t : split_on(tags, ',')) {
      if (t.size() < 4 || !t.starts_with("<2") || !t.ends_with(">")) {
        throw DataError(fmt::format("subword model: bad tag '{}'", t));
      }
      model.languages_.emplace_back(t.substr(2, t.size() - 3));
    }
  }
  model.num_tags_ = static_cast<int>(model.languages_.size());
  const int num_merges = parse_int(value(7, "merges"), "merge count");
  const int num_tokens = parse_int(value(8, "vocab"), "vocab size");
  if (static_cast<int>(lines.size()) != 1 + num_merges + num_tokens) {
    throw DataError("subword model: line count does not match header");
  }
  for (int i = 0; i < num_merges; ++i) {
    auto parts = split_on(lines[1 + i], ' ');
    if (parts.size() != 2 || parts[0].empty() || parts[1].empty()) {
      throw DataError(fmt::format("subword model: bad merge on line {}", 2 + i));
    }
    model.merges_.emplace_back(std::string(parts[0]), std::string(parts[1]));
  }
  for (int i = 0; i < num_tokens; ++i) {
    auto parts = split_on(lines[1 + num_merges + i], '\t');
    if (parts.size() != 2 || parse_int(parts[1], "token id") != i) {
      throw DataError(fmt::format("subword model: bad vocabulary entry on line {}",
                                  2 + num_merges + i));
    }
    const std::string tok(parts[0]);
    if (model.ids_.contains(tok)) throw DataError(fmt::format("subword model: duplicate token '{}'", tok));
    model.ids_.emplace(tok, i);
    model.tokens_.push_back(tok);
  }
  if (num_tokens < kNumReserved + model.num_tags_ || model.tokens_[kBosId] != kBosToken ||
      model.tokens_[kEosId] != kEosToken || model.tokens_[kPadId] != kPadToken ||
      model.tokens_[kUnkId] != kUnkToken) {
    throw DataError("subword model: reserved tokens missing");
  }
  for (int t = 0; t < model.num_tags_; ++t) {
    if (model.tokens_[kNumReserved + t] != tag_token(model.languages_[t])) {
      throw DataError("subword model: tag tokens out of place");
    }
  }
  model.index_merges();
  return model;
}

void SubwordModel::save(const std::string &path) const { write_file(path, serialize()); }

SubwordModel SubwordModel::load(const std::string &path) { return parse(read_file(path)); }

std::uint64_t SubwordModel::content_hash() const { return fnv1a(serialize()); }

}  // namespace nmt
