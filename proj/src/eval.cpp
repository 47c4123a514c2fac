#include "nmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <fmt/core.h>

#include "nmt/error.hpp"
#include "nmt/protocols.hpp"
#include "nmt/text.hpp"

namespace nmt {

double length_penalty(std::size_t length, double alpha) {
  if (alpha == 0.0) return 1.0;
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace {

void check_max_len(int max_len) {
  if (max_len < 1) throw UsageError(fmt::format("max_len must be >= 1, got {}", max_len));
}

std::vector<int> with_bos(const std::vector<int> &tokens) {
  std::vector<int> p{kBosId};
  p.insert(p.end(), tokens.begin(), tokens.end());
  return p;
}

int argmax(const std::vector<double> &v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

double normalized(const Hypothesis &h, double alpha) {
  return h.logprob / length_penalty(h.tokens.size() + (h.finished ? 1 : 0), alpha);
}

}  // namespace

Hypothesis greedy_search(const StepFn &step, int max_len) {
  check_max_len(max_len);
  Hypothesis h;
  for (int t = 0; t < max_len; ++t) {
    const auto lp = step({with_bos(h.tokens)});
    const int next = argmax(lp.at(0));
    h.logprob += lp[0][static_cast<std::size_t>(next)];
    if (next == kEosId) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(next);
  }
  return h;
}

Hypothesis beam_search(const StepFn &step, int beam_size, int max_len, double alpha) {
  if (beam_size < 1) throw UsageError(fmt::format("beam_size must be >= 1, got {}", beam_size));
  check_max_len(max_len);
  const Hypothesis greedy = greedy_search(step, max_len);

  struct Candidate {
    double score;
    std::size_t parent;
    int token;
  };
  std::vector<Hypothesis> alive(1), finished;
  for (int t = 0; t < max_len && !alive.empty(); ++t) {
    TokenSeqs prefixes;
    for (const auto &h : alive) prefixes.push_back(with_bos(h.tokens));
    const auto lp = step(prefixes);
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      for (std::size_t v = 0; v < lp[i].size(); ++v) {
        cands.push_back({alive[i].logprob + lp[i][v], i, static_cast<int>(v)});
      }
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(beam_size), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate &a, const Candidate &b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t k = 0; k < keep; ++k) {
      Hypothesis h = alive[cands[k].parent];
      h.logprob = cands[k].score;
      if (cands[k].token == kEosId) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[k].token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    if (finished.size() >= static_cast<std::size_t>(beam_size)) break;
  }

  const Hypothesis *best = &greedy;
  double best_score = normalized(greedy, alpha);
  for (const auto *pool : {&finished, &alive}) {
    for (const auto &h : *pool) {
      const double s = normalized(h, alpha);
      if (s > best_score) {
        best = &h;
        best_score = s;
      }
    }
  }
  return *best;
}

namespace {

template <class Scalar>
std::vector<double> last_row_logprobs(const Matrix<Scalar> &logits, Eigen::Index row) {
  const Matrix<Scalar> lp = detail::log_softmax_rows<Scalar>(logits.row(row));
  return std::vector<double>(lp.data(), lp.data() + lp.size());
}

int default_max_len(const ModelConfig &cfg, std::size_t src_len, int requested) {
  const int cap = cfg.max_seq_len - 1;
  const int want = requested > 0 ? requested : 2 * static_cast<int>(src_len) + 10;
  return std::max(1, std::min(want, cap));
}

}  // namespace

template <class Scalar>
StepFn model_step(TransformerModel<Scalar> &model, const std::vector<int> &src) {
  Graph<Scalar> g;
  const Memory<Scalar> mem = model.encode(g, {src}, nullptr);
  Matrix<Scalar> states = mem.states.value();
  return [&model, states = std::move(states), length = mem.length,
          src_len = mem.lengths.at(0)](const TokenSeqs &prefixes) {
    const auto k = static_cast<Eigen::Index>(prefixes.size());
    Graph<Scalar> sg;
    Memory<Scalar> m;
    m.states = sg.constant(states.replicate(k, 1));
    m.batch = k;
    m.length = length;
    m.lengths.assign(prefixes.size(), src_len);
    const Tensor<Scalar> logits = model.decode(sg, m, prefixes, nullptr);
    const auto t = static_cast<Eigen::Index>(prefixes.at(0).size());
    std::vector<std::vector<double>> out;
    for (Eigen::Index b = 0; b < k; ++b) out.push_back(last_row_logprobs(logits.value(), b * t + t - 1));
    return out;
  };
}

template <class Scalar>
std::vector<int> greedy_decode(TransformerModel<Scalar> &model, const std::vector<int> &src,
                               int max_len) {
  check_max_len(max_len);
  return greedy_search(model_step(model, src), max_len).tokens;
}

template <class Scalar>
TokenSeqs greedy_decode_batch(TransformerModel<Scalar> &model, const TokenSeqs &srcs,
                              int max_len) {
  check_max_len(max_len);
  TokenSeqs out(srcs.size());
  if (srcs.empty()) return out;
  Graph<Scalar> g;
  const Memory<Scalar> mem = model.encode(g, srcs, nullptr);
  const Matrix<Scalar> &states = mem.states.value();
  const Eigen::Index length = mem.length;

  std::vector<std::size_t> alive(srcs.size());
  std::iota(alive.begin(), alive.end(), 0);
  for (int t = 0; t < max_len && !alive.empty(); ++t) {
    const auto k = static_cast<Eigen::Index>(alive.size());
    Graph<Scalar> sg;
    Memory<Scalar> m;
    Matrix<Scalar> block(k * length, states.cols());
    TokenSeqs prefixes;
    for (Eigen::Index b = 0; b < k; ++b) {
      const std::size_t s = alive[static_cast<std::size_t>(b)];
      block.middleRows(b * length, length) =
          states.middleRows(static_cast<Eigen::Index>(s) * length, length);
      m.lengths.push_back(mem.lengths[s]);
      prefixes.push_back(with_bos(out[s]));
    }
    m.states = sg.constant(std::move(block));
    m.batch = k;
    m.length = length;
    const Tensor<Scalar> logits = model.decode(sg, m, prefixes, nullptr);
    const Eigen::Index steps = t + 1;
    std::vector<std::size_t> still;
    for (Eigen::Index b = 0; b < k; ++b) {
      const std::size_t s = alive[static_cast<std::size_t>(b)];
      const int next = argmax(last_row_logprobs(logits.value(), b * steps + steps - 1));
      if (next == kEosId) continue;
      out[s].push_back(next);
      still.push_back(s);
    }
    alive = std::move(still);
  }
  return out;
}

template <class Scalar>
std::vector<int> beam_decode(TransformerModel<Scalar> &model, const std::vector<int> &src,
                             int beam_size, int max_len, double alpha) {
  return beam_search(model_step(model, src), beam_size, max_len, alpha).tokens;
}

template <class Scalar>
std::vector<std::string> translate(TransformerModel<Scalar> &model, const SubwordModel &src_tok,
                                   const SubwordModel &tgt_tok,
                                   const std::vector<std::string> &sentences,
                                   const std::optional<std::string> &target_lang,
                                   const DecodeOptions &options) {
  const ModelConfig &cfg = model.config();
  if (src_tok.vocab_size() != cfg.src_vocab_size || tgt_tok.vocab_size() != cfg.tgt_vocab_size) {
    throw UsageError("translate: tokenizers do not match the model's vocabulary sizes");
  }
  TokenSeqs srcs;
  for (const auto &s : sentences) {
    std::vector<int> ids = frame_source(s, src_tok, target_lang);
    if (static_cast<int>(ids.size()) > cfg.max_seq_len) {
      ids.resize(static_cast<std::size_t>(cfg.max_seq_len));
      ids.back() = kEosId;
    }
    srcs.push_back(std::move(ids));
  }
  std::vector<std::string> out(sentences.size());
  if (options.beam_size <= 1) {
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < srcs.size(); start += kChunk) {
      const std::size_t end = std::min(srcs.size(), start + kChunk);
      std::size_t longest = 0;
      for (std::size_t i = start; i < end; ++i) longest = std::max(longest, srcs[i].size());
      const TokenSeqs chunk(srcs.begin() + static_cast<std::ptrdiff_t>(start),
                            srcs.begin() + static_cast<std::ptrdiff_t>(end));
      const TokenSeqs hyps =
          greedy_decode_batch(model, chunk, default_max_len(cfg, longest, options.max_len));
      for (std::size_t i = start; i < end; ++i) out[i] = tgt_tok.decode(hyps[i - start]);
    }
    return out;
  }
  for (std::size_t i = 0; i < srcs.size(); ++i) {
    const auto ids = beam_decode(model, srcs[i], options.beam_size,
                                 default_max_len(cfg, srcs[i].size(), options.max_len),
                                 options.length_penalty);
    out[i] = tgt_tok.decode(ids);
  }
  return out;
}

// ---- BLEU ---------------------------------------------------------------

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const std::vector<std::string> &words, std::size_t n) {
  NgramCounts c;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++c[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                 words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return c;
}

}  // namespace

BleuScore corpus_bleu(const std::vector<std::vector<std::string>> &hypotheses,
                      const std::vector<std::vector<std::string>> &references, bool smooth) {
  if (hypotheses.size() != references.size()) {
    throw UsageError(fmt::format("corpus_bleu: {} hypotheses vs {} references", hypotheses.size(),
                                 references.size()));
  }
  std::array<std::size_t, 4> matches{}, totals{};
  BleuScore out;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    out.hyp_length += hypotheses[s].size();
    out.ref_length += references[s].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts h = ngrams(hypotheses[s], n);
      const NgramCounts r = ngrams(references[s], n);
      for (const auto &[gram, count] : h) {
        auto it = r.find(gram);
        matches[n - 1] += it == r.end() ? 0 : std::min(count, it->second);
        totals[n - 1] += count;
      }
    }
  }
  if (out.hyp_length == 0) return out;
  out.brevity_penalty =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(out.ref_length) /
                                       static_cast<double>(out.hyp_length)));
  double log_sum = 0.0;
  int orders = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(matches[n]), t = static_cast<double>(totals[n]);
    if (totals[n] == 0) continue;  // no n-grams of this order anywhere
    if (smooth && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    out.precisions[n] = m / t;
    ++orders;
    if (m == 0.0) {
      zero = true;
    } else {
      log_sum += std::log(m / t);
    }
  }
  if (zero || orders == 0) return out;
  out.bleu = 100.0 * out.brevity_penalty * std::exp(log_sum / orders);
  return out;
}

BleuScore corpus_bleu(const std::vector<std::string> &hypotheses,
                      const std::vector<std::string> &references, bool smooth) {
  std::vector<std::vector<std::string>> h, r;
  h.reserve(hypotheses.size());
  r.reserve(references.size());
  for (const auto &s : hypotheses) h.push_back(split_words(s));
  for (const auto &s : references) r.push_back(split_words(s));
  return corpus_bleu(h, r, smooth);
}

RunStats aggregate_runs(std::span<const double> scores) {
  if (scores.size() < 2) {
    throw UsageError(fmt::format("aggregate_runs: need at least 2 runs, got {}", scores.size()));
  }
  const double n = static_cast<double>(scores.size());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double ss = 0.0;
  for (double s : scores) ss += (s - mean) * (s - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

std::string format_pm(double mean, double std) {
  return fmt::format("{:.1f} ± {:.1f}", mean, std);
}

void BleuReport::add(std::uint64_t seed, const BleuScore &score) {
  seeds.push_back(seed);
  scores.push_back(score.bleu);
  details.push_back(score);
}

RunStats BleuReport::stats() const { return aggregate_runs(scores); }

GainReport gain(const std::string &label, RunStats model, const std::string &baseline_label,
                RunStats baseline) {
  return {label, baseline_label, model.mean - baseline.mean,
          std::sqrt(model.std * model.std + baseline.std * baseline.std)};
}

GainReport gain(const BleuReport &model, const BleuReport &baseline) {
  if (model.test_hash != baseline.test_hash) {
    throw UsageError(fmt::format("gain: '{}' and '{}' were scored on different test sets",
                                 model.label, baseline.label));
  }
  if (model.direction != baseline.direction) {
    throw UsageError(fmt::format("gain: '{}' is {} but baseline '{}' is {}", model.label,
                                 model.direction, baseline.label, baseline.direction));
  }
  return gain(model.label, model.stats(), baseline.label, baseline.stats());
}

std::string test_set_hash(const ParallelCorpus &test) {
  std::string bytes;
  for (std::size_t i = 0; i < test.size(); ++i) {
    bytes += test.source[i];
    bytes += '\t';
    bytes += test.target[i];
    bytes += '\n';
  }
  return hex64(fnv1a(bytes));
}

namespace {

struct Row {
  std::string label, direction, score, gain, mean, std, gain_value, gain_std, seeds;
};

std::vector<Row> table_rows(const std::vector<BleuReport> &reports,
                            const std::optional<std::string> &baseline_label,
                            const std::string &gain_direction) {
  const BleuReport *base = nullptr;
  if (baseline_label) {
    for (const auto &r : reports) {
      if (r.label == *baseline_label && r.direction == gain_direction) base = &r;
    }
  }
  std::vector<Row> rows;
  for (const auto &r : reports) {
    Row row;
    row.label = r.label;
    row.direction = r.direction;
    std::vector<std::string> seeds;
    for (auto s : r.seeds) seeds.push_back(std::to_string(s));
    row.seeds = join(seeds, ";");
    if (r.scores.size() >= 2) {
      const RunStats st = r.stats();
      row.score = format_pm(st.mean, st.std);
      row.mean = fmt::format("{:.4f}", st.mean);
      row.std = fmt::format("{:.4f}", st.std);
    } else if (r.scores.size() == 1) {
      row.score = fmt::format("{:.1f} (1 run)", r.scores[0]);
      row.mean = fmt::format("{:.4f}", r.scores[0]);
    } else {
      row.score = "missing";
    }
    if (base != nullptr && &r != base && r.direction == gain_direction && r.scores.size() >= 2 &&
        base->scores.size() >= 2) {
      const GainReport g = gain(r, *base);
      row.gain = format_pm(g.gain, g.gain_std);
      row.gain_value = fmt::format("{:.4f}", g.gain);
      row.gain_std = fmt::format("{:.4f}", g.gain_std);
    } else {
      row.gain = "-";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::string render_table(const std::vector<BleuReport> &reports,
                         const std::optional<std::string> &baseline_label,
                         const std::string &gain_direction) {
  const auto rows = table_rows(reports, baseline_label, gain_direction);
  std::size_t w_label = 5, w_dir = 9, w_score = 4;
  for (const auto &r : rows) {
    w_label = std::max(w_label, r.label.size());
    w_dir = std::max(w_dir, r.direction.size());
    w_score = std::max(w_score, code_points(r.score).size());
  }
  auto pad = [](const std::string &s, std::size_t w) {
    const std::size_t len = code_points(s).size();
    return s + std::string(w > len ? w - len : 0, ' ');
  };
  const std::string gain_title = fmt::format("{} Gain", gain_direction);
  std::string out = fmt::format("{}  {}  {}  {}\n", pad("Model", w_label), pad("Direction", w_dir),
                                pad("BLEU", w_score), gain_title);
  out += std::string(w_label + w_dir + w_score + gain_title.size() + 6, '-') + "\n";
  for (const auto &r : rows) {
    out += fmt::format("{}  {}  {}  {}\n", pad(r.label, w_label), pad(r.direction, w_dir),
                       pad(r.score, w_score), r.gain);
  }
  return out;
}

std::string render_csv(const std::vector<BleuReport> &reports,
                       const std::optional<std::string> &baseline_label,
                       const std::string &gain_direction) {
  std::string out = "protocol,direction,mean,std,gain,gain_std,seeds\n";
  for (const auto &r : table_rows(reports, baseline_label, gain_direction)) {
    out += fmt::format("{},{},{},{},{},{},{}\n", r.label, r.direction, r.mean, r.std, r.gain_value,
                       r.gain_std, r.seeds);
  }
  return out;
}

template <class Scalar>
BleuScore evaluate_checkpoint(const Checkpoint<Scalar> &ck, const ParallelCorpus &test,
                              const std::optional<std::string> &target_lang,
                              const DecodeOptions &options, bool smooth) {
  if (!ck.src_tokenizer.model || !ck.tgt_tokenizer.model) {
    throw UsageError("evaluate: checkpoint tokenizers are not loaded");
  }
  std::optional<std::string> tag;
  if (ck.multilingual()) {
    if (!target_lang) throw UsageError("evaluate: multilingual checkpoint needs a target language");
    tag = target_lang;
  }
  TransformerModel<Scalar> model = restore(ck);
  const auto hyps = translate(model, *ck.src_tokenizer.model, *ck.tgt_tokenizer.model, test.source,
                              tag, options);
  return corpus_bleu(hyps, test.target, smooth);
}

template <class Scalar>
BleuScore zero_shot_eval(const Checkpoint<Scalar> &ck, const std::string &direction,
                         const ParallelCorpus &test, const DecodeOptions &options, bool smooth) {
  const auto [src_lang, tgt_lang] = parse_direction(direction);
  if (ck.trained_on(direction)) {
    throw UsageError(fmt::format("zero-shot: {} is a trained direction of '{}'", direction,
                                 ck.label));
  }
  if (!ck.src_tokenizer.model || !ck.src_tokenizer.model->has_language(tgt_lang)) {
    throw UsageError(fmt::format("zero-shot: no tag for target language '{}'", tgt_lang));
  }
  bool src_seen = false, tgt_seen = false;
  for (const auto &d : ck.directions) {
    const auto [s, t] = parse_direction(d);
    src_seen = src_seen || s == src_lang;
    tgt_seen = tgt_seen || t == tgt_lang;
  }
  if (!src_seen || !tgt_seen) {
    throw UsageError(fmt::format("zero-shot: {} needs '{}' seen as a source and '{}' as a target",
                                 direction, src_lang, tgt_lang));
  }
  return evaluate_checkpoint(ck, test, tgt_lang, options, smooth);
}

#define NMT_INSTANTIATE(S)                                                                        \
  template StepFn model_step<S>(TransformerModel<S> &, const std::vector<int> &);                 \
  template std::vector<int> greedy_decode<S>(TransformerModel<S> &, const std::vector<int> &, int); \
  template TokenSeqs greedy_decode_batch<S>(TransformerModel<S> &, const TokenSeqs &, int);       \
  template std::vector<int> beam_decode<S>(TransformerModel<S> &, const std::vector<int> &, int,  \
                                           int, double);                                          \
  template std::vector<std::string> translate<S>(                                                 \
      TransformerModel<S> &, const SubwordModel &, const SubwordModel &,                          \
      const std::vector<std::string> &, const std::optional<std::string> &,                       \
      const DecodeOptions &);                                                                     \
  template BleuScore evaluate_checkpoint<S>(const Checkpoint<S> &, const ParallelCorpus &,        \
                                            const std::optional<std::string> &,                   \
                                            const DecodeOptions &, bool);                         \
  template BleuScore zero_shot_eval<S>(const Checkpoint<S> &, const std::string &,                \
                                       const ParallelCorpus &, const DecodeOptions &, bool);

NMT_INSTANTIATE(float)
NMT_INSTANTIATE(double)

#undef NMT_INSTANTIATE

}  // namespace nmt
