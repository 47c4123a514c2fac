#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "bleu_oracle.hpp"
#include "nmt/error.hpp"
#include "nmt/eval.hpp"
#include "support.hpp"

using namespace nmt;
using testkit::Words;

namespace {

std::vector<Words> random_corpus(Rng &rng, std::size_t sentences, std::size_t vocab,
                                 std::size_t max_len) {
  std::vector<Words> out;
  for (std::size_t s = 0; s < sentences; ++s) {
    Words w;
    const std::size_t n = 1 + rng.below(max_len);
    for (std::size_t i = 0; i < n; ++i) w.push_back(fmt::format("w{}", rng.below(vocab)));
    out.push_back(w);
  }
  return out;
}

TEST(Bleu, HandComputedPair) {
  // the the the cat / the cat sat down:
  // clipped 1-grams 2/4, 2-grams 1/3, 3-grams 0/2, 4-grams 0/1.
  const std::vector<std::string> h{"the the the cat"}, r{"the cat sat down"};
  const BleuScore s = corpus_bleu(h, r);
  EXPECT_DOUBLE_EQ(s.precisions[0], 0.5);
  EXPECT_DOUBLE_EQ(s.precisions[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.precisions[2], 0.0);
  EXPECT_EQ(s.bleu, 0.0);
  EXPECT_DOUBLE_EQ(s.brevity_penalty, 1.0);
  // Add-one on orders 2..4: (1/2 * 2/4 * 1/3 * 1/2)^(1/4).
  const BleuScore sm = corpus_bleu(h, r, true);
  EXPECT_NEAR(sm.bleu, 100.0 * std::pow(1.0 / 24.0, 0.25), 1e-12);
}

TEST(Bleu, IdenticalIsHundredAndDisjointIsZero) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto h = random_corpus(rng, 1 + rng.below(6), 8, 12);
    EXPECT_NEAR(corpus_bleu(h, h).bleu, 100.0, 1e-9);
    std::vector<Words> other = h;
    for (auto &s : other) {
      for (auto &w : s) w = "x" + w;
    }
    EXPECT_EQ(corpus_bleu(h, other).bleu, 0.0);
  }
}

TEST(Bleu, MatchesBruteForceOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(5);
    const std::size_t vocab = 2 + rng.below(5);
    const auto h = random_corpus(rng, n, vocab, 10);
    const auto r = random_corpus(rng, n, vocab, 10);
    for (bool smooth : {false, true}) {
      const BleuScore got = corpus_bleu(h, r, smooth);
      const testkit::OracleBleu want = testkit::oracle_bleu(h, r, smooth);
      ASSERT_NEAR(got.bleu, want.bleu, 1e-9) << trial;
      ASSERT_NEAR(got.brevity_penalty, want.bp, 1e-12);
      for (int k = 0; k < 4; ++k) ASSERT_NEAR(got.precisions[k], want.precisions[k], 1e-12);
    }
  }
}

TEST(Bleu, BrevityPenaltyShrinksWithShorterOutput) {
  const std::vector<std::string> ref{"a b c d e f g h"};
  double last = 2.0;
  for (std::string hyp : {"a b c d e f g", "a b c d e f", "a b c d e", "a b c d"}) {
    const double bp = corpus_bleu(std::vector<std::string>{hyp}, ref).brevity_penalty;
    EXPECT_LT(bp, last);
    last = bp;
  }
}

TEST(Bleu, Errors) {
  EXPECT_THROW(corpus_bleu(std::vector<std::string>{"a"}, std::vector<std::string>{}), UsageError);
  EXPECT_EQ(corpus_bleu(std::vector<std::string>{""}, std::vector<std::string>{"a"}).bleu, 0.0);
}

TEST(Aggregate, ClosedForms) {
  const std::vector<double> ten(10, 7.0);
  const RunStats a = aggregate_runs(ten);
  EXPECT_EQ(a.mean, 7.0);
  EXPECT_EQ(a.std, 0.0);
  const std::vector<double> two{8.0, 10.0};
  const RunStats b = aggregate_runs(two);
  EXPECT_DOUBLE_EQ(b.mean, 9.0);
  EXPECT_DOUBLE_EQ(b.std, std::sqrt(2.0));
  EXPECT_EQ(format_pm(b.mean, b.std), "9.0 ± 1.4");
  EXPECT_EQ(format_pm(8.7, 0.3), "8.7 ± 0.3");
  EXPECT_THROW(aggregate_runs(std::vector<double>{1.0}), UsageError);
}

BleuReport report(std::string label, std::vector<double> scores, std::string hash = "h") {
  BleuReport r;
  r.label = std::move(label);
  r.direction = "en-zu";
  r.test_hash = std::move(hash);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    BleuScore s;
    s.bleu = scores[i];
    r.add(i + 1, s);
  }
  return r;
}

TEST(Gain, QuadratureAndGuards) {
  const GainReport g = gain("multi", {18.6, 1.0}, "base", {8.7, 0.3});
  EXPECT_NEAR(g.gain, 9.9, 1e-12);
  EXPECT_NEAR(g.gain_std, std::sqrt(1.09), 1e-12);
  EXPECT_EQ(format_pm(g.gain, g.gain_std), "9.9 ± 1.0");
  EXPECT_EQ(format_pm(gain("t", {14.8, 0.2}, "b", {8.7, 0.3}).gain_std, 0).substr(0, 3), "0.4");

  const BleuReport a = report("a", {9.0, 11.0, 10.0});
  const GainReport self = gain(a, a);
  EXPECT_EQ(self.gain, 0.0);
  EXPECT_NEAR(self.gain_std, a.stats().std * std::sqrt(2.0), 1e-12);
  EXPECT_THROW(gain(a, report("b", {1, 2}, "other")), UsageError);
}

TEST(Report, TableAndCsv) {
  const std::vector<BleuReport> rows{report("baseline", {8.5, 8.9}), report("multi", {18.0, 19.0}),
                                     report("single", {3.0})};
  const std::string table = render_table(rows, "baseline", "en-zu");
  EXPECT_NE(table.find("en-zu Gain"), std::string::npos);
  EXPECT_NE(table.find("8.7 ± 0.3"), std::string::npos);
  EXPECT_NE(table.find("9.8 ± 0.8"), std::string::npos);
  EXPECT_NE(table.find("(1 run)"), std::string::npos);
  const std::string csv = render_csv(rows, "baseline", "en-zu");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "protocol,direction,mean,std,gain,gain_std,seeds");
  EXPECT_NE(csv.find("multi,en-zu,18.5000,0.7071,9.8000,0.7616"), std::string::npos);
}

// ---- search -------------------------------------------------------------

constexpr int kA = kNumReserved, kB = kNumReserved + 1, kVocab = kNumReserved + 2;

std::vector<double> logs(std::map<int, double> probs) {
  std::vector<double> out(kVocab, std::log(1e-12));
  for (auto [id, p] : probs) out[static_cast<std::size_t>(id)] = std::log(p);
  return out;
}

// Greedy takes "a" (0.6) and then "a" (0.5): 0.30. "b a" scores 0.4 * 0.9 = 0.36.
std::vector<double> toy(const std::vector<int> &prefix) {
  if (prefix.size() >= 3) return logs({{kEosId, 1.0}});
  if (prefix.size() == 1) return logs({{kA, 0.6}, {kB, 0.4}});
  if (prefix[1] == kA) return logs({{kA, 0.5}, {kB, 0.5}});
  return logs({{kA, 0.9}, {kB, 0.1}});
}

StepFn batch_of(std::function<std::vector<double>(const std::vector<int> &)> f) {
  return [f](const TokenSeqs &prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto &p : prefixes) out.push_back(f(p));
    return out;
  };
}

// Best complete sequence by exhaustive enumeration.
void enumerate(const std::function<std::vector<double>(const std::vector<int> &)> &f,
               std::vector<int> prefix, double lp, int max_len, double alpha, double &best,
               std::vector<int> &arg) {
  const auto next = f(prefix);
  const std::size_t len = prefix.size() - 1;
  const double done = (lp + next[kEosId]) / length_penalty(len + 1, alpha);
  if (done > best) {
    best = done;
    arg.assign(prefix.begin() + 1, prefix.end());
  }
  if (static_cast<int>(len) == max_len) return;
  for (int v = kNumReserved; v < kVocab; ++v) {
    auto p = prefix;
    p.push_back(v);
    enumerate(f, p, lp + next[static_cast<std::size_t>(v)], max_len, alpha, best, arg);
  }
}

TEST(Search, BeamBeatsGreedyOnToyModel) {
  const StepFn step = batch_of(toy);
  const Hypothesis g = greedy_search(step, 5);
  EXPECT_EQ(g.tokens, (std::vector<int>{kA, kA}));
  EXPECT_NEAR(std::exp(g.logprob), 0.30, 1e-9);
  const Hypothesis b = beam_search(step, 2, 5, 0.0);
  EXPECT_EQ(b.tokens, (std::vector<int>{kB, kA}));
  EXPECT_NEAR(std::exp(b.logprob), 0.36, 1e-9);
  double best = -1e300;
  std::vector<int> arg;
  enumerate(toy, {kBosId}, 0.0, 4, 0.0, best, arg);
  EXPECT_EQ(arg, b.tokens);
  EXPECT_EQ(beam_search(step, 1, 5, 0.0).tokens, g.tokens);
}

TEST(Search, BeamNeverScoresBelowGreedy) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    auto f = [seed](const std::vector<int> &prefix) {
      std::uint64_t h = seed;
      for (int t : prefix) h = h * 1000003u + static_cast<std::uint64_t>(t) + 1;
      Rng rng(h);
      std::vector<double> z(kVocab);
      double total = 0;
      for (auto &v : z) total += (v = std::exp(2.0 * rng.normal(0.0, 1.0)));
      for (auto &v : z) v = std::log(v / total);
      return z;
    };
    const StepFn step = batch_of(f);
    for (double alpha : {0.0, 0.6}) {
      const Hypothesis g = greedy_search(step, 4);
      const Hypothesis b = beam_search(step, 3, 4, alpha);
      // A finished hypothesis counts its EOS in the length.
      const auto norm = [&](const Hypothesis &h) {
        return h.logprob / length_penalty(h.tokens.size() + (h.finished ? 1 : 0), alpha);
      };
      EXPECT_GE(norm(b), norm(g) - 1e-12);
      EXPECT_EQ(beam_search(step, 1, 4, 0.0).tokens, g.tokens);
    }
  }
}

TEST(Search, LengthPenaltyAndErrors) {
  EXPECT_EQ(length_penalty(7, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(length_penalty(1, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(length_penalty(7, 0.5), std::sqrt(2.0));
  const StepFn step = batch_of(toy);
  EXPECT_THROW(beam_search(step, 0, 5, 0.0), UsageError);
  EXPECT_THROW(greedy_search(step, 0), UsageError);
}

ModelConfig small_model() {
  ModelConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.dropout = 0.0;
  c.src_vocab_size = 12;
  c.tgt_vocab_size = 12;
  c.max_seq_len = 32;
  return c;
}

TEST(Decode, BeamOfOneIsGreedyOnAModel) {
  TransformerModel<double> model(small_model(), 5);
  Rng rng(8);
  TokenSeqs srcs;
  for (int i = 0; i < 50; ++i) {
    std::vector<int> s;
    const std::size_t n = 1 + rng.below(6);
    for (std::size_t k = 0; k < n; ++k) s.push_back(kNumReserved + static_cast<int>(rng.below(8)));
    s.push_back(kEosId);
    srcs.push_back(s);
  }
  const TokenSeqs batched = greedy_decode_batch(model, srcs, 8);
  for (std::size_t i = 0; i < srcs.size(); ++i) {
    const auto g = greedy_decode(model, srcs[i], 8);
    ASSERT_EQ(beam_decode(model, srcs[i], 1, 8, 0.0), g);
    ASSERT_EQ(batched[i], g);
    ASSERT_EQ(greedy_decode(model, srcs[i], 8), g);  // deterministic
  }
}

}  // namespace
