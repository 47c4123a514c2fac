#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nmt/checkpoint.hpp"
#include "nmt/corpus.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

// ---- search -------------------------------------------------------------

// Log-probabilities of the next token for each prefix (all prefixes start
// with BOS and have the same length).
using StepFn = std::function<std::vector<std::vector<double>>(const TokenSeqs &prefixes)>;

struct Hypothesis {
  std::vector<int> tokens;  // without BOS/EOS
  double logprob = 0.0;     // EOS included when the hypothesis finished
  bool finished = false;
};

// GNMT length penalty ((5 + len) / 6)^alpha; alpha = 0 gives 1.
double length_penalty(std::size_t length, double alpha);

// Argmax per step until EOS or max_len tokens. Ties go to the lower id.
Hypothesis greedy_search(const StepFn &step, int max_len);

// Keeps the beam_size best prefixes per step and returns the finished (or
// max_len) hypothesis with the best logprob / length_penalty. The greedy
// hypothesis is always a candidate, so the result never scores below it.
Hypothesis beam_search(const StepFn &step, int beam_size, int max_len, double alpha);

struct DecodeOptions {
  int beam_size = 4;
  double length_penalty = 0.6;
  int max_len = 0;  // 0: 2 * source length + 10, capped by the model
};

template <class Scalar>
StepFn model_step(TransformerModel<Scalar> &model, const std::vector<int> &src);

template <class Scalar>
std::vector<int> greedy_decode(TransformerModel<Scalar> &model, const std::vector<int> &src,
                               int max_len);

// Greedy decoding of many sources at once; same output as greedy_decode.
template <class Scalar>
TokenSeqs greedy_decode_batch(TransformerModel<Scalar> &model, const TokenSeqs &srcs,
                              int max_len);

template <class Scalar>
std::vector<int> beam_decode(TransformerModel<Scalar> &model, const std::vector<int> &src,
                             int beam_size, int max_len, double alpha);

// Detokenized translations of raw sentences, in input order.
template <class Scalar>
std::vector<std::string> translate(TransformerModel<Scalar> &model, const SubwordModel &src_tok,
                                   const SubwordModel &tgt_tok,
                                   const std::vector<std::string> &sentences,
                                   const std::optional<std::string> &target_lang,
                                   const DecodeOptions &options);

// ---- BLEU ---------------------------------------------------------------

struct BleuScore {
  double bleu = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

// Corpus BLEU-4 over whitespace tokens with one reference per sentence.
// With `smooth`, n-gram orders above 1 get add-one counts.
BleuScore corpus_bleu(const std::vector<std::vector<std::string>> &hypotheses,
                      const std::vector<std::vector<std::string>> &references,
                      bool smooth = false);
BleuScore corpus_bleu(const std::vector<std::string> &hypotheses,
                      const std::vector<std::string> &references, bool smooth = false);

struct RunStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
};

RunStats aggregate_runs(std::span<const double> scores);

// "8.7 ± 0.3"
std::string format_pm(double mean, double std);

struct BleuReport {
  std::string label;
  std::string direction;
  std::string test_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<double> scores;
  std::vector<BleuScore> details;

  void add(std::uint64_t seed, const BleuScore &score);
  RunStats stats() const;
};

struct GainReport {
  std::string label;
  std::string baseline;
  double gain = 0.0;
  double gain_std = 0.0;
};

// Difference of means with the two standard deviations added in quadrature.
GainReport gain(const BleuReport &model, const BleuReport &baseline);
GainReport gain(const std::string &label, RunStats model, const std::string &baseline_label,
                RunStats baseline);

// Hash of a test set, used to check that gains compare like with like.
std::string test_set_hash(const ParallelCorpus &test);

// Aligned results table: one row per report,
// gain columns filled for rows whose direction is `gain_direction`.
std::string render_table(const std::vector<BleuReport> &reports,
                         const std::optional<std::string> &baseline_label,
                         const std::string &gain_direction);

// "protocol,direction,mean,std,gain,gain_std,seeds" rows.
std::string render_csv(const std::vector<BleuReport> &reports,
                       const std::optional<std::string> &baseline_label,
                       const std::string &gain_direction);

// ---- checkpoints --------------------------------------------------------

// Translates `test` with the checkpoint and scores it.
template <class Scalar>
BleuScore evaluate_checkpoint(const Checkpoint<Scalar> &ck, const ParallelCorpus &test,
                              const std::optional<std::string> &target_lang,
                              const DecodeOptions &options, bool smooth = false);

// Zero-shot evaluation of a direction the checkpoint was not trained on:
// the source is tagged with the untrained target's language.
template <class Scalar>
BleuScore zero_shot_eval(const Checkpoint<Scalar> &ck, const std::string &direction,
                         const ParallelCorpus &test, const DecodeOptions &options,
                         bool smooth = false);

}  // namespace nmt
