#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nmt/checkpoint.hpp"
#include "nmt/corpus.hpp"
#include "nmt/optim.hpp"
#include "nmt/subword.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

struct TrainConfig {
  ModelConfig model;
  long batch_tokens = 2048;  // target tokens per batch, EOS included
  long max_steps = 20000;
  std::uint64_t seed = 1;
  long warmup = 4000;
  double lr_scale = 1.0;  // multiplies the noam rate
  AdamConfig adam;
  long eval_every = 500;  // validation cadence, in steps
  int patience = 10;      // evaluations without improvement; 0 disables
  std::string label;

  void validate() const;
};

// One tokenized pair. `src` is fully framed for the encoder (optional tag,
// subwords, EOS); `tgt` is unframed.
struct Example {
  std::vector<int> src;
  std::vector<int> tgt;
  int direction = 0;
};

// Tokenizes a corpus. Pairs that would exceed max_seq_len are dropped.
std::vector<Example> make_examples(const ParallelCorpus &corpus, const SubwordModel &src_tok,
                                   const SubwordModel &tgt_tok, int max_seq_len,
                                   const std::optional<std::string> &tag_language = {},
                                   int direction = 0);

// Source framing shared by training and translation.
std::vector<int> frame_source(std::string_view text, const SubwordModel &src_tok,
                              const std::optional<std::string> &tag_language);

// Groups indices into batches of about `batch_tokens` target tokens, in the
// given order.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<Example> &examples,
                                                   const std::vector<std::size_t> &order,
                                                   long batch_tokens);

struct MetricRow {
  long step = 0;
  std::string split;
  std::string direction;
  double loss = 0.0;
};

// Append-only "step<TAB>split<TAB>direction<TAB>loss" lines. With an empty
// path the rows are only kept in memory.
class MetricsLog {
 public:
  explicit MetricsLog(std::string path = {});
  void append(const MetricRow &row);
  const std::vector<MetricRow> &rows() const { return rows_; }
  static std::vector<MetricRow> read(const std::string &path);

 private:
  std::string path_;
  std::vector<MetricRow> rows_;
};

struct ValidSet {
  std::string direction;
  std::vector<Example> examples;
};

template <class Scalar>
struct TrainResult {
  Checkpoint<Scalar> final_ck;
  Checkpoint<Scalar> best_ck;
  long steps = 0;
  bool stopped_early = false;
};

// Token-weighted mean NLL in eval mode.
template <class Scalar>
double mean_loss(TransformerModel<Scalar> &model, const std::vector<Example> &examples,
                 long batch_tokens);

// Loss of one batch of examples, as used for every optimizer step.
template <class Scalar>
Tensor<Scalar> batch_loss(TransformerModel<Scalar> &model, Graph<Scalar> &g,
                          const std::vector<Example> &examples,
                          const std::vector<std::size_t> &batch, Rng *rng);

// The shared optimization loop: per-epoch seeded shuffles, noam-scheduled
// Adam, periodic validation with best-checkpoint tracking and patience.
// `template_ck` supplies the metadata copied into the returned checkpoints.
template <class Scalar>
TrainResult<Scalar> train_model(TransformerModel<Scalar> &model,
                                const std::vector<Example> &train,
                                const std::vector<ValidSet> &valid, const TrainConfig &cfg,
                                const Checkpoint<Scalar> &template_ck, MetricsLog &log);

// Paths are optional; checkpoints reference tokenizers by them.
struct TokenizerPair {
  std::shared_ptr<const SubwordModel> src;
  std::shared_ptr<const SubwordModel> tgt;
  std::string src_path;
  std::string tgt_path;
};

// BPE models trained on the train partitions only. Non-empty `tag_languages`
// registers one tag per language on the source side.
TokenizerPair train_tokenizers(const std::vector<const ParallelCorpus *> &train_parts,
                               int src_vocab, int tgt_vocab,
                               const std::vector<std::string> &tag_languages = {},
                               SubwordOptions options = {});

// Bilingual training of one direction.
template <class Scalar>
TrainResult<Scalar> train_baseline(const SplitCorpus &data, const TokenizerPair &tok,
                                   const TrainConfig &cfg, MetricsLog &log);

// Child model initialized from a parent. Body weights are copied; source
// embeddings are copied outright when the tokenizers hash equal and
// otherwise remapped by token string, as are target embeddings and the
// output layer. Unmatched rows keep their fresh initialization from `seed`.
template <class Scalar>
TransformerModel<Scalar> transfer_init(const Checkpoint<Scalar> &parent, const TokenizerPair &child,
                                       const ModelConfig &child_cfg, std::uint64_t seed);

template <class Scalar>
TrainResult<Scalar> train_transfer(const Checkpoint<Scalar> &parent, const SplitCorpus &data,
                                   const TokenizerPair &tok, const TrainConfig &cfg,
                                   MetricsLog &log);

struct DirectionData {
  std::string src_lang;
  std::string tgt_lang;
  SplitCorpus data;

  std::string name() const { return src_lang + "-" + tgt_lang; }
};

// All directions of a multilingual run plus their joint tokenizers.
struct MultiCorpus {
  std::vector<DirectionData> directions;
  TokenizerPair tokenizers;

  // Every direction's target language must have a tag.
  void validate() const;
};

// Pools every direction's tagged examples and samples batches uniformly
// over the pool. Validation loss is logged per direction.
template <class Scalar>
TrainResult<Scalar> train_multilingual(const MultiCorpus &mc, const TrainConfig &cfg,
                                       MetricsLog &log);

// Parses "en-zu" into {"en", "zu"}.
std::pair<std::string, std::string> parse_direction(std::string_view direction);

}  // namespace nmt
