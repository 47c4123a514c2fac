#include "nmt/protocols.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

#include <fmt/core.h>

#include "nmt/error.hpp"
#include "nmt/fpenv.hpp"
#include "nmt/text.hpp"

namespace nmt {

void TrainConfig::validate() const {
  if (warmup < 1) throw ConfigError(fmt::format("warmup must be >= 1, got {}", warmup));
  if (batch_tokens < 1) throw ConfigError("batch_tokens must be positive");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
  if (lr_scale <= 0.0) throw ConfigError("lr_scale must be positive");
  if (patience < 0) throw ConfigError("patience must be >= 0");
}

std::pair<std::string, std::string> parse_direction(std::string_view direction) {
  const auto dash = direction.find('-');
  if (dash == std::string_view::npos || dash == 0 || dash + 1 == direction.size() ||
      direction.find('-', dash + 1) != std::string_view::npos) {
    throw UsageError(fmt::format("direction '{}' is not of the form src-tgt", direction));
  }
  return {std::string(direction.substr(0, dash)), std::string(direction.substr(dash + 1))};
}

std::vector<int> frame_source(std::string_view text, const SubwordModel &src_tok,
                              const std::optional<std::string> &tag_language) {
  std::vector<int> ids = src_tok.encode(text);
  if (tag_language) ids = src_tok.tag_source(ids, *tag_language);
  ids.push_back(kEosId);
  return ids;
}

std::vector<Example> make_examples(const ParallelCorpus &corpus, const SubwordModel &src_tok,
                                   const SubwordModel &tgt_tok, int max_seq_len,
                                   const std::optional<std::string> &tag_language,
                                   int direction) {
  corpus.check_aligned();
  std::vector<Example> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Example ex;
    ex.src = frame_source(corpus.source[i], src_tok, tag_language);
    ex.tgt = tgt_tok.encode(corpus.target[i]);
    ex.direction = direction;
    if (static_cast<int>(ex.src.size()) > max_seq_len ||
        static_cast<int>(ex.tgt.size()) + 1 > max_seq_len) {
      continue;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<Example> &examples,
                                                   const std::vector<std::size_t> &order,
                                                   long batch_tokens) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  long tokens = 0;
  for (std::size_t idx : order) {
    current.push_back(idx);
    tokens += static_cast<long>(examples[idx].tgt.size()) + 1;
    if (tokens >= batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

MetricsLog::MetricsLog(std::string path) : path_(std::move(path)) {
  if (!path_.empty()) {
    const auto parent = std::filesystem::path(path_).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream(path_, std::ios::trunc);
  }
}

void MetricsLog::append(const MetricRow &row) {
  rows_.push_back(row);
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  out << fmt::format("{}\t{}\t{}\t{:.6f}\n", row.step, row.split, row.direction, row.loss);
  if (!out) throw DataError(fmt::format("cannot append to '{}'", path_));
}

std::vector<MetricRow> MetricsLog::read(const std::string &path) {
  std::vector<MetricRow> rows;
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot read metrics log '{}'", path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_words(line);
    if (f.size() != 4) throw DataError(fmt::format("{}: malformed line '{}'", path, line));
    rows.push_back({std::stol(f[0]), f[1], f[2], std::stod(f[3])});
  }
  return rows;
}

template <class Scalar>
Tensor<Scalar> batch_loss(TransformerModel<Scalar> &model, Graph<Scalar> &g,
                          const std::vector<Example> &examples,
                          const std::vector<std::size_t> &batch, Rng *rng) {
  TokenSeqs src, tgt;
  src.reserve(batch.size());
  tgt.reserve(batch.size());
  for (std::size_t i : batch) {
    src.push_back(examples[i].src);
    tgt.push_back(examples[i].tgt);
  }
  return model.loss(g, src, tgt, rng);
}

namespace {

long target_tokens(const std::vector<Example> &examples, const std::vector<std::size_t> &batch) {
  long n = 0;
  for (std::size_t i : batch) n += static_cast<long>(examples[i].tgt.size()) + 1;
  return n;
}

struct LossSum {
  double total = 0.0;
  long tokens = 0;
};

template <class Scalar>
LossSum loss_sum(TransformerModel<Scalar> &model, const std::vector<Example> &examples,
                 long batch_tokens) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  LossSum s;
  for (const auto &batch : make_batches(examples, order, batch_tokens)) {
    Graph<Scalar> g;
    const long n = target_tokens(examples, batch);
    s.total += static_cast<double>(batch_loss(model, g, examples, batch, nullptr).item()) *
               static_cast<double>(n);
    s.tokens += n;
  }
  return s;
}

}  // namespace

template <class Scalar>
double mean_loss(TransformerModel<Scalar> &model, const std::vector<Example> &examples,
                 long batch_tokens) {
  const LossSum s = loss_sum(model, examples, batch_tokens);
  if (s.tokens == 0) throw UsageError("mean_loss: no examples");
  return s.total / static_cast<double>(s.tokens);
}

template <class Scalar>
TrainResult<Scalar> train_model(TransformerModel<Scalar> &model,
                                const std::vector<Example> &train,
                                const std::vector<ValidSet> &valid, const TrainConfig &cfg,
                                const Checkpoint<Scalar> &template_ck, MetricsLog &log) {
  cfg.validate();
  if (train.empty()) throw UsageError("train: no training examples");
  const FlushDenormals ftz;

  Rng rng(cfg.seed);
  Rng shuffle_rng(rng.fork());
  Rng dropout_rng(rng.fork());
  Adam<Scalar> adam(cfg.adam);

  auto capture = [&](long step, double valid_loss) {
    Checkpoint<Scalar> ck = snapshot(model);
    ck.protocol = template_ck.protocol;
    ck.label = template_ck.label.empty() ? cfg.label : template_ck.label;
    ck.seed = cfg.seed;
    ck.directions = template_ck.directions;
    ck.src_tokenizer = template_ck.src_tokenizer;
    ck.tgt_tokenizer = template_ck.tgt_tokenizer;
    ck.step = step;
    ck.valid_loss = valid_loss;
    return ck;
  };

  double train_total = 0.0;
  long train_tokens = 0;
  auto evaluate = [&](long step) {
    if (train_tokens > 0) {
      log.append({step, "train", "all", train_total / static_cast<double>(train_tokens)});
    }
    train_total = 0.0;
    train_tokens = 0;
    LossSum pooled;
    for (const auto &v : valid) {
      if (v.examples.empty()) continue;
      const LossSum s = loss_sum(model, v.examples, cfg.batch_tokens);
      log.append({step, "valid", v.direction, s.total / static_cast<double>(s.tokens)});
      pooled.total += s.total;
      pooled.tokens += s.tokens;
    }
    if (pooled.tokens == 0) pooled = loss_sum(model, train, cfg.batch_tokens);
    return pooled.total / static_cast<double>(pooled.tokens);
  };

  TrainResult<Scalar> result;
  double best = evaluate(0);
  result.best_ck = capture(0, best);
  int since_best = 0;
  long step = 0;
  double last_valid = best;
  bool stop = cfg.max_steps == 0;

  std::vector<std::size_t> order(train.size());
  while (!stop) {
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    for (const auto &batch : make_batches(train, order, cfg.batch_tokens)) {
      ++step;
      Graph<Scalar> g;
      const Tensor<Scalar> loss = batch_loss(model, g, train, batch, &dropout_rng);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError(fmt::format("{}: loss became {} at step {}", cfg.label, value, step));
      }
      g.backward(loss);
      const double lr = cfg.lr_scale * noam_lr(step, cfg.model.model_dim, cfg.warmup);
      try {
        adam.step(model.parameters(), lr);
      } catch (const NumericError &e) {
        throw NumericError(fmt::format("{}: step {}: {}", cfg.label, step, e.what()));
      }
      model.zero_grad();
      const long n = target_tokens(train, batch);
      train_total += value * static_cast<double>(n);
      train_tokens += n;

      if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
        last_valid = evaluate(step);
        if (last_valid < best) {
          best = last_valid;
          result.best_ck = capture(step, best);
          since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
          result.stopped_early = true;
          stop = true;
        }
      }
      if (step >= cfg.max_steps) stop = true;
      if (stop) break;
    }
  }
  result.steps = step;
  result.final_ck = capture(step, last_valid);
  return result;
}

TokenizerPair train_tokenizers(const std::vector<const ParallelCorpus *> &train_parts,
                               int src_vocab, int tgt_vocab,
                               const std::vector<std::string> &tag_languages,
                               SubwordOptions options) {
  std::vector<std::string> src, tgt;
  for (const ParallelCorpus *p : train_parts) {
    src.insert(src.end(), p->source.begin(), p->source.end());
    tgt.insert(tgt.end(), p->target.begin(), p->target.end());
  }
  TokenizerPair out;
  out.src = std::make_shared<const SubwordModel>(
      SubwordModel::train(src, src_vocab, tag_languages, options));
  out.tgt = std::make_shared<const SubwordModel>(SubwordModel::train(tgt, tgt_vocab, {}, options));
  return out;
}

namespace {

ModelConfig with_vocab(ModelConfig m, const TokenizerPair &tok) {
  if (!tok.src || !tok.tgt) throw UsageError("tokenizers are not loaded");
  m.src_vocab_size = tok.src->vocab_size();
  m.tgt_vocab_size = tok.tgt->vocab_size();
  return m;
}

template <class Scalar>
Checkpoint<Scalar> header(std::string protocol, const TrainConfig &cfg,
                          std::vector<std::string> directions, const TokenizerPair &tok) {
  Checkpoint<Scalar> ck;
  ck.protocol = std::move(protocol);
  ck.label = cfg.label;
  ck.seed = cfg.seed;
  ck.directions = std::move(directions);
  ck.src_tokenizer = TokenizerRef::of(tok.src, tok.src_path);
  ck.tgt_tokenizer = TokenizerRef::of(tok.tgt, tok.tgt_path);
  return ck;
}

}  // namespace

template <class Scalar>
TrainResult<Scalar> train_baseline(const SplitCorpus &data, const TokenizerPair &tok,
                                   const TrainConfig &cfg, MetricsLog &log) {
  TrainConfig run = cfg;
  run.model = with_vocab(cfg.model, tok);
  const std::string dir = data.train.direction();
  const auto train = make_examples(data.train, *tok.src, *tok.tgt, run.model.max_seq_len);
  const std::vector<ValidSet> valid{
      {dir, make_examples(data.valid, *tok.src, *tok.tgt, run.model.max_seq_len)}};
  TransformerModel<Scalar> model(run.model, run.seed);
  return train_model(model, train, valid, run, header<Scalar>("baseline", run, {dir}, tok), log);
}

template <class Scalar>
TransformerModel<Scalar> transfer_init(const Checkpoint<Scalar> &parent, const TokenizerPair &child,
                                       const ModelConfig &child_cfg, std::uint64_t seed) {
  const ModelConfig cfg = with_vocab(child_cfg, child);
  TransformerModel<Scalar> model(cfg, seed);

  std::unordered_map<std::string, const Matrix<Scalar> *> from;
  for (const auto &[name, value] : parent.params) from.emplace(name, &value);

  std::vector<std::string> offending;
  for (auto &p : model.parameters()) {
    const std::string &name = p.name();
    if (name == "src_embed" || name == "tgt_embed" || name == "output.w" || name == "output.b") {
      continue;
    }
    auto it = from.find(name);
    if (it == from.end()) {
      offending.push_back(fmt::format("{} (missing in parent)", name));
    } else if (shape_of(*it->second) != p.shape()) {
      offending.push_back(fmt::format("{} (parent {}, child {})", name,
                                      to_string(shape_of(*it->second)), to_string(p.shape())));
    } else {
      p.value() = *it->second;
    }
  }
  for (const auto &[name, value] : parent.params) {
    if (!model.has_parameter(name)) offending.push_back(fmt::format("{} (missing in child)", name));
  }
  if (!offending.empty()) {
    throw DimensionError("parent and child architectures are incompatible: " +
                         join(offending, ", "));
  }

  auto need = [&](const char *name) -> const Matrix<Scalar> & {
    auto it = from.find(name);
    if (it == from.end()) throw DimensionError(fmt::format("parent lacks '{}'", name));
    return *it->second;
  };
  // Child id -> parent id by token string.
  auto mapping = [](const TokenizerRef &parent_tok, const SubwordModel &child_tok) {
    if (!parent_tok.model) throw UsageError("transfer: parent tokenizer is not loaded");
    std::vector<std::optional<int>> map(static_cast<std::size_t>(child_tok.vocab_size()));
    for (int id = 0; id < child_tok.vocab_size(); ++id) {
      map[static_cast<std::size_t>(id)] = parent_tok.model->find(child_tok.token(id));
    }
    return map;
  };

  const Matrix<Scalar> &src_embed = need("src_embed");
  auto &child_src = model.parameter("src_embed").value();
  if (parent.src_tokenizer.hash == child.src->content_hash() &&
      src_embed.rows() == child_src.rows()) {
    child_src = src_embed;
  } else {
    const auto map = mapping(parent.src_tokenizer, *child.src);
    for (std::size_t id = 0; id < map.size(); ++id) {
      if (map[id]) child_src.row(static_cast<Eigen::Index>(id)) = src_embed.row(*map[id]);
    }
  }

  const Matrix<Scalar> &tgt_embed = need("tgt_embed");
  const Matrix<Scalar> &out_w = need("output.w");
  const Matrix<Scalar> &out_b = need("output.b");
  auto &child_tgt = model.parameter("tgt_embed").value();
  auto &child_w = model.parameter("output.w").value();
  auto &child_b = model.parameter("output.b").value();
  const auto map = mapping(parent.tgt_tokenizer, *child.tgt);
  for (std::size_t id = 0; id < map.size(); ++id) {
    if (!map[id]) continue;
    const auto c = static_cast<Eigen::Index>(id);
    const Eigen::Index p = *map[id];
    child_tgt.row(c) = tgt_embed.row(p);
    child_w.col(c) = out_w.col(p);
    child_b(0, c) = out_b(0, p);
  }
  return model;
}

template <class Scalar>
TrainResult<Scalar> train_transfer(const Checkpoint<Scalar> &parent, const SplitCorpus &data,
                                   const TokenizerPair &tok, const TrainConfig &cfg,
                                   MetricsLog &log) {
  TrainConfig run = cfg;
  run.model = with_vocab(cfg.model, tok);
  const std::string dir = data.train.direction();
  const auto train = make_examples(data.train, *tok.src, *tok.tgt, run.model.max_seq_len);
  const std::vector<ValidSet> valid{
      {dir, make_examples(data.valid, *tok.src, *tok.tgt, run.model.max_seq_len)}};
  TransformerModel<Scalar> model = transfer_init(parent, tok, run.model, run.seed);
  return train_model(model, train, valid, run, header<Scalar>("transfer", run, {dir}, tok), log);
}

void MultiCorpus::validate() const {
  if (directions.empty()) throw UsageError("multilingual: no directions");
  if (!tokenizers.src || !tokenizers.tgt) throw UsageError("multilingual: tokenizers not loaded");
  for (const auto &d : directions) {
    if (!tokenizers.src->has_language(d.tgt_lang)) {
      throw UsageError(fmt::format("multilingual: no tag registered for target language '{}' ({})",
                                   d.tgt_lang, d.name()));
    }
  }
}

template <class Scalar>
TrainResult<Scalar> train_multilingual(const MultiCorpus &mc, const TrainConfig &cfg,
                                       MetricsLog &log) {
  mc.validate();
  TrainConfig run = cfg;
  run.model = with_vocab(cfg.model, mc.tokenizers);
  const SubwordModel &src = *mc.tokenizers.src, &tgt = *mc.tokenizers.tgt;
  std::vector<Example> train;
  std::vector<ValidSet> valid;
  std::vector<std::string> names;
  for (std::size_t d = 0; d < mc.directions.size(); ++d) {
    const DirectionData &dd = mc.directions[d];
    auto part = make_examples(dd.data.train, src, tgt, run.model.max_seq_len, dd.tgt_lang,
                              static_cast<int>(d));
    train.insert(train.end(), std::make_move_iterator(part.begin()),
                 std::make_move_iterator(part.end()));
    valid.push_back({dd.name(), make_examples(dd.data.valid, src, tgt, run.model.max_seq_len,
                                              dd.tgt_lang, static_cast<int>(d))});
    names.push_back(dd.name());
  }
  TransformerModel<Scalar> model(run.model, run.seed);
  return train_model(model, train, valid, run,
                     header<Scalar>("multilingual", run, names, mc.tokenizers), log);
}

#define NMT_INSTANTIATE(S)                                                                      \
  template Tensor<S> batch_loss<S>(TransformerModel<S> &, Graph<S> &,                           \
                                   const std::vector<Example> &,                                \
                                   const std::vector<std::size_t> &, Rng *);                    \
  template double mean_loss<S>(TransformerModel<S> &, const std::vector<Example> &, long);      \
  template TrainResult<S> train_model<S>(TransformerModel<S> &, const std::vector<Example> &,   \
                                         const std::vector<ValidSet> &, const TrainConfig &,    \
                                         const Checkpoint<S> &, MetricsLog &);                  \
  template TrainResult<S> train_baseline<S>(const SplitCorpus &, const TokenizerPair &,         \
                                            const TrainConfig &, MetricsLog &);                 \
  template TransformerModel<S> transfer_init<S>(const Checkpoint<S> &, const TokenizerPair &,   \
                                                const ModelConfig &, std::uint64_t);            \
  template TrainResult<S> train_transfer<S>(const Checkpoint<S> &, const SplitCorpus &,         \
                                            const TokenizerPair &, const TrainConfig &,         \
                                            MetricsLog &);                                      \
  template TrainResult<S> train_multilingual<S>(const MultiCorpus &, const TrainConfig &,       \
                                                MetricsLog &);

NMT_INSTANTIATE(float)
NMT_INSTANTIATE(double)

#undef NMT_INSTANTIATE

}  // namespace nmt
