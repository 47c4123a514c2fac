#include "nmt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include <fmt/core.h>

#include "nmt/checkpoint.hpp"
#include "nmt/corpus.hpp"
#include "nmt/error.hpp"
#include "nmt/eval.hpp"
#include "nmt/text.hpp"

namespace nmt {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kTrainKeys = {
    "protocol",      "label",          "out",          "seed",         "dtype",
    "data",          "directions",     "src_tokenizer", "tgt_tokenizer", "vocab_size",
    "src_vocab_size", "tgt_vocab_size", "lowercase",    "parent_checkpoint",
    "num_layers",    "num_heads",      "model_dim",    "ff_dim",       "dropout",
    "max_seq_len",   "batch_tokens",   "max_steps",    "warmup",       "lr_scale",
    "adam_beta1",    "adam_beta2",     "adam_eps",     "eval_every",   "patience"};

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t end = s.find(',', start);
    if (end == std::string_view::npos) end = s.size();
    std::string item = normalize_space(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = end + 1;
  }
  return out;
}

std::string resolve(const std::string &base, const std::string &path) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

int positive_int(const KeyValueConfig &cfg, const char *key, long long fallback) {
  const long long v = cfg.get_int(key, fallback);
  if (v <= 0 || v > 1'000'000'000) {
    throw ConfigError(fmt::format("{}: '{}' must be a positive integer, got {}", cfg.source(), key, v));
  }
  return static_cast<int>(v);
}

template <class Scalar>
void require_dtype(const std::string &path) {
  const std::string stored = checkpoint_dtype(path);
  if (stored != dtype_name<Scalar>()) {
    throw ConfigError(fmt::format("'{}' is stored as {} but the run uses {}", path, stored,
                                  dtype_name<Scalar>()));
  }
}

std::shared_ptr<const SubwordModel> load_tokenizer(const std::string &path) {
  if (!fs::exists(path)) throw DataError(fmt::format("no such tokenizer file: '{}'", path));
  return std::make_shared<const SubwordModel>(SubwordModel::load(path));
}

// Loads a given tokenizer, or trains one on `sentences` and saves it.
std::pair<std::shared_ptr<const SubwordModel>, std::string> tokenizer_for(
    const std::string &given, const std::vector<std::string> &sentences, int vocab,
    const std::vector<std::string> &languages, const SubwordOptions &options,
    const std::string &save_as) {
  if (!given.empty()) return {load_tokenizer(given), given};
  auto model = std::make_shared<const SubwordModel>(
      SubwordModel::train(sentences, vocab, languages, options));
  model->save(save_as);
  return {model, save_as};
}

template <class Scalar>
TrainOutcome train_typed(const TrainJob &job) {
  fs::create_directories(job.out_dir);
  const fs::path out(job.out_dir);
  MetricsLog log((out / "metrics.tsv").string());
  const std::string src_save = (out / "src.bpe").string();
  const std::string tgt_save = (out / "tgt.bpe").string();

  TrainResult<Scalar> result;
  if (job.protocol == "multilingual") {
    MultiCorpus mc;
    std::vector<std::string> src_text, tgt_text, tags;
    for (std::size_t i = 0; i < job.directions.size(); ++i) {
      const auto [s, t] = parse_direction(job.directions[i]);
      DirectionData dd{s, t, read_split(job.direction_data[i])};
      if (dd.data.train.src_lang != s || dd.data.train.tgt_lang != t) {
        throw ConfigError(fmt::format("data.{} points at a {} split", job.directions[i],
                                      dd.data.train.direction()));
      }
      src_text.insert(src_text.end(), dd.data.train.source.begin(), dd.data.train.source.end());
      tgt_text.insert(tgt_text.end(), dd.data.train.target.begin(), dd.data.train.target.end());
      if (std::find(tags.begin(), tags.end(), t) == tags.end()) tags.push_back(t);
      mc.directions.push_back(std::move(dd));
    }
    std::tie(mc.tokenizers.src, mc.tokenizers.src_path) =
        tokenizer_for(job.src_tokenizer, src_text, job.src_vocab, tags, job.subword, src_save);
    std::tie(mc.tokenizers.tgt, mc.tokenizers.tgt_path) =
        tokenizer_for(job.tgt_tokenizer, tgt_text, job.tgt_vocab, {}, job.subword, tgt_save);
    result = train_multilingual<Scalar>(mc, job.train, log);
  } else {
    const SplitCorpus data = read_split(job.data);
    TokenizerPair tok;
    std::optional<Checkpoint<Scalar>> parent;
    if (job.protocol == "transfer") {
      require_dtype<Scalar>(job.parent_checkpoint);
      parent = load_checkpoint<Scalar>(job.parent_checkpoint);
    }
    if (parent && job.src_tokenizer.empty()) {
      tok.src = parent->src_tokenizer.model;
      tok.src_path = parent->src_tokenizer.path;
    } else {
      std::tie(tok.src, tok.src_path) = tokenizer_for(job.src_tokenizer, data.train.source,
                                                      job.src_vocab, {}, job.subword, src_save);
    }
    std::tie(tok.tgt, tok.tgt_path) = tokenizer_for(job.tgt_tokenizer, data.train.target,
                                                    job.tgt_vocab, {}, job.subword, tgt_save);
    result = parent ? train_transfer<Scalar>(*parent, data, tok, job.train, log)
                    : train_baseline<Scalar>(data, tok, job.train, log);
  }

  TrainOutcome outcome;
  outcome.final_checkpoint = (out / "model.ckpt").string();
  outcome.best_checkpoint = (out / "best.ckpt").string();
  outcome.steps = result.steps;
  outcome.best_valid_loss = result.best_ck.valid_loss;
  save_checkpoint(result.best_ck, outcome.best_checkpoint);
  save_checkpoint(result.final_ck, outcome.final_checkpoint);
  return outcome;
}

}  // namespace

TrainJob parse_train_job(const KeyValueConfig &cfg) {
  const std::string base = fs::path(cfg.source()).has_parent_path() && cfg.source() != "<text>"
                               ? fs::path(cfg.source()).parent_path().string()
                               : std::string();
  for (const auto &[key, value] : cfg.entries()) {
    if (!kTrainKeys.contains(key) && !key.starts_with("data.")) {
      throw ConfigError(fmt::format("{}: unknown key '{}'", cfg.source(), key));
    }
  }
  TrainJob job;
  job.protocol = cfg.require("protocol");
  if (job.protocol != "baseline" && job.protocol != "transfer" && job.protocol != "multilingual") {
    throw ConfigError(fmt::format(
        "{}: unknown protocol '{}' (valid: baseline, transfer, multilingual)", cfg.source(),
        job.protocol));
  }
  job.out_dir = resolve(base, cfg.require("out"));
  job.dtype = cfg.get_or("dtype", "f32");
  if (job.dtype != "f32" && job.dtype != "f64") {
    throw ConfigError(fmt::format("{}: dtype must be f32 or f64, got '{}'", cfg.source(), job.dtype));
  }
  job.parent_checkpoint = resolve(base, cfg.get_or("parent_checkpoint", ""));
  if (job.protocol == "transfer" && job.parent_checkpoint.empty()) {
    throw ConfigError(fmt::format("{}: protocol transfer requires key 'parent_checkpoint'",
                                  cfg.source()));
  }
  if (job.protocol != "transfer" && !job.parent_checkpoint.empty()) {
    throw ConfigError(fmt::format("{}: 'parent_checkpoint' is only valid with protocol transfer",
                                  cfg.source()));
  }
  if (job.protocol == "multilingual") {
    job.directions = split_list(cfg.require("directions"));
    if (job.directions.empty()) throw ConfigError(fmt::format("{}: 'directions' is empty", cfg.source()));
    for (const auto &d : job.directions) {
      parse_direction(d);
      job.direction_data.push_back(resolve(base, cfg.require("data." + d)));
    }
  } else {
    job.data = resolve(base, cfg.require("data"));
  }
  job.src_tokenizer = resolve(base, cfg.get_or("src_tokenizer", ""));
  job.tgt_tokenizer = resolve(base, cfg.get_or("tgt_tokenizer", ""));
  const int vocab = positive_int(cfg, "vocab_size", 8000);
  job.src_vocab = positive_int(cfg, "src_vocab_size", vocab);
  job.tgt_vocab = positive_int(cfg, "tgt_vocab_size", vocab);
  job.subword.lowercase = cfg.get_bool("lowercase", false);

  TrainConfig &t = job.train;
  t.label = cfg.get_or("label", job.protocol);
  const long long seed = cfg.get_int("seed", 1);
  if (seed < 0) throw ConfigError(fmt::format("{}: seed must be >= 0", cfg.source()));
  t.seed = static_cast<std::uint64_t>(seed);
  ModelConfig &m = t.model;
  m.num_layers = positive_int(cfg, "num_layers", m.num_layers);
  m.num_heads = positive_int(cfg, "num_heads", m.num_heads);
  m.model_dim = positive_int(cfg, "model_dim", m.model_dim);
  m.ff_dim = positive_int(cfg, "ff_dim", m.ff_dim);
  m.dropout = cfg.get_double("dropout", m.dropout);
  m.max_seq_len = positive_int(cfg, "max_seq_len", m.max_seq_len);
  if (m.model_dim % m.num_heads != 0) {
    throw ConfigError(fmt::format("{}: model_dim {} is not divisible by num_heads {}",
                                  cfg.source(), m.model_dim, m.num_heads));
  }
  if (m.dropout < 0.0 || m.dropout >= 1.0) {
    throw ConfigError(fmt::format("{}: dropout must be in [0, 1)", cfg.source()));
  }
  t.batch_tokens = positive_int(cfg, "batch_tokens", t.batch_tokens);
  t.max_steps = cfg.get_int("max_steps", t.max_steps);
  t.warmup = cfg.get_int("warmup", t.warmup);
  t.lr_scale = cfg.get_double("lr_scale", t.lr_scale);
  t.adam.beta1 = cfg.get_double("adam_beta1", t.adam.beta1);
  t.adam.beta2 = cfg.get_double("adam_beta2", t.adam.beta2);
  t.adam.eps = cfg.get_double("adam_eps", t.adam.eps);
  t.eval_every = cfg.get_int("eval_every", t.eval_every);
  t.patience = static_cast<int>(cfg.get_int("patience", t.patience));
  t.validate();
  return job;
}

TrainOutcome run_train_job(const TrainJob &job) {
  return job.dtype == "f64" ? train_typed<double>(job) : train_typed<float>(job);
}

namespace {

std::string describe(const BleuScore &s) {
  return fmt::format("BLEU = {:.2f} ({:.1f}/{:.1f}/{:.1f}/{:.1f}, BP = {:.3f}, hyp_len = {}, ref_len = {})",
                     s.bleu, 100 * s.precisions[0], 100 * s.precisions[1], 100 * s.precisions[2],
                     100 * s.precisions[3], s.brevity_penalty, s.hyp_length, s.ref_length);
}

// ---- prepare ------------------------------------------------------------

struct PrepareArgs {
  std::string src, tgt, langs, src_rules, tgt_rules, out;
  std::size_t max_tokens = 80;
  std::uint64_t seed = 1;
};

int cmd_prepare(const PrepareArgs &a, std::ostream &out) {
  const auto [src_lang, tgt_lang] = parse_direction(a.langs);
  for (const auto &p : {a.src, a.tgt}) {
    if (!fs::exists(p)) throw DataError(fmt::format("no such file: '{}'", p));
  }
  CleaningConfig rules;
  rules.max_tokens = a.max_tokens;
  if (!a.src_rules.empty()) rules.source_contractions = ContractionTable::load(a.src_rules);
  if (!a.tgt_rules.empty()) rules.target_contractions = ContractionTable::load(a.tgt_rules);
  const ParallelCorpus raw = load_parallel(a.src, a.tgt, src_lang, tgt_lang);
  const ParallelCorpus cleaned = clean(raw, rules);
  const CorpusStats st = stats(cleaned);
  const SplitCorpus parts = split(cleaned, a.seed);
  write_split(parts, st, a.out);
  out << fmt::format("{}: {} raw pairs, {} after cleaning\n", cleaned.direction(), raw.size(),
                     cleaned.size());
  for (const auto &n : cleaned.notes) out << "  " << n << "\n";
  out << fmt::format("source types {}, target types {}\n", st.source_types, st.target_types);
  out << fmt::format("train {} / valid {} / test {} (seed {})\n", parts.train.size(),
                     parts.valid.size(), parts.test.size(), a.seed);
  out << fmt::format("wrote {}\n", a.out);
  return 0;
}

// ---- train-subword ------------------------------------------------------

struct SubwordArgs {
  std::vector<std::string> inputs;
  int vocab_size = 8000;
  std::string languages, out;
  bool lowercase = false;
};

int cmd_train_subword(const SubwordArgs &a, std::ostream &out) {
  std::vector<std::string> sentences;
  for (const auto &path : a.inputs) {
    auto lines = read_lines(path);
    sentences.insert(sentences.end(), std::make_move_iterator(lines.begin()),
                     std::make_move_iterator(lines.end()));
  }
  const SubwordModel model =
      SubwordModel::train(sentences, a.vocab_size, split_list(a.languages), {a.lowercase});
  model.save(a.out);
  out << fmt::format("{} merges, vocabulary {}, hash {} -> {}\n", model.merges().size(),
                     model.vocab_size(), hex64(model.content_hash()), a.out);
  return 0;
}

// ---- train --------------------------------------------------------------

int cmd_train(const std::string &config_path, std::ostream &out) {
  if (!fs::exists(config_path)) throw DataError(fmt::format("no such config: '{}'", config_path));
  const TrainJob job = parse_train_job(KeyValueConfig::load(config_path));
  const TrainOutcome o = run_train_job(job);
  out << fmt::format("{} steps, best validation loss {:.4f}\n", o.steps, o.best_valid_loss);
  out << fmt::format("final checkpoint {}\nbest checkpoint {}\n", o.final_checkpoint,
                     o.best_checkpoint);
  return 0;
}

// ---- translate ----------------------------------------------------------

struct TranslateArgs {
  std::string checkpoint, input, output, target_lang;
  DecodeOptions decode;
};

template <class Scalar>
int translate_typed(const TranslateArgs &a, std::ostream &err) {
  const Checkpoint<Scalar> ck = load_checkpoint<Scalar>(a.checkpoint);
  std::optional<std::string> tag;
  if (ck.multilingual()) {
    if (a.target_lang.empty()) {
      throw UsageError(fmt::format("'{}' is multilingual; pass --target-lang (one of: {})",
                                   a.checkpoint, join(ck.src_tokenizer.model->languages(), ", ")));
    }
    if (!ck.src_tokenizer.model->has_language(a.target_lang)) {
      throw UsageError(fmt::format("'{}' has no tag for language '{}'", a.checkpoint,
                                   a.target_lang));
    }
    tag = a.target_lang;
  } else if (!a.target_lang.empty()) {
    err << fmt::format("warning: '{}' is bilingual; ignoring --target-lang {}\n", a.checkpoint,
                       a.target_lang);
  }
  const std::vector<std::string> lines = read_lines(a.input);
  std::vector<std::string> hyps;
  if (!lines.empty()) {
    TransformerModel<Scalar> model = restore(ck);
    hyps = translate(model, *ck.src_tokenizer.model, *ck.tgt_tokenizer.model, lines, tag, a.decode);
  }
  write_lines(a.output, hyps);
  return 0;
}

int cmd_translate(const TranslateArgs &a, std::ostream &err) {
  if (!fs::exists(a.checkpoint)) throw DataError(fmt::format("no such checkpoint: '{}'", a.checkpoint));
  return checkpoint_dtype(a.checkpoint) == "f64" ? translate_typed<double>(a, err)
                                                 : translate_typed<float>(a, err);
}

// ---- evaluate -----------------------------------------------------------

struct EvaluateArgs {
  std::string hyp, ref, checkpoint, data, partition = "test", direction, scores, baseline_scores;
  bool smooth = false;
  DecodeOptions decode;
};

std::vector<double> read_scores(const std::string &path) {
  std::vector<double> out;
  for (const auto &line : read_lines(path)) {
    const std::string s = normalize_space(line);
    if (s.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception &) {
      throw DataError(fmt::format("{}: '{}' is not a number", path, s));
    }
  }
  return out;
}

template <class Scalar>
BleuScore evaluate_typed(const EvaluateArgs &a) {
  const Checkpoint<Scalar> ck = load_checkpoint<Scalar>(a.checkpoint);
  const SplitCorpus s = read_split(a.data);
  const ParallelCorpus &part = a.partition == "train"   ? s.train
                               : a.partition == "valid" ? s.valid
                                                        : s.test;
  const std::string direction = a.direction.empty() ? part.direction() : a.direction;
  if (ck.multilingual() && !ck.trained_on(direction)) {
    return zero_shot_eval(ck, direction, part, a.decode, a.smooth);
  }
  return evaluate_checkpoint(ck, part, parse_direction(direction).second, a.decode, a.smooth);
}

int cmd_evaluate(const EvaluateArgs &a, std::ostream &out) {
  if (!a.scores.empty()) {
    const auto scores = read_scores(a.scores);
    const RunStats st = aggregate_runs(scores);
    out << fmt::format("{} runs: {}\n", scores.size(), format_pm(st.mean, st.std));
    if (!a.baseline_scores.empty()) {
      const RunStats base = aggregate_runs(read_scores(a.baseline_scores));
      const GainReport g = gain("model", st, "baseline", base);
      out << fmt::format("gain over baseline: {}\n", format_pm(g.gain, g.gain_std));
    }
    return 0;
  }
  if (!a.hyp.empty() || !a.ref.empty()) {
    if (a.hyp.empty() || a.ref.empty()) throw UsageError("evaluate: --hyp and --ref go together");
    const auto hyps = read_lines(a.hyp), refs = read_lines(a.ref);
    if (hyps.size() != refs.size()) {
      throw AlignmentError(fmt::format("'{}' has {} lines but '{}' has {}", a.hyp, hyps.size(),
                                       a.ref, refs.size()));
    }
    out << describe(corpus_bleu(hyps, refs, a.smooth)) << "\n";
    return 0;
  }
  if (a.checkpoint.empty() || a.data.empty()) {
    throw UsageError("evaluate: give --hyp/--ref, --scores, or --checkpoint with --data");
  }
  if (a.partition != "train" && a.partition != "valid" && a.partition != "test") {
    throw UsageError(fmt::format("evaluate: unknown partition '{}'", a.partition));
  }
  if (!fs::exists(a.checkpoint)) throw DataError(fmt::format("no such checkpoint: '{}'", a.checkpoint));
  const BleuScore s = checkpoint_dtype(a.checkpoint) == "f64" ? evaluate_typed<double>(a)
                                                              : evaluate_typed<float>(a);
  out << describe(s) << "\n";
  return 0;
}

// ---- experiment ---------------------------------------------------------

struct CellScore {
  BleuScore score;
  std::string direction;
  std::string test_hash;
};

void write_cell(const std::string &path, const CellScore &c) {
  KeyValueConfig kv;
  kv.set("bleu", fmt::format("{}", c.score.bleu));
  for (int n = 0; n < 4; ++n) kv.set(fmt::format("p{}", n + 1), fmt::format("{}", c.score.precisions[n]));
  kv.set("bp", fmt::format("{}", c.score.brevity_penalty));
  kv.set("hyp_len", std::to_string(c.score.hyp_length));
  kv.set("ref_len", std::to_string(c.score.ref_length));
  kv.set("direction", c.direction);
  kv.set("test_hash", c.test_hash);
  write_file(path, kv.serialize());
}

CellScore read_cell(const std::string &path) {
  const KeyValueConfig kv = KeyValueConfig::load(path);
  CellScore c;
  c.score.bleu = kv.get_double("bleu", 0.0);
  for (int n = 0; n < 4; ++n) c.score.precisions[n] = kv.get_double(fmt::format("p{}", n + 1), 0.0);
  c.score.brevity_penalty = kv.get_double("bp", 0.0);
  c.score.hyp_length = static_cast<std::size_t>(kv.get_int("hyp_len", 0));
  c.score.ref_length = static_cast<std::size_t>(kv.get_int("ref_len", 0));
  c.direction = kv.require("direction");
  c.test_hash = kv.require("test_hash");
  return c;
}

struct RunSpec {
  std::string label;
  KeyValueConfig train;  // train keys, before per-seed overrides
  std::string eval_data;
  std::string eval_direction;
  std::string parent_run;
};

template <class Scalar>
CellScore score_cell(const std::string &ckpt, const RunSpec &run, const DecodeOptions &decode,
                     bool smooth) {
  const Checkpoint<Scalar> ck = load_checkpoint<Scalar>(ckpt);
  const SplitCorpus data = read_split(run.eval_data);
  CellScore c;
  c.direction = run.eval_direction;
  c.test_hash = test_set_hash(data.test);
  if (ck.multilingual() && !ck.trained_on(run.eval_direction)) {
    c.score = zero_shot_eval(ck, run.eval_direction, data.test, decode, smooth);
  } else {
    c.score = evaluate_checkpoint(ck, data.test, parse_direction(run.eval_direction).second,
                                  decode, smooth);
  }
  return c;
}

int cmd_experiment(const std::string &manifest_path, std::ostream &out, std::ostream &err) {
  if (!fs::exists(manifest_path)) {
    throw DataError(fmt::format("no such manifest: '{}'", manifest_path));
  }
  const KeyValueConfig m = KeyValueConfig::load(manifest_path);
  const std::string base = fs::path(manifest_path).parent_path().string();
  const std::string out_dir = resolve(base, m.require("out"));
  const std::vector<std::string> labels = split_list(m.require("runs"));
  if (labels.empty()) throw ConfigError(fmt::format("{}: 'runs' is empty", manifest_path));
  std::vector<std::uint64_t> seeds;
  if (auto list = m.get("seed_list")) {
    for (const auto &s : split_list(*list)) seeds.push_back(std::stoull(s));
  } else {
    const int n = positive_int(m, "seeds", 10);
    for (int s = 1; s <= n; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  }
  const std::string target_direction = m.require("target_direction");
  const std::optional<std::string> baseline = m.get("baseline");
  DecodeOptions decode;
  decode.beam_size = positive_int(m, "beam", 4);
  decode.length_penalty = m.get_double("length_penalty", 0.6);
  decode.max_len = static_cast<int>(m.get_int("max_len", 0));
  const bool smooth = m.get_bool("smooth_bleu", false);

  std::set<std::string> known{"out", "runs", "seeds", "seed_list", "target_direction",
                              "baseline", "beam", "length_penalty", "max_len", "smooth_bleu"};
  std::vector<RunSpec> runs;
  std::set<std::string> seen;
  for (const auto &label : labels) {
    if (!seen.insert(label).second) {
      throw ConfigError(fmt::format("{}: run label '{}' is not unique", manifest_path, label));
    }
    RunSpec r;
    r.label = label;
    for (const auto &[k, v] : m.entries()) {
      if (k.starts_with("defaults.")) r.train.set(k.substr(9), v);
    }
    const std::string prefix = "run." + label + ".";
    for (const auto &k : m.keys_with_prefix(prefix)) {
      r.train.set(k.substr(prefix.size()), *m.get(k));
    }
    auto take = [&](const char *key) {
      auto v = r.train.get(key);
      KeyValueConfig rest;
      for (const auto &[k, val] : r.train.entries()) {
        if (k != key) rest.set(k, val);
      }
      r.train = rest;
      return v;
    };
    r.parent_run = take("parent_run").value_or("");
    const auto eval_data = take("eval_data");
    const auto eval_dir = take("eval_direction");
    r.train.set("label", label);
    if (!r.train.has("protocol")) {
      throw ConfigError(fmt::format("{}: run '{}' has no protocol", manifest_path, label));
    }
    const bool multi = *r.train.get("protocol") == "multilingual";
    if (!r.parent_run.empty()) {
      if (!seen.contains(r.parent_run) || r.parent_run == label) {
        throw ConfigError(fmt::format("{}: run '{}' names parent_run '{}' that is not an earlier run",
                                      manifest_path, label, r.parent_run));
      }
      r.train.set("protocol", "transfer");
    }
    const std::string data_key = eval_data ? *eval_data : r.train.get_or("data", "");
    if (data_key.empty()) {
      throw ConfigError(fmt::format("{}: run '{}' needs eval_data", manifest_path, label));
    }
    r.eval_data = resolve(base, data_key);
    if (!fs::exists(fs::path(r.eval_data) / "split.meta")) {
      throw DataError(fmt::format("{}: run '{}': no split at '{}'", manifest_path, label, r.eval_data));
    }
    if (eval_dir) {
      r.eval_direction = *eval_dir;
    } else if (multi) {
      throw ConfigError(fmt::format("{}: multilingual run '{}' needs eval_direction", manifest_path, label));
    } else {
      const KeyValueConfig meta = KeyValueConfig::load((fs::path(r.eval_data) / "split.meta").string());
      r.eval_direction = meta.require("src_lang") + "-" + meta.require("tgt_lang");
    }
    // Paths inside run keys are relative to the manifest.
    for (const char *key : {"data", "src_tokenizer", "tgt_tokenizer", "parent_checkpoint"}) {
      if (auto v = r.train.get(key)) r.train.set(key, resolve(base, *v));
    }
    for (const auto &k : r.train.keys_with_prefix("data.")) {
      r.train.set(k, resolve(base, *r.train.get(k)));
    }
    runs.push_back(std::move(r));
  }
  for (const auto &[k, v] : m.entries()) {
    if (!known.contains(k) && !k.starts_with("defaults.") && !k.starts_with("run.")) {
      throw ConfigError(fmt::format("{}: unknown key '{}'", manifest_path, k));
    }
  }

  std::vector<BleuReport> reports;
  std::size_t trained = 0, failed = 0;
  for (const auto &run : runs) {
    BleuReport report;
    report.label = run.label;
    report.direction = run.eval_direction;
    for (std::uint64_t seed : seeds) {
      const fs::path cell = fs::path(out_dir) / run.label / fmt::format("seed-{}", seed);
      const std::string score_path = (cell / "score.txt").string();
      const std::string error_path = (cell / "error.txt").string();
      try {
        if (!fs::exists(score_path)) {
          fs::create_directories(cell);
          const std::string ckpt = (cell / "best.ckpt").string();
          if (!fs::exists(ckpt)) {
            KeyValueConfig cfg = run.train;
            cfg.set("out", cell.string());
            cfg.set("seed", std::to_string(seed));
            if (!run.parent_run.empty()) {
              cfg.set("parent_checkpoint",
                      (fs::path(out_dir) / run.parent_run / fmt::format("seed-{}", seed) / "best.ckpt")
                          .string());
            }
            err << fmt::format("[{} seed {}] training\n", run.label, seed);
            run_train_job(parse_train_job(cfg));
            ++trained;
          }
          const CellScore c = checkpoint_dtype(ckpt) == "f64"
                                  ? score_cell<double>(ckpt, run, decode, smooth)
                                  : score_cell<float>(ckpt, run, decode, smooth);
          write_cell(score_path, c);
          fs::remove(error_path);
        }
        const CellScore c = read_cell(score_path);
        if (report.test_hash.empty()) report.test_hash = c.test_hash;
        report.add(seed, c.score);
      } catch (const Error &e) {
        ++failed;
        fs::create_directories(cell);
        write_file(error_path, std::string(e.what()) + "\n");
        err << fmt::format("[{} seed {}] failed: {}\n", run.label, seed, e.what());
      }
    }
    reports.push_back(std::move(report));
  }

  const std::string table = render_table(reports, baseline, target_direction);
  write_file((fs::path(out_dir) / "report.txt").string(), table);
  write_file((fs::path(out_dir) / "report.csv").string(),
             render_csv(reports, baseline, target_direction));
  out << table;
  out << fmt::format("{} runs trained, {} failed; report in {}\n", trained, failed, out_dir);
  return failed > 0 ? static_cast<int>(ExitCode::kData) : 0;
}

}  // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Transformer machine translation toolkit for low-resource experiments", "nmt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  PrepareArgs prep;
  auto *prepare = app.add_subcommand("prepare", "Clean, deduplicate and split a parallel corpus");
  prepare->add_option("--src", prep.src, "Source-side text file")->required();
  prepare->add_option("--tgt", prep.tgt, "Target-side text file")->required();
  prepare->add_option("--langs", prep.langs, "Language pair, e.g. en-zu")->required();
  prepare->add_option("--src-rules", prep.src_rules, "Source contraction table (TSV)");
  prepare->add_option("--tgt-rules", prep.tgt_rules, "Target contraction table (TSV)");
  prepare->add_option("--max-tokens", prep.max_tokens, "Drop pairs longer than this")
      ->capture_default_str();
  prepare->add_option("--seed", prep.seed, "Shuffle seed")->capture_default_str();
  prepare->add_option("--out", prep.out, "Output directory")->required();

  SubwordArgs sw;
  auto *subword = app.add_subcommand("train-subword", "Learn a BPE model");
  subword->add_option("--input", sw.inputs, "Text files, one sentence per line")->required();
  subword->add_option("--vocab-size", sw.vocab_size, "Vocabulary budget")->capture_default_str();
  subword->add_option("--languages", sw.languages, "Comma-separated target-language tags");
  subword->add_flag("--lowercase", sw.lowercase, "Lowercase before learning");
  subword->add_option("--out", sw.out, "Model file to write")->required();

  std::string train_config;
  auto *train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config,config", train_config, "Key-value config file")->required();

  TranslateArgs tr;
  auto *translate_cmd = app.add_subcommand("translate", "Translate a file with a checkpoint");
  translate_cmd->add_option("--checkpoint", tr.checkpoint)->required();
  translate_cmd->add_option("--input", tr.input, "One sentence per line")->required();
  translate_cmd->add_option("--output", tr.output)->required();
  translate_cmd->add_option("--target-lang", tr.target_lang, "Required for multilingual models");
  translate_cmd->add_option("--beam", tr.decode.beam_size, "Beam size; 1 is greedy")
      ->capture_default_str();
  translate_cmd->add_option("--length-penalty", tr.decode.length_penalty)->capture_default_str();
  translate_cmd->add_option("--max-len", tr.decode.max_len, "0 picks from the source length")
      ->capture_default_str();

  EvaluateArgs ev;
  auto *evaluate = app.add_subcommand("evaluate", "Score translations or a checkpoint with BLEU");
  evaluate->add_option("--hyp", ev.hyp, "Hypothesis file");
  evaluate->add_option("--ref", ev.ref, "Reference file");
  evaluate->add_option("--checkpoint", ev.checkpoint);
  evaluate->add_option("--data", ev.data, "Split directory written by prepare");
  evaluate->add_option("--partition", ev.partition)->capture_default_str();
  evaluate->add_option("--direction", ev.direction, "Direction to score, e.g. en-zu");
  evaluate->add_option("--scores", ev.scores, "File of per-run BLEU scores to aggregate");
  evaluate->add_option("--baseline-scores", ev.baseline_scores, "Baseline scores for a gain");
  evaluate->add_option("--beam", ev.decode.beam_size)->capture_default_str();
  evaluate->add_option("--length-penalty", ev.decode.length_penalty)->capture_default_str();
  evaluate->add_flag("--smooth", ev.smooth, "Add-one smoothing for orders 2-4");

  std::string manifest;
  auto *experiment = app.add_subcommand("experiment", "Run a multi-seed experiment manifest");
  experiment->add_option("--manifest,manifest", manifest)->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*prepare) return cmd_prepare(prep, out);
    if (*subword) return cmd_train_subword(sw, out);
    if (*train) return cmd_train(train_config, out);
    if (*translate_cmd) return cmd_translate(tr, err);
    if (*evaluate) return cmd_evaluate(ev, out);
    if (*experiment) return cmd_experiment(manifest, out, err);
  } catch (const Error &e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error &e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace nmt
