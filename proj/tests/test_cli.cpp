#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "nmt/cli.hpp"
#include "nmt/config.hpp"
#include "scenarios.hpp"

using namespace nmt;
using namespace nmt::testkit;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

bool contains(const std::string &haystack, const std::string &needle) {
  return haystack.find(needle) != std::string::npos;
}

void write_corpus(const TempDir &dir, const ParallelCorpus &c, const std::string &stem) {
  write_lines(dir / (stem + ".src"), c.source);
  write_lines(dir / (stem + ".tgt"), c.target);
}

const char *kTinyModel =
    "num_layers = 1\nnum_heads = 2\nmodel_dim = 16\nff_dim = 32\ndropout = 0.1\n"
    "max_seq_len = 32\nbatch_tokens = 200\nmax_steps = 12\nwarmup = 10\neval_every = 6\n"
    "vocab_size = 80\n";

// Prepared splits for aa-bb, aa-cc and bb-cc under dir/<direction>.
void prepare_family(const TempDir &dir) {
  Rng rng(21);
  const LanguageFamily fam = chain_family(15, 0.7, rng);
  for (const auto &[s, t] : {std::pair{"aa", "bb"}, {"aa", "cc"}, {"bb", "cc"}}) {
    const std::string d = std::string(s) + "-" + t;
    write_corpus(dir, fam.corpus(s, t, 60, rng, 2, 5), d);
    const CliResult r = cli({"prepare", "--src", dir / (d + ".src"), "--tgt", dir / (d + ".tgt"), "--langs",
                       d, "--out", dir / d});
    ASSERT_EQ(r.code, 0) << r.err;
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"train"}).code, 1);
  const CliResult help = cli({"--help"});
  EXPECT_EQ(help.code, 0);
  for (const char *cmd : {"prepare", "train-subword", "train", "translate", "evaluate", "experiment"}) {
    EXPECT_TRUE(contains(help.out, cmd)) << cmd;
  }
}

TEST(Cli, PrepareReportsAndIsReproducible) {
  TempDir dir;
  std::vector<std::string> src, tgt;
  for (int i = 0; i < 40; ++i) {
    src.push_back(fmt::format("don't go {}", i));
    tgt.push_back(fmt::format("ungahambi {}", i));
  }
  src.push_back("don't go 0");  // duplicate once expanded
  tgt.push_back("ungahambi 0");
  write_lines(dir / "in.en", src);
  write_lines(dir / "in.zu", tgt);
  const std::vector<std::string> args{"prepare",     "--src", dir / "in.en", "--tgt",  dir / "in.zu",
                                      "--langs",     "en-zu", "--seed",      "3",      "--src-rules",
                                      NMT_DATA_DIR "/contractions.en.tsv", "--out", dir / "a"};
  const CliResult r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "41 raw pairs, 40 after cleaning"));
  EXPECT_TRUE(contains(r.out, "train 28 / valid 6 / test 6"));
  EXPECT_TRUE(contains(read_file(dir / "a/train.src"), "do not go"));
  auto again = args;
  again.back() = dir / "b";
  ASSERT_EQ(cli(again).code, 0);
  for (const char *f : {"train.src", "train.tgt", "valid.src", "test.tgt", "split.meta"}) {
    EXPECT_EQ(read_file(dir / (std::string("a/") + f)), read_file(dir / (std::string("b/") + f))) << f;
  }
}

TEST(Cli, PrepareDataErrors) {
  TempDir dir;
  write_lines(dir / "a.txt", {"one", "two"});
  write_lines(dir / "b.txt", {"uno"});
  const CliResult missing = cli({"prepare", "--src", dir / "a.txt", "--tgt", dir / "nope.txt", "--langs",
                           "en-es", "--out", dir / "o"});
  EXPECT_EQ(missing.code, 2);
  EXPECT_TRUE(contains(missing.err, "nope.txt"));
  const CliResult short_tgt = cli({"prepare", "--src", dir / "a.txt", "--tgt", dir / "b.txt", "--langs",
                             "en-es", "--out", dir / "o"});
  EXPECT_EQ(short_tgt.code, 2);
  EXPECT_TRUE(contains(short_tgt.err, "2 lines"));
  EXPECT_EQ(cli({"prepare", "--src", dir / "a.txt", "--tgt", dir / "a.txt", "--langs", "enes",
                 "--out", dir / "o"})
                .code,
            1);
}

TEST(Cli, TrainSubword) {
  TempDir dir;
  write_lines(dir / "text", {"low lower lowest", "new newer newest"});
  const CliResult r = cli({"train-subword", "--input", dir / "text", "--vocab-size", "40", "--languages",
                     "zu,xh", "--out", dir / "m.bpe"});
  ASSERT_EQ(r.code, 0) << r.err;
  const SubwordModel m = SubwordModel::load(dir / "m.bpe");
  EXPECT_EQ(m.languages(), (std::vector<std::string>{"xh", "zu"}));
  EXPECT_EQ(cli({"train-subword", "--input", dir / "missing", "--out", dir / "x.bpe"}).code, 2);
}

TEST(Cli, TrainErrorsAreConfigErrors) {
  TempDir dir;
  write_file(dir / "t.cfg", "protocol = transfer\nout = o\ndata = d\n");
  CliResult r = cli({"train", "--config", dir / "t.cfg"});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "parent_checkpoint"));
  write_file(dir / "u.cfg", "protocol = zeroshot\nout = o\ndata = d\n");
  r = cli({"train", "--config", dir / "u.cfg"});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "baseline, transfer, multilingual"));
  write_file(dir / "v.cfg", "protocol = baseline\nout = o\ndata = nowhere\n");
  EXPECT_EQ(cli({"train", "--config", dir / "v.cfg"}).code, 2);
}

TEST(Cli, TrainTranslateEvaluate) {
  TempDir dir;
  prepare_family(dir);
  write_file(dir / "base.cfg", std::string("protocol = baseline\nout = base\ndata = aa-cc\n") + kTinyModel);
  CliResult r = cli({"train", dir / "base.cfg"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char *f : {"model.ckpt", "best.ckpt", "metrics.tsv", "src.bpe", "tgt.bpe"}) {
    EXPECT_TRUE(fs::exists(dir / (std::string("base/") + f))) << f;
  }
  const std::string first = read_file(dir / "base/model.ckpt");
  ASSERT_EQ(cli({"train", dir / "base.cfg"}).code, 0);
  EXPECT_EQ(read_file(dir / "base/model.ckpt"), first);

  // Transfer from the baseline, reusing its source tokenizer.
  write_file(dir / "child.cfg", std::string("protocol = transfer\nout = child\ndata = aa-bb\n"
                                            "parent_checkpoint = base/best.ckpt\n") +
                                    kTinyModel);
  r = cli({"train", dir / "child.cfg"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint<float>(dir / "child/model.ckpt").protocol, "transfer");

  write_lines(dir / "empty.txt", {});
  r = cli({"translate", "--checkpoint", dir / "base/best.ckpt", "--input", dir / "empty.txt",
           "--output", dir / "empty.out"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(dir / "empty.out"), "");

  r = cli({"translate", "--checkpoint", dir / "base/best.ckpt", "--input", dir / "aa-cc/test.src",
           "--output", dir / "hyp.txt", "--target-lang", "cc", "--beam", "2"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.err, "warning"));
  EXPECT_EQ(read_lines(dir / "hyp.txt").size(), read_lines(dir / "aa-cc/test.src").size());

  r = cli({"evaluate", "--hyp", dir / "aa-cc/test.tgt", "--ref", dir / "aa-cc/test.tgt"});
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(r.out.starts_with("BLEU = 100.00 (100.0/100.0/100.0/100.0, BP = 1.000")) << r.out;
  r = cli({"evaluate", "--checkpoint", dir / "base/best.ckpt", "--data", dir / "aa-cc"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.starts_with("BLEU = "));
  EXPECT_EQ(cli({"evaluate", "--hyp", dir / "hyp.txt"}).code, 1);
  EXPECT_EQ(cli({"translate", "--checkpoint", dir / "none.ckpt", "--input", dir / "empty.txt",
                 "--output", dir / "x"})
                .code,
            2);
}

TEST(Cli, MultilingualNeedsTargetLanguage) {
  TempDir dir;
  prepare_family(dir);
  write_file(dir / "multi.cfg", std::string("protocol = multilingual\nout = multi\n"
                                            "directions = aa-bb, bb-cc\n"
                                            "data.aa-bb = aa-bb\ndata.bb-cc = bb-cc\n") +
                                    kTinyModel);
  CliResult r = cli({"train", dir / "multi.cfg"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"translate", "--checkpoint", dir / "multi/best.ckpt", "--input", dir / "aa-cc/test.src",
           "--output", dir / "o.txt"});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "--target-lang"));
  EXPECT_EQ(cli({"translate", "--checkpoint", dir / "multi/best.ckpt", "--input",
                 dir / "aa-cc/test.src", "--output", dir / "o.txt", "--target-lang", "dd"})
                .code,
            1);
  EXPECT_EQ(cli({"translate", "--checkpoint", dir / "multi/best.ckpt", "--input",
                 dir / "aa-cc/test.src", "--output", dir / "o.txt", "--target-lang", "cc"})
                .code,
            0);
  // aa-cc was never trained: scored zero-shot.
  r = cli({"evaluate", "--checkpoint", dir / "multi/best.ckpt", "--data", dir / "aa-cc"});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, EvaluateScores) {
  TempDir dir;
  write_lines(dir / "multi", {"18.0", "19.0"});
  write_lines(dir / "base", {"8.5", "8.9"});
  const CliResult r = cli({"evaluate", "--scores", dir / "multi", "--baseline-scores", dir / "base"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "2 runs: 18.5 ± 0.7\ngain over baseline: 9.8 ± 0.8\n");
  write_lines(dir / "one", {"3"});
  EXPECT_EQ(cli({"evaluate", "--scores", dir / "one"}).code, 1);
  write_lines(dir / "junk", {"3", "x"});
  EXPECT_EQ(cli({"evaluate", "--scores", dir / "junk"}).code, 2);
}

TEST(Cli, ExperimentIsResumable) {
  TempDir dir;
  prepare_family(dir);
  std::string manifest = "out = exp\nruns = base, multi\nseeds = 3\ntarget_direction = aa-cc\n"
                         "baseline = base\nbeam = 1\n";
  for (std::string line : {"num_layers = 1", "num_heads = 2", "model_dim = 16", "ff_dim = 32",
                           "max_seq_len = 32", "batch_tokens = 200", "max_steps = 8", "warmup = 10",
                           "eval_every = 4", "vocab_size = 80", "dropout = 0.1"}) {
    manifest += "defaults." + line + "\n";
  }
  manifest +=
      "run.base.protocol = baseline\nrun.base.data = aa-cc\n"
      "run.multi.protocol = multilingual\nrun.multi.directions = aa-bb, aa-cc\n"
      "run.multi.data.aa-bb = aa-bb\nrun.multi.data.aa-cc = aa-cc\n"
      "run.multi.eval_data = aa-cc\nrun.multi.eval_direction = aa-cc\n";
  write_file(dir / "exp.manifest", manifest);

  CliResult r = cli({"experiment", "--manifest", dir / "exp.manifest"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "6 runs trained, 0 failed"));
  const std::string report = read_file(dir / "exp/report.txt");
  const std::string csv = read_file(dir / "exp/report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_TRUE(contains(report, "±"));

  r = cli({"experiment", "--manifest", dir / "exp.manifest"});
  EXPECT_TRUE(contains(r.out, "0 runs trained"));
  EXPECT_EQ(read_file(dir / "exp/report.txt"), report);

  fs::remove_all(dir / "exp/multi/seed-2");
  r = cli({"experiment", "--manifest", dir / "exp.manifest"});
  EXPECT_TRUE(contains(r.out, "1 runs trained"));
  EXPECT_EQ(read_file(dir / "exp/report.txt"), report);
  EXPECT_EQ(read_file(dir / "exp/report.csv"), csv);
}

TEST(Cli, ExperimentRecordsFailedCells) {
  TempDir dir;
  prepare_family(dir);
  write_file(dir / "bad.manifest",
             "out = exp\nruns = base\nseeds = 2\ntarget_direction = aa-cc\n"
             "run.base.protocol = baseline\nrun.base.data = aa-cc\nrun.base.model_dim = 16\n"
             "run.base.num_heads = 2\nrun.base.max_steps = 2\nrun.base.src_tokenizer = missing.bpe\n");
  const CliResult r = cli({"experiment", dir / "bad.manifest"});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(fs::exists(dir / "exp/base/seed-1/error.txt"));
  EXPECT_TRUE(contains(read_file(dir / "exp/report.txt"), "missing"));
  write_file(dir / "dup.manifest",
             "out = exp\nruns = a, a\ntarget_direction = aa-cc\nrun.a.protocol = baseline\n"
             "run.a.data = aa-cc\n");
  EXPECT_EQ(cli({"experiment", dir / "dup.manifest"}).code, 1);
}

}  // namespace
