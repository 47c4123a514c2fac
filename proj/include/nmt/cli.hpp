#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nmt/config.hpp"
#include "nmt/protocols.hpp"

namespace nmt {

// A fully resolved `train` configuration. See README for the key schema.
struct TrainJob {
  std::string protocol;  // baseline | transfer | multilingual
  std::string out_dir;
  std::string dtype = "f32";
  TrainConfig train;
  std::string data;                     // split directory (bilingual)
  std::vector<std::string> directions;  // multilingual
  std::vector<std::string> direction_data;
  std::string src_tokenizer, tgt_tokenizer;
  int src_vocab = 8000, tgt_vocab = 8000;
  SubwordOptions subword;
  std::string parent_checkpoint;
};

// Validates keys and values; unknown keys are rejected.
TrainJob parse_train_job(const KeyValueConfig &cfg);

struct TrainOutcome {
  std::string final_checkpoint;
  std::string best_checkpoint;
  long steps = 0;
  double best_valid_loss = 0.0;
};

// Trains and writes model.ckpt, best.ckpt, metrics.tsv and any trained
// tokenizers into job.out_dir.
TrainOutcome run_train_job(const TrainJob &job);

// Entry point shared by the executable and the tests. Returns the exit
// code: 0 ok, 1 usage/config, 2 data, 3 numeric.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

}  // namespace nmt
