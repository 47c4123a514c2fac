#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nmt/subword.hpp"
#include "nmt/tensor.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

// Points at a tokenizer file and pins its content hash. `model` is the
// loaded tokenizer when available.
struct TokenizerRef {
  std::string path;
  std::uint64_t hash = 0;
  std::shared_ptr<const SubwordModel> model;

  static TokenizerRef of(std::shared_ptr<const SubwordModel> m, std::string path = {});
};

template <class Scalar>
struct Checkpoint {
  ModelConfig config;
  std::string protocol;  // baseline | transfer | multilingual
  std::string label;
  std::uint64_t seed = 0;
  long step = 0;
  std::vector<std::string> directions;  // e.g. {"en-xh", "xh-zu"}
  TokenizerRef src_tokenizer;
  TokenizerRef tgt_tokenizer;
  double valid_loss = 0.0;
  std::vector<std::pair<std::string, Matrix<Scalar>>> params;

  bool trained_on(const std::string &direction) const;
  bool multilingual() const;
};

template <class Scalar>
constexpr const char *dtype_name();
template <>
constexpr const char *dtype_name<float>() {
  return "f32";
}
template <>
constexpr const char *dtype_name<double>() {
  return "f64";
}

template <class Scalar>
Checkpoint<Scalar> snapshot(const TransformerModel<Scalar> &model);

// Rebuilds a model; every parameter must be present with the right shape.
template <class Scalar>
TransformerModel<Scalar> restore(const Checkpoint<Scalar> &ck);

// Container layout: a text manifest ("nmt-checkpoint 1", key=value lines,
// one "param <path> <rows> <cols>" line per tensor, "end"), followed by the
// raw little-endian blocks in manifest order. Tokenizer paths are stored
// relative to the checkpoint's directory; tokenizers without a path are
// written next to the checkpoint.
template <class Scalar>
void save_checkpoint(const Checkpoint<Scalar> &ck, const std::string &path);

// Loads tokenizers from their recorded paths and rejects hash mismatches.
template <class Scalar>
Checkpoint<Scalar> load_checkpoint(const std::string &path);

// "f32" or "f64", read from the manifest without loading parameters.
std::string checkpoint_dtype(const std::string &path);

extern template struct Checkpoint<float>;
extern template struct Checkpoint<double>;

}  // namespace nmt
