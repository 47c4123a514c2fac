#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "nmt/ops.hpp"
#include "nmt/rng.hpp"
#include "nmt/special_tokens.hpp"
#include "nmt/tensor.hpp"

namespace nmt {

struct ModelConfig {
  int num_layers = 6;
  int num_heads = 8;
  int model_dim = 256;
  int ff_dim = 1024;
  double dropout = 0.1;
  int src_vocab_size = 0;
  int tgt_vocab_size = 0;
  int max_seq_len = 256;

  int head_dim() const { return model_dim / num_heads; }

  // Throws UsageError on non-positive extents or model_dim % num_heads != 0.
  void validate() const;

  // Same architecture, ignoring vocabulary sizes.
  bool same_body(const ModelConfig &other) const;

  bool operator==(const ModelConfig &) const = default;
};

// Closed-form number of scalar parameters for a configuration.
std::size_t parameter_count(const ModelConfig &cfg);

using TokenSeqs = std::vector<std::vector<int>>;

// Projections of one attention head, each [model_dim, head_dim].
template <class Scalar>
struct HeadWeights {
  Tensor<Scalar> w_q, w_k, w_v;
};

// Stacked projections of one multi-head block. Columns [j*h, (j+1)*h) of
// w_q/w_k/w_v belong to head j; w_o maps the N*h concatenation back to
// model_dim.
template <class Scalar>
struct AttentionWeights {
  Tensor<Scalar> w_q, w_k, w_v, w_o;
  int num_heads = 1;

  HeadWeights<Scalar> head(int j) const;
};

// Additive mask: 0 where attention is allowed, -inf where it is not.
// Rows stack `lengths.size()` sequences of `query_len` queries each.
template <class Scalar>
Matrix<Scalar> attention_mask(std::span<const int> key_lengths, Eigen::Index query_len,
                              Eigen::Index key_len, bool causal);

// Scaled dot-product attention on already-projected inputs, batched over
// `batches` row blocks: softmax(Q Kᵀ / sqrt(h) + mask) V.
template <class Scalar>
Tensor<Scalar> scaled_dot_attention(const Tensor<Scalar> &q, const Tensor<Scalar> &k,
                                    const Tensor<Scalar> &v,
                                    const std::optional<std::type_identity_t<Tensor<Scalar>>> &mask,
                                    Eigen::Index batches);

// One head: project q, k, v with the head's own weights, then attend.
template <class Scalar>
Tensor<Scalar> attention_head(const Tensor<Scalar> &q, const Tensor<Scalar> &k,
                              const Tensor<Scalar> &v, const HeadWeights<Scalar> &weights,
                              const std::optional<std::type_identity_t<Tensor<Scalar>>> &mask,
                              Eigen::Index batches = 1);

// All heads, concatenated and passed through w_o.
template <class Scalar>
Tensor<Scalar> multi_head(const Tensor<Scalar> &q, const Tensor<Scalar> &k,
                          const Tensor<Scalar> &v, const AttentionWeights<Scalar> &weights,
                          const std::optional<std::type_identity_t<Tensor<Scalar>>> &mask, Eigen::Index batches = 1);

// Encoder output for a padded batch: states stack `batch` blocks of `length`
// rows; rows at or beyond lengths[b] are padding.
template <class Scalar>
struct Memory {
  Tensor<Scalar> states;
  Eigen::Index batch = 0;
  Eigen::Index length = 0;
  std::vector<int> lengths;

  // Copies the states into `graph` as a constant, for step-wise decoding.
  Memory rebind(Graph<Scalar> &graph) const;
};

// Post-norm encoder-decoder transformer with sinusoidal positions and
// separate source/target embeddings.
template <class Scalar>
class TransformerModel {
 public:
  TransformerModel(const ModelConfig &cfg, std::uint64_t seed);

  const ModelConfig &config() const { return cfg_; }

  std::vector<Parameter<Scalar>> &parameters() { return params_; }
  const std::vector<Parameter<Scalar>> &parameters() const { return params_; }
  Parameter<Scalar> &parameter(std::string_view name);
  const Parameter<Scalar> &parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;
  std::size_t num_scalars() const;
  void zero_grad();

  // `src` is used as given (callers append EOS). A non-null rng enables
  // dropout.
  Memory<Scalar> encode(Graph<Scalar> &g, const TokenSeqs &src, Rng *rng);

  // Logits [B*T, tgt_vocab] for decoder inputs `tgt_in` (each starting with
  // BOS), padded to the longest.
  Tensor<Scalar> decode(Graph<Scalar> &g, const Memory<Scalar> &memory, const TokenSeqs &tgt_in,
                        Rng *rng);

  // Teacher-forced mean token NLL. Targets are unframed; BOS is prepended to
  // the decoder input and EOS appended to the expected output.
  Tensor<Scalar> loss(Graph<Scalar> &g, const TokenSeqs &src, const TokenSeqs &tgt, Rng *rng);

  // p(. | prefix, src) over the target vocabulary; prefix starts with BOS.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> decode_step(const std::vector<int> &prefix,
                                                       const Memory<Scalar> &memory);

  // Sum over positions t of log p(tgt[t] | BOS tgt[<t], src). EOS is only
  // scored if the caller includes it in `tgt`.
  Scalar sequence_logprob(const std::vector<int> &src, const std::vector<int> &tgt);

 private:
  struct Linear {
    std::size_t w, b;
  };
  struct Norm {
    std::size_t gain, bias;
  };
  struct Attn {
    std::size_t w_q, w_k, w_v, w_o;
  };
  struct EncoderLayer {
    Attn self_attn;
    Norm ln1, ln2;
    Linear ff1, ff2;
  };
  struct DecoderLayer {
    Attn self_attn, cross_attn;
    Norm ln1, ln2, ln3;
    Linear ff1, ff2;
  };

  std::size_t add_param(std::string name, Eigen::Index rows, Eigen::Index cols);
  AttentionWeights<Scalar> attn(Graph<Scalar> &g, const Attn &a);
  Tensor<Scalar> norm(Graph<Scalar> &g, const Tensor<Scalar> &x, const Norm &n);
  Tensor<Scalar> feed_forward(Graph<Scalar> &g, const Tensor<Scalar> &x, const Linear &l1,
                              const Linear &l2);
  Tensor<Scalar> embed(Graph<Scalar> &g, std::size_t table, const TokenSeqs &seqs,
                       Eigen::Index length, int vocab, Rng *rng);
  Tensor<Scalar> param(Graph<Scalar> &g, std::size_t idx) { return g.parameter(params_[idx]); }

  ModelConfig cfg_;
  std::vector<Parameter<Scalar>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t src_embed_ = 0, tgt_embed_ = 0;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Linear output_{};
  Matrix<Scalar> positions_;
};

// Pads sequences with PAD to a common length; returns the flat row-major ids.
std::vector<int> pad_batch(const TokenSeqs &seqs, Eigen::Index length);
Eigen::Index max_length(const TokenSeqs &seqs);

extern template class TransformerModel<float>;
extern template class TransformerModel<double>;

}  // namespace nmt
