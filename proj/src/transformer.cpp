#include "nmt/transformer.hpp"

#include <cmath>
#include <limits>

#include "nmt/fpenv.hpp"

namespace nmt {

void ModelConfig::validate() const {
  if (num_layers <= 0 || num_heads <= 0 || model_dim <= 0 || ff_dim <= 0 ||
      src_vocab_size <= 0 || tgt_vocab_size <= 0 || max_seq_len <= 0) {
    throw UsageError("model config: every extent must be positive");
  }
  if (model_dim % num_heads != 0) {
    throw UsageError(fmt::format("model config: model_dim {} not divisible by num_heads {}",
                                 model_dim, num_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw UsageError(fmt::format("model config: dropout {} outside [0,1)", dropout));
  }
}

bool ModelConfig::same_body(const ModelConfig &o) const {
  return num_layers == o.num_layers && num_heads == o.num_heads && model_dim == o.model_dim &&
         ff_dim == o.ff_dim && max_seq_len == o.max_seq_len;
}

std::size_t parameter_count(const ModelConfig &cfg) {
  const std::size_t d = cfg.model_dim, f = cfg.ff_dim;
  const std::size_t attn = 4 * d * d;
  const std::size_t ff = d * f + f + f * d + d;
  const std::size_t norm = 2 * d;
  const std::size_t enc = attn + ff + 2 * norm;
  const std::size_t dec = 2 * attn + ff + 3 * norm;
  const std::size_t vs = cfg.src_vocab_size, vt = cfg.tgt_vocab_size;
  return vs * d + vt * d + cfg.num_layers * (enc + dec) + d * vt + vt;
}

std::vector<int> pad_batch(const TokenSeqs &seqs, Eigen::Index length) {
  std::vector<int> flat(seqs.size() * static_cast<std::size_t>(length), kPadId);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::copy(seqs[b].begin(), seqs[b].end(), flat.begin() + b * length);
  }
  return flat;
}

Eigen::Index max_length(const TokenSeqs &seqs) {
  std::size_t n = 0;
  for (const auto &s : seqs) n = std::max(n, s.size());
  return static_cast<Eigen::Index>(n);
}

template <class Scalar>
HeadWeights<Scalar> AttentionWeights<Scalar>::head(int j) const {
  const Eigen::Index h = w_q.cols() / num_heads;
  return {slice_cols(w_q, j * h, h), slice_cols(w_k, j * h, h), slice_cols(w_v, j * h, h)};
}

template <class Scalar>
Matrix<Scalar> attention_mask(std::span<const int> key_lengths, Eigen::Index query_len,
                              Eigen::Index key_len, bool causal) {
  const Scalar blocked = -std::numeric_limits<Scalar>::infinity();
  const auto batch = static_cast<Eigen::Index>(key_lengths.size());
  Matrix<Scalar> mask = Matrix<Scalar>::Zero(batch * query_len, key_len);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index i = 0; i < query_len; ++i) {
      for (Eigen::Index j = 0; j < key_len; ++j) {
        if (j >= key_lengths[b] || (causal && j > i)) mask(b * query_len + i, j) = blocked;
      }
    }
  }
  return mask;
}

template <class Scalar>
Tensor<Scalar> scaled_dot_attention(const Tensor<Scalar> &q, const Tensor<Scalar> &k,
                                    const Tensor<Scalar> &v,
                                    const std::optional<std::type_identity_t<Tensor<Scalar>>> &mask,
                                    Eigen::Index batches) {
  Tensor<Scalar> scores =
      scale(batched_matmul_nt(q, k, batches), Scalar(1) / std::sqrt(Scalar(q.cols())));
  if (mask) {
    if (mask->shape() != scores.shape()) {
      throw DimensionError(fmt::format("attention mask {} does not match scores {}",
                                       to_string(mask->shape()), to_string(scores.shape())));
    }
    scores = add(scores, *mask);
  }
  return batched_matmul(softmax(scores, 1), v, batches);
}

template <class Scalar>
Tensor<Scalar> attention_head(const Tensor<Scalar> &q, const Tensor<Scalar> &k,
                              const Tensor<Scalar> &v, const HeadWeights<Scalar> &weights,
                              const std::optional<std::type_identity_t<Tensor<Scalar>>> &mask, Eigen::Index batches) {
  return scaled_dot_attention(matmul(q, weights.w_q), matmul(k, weights.w_k),
                              matmul(v, weights.w_v), mask, batches);
}

template <class Scalar>
Tensor<Scalar> multi_head(const Tensor<Scalar> &q, const Tensor<Scalar> &k,
                          const Tensor<Scalar> &v, const AttentionWeights<Scalar> &weights,
                          const std::optional<std::type_identity_t<Tensor<Scalar>>> &mask, Eigen::Index batches) {
  // Projecting once with the stacked weights equals projecting per head:
  // x * W[:, block] == (x * W)[:, block].
  const Tensor<Scalar> qp = matmul(q, weights.w_q);
  const Tensor<Scalar> kp = matmul(k, weights.w_k);
  const Tensor<Scalar> vp = matmul(v, weights.w_v);
  const Eigen::Index h = qp.cols() / weights.num_heads;
  std::vector<Tensor<Scalar>> heads;
  heads.reserve(weights.num_heads);
  for (int j = 0; j < weights.num_heads; ++j) {
    heads.push_back(scaled_dot_attention(slice_cols(qp, j * h, h), slice_cols(kp, j * h, h),
                                         slice_cols(vp, j * h, h), mask, batches));
  }
  const Tensor<Scalar> joined =
      weights.num_heads == 1 ? heads.front() : concat(std::span<const Tensor<Scalar>>(heads), 1);
  return matmul(joined, weights.w_o);
}

template <class Scalar>
Memory<Scalar> Memory<Scalar>::rebind(Graph<Scalar> &graph) const {
  return {graph.constant(states.value()), batch, length, lengths};
}

namespace {

template <class Scalar>
Matrix<Scalar> sinusoidal_positions(int max_len, int dim) {
  Matrix<Scalar> pe(max_len, dim);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dim));
      const double angle = pos * rate;
      pe(pos, i) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <class Scalar>
void xavier_uniform(Matrix<Scalar> &m, Rng &rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  }
}

template <class Scalar>
void normal_init(Matrix<Scalar> &m, double stddev, Rng &rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
  }
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

template <class Scalar>
std::size_t TransformerModel<Scalar>::add_param(std::string name, Eigen::Index rows,
                                                Eigen::Index cols) {
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), Matrix<Scalar>::Zero(rows, cols));
  return params_.size() - 1;
}

template <class Scalar>
TransformerModel<Scalar>::TransformerModel(const ModelConfig &cfg, std::uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  const Eigen::Index d = cfg_.model_dim, f = cfg_.ff_dim;
  auto attn_block = [&](const std::string &prefix) {
    return Attn{add_param(prefix + ".w_q", d, d), add_param(prefix + ".w_k", d, d),
                add_param(prefix + ".w_v", d, d), add_param(prefix + ".w_o", d, d)};
  };
  auto norm_block = [&](const std::string &prefix) {
    return Norm{add_param(prefix + ".gain", 1, d), add_param(prefix + ".bias", 1, d)};
  };
  auto linear = [&](const std::string &prefix, Eigen::Index in, Eigen::Index out) {
    return Linear{add_param(prefix + ".w", in, out), add_param(prefix + ".b", 1, out)};
  };

  src_embed_ = add_param("src_embed", cfg_.src_vocab_size, d);
  tgt_embed_ = add_param("tgt_embed", cfg_.tgt_vocab_size, d);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = fmt::format("encoder.{}", l);
    EncoderLayer layer;
    layer.self_attn = attn_block(p + ".self_attn");
    layer.ln1 = norm_block(p + ".ln1");
    layer.ff1 = linear(p + ".ff1", d, f);
    layer.ff2 = linear(p + ".ff2", f, d);
    layer.ln2 = norm_block(p + ".ln2");
    encoder_.push_back(layer);
  }
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = fmt::format("decoder.{}", l);
    DecoderLayer layer;
    layer.self_attn = attn_block(p + ".self_attn");
    layer.ln1 = norm_block(p + ".ln1");
    layer.cross_attn = attn_block(p + ".cross_attn");
    layer.ln2 = norm_block(p + ".ln2");
    layer.ff1 = linear(p + ".ff1", d, f);
    layer.ff2 = linear(p + ".ff2", f, d);
    layer.ln3 = norm_block(p + ".ln3");
    decoder_.push_back(layer);
  }
  output_ = linear("output", d, cfg_.tgt_vocab_size);

  Rng rng(seed);
  for (auto &p : params_) {
    const std::string &name = p.name();
    if (name == "src_embed" || name == "tgt_embed") {
      normal_init(p.value(), 1.0 / std::sqrt(static_cast<double>(d)), rng);
    } else if (ends_with(name, ".gain")) {
      p.value().setOnes();
    } else if (ends_with(name, ".bias") || ends_with(name, ".b")) {
      p.value().setZero();
    } else {
      xavier_uniform(p.value(), rng);
    }
  }
  positions_ = sinusoidal_positions<Scalar>(cfg_.max_seq_len, cfg_.model_dim);
}

template <class Scalar>
Parameter<Scalar> &TransformerModel<Scalar>::parameter(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError(fmt::format("no parameter named '{}'", name));
  return params_[it->second];
}

template <class Scalar>
const Parameter<Scalar> &TransformerModel<Scalar>::parameter(std::string_view name) const {
  return const_cast<TransformerModel *>(this)->parameter(name);
}

template <class Scalar>
bool TransformerModel<Scalar>::has_parameter(std::string_view name) const {
  return index_.contains(std::string(name));
}

template <class Scalar>
std::size_t TransformerModel<Scalar>::num_scalars() const {
  std::size_t n = 0;
  for (const auto &p : params_) n += static_cast<std::size_t>(p.value().size());
  return n;
}

template <class Scalar>
void TransformerModel<Scalar>::zero_grad() {
  for (auto &p : params_) p.zero_grad();
}

template <class Scalar>
AttentionWeights<Scalar> TransformerModel<Scalar>::attn(Graph<Scalar> &g, const Attn &a) {
  return {param(g, a.w_q), param(g, a.w_k), param(g, a.w_v), param(g, a.w_o), cfg_.num_heads};
}

template <class Scalar>
Tensor<Scalar> TransformerModel<Scalar>::norm(Graph<Scalar> &g, const Tensor<Scalar> &x,
                                              const Norm &n) {
  return layer_norm(x, param(g, n.gain), param(g, n.bias));
}

template <class Scalar>
Tensor<Scalar> TransformerModel<Scalar>::feed_forward(Graph<Scalar> &g, const Tensor<Scalar> &x,
                                                      const Linear &l1, const Linear &l2) {
  Tensor<Scalar> h = relu(add(matmul(x, param(g, l1.w)), param(g, l1.b)));
  return add(matmul(h, param(g, l2.w)), param(g, l2.b));
}

template <class Scalar>
Tensor<Scalar> TransformerModel<Scalar>::embed(Graph<Scalar> &g, std::size_t table,
                                               const TokenSeqs &seqs, Eigen::Index length,
                                               int vocab, Rng *rng) {
  if (length > cfg_.max_seq_len) {
    throw UsageError(fmt::format("sequence length {} exceeds max_seq_len {}", length,
                                 cfg_.max_seq_len));
  }
  const std::vector<int> ids = pad_batch(seqs, length);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw UsageError(fmt::format("token id {} outside vocabulary of size {}", id, vocab));
    }
  }
  const auto batch = static_cast<Eigen::Index>(seqs.size());
  Matrix<Scalar> pos(batch * length, cfg_.model_dim);
  for (Eigen::Index b = 0; b < batch; ++b) pos.middleRows(b * length, length) = positions_.topRows(length);
  Tensor<Scalar> x = scale(embedding(param(g, table), std::span<const int>(ids)),
                           std::sqrt(Scalar(cfg_.model_dim)));
  return dropout(add(x, g.constant(std::move(pos))), cfg_.dropout, rng);
}

template <class Scalar>
Memory<Scalar> TransformerModel<Scalar>::encode(Graph<Scalar> &g, const TokenSeqs &src,
                                                Rng *rng) {
  const FlushDenormals ftz;
  if (src.empty()) throw UsageError("encode: empty batch");
  Memory<Scalar> mem;
  mem.batch = static_cast<Eigen::Index>(src.size());
  mem.length = max_length(src);
  if (mem.length == 0) throw UsageError("encode: every source sequence is empty");
  for (const auto &s : src) mem.lengths.push_back(static_cast<int>(s.size()));
  const Tensor<Scalar> mask = g.constant(
      attention_mask<Scalar>(mem.lengths, mem.length, mem.length, /*causal=*/false));
  Tensor<Scalar> x = embed(g, src_embed_, src, mem.length, cfg_.src_vocab_size, rng);
  for (const auto &layer : encoder_) {
    Tensor<Scalar> a = multi_head(x, x, x, attn(g, layer.self_attn), mask, mem.batch);
    x = norm(g, add(x, dropout(a, cfg_.dropout, rng)), layer.ln1);
    Tensor<Scalar> f = feed_forward(g, x, layer.ff1, layer.ff2);
    x = norm(g, add(x, dropout(f, cfg_.dropout, rng)), layer.ln2);
  }
  mem.states = x;
  return mem;
}

template <class Scalar>
Tensor<Scalar> TransformerModel<Scalar>::decode(Graph<Scalar> &g, const Memory<Scalar> &memory,
                                                const TokenSeqs &tgt_in, Rng *rng) {
  const FlushDenormals ftz;
  if (static_cast<Eigen::Index>(tgt_in.size()) != memory.batch) {
    throw UsageError(fmt::format("decode: {} target sequences for a batch of {}", tgt_in.size(),
                                 memory.batch));
  }
  const Eigen::Index length = max_length(tgt_in);
  std::vector<int> tgt_lengths;
  for (const auto &t : tgt_in) {
    if (t.empty()) throw UsageError("decode: empty target prefix");
    tgt_lengths.push_back(static_cast<int>(t.size()));
  }
  const Tensor<Scalar> self_mask =
      g.constant(attention_mask<Scalar>(tgt_lengths, length, length, /*causal=*/true));
  const Tensor<Scalar> cross_mask =
      g.constant(attention_mask<Scalar>(memory.lengths, length, memory.length, false));
  Tensor<Scalar> x = embed(g, tgt_embed_, tgt_in, length, cfg_.tgt_vocab_size, rng);
  for (const auto &layer : decoder_) {
    Tensor<Scalar> a = multi_head(x, x, x, attn(g, layer.self_attn), self_mask, memory.batch);
    x = norm(g, add(x, dropout(a, cfg_.dropout, rng)), layer.ln1);
    Tensor<Scalar> c = multi_head(x, memory.states, memory.states, attn(g, layer.cross_attn),
                                  cross_mask, memory.batch);
    x = norm(g, add(x, dropout(c, cfg_.dropout, rng)), layer.ln2);
    Tensor<Scalar> f = feed_forward(g, x, layer.ff1, layer.ff2);
    x = norm(g, add(x, dropout(f, cfg_.dropout, rng)), layer.ln3);
  }
  return add(matmul(x, param(g, output_.w)), param(g, output_.b));
}

template <class Scalar>
Tensor<Scalar> TransformerModel<Scalar>::loss(Graph<Scalar> &g, const TokenSeqs &src,
                                              const TokenSeqs &tgt, Rng *rng) {
  if (src.size() != tgt.size()) {
    throw UsageError(fmt::format("loss: {} sources vs {} targets", src.size(), tgt.size()));
  }
  TokenSeqs tgt_in, tgt_out;
  tgt_in.reserve(tgt.size());
  tgt_out.reserve(tgt.size());
  for (const auto &t : tgt) {
    std::vector<int> in{kBosId};
    in.insert(in.end(), t.begin(), t.end());
    std::vector<int> out(t.begin(), t.end());
    out.push_back(kEosId);
    tgt_in.push_back(std::move(in));
    tgt_out.push_back(std::move(out));
  }
  const Memory<Scalar> mem = encode(g, src, rng);
  const Tensor<Scalar> logits = decode(g, mem, tgt_in, rng);
  const std::vector<int> targets = pad_batch(tgt_out, max_length(tgt_out));
  return cross_entropy(logits, std::span<const int>(targets), kPadId);
}

template <class Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> TransformerModel<Scalar>::decode_step(
    const std::vector<int> &prefix, const Memory<Scalar> &memory) {
  if (prefix.empty()) throw UsageError("decode_step: empty prefix");
  if (memory.batch != 1) throw UsageError("decode_step: expects a single-sentence memory");
  Graph<Scalar> g;
  const Memory<Scalar> mem = memory.rebind(g);
  const Tensor<Scalar> logits = decode(g, mem, {prefix}, nullptr);
  const Matrix<Scalar> last = logits.value().bottomRows(1);
  return detail::softmax_rows<Scalar>(last).row(0).transpose();
}

template <class Scalar>
Scalar TransformerModel<Scalar>::sequence_logprob(const std::vector<int> &src,
                                                  const std::vector<int> &tgt) {
  if (tgt.empty()) return Scalar(0);
  Graph<Scalar> g;
  const Memory<Scalar> mem = encode(g, {src}, nullptr);
  std::vector<int> in{kBosId};
  in.insert(in.end(), tgt.begin(), tgt.end() - 1);
  const Tensor<Scalar> logits = decode(g, mem, {in}, nullptr);
  const Matrix<Scalar> logp = detail::log_softmax_rows<Scalar>(logits.value());
  Scalar total = 0;
  for (std::size_t t = 0; t < tgt.size(); ++t) total += logp(static_cast<Eigen::Index>(t), tgt[t]);
  return total;
}

#define NMT_INSTANTIATE(S)                                                                        \
  template struct AttentionWeights<S>;                                                            \
  template struct Memory<S>;                                                                      \
  template class TransformerModel<S>;                                                             \
  template Matrix<S> attention_mask<S>(std::span<const int>, Eigen::Index, Eigen::Index, bool);   \
  template Tensor<S> scaled_dot_attention<S>(const Tensor<S> &, const Tensor<S> &,                \
                                             const Tensor<S> &, const std::optional<Tensor<S>> &, \
                                             Eigen::Index);                                       \
  template Tensor<S> attention_head<S>(const Tensor<S> &, const Tensor<S> &, const Tensor<S> &,   \
                                       const HeadWeights<S> &, const std::optional<Tensor<S>> &,  \
                                       Eigen::Index);                                             \
  template Tensor<S> multi_head<S>(const Tensor<S> &, const Tensor<S> &, const Tensor<S> &,       \
                                   const AttentionWeights<S> &,                                   \
                                   const std::optional<Tensor<S>> &, Eigen::Index);

NMT_INSTANTIATE(float)
NMT_INSTANTIATE(double)

#undef NMT_INSTANTIATE

}  // namespace nmt
