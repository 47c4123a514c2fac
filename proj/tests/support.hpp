#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "nmt/corpus.hpp"
#include "nmt/ops.hpp"
#include "nmt/rng.hpp"
#include "nmt/text.hpp"
#include "nmt/transformer.hpp"

namespace nmt::testkit {

using Mat = Matrix<double>;

inline Mat random_matrix(Rng &rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  return m;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string &tag = "nmt") {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            fmt::format("{}-{}-{}", tag, ::getpid(), counter++);
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string &name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

// ---- finite differences -------------------------------------------------

struct GradCheck {
  double max_rel_err = 0.0;
  int checked = 0;
  int redrawn = 0;
  std::string worst;
};

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct Probe {
  double value;
  std::uint64_t signature;
};

// Draws up to `samples` entries of one tensor and compares its analytic
// gradient with central differences. An entry whose perturbation flips any
// ReLU unit (the activation signature differs between +h and -h) is redrawn.
inline void probe_entries(const std::string &name, Mat &value, const Mat &grad,
                          const std::function<Probe()> &eval, std::uint64_t base_signature,
                          int samples, double h, Rng &rng, GradCheck &out) {
  const Eigen::Index n = value.size();
  const int want = static_cast<int>(std::min<Eigen::Index>(samples, n));
  int done = 0;
  for (int attempt = 0; done < want && attempt < 20 * want; ++attempt) {
    const Eigen::Index i = want == n ? (done + attempt) % n : static_cast<Eigen::Index>(rng.below(n));
    const double saved = value.data()[i];
    value.data()[i] = saved + h;
    const Probe plus = eval();
    value.data()[i] = saved - h;
    const Probe minus = eval();
    value.data()[i] = saved;
    if (plus.signature != minus.signature || plus.signature != base_signature) {
      ++out.redrawn;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2 * h);
    const double analytic = grad.size() == 0 ? 0.0 : grad.data()[i];
    const double e = rel_err(analytic, numeric);
    if (e > out.max_rel_err || out.worst.empty()) {
      out.max_rel_err = std::max(out.max_rel_err, e);
      if (e >= out.max_rel_err) {
        out.worst = fmt::format("{}[{}]: analytic {:.10g} numeric {:.10g}", name, i, analytic, numeric);
      }
    }
    ++out.checked;
    ++done;
  }
}

using LossFn = std::function<Tensor<double>(Graph<double> &, const std::vector<Tensor<double>> &)>;

// Checks d loss / d input for every input of an op-level loss.
inline GradCheck check_op(const LossFn &f, std::vector<Mat> inputs, Rng &rng, int samples = 6,
                          double h = 1e-5) {
  auto eval = [&]() {
    Graph<double> g;
    std::vector<Tensor<double>> leaves;
    for (const auto &m : inputs) leaves.push_back(g.variable(m));
    const double v = f(g, leaves).item();
    return Probe{v, g.activation_signature()};
  };
  Graph<double> g;
  std::vector<Tensor<double>> leaves;
  for (const auto &m : inputs) leaves.push_back(g.variable(m));
  Tensor<double> loss = f(g, leaves);
  g.backward(loss);
  const std::uint64_t sig = g.activation_signature();
  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat grad = leaves[k].has_grad() ? leaves[k].grad() : Mat::Zero(inputs[k].rows(), inputs[k].cols());
    probe_entries(fmt::format("input{}", k), inputs[k], grad, eval, sig, samples, h, rng, out);
  }
  return out;
}

// Projects a tensor to a scalar with fixed random weights so that every
// output entry carries a distinct upstream gradient.
inline Tensor<double> weigh(const Tensor<double> &x, std::uint64_t seed) {
  Rng rng(seed);
  Mat w = random_matrix(rng, x.rows(), x.cols());
  return sum(mul(x, x.graph().constant(std::move(w))));
}

// Gradient of the full teacher-forced loss with respect to model parameters.
// Dropout masks are replayed from `dropout_seed` on every evaluation.
inline GradCheck check_model(TransformerModel<double> &model, const TokenSeqs &src,
                             const TokenSeqs &tgt, std::uint64_t dropout_seed, Rng &rng,
                             int samples = 2, double h = 1e-5) {
  auto eval = [&]() {
    Graph<double> g;
    Rng drop(dropout_seed);
    const double v = model.loss(g, src, tgt, &drop).item();
    return Probe{v, g.activation_signature()};
  };
  model.zero_grad();
  Graph<double> g;
  Rng drop(dropout_seed);
  Tensor<double> loss = model.loss(g, src, tgt, &drop);
  g.backward(loss);
  const std::uint64_t sig = g.activation_signature();
  GradCheck out;
  for (auto &p : model.parameters()) {
    const Mat grad = p.grad();
    probe_entries(p.name(), p.value(), grad, eval, sig, samples, h, rng, out);
  }
  return out;
}

// ---- synthetic languages ------------------------------------------------

// Pronounceable made-up words: consonant-vowel syllables.
inline std::vector<std::string> make_words(std::size_t n, Rng &rng, std::size_t syllables = 2) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::vector<std::string> words;
  while (words.size() < n) {
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += consonants[rng.below(consonants.size())];
      w += vowels[rng.below(vowels.size())];
    }
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  }
  return words;
}

inline std::vector<std::string> random_sentence(const std::vector<std::string> &words, Rng &rng,
                                                std::size_t min_len, std::size_t max_len) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  std::vector<std::string> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(words[rng.below(words.size())]);
  return s;
}

// Source sentences paired with themselves.
inline ParallelCorpus copy_corpus(std::size_t pairs, const std::vector<std::string> &words,
                                  std::size_t min_len, std::size_t max_len, Rng &rng) {
  ParallelCorpus c;
  c.src_lang = "xx";
  c.tgt_lang = "yy";
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::string s = join(random_sentence(words, rng, min_len, max_len), " ");
    c.add(s, s);
  }
  return c;
}

}  // namespace nmt::testkit
