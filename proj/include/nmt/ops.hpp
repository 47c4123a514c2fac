#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "nmt/rng.hpp"
#include "nmt/tensor.hpp"

// Differentiable free functions over Tensor. Every op records its own
// backward rule; shapes are [rows, cols] and a [1, n] right-hand operand of
// add() broadcasts over rows.
namespace nmt {

namespace detail {

inline void require(bool ok, const std::string &op, Shape a, Shape b) {
  if (!ok) {
    throw DimensionError(fmt::format("{}: incompatible shapes {} and {}", op, to_string(a),
                                     to_string(b)));
  }
}

template <class Scalar>
Graph<Scalar> &same_graph(const Tensor<Scalar> &a, const Tensor<Scalar> &b) {
  if (&a.graph() != &b.graph()) throw UsageError("tensors belong to different graphs");
  return a.graph();
}

template <class Scalar>
void check_finite(const Matrix<Scalar> &m, const char *op) {
  if (!m.allFinite()) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (std::isnan(m.data()[i])) throw NumericError(fmt::format("{}: NaN input", op));
    }
  }
}

}  // namespace detail

template <class Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar> &a, const Tensor<Scalar> &b) {
  Graph<Scalar> &g = detail::same_graph(a, b);
  detail::require(a.cols() == b.rows(), "matmul", a.shape(), b.shape());
  Matrix<Scalar> out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar> &gr, std::size_t self) {
    const Matrix<Scalar> &dy = gr.grad(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, dy * gr.value(ib).transpose());
    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * dy);
  });
}

// Elementwise sum. `b` may also be a [1, cols] row broadcast over a's rows.
template <class Scalar>
Tensor<Scalar> add(const Tensor<Scalar> &a, const Tensor<Scalar> &b) {
  Graph<Scalar> &g = detail::same_graph(a, b);
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && a.cols() == b.cols();
  detail::require(a.shape() == b.shape() || broadcast, "add", a.shape(), b.shape());
  Matrix<Scalar> out = a.value();
  if (broadcast) {
    out.rowwise() += b.value().row(0);
  } else {
    out += b.value();
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, broadcast](Graph<Scalar> &gr, std::size_t self) {
                    const Matrix<Scalar> &dy = gr.grad(self);
                    gr.accumulate(ia, dy);
                    if (broadcast) {
                      gr.accumulate(ib, dy.colwise().sum());
                    } else {
                      gr.accumulate(ib, dy);
                    }
                  });
}

template <class Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar> &a, const Tensor<Scalar> &b) {
  return add(a, b);
}

// Hadamard product.
template <class Scalar>
Tensor<Scalar> mul(const Tensor<Scalar> &a, const Tensor<Scalar> &b) {
  Graph<Scalar> &g = detail::same_graph(a, b);
  detail::require(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar> &gr, std::size_t self) {
    const Matrix<Scalar> &dy = gr.grad(self);
    gr.accumulate(ia, dy.cwiseProduct(gr.value(ib)));
    gr.accumulate(ib, dy.cwiseProduct(gr.value(ia)));
  });
}

template <class Scalar>
Tensor<Scalar> scale(const Tensor<Scalar> &a, Scalar factor) {
  Graph<Scalar> &g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value() * factor, {ia}, [ia, factor](Graph<Scalar> &gr, std::size_t self) {
    gr.accumulate(ia, gr.grad(self) * factor);
  });
}

template <class Scalar>
Tensor<Scalar> relu(const Tensor<Scalar> &a) {
  Graph<Scalar> &g = a.graph();
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  std::uint64_t bits = 0;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    bits = bits * 1099511628211ULL + (out.data()[i] > Scalar(0) ? 1 : 2);
  }
  g.mix_signature(bits);
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia](Graph<Scalar> &gr, std::size_t self) {
    const Matrix<Scalar> &x = gr.value(ia);
    gr.accumulate(ia, (x.array() > Scalar(0)).select(gr.grad(self), Scalar(0)));
  });
}

namespace detail {

template <class Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar> &x) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

template <class Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar> &x) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  return y;
}

}  // namespace detail

// Normalizes each slice along `axis` (0 = columns, 1 = rows). Entries equal
// to -inf receive exactly zero weight, which is how attention masks work.
template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar> &x, int axis = 1) {
  if (axis != 0 && axis != 1) throw UsageError(fmt::format("softmax: bad axis {}", axis));
  detail::check_finite(x.value(), "softmax");
  Matrix<Scalar> y = axis == 1 ? detail::softmax_rows<Scalar>(x.value())
                               : Matrix<Scalar>(detail::softmax_rows<Scalar>(
                                                    x.value().transpose())
                                                    .transpose());
  const std::size_t ix = x.id();
  return x.graph().record(std::move(y), {ix}, [ix, axis](Graph<Scalar> &gr, std::size_t self) {
    const Matrix<Scalar> &y = gr.value(self);
    const Matrix<Scalar> &dy = gr.grad(self);
    const Matrix<Scalar> prod = dy.cwiseProduct(y);
    if (axis == 1) {
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = prod.rowwise().sum();
      gr.accumulate(ix, prod - (y.array().colwise() * dot.array()).matrix());
    } else {
      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dot = prod.colwise().sum();
      gr.accumulate(ix, prod - (y.array().rowwise() * dot.array()).matrix());
    }
  });
}

// Row-wise layer normalization with a [1, cols] gain and bias.
template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar> &x, const Tensor<Scalar> &gain,
                          const Tensor<Scalar> &bias, Scalar eps = Scalar(1e-6)) {
  Graph<Scalar> &g = detail::same_graph(x, gain);
  const Shape row{1, x.cols()};
  detail::require(gain.shape() == row, "layer_norm gain", x.shape(), gain.shape());
  detail::require(bias.shape() == row, "layer_norm bias", x.shape(), bias.shape());
  const Eigen::Index n = x.cols();
  Matrix<Scalar> xhat(x.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() / Scalar(n);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix<Scalar> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.record(std::move(out), {ix, ig, ib},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<Scalar> &gr, std::size_t self) {
                    const Matrix<Scalar> &dy = gr.grad(self);
                    gr.accumulate(ig, dy.cwiseProduct(xhat).colwise().sum());
                    gr.accumulate(ib, dy.colwise().sum());
                    if (!gr.requires_grad(ix)) return;
                    const Scalar n = Scalar(xhat.cols());
                    Matrix<Scalar> dxhat = dy.array().rowwise() * gr.value(ig).row(0).array();
                    Matrix<Scalar> dx(dxhat.rows(), dxhat.cols());
                    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                      const Scalar m1 = dxhat.row(r).sum() / n;
                      const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                      dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 -
                                                xhat.row(r).array() * m2);
                    }
                    gr.accumulate(ix, dx);
                  });
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits),
// skipping rows whose target is pad_id.
template <class Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar> &logits, std::span<const int> targets,
                             int pad_id) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw DimensionError(fmt::format("cross_entropy: {} targets for logits {}", targets.size(),
                                     to_string(logits.shape())));
  }
  const Eigen::Index vocab = logits.cols();
  std::size_t count = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || t >= vocab) {
      throw IndexError(fmt::format("cross_entropy: target {} outside [0,{})", t, vocab));
    }
    ++count;
  }
  if (count == 0) throw UsageError("cross_entropy: every target is padding");
  detail::check_finite(logits.value(), "cross_entropy");
  Matrix<Scalar> logp = detail::log_softmax_rows<Scalar>(logits.value());
  Scalar total = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] != pad_id) total -= logp(static_cast<Eigen::Index>(r), targets[r]);
  }
  const Scalar denom = Scalar(count);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / denom;
  const std::size_t il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.graph().record(
      std::move(out), {il},
      [il, tg = std::move(tg), pad_id, denom, logp = std::move(logp)](Graph<Scalar> &gr,
                                                                      std::size_t self) {
        const Scalar scale = gr.grad(self)(0, 0) / denom;
        Matrix<Scalar> d = logp.array().exp();
        for (std::size_t r = 0; r < tg.size(); ++r) {
          const auto row = static_cast<Eigen::Index>(r);
          if (tg[r] == pad_id) {
            d.row(row).setZero();
          } else {
            d(row, tg[r]) -= Scalar(1);
          }
        }
        gr.accumulate(il, d * scale);
      });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate) so that
// evaluation (rng == nullptr) is the identity.
template <class Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar> &x, double rate, Rng *rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  if (rate >= 1.0) throw UsageError(fmt::format("dropout: rate {} must be < 1", rate));
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng->uniform() < rate ? Scalar(0) : keep_scale;
  }
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix},
                          [ix, mask = std::move(mask)](Graph<Scalar> &gr, std::size_t self) {
                            gr.accumulate(ix, gr.grad(self).cwiseProduct(mask));
                          });
}

// Gathers rows of `table`; the gradient scatter-adds back into those rows.
template <class Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar> &table, std::span<const int> ids) {
  const Eigen::Index vocab = table.rows();
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw IndexError(fmt::format("embedding: id {} outside [0,{})", ids[i], vocab));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  const std::size_t it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  return table.graph().record(
      std::move(out), {it}, [it, idx = std::move(idx)](Graph<Scalar> &gr, std::size_t self) {
        const Matrix<Scalar> &dy = gr.grad(self);
        Matrix<Scalar> d = Matrix<Scalar>::Zero(gr.value(it).rows(), gr.value(it).cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          d.row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
        }
        gr.accumulate(it, d);
      });
}

// Row-major reinterpretation with the same element count.
template <class Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar> &x, Eigen::Index rows, Eigen::Index cols) {
  if (rows <= 0 || cols <= 0 || rows * cols != x.value().size()) {
    throw DimensionError(fmt::format("reshape: cannot view {} as [{},{}]", to_string(x.shape()),
                                     rows, cols));
  }
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(x.value().data(), rows, cols);
  const std::size_t ix = x.id();
  const Shape from = x.shape();
  return x.graph().record(std::move(out), {ix}, [ix, from](Graph<Scalar> &gr, std::size_t self) {
    gr.accumulate(ix, Eigen::Map<const Matrix<Scalar>>(gr.grad(self).data(), from.rows,
                                                        from.cols));
  });
}

template <class Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar> &x) {
  const std::size_t ix = x.id();
  return x.graph().record(x.value().transpose(), {ix},
                          [ix](Graph<Scalar> &gr, std::size_t self) {
                            gr.accumulate(ix, gr.grad(self).transpose());
                          });
}

// Joins along columns (axis 1) or rows (axis 0).
template <class Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  if (axis != 0 && axis != 1) throw UsageError(fmt::format("concat: bad axis {}", axis));
  Graph<Scalar> &g = parts.front().graph();
  Eigen::Index rows = 0, cols = 0;
  for (const auto &p : parts) {
    detail::same_graph(parts.front(), p);
    if (axis == 1) {
      detail::require(p.rows() == parts.front().rows(), "concat", parts.front().shape(),
                      p.shape());
      cols += p.cols();
    } else {
      detail::require(p.cols() == parts.front().cols(), "concat", parts.front().shape(),
                      p.shape());
      rows += p.rows();
    }
  }
  if (axis == 1) rows = parts.front().rows();
  if (axis == 0) cols = parts.front().cols();
  Matrix<Scalar> out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto &p : parts) {
    ids.push_back(p.id());
    offsets.push_back(at);
    if (axis == 1) {
      out.middleCols(at, p.cols()) = p.value();
      at += p.cols();
    } else {
      out.middleRows(at, p.rows()) = p.value();
      at += p.rows();
    }
  }
  std::vector<std::size_t> inputs = ids;
  return g.record(std::move(out), std::move(inputs),
                  [ids, offsets, axis](Graph<Scalar> &gr, std::size_t self) {
                    const Matrix<Scalar> &dy = gr.grad(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      const Matrix<Scalar> &v = gr.value(ids[k]);
                      if (axis == 1) {
                        gr.accumulate(ids[k], dy.middleCols(offsets[k], v.cols()));
                      } else {
                        gr.accumulate(ids[k], dy.middleRows(offsets[k], v.rows()));
                      }
                    }
                  });
}

template <class Scalar>
Tensor<Scalar> concat(std::initializer_list<Tensor<Scalar>> parts, int axis) {
  return concat(std::span<const Tensor<Scalar>>(parts.begin(), parts.size()), axis);
}

template <class Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar> &x, Eigen::Index start, Eigen::Index width) {
  if (start < 0 || width <= 0 || start + width > x.cols()) {
    throw DimensionError(fmt::format("slice_cols: [{}, {}) outside {}", start, start + width,
                                     to_string(x.shape())));
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      x.value().middleCols(start, width), {ix},
      [ix, start, width](Graph<Scalar> &gr, std::size_t self) {
        Matrix<Scalar> d = Matrix<Scalar>::Zero(gr.value(ix).rows(), gr.value(ix).cols());
        d.middleCols(start, width) = gr.grad(self);
        gr.accumulate(ix, d);
      });
}

template <class Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar> &x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count <= 0 || start + count > x.rows()) {
    throw DimensionError(fmt::format("slice_rows: [{}, {}) outside {}", start, start + count,
                                     to_string(x.shape())));
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      x.value().middleRows(start, count), {ix},
      [ix, start, count](Graph<Scalar> &gr, std::size_t self) {
        Matrix<Scalar> d = Matrix<Scalar>::Zero(gr.value(ix).rows(), gr.value(ix).cols());
        d.middleRows(start, count) = gr.grad(self);
        gr.accumulate(ix, d);
      });
}

// Block-diagonal products for a batch of `batches` sequences stacked along
// rows. a is [B*m, k], b is [B*n, k]; the result stacks a_i * b_iᵀ as [B*m, n].
template <class Scalar>
Tensor<Scalar> batched_matmul_nt(const Tensor<Scalar> &a, const Tensor<Scalar> &b,
                                 Eigen::Index batches) {
  Graph<Scalar> &g = detail::same_graph(a, b);
  detail::require(batches > 0 && a.rows() % batches == 0 && b.rows() % batches == 0 &&
                      a.cols() == b.cols(),
                  "batched_matmul_nt", a.shape(), b.shape());
  const Eigen::Index m = a.rows() / batches, n = b.rows() / batches;
  Matrix<Scalar> out(a.rows(), n);
  for (Eigen::Index i = 0; i < batches; ++i) {
    out.middleRows(i * m, m).noalias() =
        a.value().middleRows(i * m, m) * b.value().middleRows(i * n, n).transpose();
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, batches, m, n](Graph<Scalar> &gr, std::size_t self) {
                    const Matrix<Scalar> &dy = gr.grad(self);
                    const Matrix<Scalar> &av = gr.value(ia);
                    const Matrix<Scalar> &bv = gr.value(ib);
                    Matrix<Scalar> da(av.rows(), av.cols());
                    Matrix<Scalar> db(bv.rows(), bv.cols());
                    for (Eigen::Index i = 0; i < batches; ++i) {
                      da.middleRows(i * m, m).noalias() =
                          dy.middleRows(i * m, m) * bv.middleRows(i * n, n);
                      db.middleRows(i * n, n).noalias() =
                          dy.middleRows(i * m, m).transpose() * av.middleRows(i * m, m);
                    }
                    gr.accumulate(ia, da);
                    gr.accumulate(ib, db);
                  });
}

// a is [B*m, n], b is [B*n, k]; the result stacks a_i * b_i as [B*m, k].
template <class Scalar>
Tensor<Scalar> batched_matmul(const Tensor<Scalar> &a, const Tensor<Scalar> &b,
                              Eigen::Index batches) {
  Graph<Scalar> &g = detail::same_graph(a, b);
  detail::require(batches > 0 && a.rows() % batches == 0 && b.rows() == batches * a.cols(),
                  "batched_matmul", a.shape(), b.shape());
  const Eigen::Index m = a.rows() / batches, n = a.cols();
  Matrix<Scalar> out(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < batches; ++i) {
    out.middleRows(i * m, m).noalias() =
        a.value().middleRows(i * m, m) * b.value().middleRows(i * n, n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, batches, m, n](Graph<Scalar> &gr, std::size_t self) {
                    const Matrix<Scalar> &dy = gr.grad(self);
                    const Matrix<Scalar> &av = gr.value(ia);
                    const Matrix<Scalar> &bv = gr.value(ib);
                    Matrix<Scalar> da(av.rows(), av.cols());
                    Matrix<Scalar> db(bv.rows(), bv.cols());
                    for (Eigen::Index i = 0; i < batches; ++i) {
                      da.middleRows(i * m, m).noalias() =
                          dy.middleRows(i * m, m) * bv.middleRows(i * n, n).transpose();
                      db.middleRows(i * n, n).noalias() =
                          av.middleRows(i * m, m).transpose() * dy.middleRows(i * m, m);
                    }
                    gr.accumulate(ia, da);
                    gr.accumulate(ib, db);
                  });
}

template <class Scalar>
Tensor<Scalar> sum(const Tensor<Scalar> &x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar> &gr, std::size_t self) {
    const Matrix<Scalar> &v = gr.value(ix);
    gr.accumulate(ix, Matrix<Scalar>::Constant(v.rows(), v.cols(), gr.grad(self)(0, 0)));
  });
}

template <class Scalar>
Tensor<Scalar> mean(const Tensor<Scalar> &x) {
  return scale(sum(x), Scalar(1) / Scalar(x.value().size()));
}

}  // namespace nmt
