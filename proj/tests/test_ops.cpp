#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "nmt/ops.hpp"
#include "gradient_cases.hpp"
#include "support.hpp"

using namespace nmt;
using nmt::testkit::check_op;
using nmt::testkit::Mat;
using nmt::testkit::random_matrix;
using nmt::testkit::weigh;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

TEST(Graph, BackwardAccumulatesIntoSharedLeaf) {
  Graph<double> g;
  Mat a(1, 1);
  a << 3.0;
  auto x = g.variable(a);
  auto y = mul(x, x);  // x^2
  auto z = add(y, x);  // x^2 + x
  g.backward(z);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
}

TEST(Graph, SquareAndDisconnectedLeaf) {
  Graph<double> g;
  auto x = g.variable(Mat::Constant(1, 1, 3.0));
  auto unused = g.variable(Mat::Constant(1, 1, 1.0));
  g.backward(mul(x, x));
  EXPECT_EQ(x.grad()(0, 0), 6.0);
  EXPECT_FALSE(unused.has_grad());  // reads as zero
}

TEST(Graph, TwoUsesEqualTwoCopies) {
  Rng rng(8);
  Mat a = random_matrix(rng, 3, 3), w1 = random_matrix(rng, 3, 3), w2 = random_matrix(rng, 3, 3);
  Graph<double> g1;
  auto x = g1.variable(a);
  g1.backward(sum(add(matmul(x, g1.constant(w1)), matmul(x, g1.constant(w2)))));
  Graph<double> g2;
  auto x1 = g2.variable(a), x2 = g2.variable(a);
  g2.backward(sum(add(matmul(x1, g2.constant(w1)), matmul(x2, g2.constant(w2)))));
  EXPECT_LT((x.grad() - (x1.grad() + x2.grad())).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Graph, ConstantsGetNoGradient) {
  Graph<double> g;
  auto c = g.constant(Mat::Ones(2, 2));
  auto v = g.variable(Mat::Ones(2, 2));
  g.backward(sum(mul(c, v)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_TRUE(v.has_grad());
}

TEST(Graph, BackwardNeedsScalarAndRunsOnce) {
  Graph<double> g;
  auto v = g.variable(Mat::Ones(2, 2));
  EXPECT_THROW(g.backward(v), UsageError);
  auto s = sum(v);
  g.backward(s);
  EXPECT_THROW(g.backward(s), UsageError);
  EXPECT_THROW(g.variable(Mat::Ones(1, 1)), UsageError);
}

TEST(Graph, ParameterReadOncePerGraph) {
  Parameter<double> p("w", Mat::Constant(1, 1, 2.0));
  Graph<double> g;
  auto a = g.parameter(p);
  auto b = g.parameter(p);
  EXPECT_EQ(a.id(), b.id());
  g.backward(mul(a, b));
  EXPECT_DOUBLE_EQ(p.grad()(0, 0), 4.0);
}

TEST(Ops, MatmulMatchesLoops) {
  Rng rng(1);
  Mat a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
  Graph<double> g;
  Mat out = matmul(g.constant(a), g.constant(b)).value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(out(i, j), s, 1e-12);
    }
  }
  EXPECT_THROW(matmul(g.constant(a), g.constant(a)), DimensionError);
}

TEST(Ops, MatmulSmallCases) {
  Graph<double> g;
  Mat b(2, 2);
  b << 1, 2, 3, 4;
  EXPECT_EQ(matmul(g.constant(Mat::Identity(2, 2)), g.constant(b)).value(), b);
  Mat r(1, 2), c(2, 1);
  r << 1, 2;
  c << 3, 4;
  EXPECT_EQ(matmul(g.constant(r), g.constant(c)).item(), 11.0);
  try {
    matmul(g.constant(Mat::Zero(2, 3)), g.constant(Mat::Zero(2, 3)));
    FAIL();
  } catch (const DimensionError &e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
}

TEST(Ops, AddBroadcastsRows) {
  Graph<double> g;
  Mat a = Mat::Zero(3, 2), b(1, 2);
  b << 1, 2;
  Mat out = add(g.constant(a), g.constant(b)).value();
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(out(i, 0), 1);
    EXPECT_EQ(out(i, 1), 2);
  }
  EXPECT_THROW(add(g.constant(a), g.constant(Mat::Zero(1, 3))), DimensionError);
}

TEST(Ops, SoftmaxRowsSumToOneAndMaskIsExactZero) {
  Rng rng(2);
  Mat x = random_matrix(rng, 4, 5, 10.0);
  x(1, 3) = -kInf;
  x(2, 0) = -kInf;
  Graph<double> g;
  Mat p = softmax(g.constant(x)).value();
  for (int r = 0; r < 4; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  EXPECT_EQ(p(1, 3), 0.0);
  EXPECT_EQ(p(2, 0), 0.0);
  Mat pc = softmax(g.constant(x), 0).value();
  for (int c = 0; c < 5; ++c) EXPECT_NEAR(pc.col(c).sum(), 1.0, 1e-12);
}

TEST(Ops, SoftmaxClosedForms) {
  Graph<double> g;
  Mat p = softmax(g.constant(Mat::Zero(1, 3))).value();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p(0, i), 1.0 / 3, 1e-15);
  Mat x(1, 2);
  x << 0.0, std::log(3.0);
  Mat q = softmax(g.constant(x)).value();
  EXPECT_NEAR(q(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(q(0, 1), 0.75, 1e-15);
  x(0, 1) = std::nan("");
  EXPECT_THROW(softmax(g.constant(x)), NumericError);
}

TEST(Ops, SoftmaxIsShiftInvariant) {
  Rng rng(3);
  Mat x = random_matrix(rng, 2, 6);
  Graph<double> g;
  Mat a = softmax(g.constant(x)).value();
  Mat b = softmax(g.constant(Mat(x.array() + 1000.0))).value();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ops, LayerNormStandardizesRows) {
  Rng rng(4);
  Mat x = random_matrix(rng, 3, 8, 5.0);
  Graph<double> g;
  Mat y = layer_norm(g.constant(x), g.constant(Mat::Ones(1, 8)), g.constant(Mat::Zero(1, 8)), 0.0)
              .value();
  for (int r = 0; r < 3; ++r) {
    const double mean = y.row(r).mean();
    const double var = (y.row(r).array() - mean).square().mean();
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-9);
  }
}

TEST(Ops, LayerNormClosedForms) {
  Graph<double> g;
  auto ones = g.constant(Mat::Ones(1, 2)), zeros = g.constant(Mat::Zero(1, 2));
  Mat x(1, 2);
  x << 1, 3;
  Mat y = layer_norm(g.constant(x), ones, zeros, 0.0).value();
  EXPECT_NEAR(y(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(y(0, 1), 1.0, 1e-15);
  EXPECT_EQ(layer_norm(g.constant(Mat::Constant(1, 2, 7.0)), ones, zeros).value(), Mat::Zero(1, 2));
  Mat b(1, 2);
  b << 0.5, -2;
  Mat z = layer_norm(g.constant(x), zeros, g.constant(b)).value();
  EXPECT_EQ(z, b);
}

TEST(Ops, CrossEntropyClosedForms) {
  Graph<double> g;
  std::vector<int> t{1, 5};
  EXPECT_NEAR(cross_entropy(g.constant(Mat::Zero(2, 8)), t, kPadId).item(), std::log(8.0), 1e-15);
  Mat peaked = Mat::Zero(2, 8);
  peaked(0, 1) = peaked(1, 5) = 200.0;
  EXPECT_LT(cross_entropy(g.constant(peaked), t, kPadId).item(), 1e-80);
  std::vector<int> pads{kPadId, kPadId};
  EXPECT_THROW(cross_entropy(g.constant(peaked), pads, kPadId), UsageError);
  std::vector<int> out_of_range{1, 8};
  EXPECT_THROW(cross_entropy(g.constant(peaked), out_of_range, kPadId), IndexError);
}

TEST(Ops, CrossEntropySkipsPadding) {
  Mat logits(3, 4);
  logits << 1, 2, 3, 4, 0, 0, 0, 0, 5, 1, 1, 1;
  std::vector<int> targets{3, kPadId, 0};
  Graph<double> g;
  const double got = cross_entropy(g.constant(logits), targets, kPadId).item();
  auto nll = [&](int r, int t) {
    return -(logits(r, t) - std::log(logits.row(r).array().exp().sum()));
  };
  EXPECT_NEAR(got, (nll(0, 3) + nll(2, 0)) / 2, 1e-12);
}

TEST(Ops, DropoutIsIdentityWithoutRngAndPreservesMean) {
  Graph<double> g;
  Mat x = Mat::Ones(200, 50);
  EXPECT_EQ(dropout(g.constant(x), 0.3, nullptr).value(), x);
  Rng rng(5);
  Mat y = dropout(g.constant(x), 0.3, &rng).value();
  const double kept = (y.array() > 0).cast<double>().mean();
  EXPECT_NEAR(kept, 0.7, 0.02);
  EXPECT_NEAR(y.mean(), 1.0, 0.05);
  EXPECT_NEAR(y.maxCoeff(), 1.0 / 0.7, 1e-12);
  Rng again(5);
  EXPECT_EQ(dropout(g.constant(x), 0.3, &again).value(), y);
}

TEST(Ops, EmbeddingGathersAndScatterAdds) {
  Mat table(3, 2);
  table << 1, 2, 3, 4, 5, 6;
  std::vector<int> ids{2, 0, 2};
  Graph<double> g;
  auto t = g.variable(table);
  auto e = embedding(t, ids);
  EXPECT_EQ(e.value().row(0), table.row(2));
  EXPECT_EQ(e.value().row(1), table.row(0));
  g.backward(sum(e));
  EXPECT_EQ(t.grad()(2, 0), 2.0);
  EXPECT_EQ(t.grad()(1, 0), 0.0);
  std::vector<int> bad{3};
  Graph<double> g2;
  EXPECT_THROW(embedding(g2.constant(table), bad), IndexError);
}

TEST(Ops, BatchedProductsMatchPerBlockProducts) {
  Rng rng(6);
  const int B = 3, m = 2, n = 4, k = 5;
  Mat a = random_matrix(rng, B * m, k), b = random_matrix(rng, B * n, k);
  Mat c = random_matrix(rng, B * m, n), d = random_matrix(rng, B * n, k);
  Graph<double> g;
  Mat nt = batched_matmul_nt(g.constant(a), g.constant(b), B).value();
  Mat nn = batched_matmul(g.constant(c), g.constant(d), B).value();
  for (int i = 0; i < B; ++i) {
    Mat want_nt = a.middleRows(i * m, m) * b.middleRows(i * n, n).transpose();
    Mat want_nn = c.middleRows(i * m, m) * d.middleRows(i * n, n);
    EXPECT_LT((nt.middleRows(i * m, m) - want_nt).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((nn.middleRows(i * m, m) - want_nn).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Ops, ReshapeKeepsRowMajorOrder) {
  Mat x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  Graph<double> g;
  Mat y = reshape(g.constant(x), 3, 2).value();
  EXPECT_EQ(y(1, 0), 3);
  EXPECT_EQ(y(2, 1), 6);
  EXPECT_THROW(reshape(g.constant(x), 4, 2), DimensionError);
}

TEST(Ops, ConcatAndSliceRoundTrip) {
  Rng rng(7);
  Mat x = random_matrix(rng, 4, 6);
  Graph<double> g;
  auto t = g.constant(x);
  auto cols = concat({slice_cols(t, 0, 2), slice_cols(t, 2, 4)}, 1);
  auto rows = concat({slice_rows(t, 0, 1), slice_rows(t, 1, 3)}, 0);
  EXPECT_EQ(cols.value(), x);
  EXPECT_EQ(rows.value(), x);
  EXPECT_THROW(slice_cols(t, 5, 2), DimensionError);
}

TEST(GradCheck, CatchesAWrongBackwardRule) {
  // y = x^2 recorded with a deliberately wrong derivative 3x.
  auto bad_square = [](const Tensor<double> &x) {
    const std::size_t ix = x.id();
    return x.graph().record(x.value().cwiseAbs2(), {ix}, [ix](Graph<double> &gr, std::size_t self) {
      gr.accumulate(ix, Mat(3.0 * gr.grad(self).cwiseProduct(gr.value(ix))));
    });
  };
  Rng rng(9);
  const auto r = check_op([&](auto &, auto &x) { return weigh(bad_square(x[0]), 5); },
                          {random_matrix(rng, 2, 3)}, rng);
  EXPECT_GT(r.max_rel_err, 0.1);
}

// Gradient checks on a handful of seeds; the acceptance run covers 100.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, MatchCentralDifferences) {
  for (const auto &c : nmt::testkit::op_gradient_cases(GetParam())) {
    EXPECT_GT(c.check.checked, 0) << c.name;
    EXPECT_LT(c.check.max_rel_err, 1e-4) << c.name << " " << c.check.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Values(1, 2, 3, 4, 5));

}  // namespace
