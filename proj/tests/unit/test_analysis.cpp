// SPDX-License-Identifier: Apache-2.0

#include <condnet/analysis.hpp>
#include <condnet/cost.hpp>
#include <condnet/trainer.hpp>

#include "support/nets.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace condnet;
using condnet::testing::random_params;
using condnet::testing::random_tensor;

namespace {

/// Textbook two-pass Pearson coefficient.
double pearson(const std::vector<double> &x, const std::vector<double> &y) {
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> column(const Tensor<double> &t, std::size_t c) {
  std::vector<double> out;
  for (std::size_t r = 0; r < t.dim(0); ++r)
    out.push_back(t[r * t.dim(1) + c]);
  return out;
}

/// a, and b = a mixed with noise so the coefficients are far from zero.
std::pair<Tensor<double>, Tensor<double>> paired(std::size_t N, std::mt19937_64 &rng) {
  const Tensor<double> a = random_tensor<double>({N, 3}, rng, -2, 5);
  Tensor<double> b = random_tensor<double>({N, 4}, rng);
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t j = 0; j < 4; ++j)
      b[s * 4 + j] += (j % 2 ? -1.0 : 0.7) * a[s * 3 + j % 3];
  return {a, b};
}

} // namespace

TEST(Correlation, MatchesTwoPassOracle) {
  std::mt19937_64 rng(61);
  const auto [a, b] = paired(500, rng);
  CorrelationAccumulator acc(3, 4);
  acc.add(a.rows(0, 123), b.rows(0, 123));
  acc.add(a.rows(123, 500), b.rows(123, 500));
  EXPECT_EQ(acc.samples(), 500u);
  const Tensor<double> lam = acc.correlation();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(lam[i * 4 + j], pearson(column(a, i), column(b, j)), 1e-10);
}

TEST(Correlation, SampleOrderDoesNotChangeAnyBit) {
  std::mt19937_64 rng(62);
  const auto [a, b] = paired(300, rng);
  std::vector<std::size_t> perm(300);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> pa({300, 3}), pb({300, 4});
  for (std::size_t s = 0; s < 300; ++s) {
    std::copy_n(a.ptr() + perm[s] * 3, 3, pa.ptr() + s * 3);
    std::copy_n(b.ptr() + perm[s] * 4, 4, pb.ptr() + s * 4);
  }
  CorrelationAccumulator x(3, 4), y(3, 4);
  x.add(a, b);
  for (std::size_t lo = 0; lo < 300; lo += 7)
    y.add(pa.rows(lo, std::min<std::size_t>(300, lo + 7)),
          pb.rows(lo, std::min<std::size_t>(300, lo + 7)));
  EXPECT_EQ(x.correlation(), y.correlation());
}

TEST(Correlation, DegenerateCases) {
  CorrelationAccumulator acc(2, 2);
  acc.add(Tensor<double>({3, 2}, {1, 5, 2, 5, 3, 5}), Tensor<double>({3, 2}, {2, -1, 4, -2, 6, -3}));
  const Tensor<double> lam = acc.correlation();
  EXPECT_DOUBLE_EQ(lam[0], 1.0);   // perfectly correlated
  EXPECT_DOUBLE_EQ(lam[1], -1.0);  // anti-correlated
  EXPECT_EQ(lam[2], 0.0);          // constant unit
  EXPECT_EQ(lam[3], 0.0);
  EXPECT_THROW(CorrelationAccumulator(1, 1).correlation(), ArgumentError);
  EXPECT_THROW(acc.add(Tensor<double>({1, 3}), Tensor<double>({1, 2})), DimensionError);
}

TEST(Units, FeatureMapsAverageOverSpace) {
  const Tensor<double> v({1, 2, 2, 2}, {1, 2, 3, 6, -1, -1, -1, -1});
  const Tensor<double> u = unit_activations(v);
  EXPECT_EQ(u.shape(), (Shape{1, 2}));
  EXPECT_EQ(u[0], 3.0);
  EXPECT_EQ(u[1], -1.0);
  const Tensor<double> flat({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(unit_activations(flat), flat);
}

TEST(LayerCorrelation, MatchesManualAccumulation) {
  ArchSpec a;
  a.input_shape = {3};
  a.nodes = {make_fc("h", kInputNode, 5, Activation::Sigmoid),
             make_fc("out", "h", 2, Activation::Identity)};
  a.output = "out";
  const Graph g(a);
  std::mt19937_64 rng(63);
  ParamStore<double> ps = random_params<double>(g, rng, 2.0);
  Dataset d;
  d.images = random_tensor<float>({90, 3}, rng);
  d.labels.assign(90, 0);
  d.classes = 2;
  const CorrelationMatrix cm = activation_correlation(g, ps, d, kInputNode, "h", 32);
  EXPECT_EQ(cm.samples, 90u);
  EXPECT_EQ(cm.lambda.shape(), (Shape{3, 5}));
  const Tensor<double> x = d.images.cast<double>();
  const Tensor<double> h = [&] {
    ArchSpec hs = a;
    hs.output = "h";
    return forward(Graph(hs), ps, x).value();
  }();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      EXPECT_NEAR(cm.lambda[i * 5 + j], pearson(column(x, i), column(h, j)), 1e-10);

  EXPECT_THROW(activation_correlation(g, ps, d, "h", "nope"), ArgumentError);
  EXPECT_THROW(activation_correlation(g, ps, d, "out", "h"), ArgumentError);
  EXPECT_THROW(activation_correlation(g, ps, d.subset({}), kInputNode, "h"), ArgumentError);
}

TEST(Reorder, RecoversAHandBlockMatrix) {
  // Rows {0, 2} go with columns {1, 3}; rows {1, 3} with columns {0, 2}.
  const Tensor<double> lam({4, 4}, {0.0, 0.9, 0.1, -0.8,  //
                                    0.7, 0.0, 0.9, 0.05,  //
                                    0.1, -0.8, 0.0, 0.9,  //
                                    0.9, 0.1, -0.6, 0.0});
  const BlockOrdering ord = reorder_block_diagonal(lam, 2);
  EXPECT_EQ(ord.row_block, (std::vector<std::size_t>{0, 1, 0, 1}));
  EXPECT_EQ(ord.col_block, (std::vector<std::size_t>{1, 0, 1, 0}));
  EXPECT_EQ(ord.row_perm, (std::vector<std::size_t>{0, 2, 1, 3}));
  EXPECT_EQ(ord.col_perm, (std::vector<std::size_t>{1, 3, 0, 2}));
  const Tensor<double> p = permute(lam, ord);
  EXPECT_EQ(p[0], 0.9);  // (row 0, col 1)
  EXPECT_EQ(p[15], -0.6); // (row 3, col 2)
  EXPECT_NEAR(ord.within_mass, 0.9 + 0.8 + 0.8 + 0.9 + 0.7 + 0.9 + 0.9 + 0.6, 1e-12);
  EXPECT_THROW(reorder_block_diagonal(lam, 0), ArgumentError);
  EXPECT_THROW(reorder_block_diagonal(lam, 5), ArgumentError);
}

TEST(Reorder, SyntheticBlocksAreRecovered) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const SyntheticBlocks s = synthetic_block_matrix(18, 15, 3, 0.05, seed);
    const BlockOrdering ord = reorder_block_diagonal(s.lambda, 3);
    EXPECT_EQ(block_recall(ord, s.row_block, s.col_block), 1.0) << seed;
    EXPECT_EQ(block_agreement(ord, s.row_block, s.col_block), 1.0) << seed;
  }
}

TEST(Reorder, SyntheticMatrixIsDeterministic) {
  const SyntheticBlocks a = synthetic_block_matrix(9, 6, 3, 0.1, 4);
  const SyntheticBlocks b = synthetic_block_matrix(9, 6, 3, 0.1, 4);
  EXPECT_EQ(a.lambda, b.lambda);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const double v = std::abs(a.lambda[i * 6 + j]);
      if (a.row_block[i] == a.col_block[j])
        EXPECT_GE(v, 0.5);
      else
        EXPECT_LE(v, 0.1);
    }
}

TEST(ZeroBlocks, KeepsOnlyWithinBlockEntries) {
  const SyntheticBlocks s = synthetic_block_matrix(8, 6, 2, 0.2, 9);
  const BlockOrdering ord = reorder_block_diagonal(s.lambda, 2);
  const ZeroedBlocks z = zero_off_diagonal(s.lambda, ord);
  double kept = 0, total = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      total += std::abs(s.lambda[i * 6 + j]);
      if (ord.row_block[i] == ord.col_block[j]) {
        EXPECT_EQ(z.lambda[i * 6 + j], s.lambda[i * 6 + j]);
        kept += std::abs(s.lambda[i * 6 + j]);
      } else {
        EXPECT_EQ(z.lambda[i * 6 + j], 0.0);
      }
    }
  EXPECT_NEAR(z.retained_fraction, kept / total, 1e-12);
  ASSERT_EQ(z.row_groups.size(), 2u);
  EXPECT_EQ(z.row_groups[0].size() + z.row_groups[1].size(), 8u);
}

TEST(RoutedPerceptron, EqualsTheMaskedDenseLayer) {
  const SyntheticBlocks s = synthetic_block_matrix(6, 9, 3, 0.1, 12);
  const ZeroedBlocks z = zero_off_diagonal(s.lambda, reorder_block_diagonal(s.lambda, 3));
  for (bool bias : {true, false}) {
    const ArchSpec routed = routed_perceptron(z, 6, Activation::Sigmoid, bias);
    EXPECT_EQ(Graph(routed).output_dim(), 9u);
    std::mt19937_64 rng(13);
    const Tensor<double> dense = random_tensor<double>({9, 6 + (bias ? 1u : 0u)}, rng);
    ParamStore<double> rp = routed_params_from_dense(z, dense, bias);

    ArchSpec flat;
    flat.input_shape = {6};
    flat.nodes = {make_fc("fc", kInputNode, 9, Activation::Sigmoid, bias)};
    flat.output = "fc";
    ParamStore<double> dp;
    dp.set("fc.w", mask_dense(z, dense, bias));

    const Tensor<double> x = random_tensor<double>({5, 6}, rng);
    const Tensor<double> yr = forward(Graph(routed), rp, x).value();
    const Tensor<double> yd = forward(Graph(flat), dp, x).value();
    for (std::size_t i = 0; i < yr.numel(); ++i)
      EXPECT_NEAR(yr[i], yd[i], 1e-12);
    // The routed layer costs less than the dense one it replaces.
    EXPECT_LT(static_cost(Graph(routed)).total_macs, 9u * (6u + (bias ? 1u : 0u)));
  }
}

TEST(MatrixCsv, OneLinePerRow) {
  EXPECT_EQ(matrix_csv(Tensor<double>({2, 2}, {1, 0.5, -2, 0})), "1,0.5\n-2,0\n");
}
