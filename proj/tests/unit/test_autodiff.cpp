// SPDX-License-Identifier: Apache-2.0
// Layer primitives against naive loops, and gradients against finite
// differences.

#include <condnet/autodiff.hpp>

#include "support/nets.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace condnet;
using condnet::testing::random_tensor;

namespace {

template <typename T> Tensor<T> run_fc(const Tensor<T> &x, Param<T> &p, bool bias, Activation act) {
  Tape<T> tape;
  const VarId v = ops::fc(tape, tape.input(x), p, bias, act);
  return tape.value(v);
}

template <typename T>
Tensor<T> run_conv(const Tensor<T> &x, Param<T> &w, const ConvGeometry &g, Activation act) {
  Tape<T> tape;
  const VarId v = ops::conv2d(tape, tape.input(x), w, g, act);
  return tape.value(v);
}

} // namespace

TEST(Fc, ZeroInputWithZeroBiasGivesZero) {
  std::mt19937_64 rng(1);
  Param<float> p("p", random_tensor<float>({4, 4}, rng));
  for (std::size_t o = 0; o < 4; ++o)
    p.value[o * 4 + 3] = 0.0f; // bias column
  const Tensor<float> y = run_fc(Tensor<float>({2, 3}), p, true, Activation::ReLU);
  for (float v : y.storage())
    EXPECT_EQ(v, 0.0f);
}

TEST(Fc, IdentityProjectionReturnsInput) {
  Param<double> p("p", Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  const Tensor<double> x({2, 3}, {1, -2, 3, 0.5, 0.25, -8});
  EXPECT_EQ(run_fc(x, p, false, Activation::Identity), x);
}

TEST(Fc, SigmoidMatchesScalarLoop) {
  std::mt19937_64 rng(2);
  const Tensor<double> x = random_tensor<double>({2, 3}, rng);
  Param<double> p("p", random_tensor<double>({4, 4}, rng));
  const Tensor<double> y = run_fc(x, p, true, Activation::Sigmoid);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t o = 0; o < 4; ++o) {
      double z = p.value[o * 4 + 3];
      for (std::size_t i = 0; i < 3; ++i)
        z += p.value[o * 4 + i] * x[b * 3 + i];
      EXPECT_NEAR(y[b * 4 + o], 1.0 / (1.0 + std::exp(-z)), 1e-6);
    }
  EXPECT_EQ(reference::fc_naive(x, p.value, true).shape(), (Shape{2, 4}));
}

TEST(Fc, ShapeMismatchNamesBothShapes) {
  Param<float> p("p", Tensor<float>({2, 5}));
  try {
    run_fc(Tensor<float>({1, 3}), p, true, Activation::Identity);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x5]"), std::string::npos) << msg;
  }
}

TEST(Conv, OneByOneIdentityKernelReturnsInput) {
  std::mt19937_64 rng(3);
  const Tensor<double> x = random_tensor<double>({2, 3, 4, 5}, rng);
  Tensor<double> w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c)
    w[c * 3 + c] = 1.0;
  Param<double> p("w", w);
  EXPECT_EQ(run_conv(x, p, {1, 1, 0, 0}, Activation::Identity), x);
}

TEST(Conv, MatchesNaiveLoopForGroupsStrideAndPadding) {
  std::mt19937_64 rng(4);
  for (std::size_t g : {1u, 2u, 4u})
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u}) {
        const Tensor<double> x = random_tensor<double>({2, 4, 6, 5}, rng);
        Param<double> w("w", random_tensor<double>({8, 4 / g, 3, 3}, rng));
        const ConvGeometry geom{g, stride, pad, pad};
        const Tensor<double> got = run_conv(x, w, geom, Activation::Identity);
        const Tensor<double> want = reference::conv2d_naive(x, w.value, geom);
        ASSERT_EQ(got.shape(), want.shape());
        for (std::size_t i = 0; i < got.numel(); ++i)
          ASSERT_NEAR(got[i], want[i], 1e-12) << "g=" << g << " stride=" << stride;
      }
}

TEST(Conv, GroupedEqualsBlockMaskedDense) {
  std::mt19937_64 rng(5);
  const Tensor<float> x = random_tensor<float>({3, 4, 5, 5}, rng);
  Param<float> grouped("w", random_tensor<float>({4, 2, 3, 3}, rng));
  // Dense weight with the grouped block on the diagonal and zeros elsewhere.
  Tensor<float> dense({4, 4, 3, 3});
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t ci = 0; ci < 2; ++ci)
      for (std::size_t k = 0; k < 9; ++k)
        dense[(o * 4 + (o / 2) * 2 + ci) * 9 + k] = grouped.value[(o * 2 + ci) * 9 + k];
  Param<float> dp("d", dense);
  const Tensor<float> a = run_conv(x, grouped, {2, 1, 1, 1}, Activation::ReLU);
  const Tensor<float> b = run_conv(x, dp, {1, 1, 1, 1}, Activation::ReLU);
  for (std::size_t i = 0; i < a.numel(); ++i)
    EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Conv, GroupLocalityIsExact) {
  std::mt19937_64 rng(6);
  Tensor<float> x = random_tensor<float>({2, 4, 5, 5}, rng);
  Param<float> w("w", random_tensor<float>({4, 2, 3, 3}, rng));
  const Tensor<float> before = run_conv(x, w, {2, 1, 1, 1}, Activation::Sigmoid);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 2; c < 4; ++c)
      for (std::size_t p = 0; p < 25; ++p)
        x[(b * 4 + c) * 25 + p] = 0.0f;
  const Tensor<float> after = run_conv(x, w, {2, 1, 1, 1}, Activation::Sigmoid);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 25; ++p)
        EXPECT_EQ(before[(b * 4 + c) * 25 + p], after[(b * 4 + c) * 25 + p]);
}

TEST(Conv, NonDividingGroupsAreAConfigError) {
  Param<float> w("w", Tensor<float>({3, 2, 3, 3}));
  EXPECT_THROW(run_conv(Tensor<float>({1, 4, 5, 5}), w, {2, 1, 1, 1}, Activation::Identity),
               ConfigError);
}

TEST(Pooling, GlobalMaxPool) {
  std::mt19937_64 rng(7);
  const Tensor<double> x = random_tensor<double>({2, 3, 4, 4}, rng);
  Tape<double> tape;
  const Tensor<double> y = tape.value(ops::global_max_pool(tape, tape.input(x)));
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t bc = 0; bc < 6; ++bc) {
    double m = x[bc * 16];
    for (std::size_t p = 1; p < 16; ++p)
      m = std::max(m, x[bc * 16 + p]);
    EXPECT_EQ(y[bc], m);
  }
  Tape<double> t2;
  const Tensor<double> c = t2.value(ops::global_max_pool(t2, t2.input(Tensor<double>({1, 2, 3, 3}, 4.5))));
  EXPECT_EQ(c.storage(), (std::vector<double>{4.5, 4.5}));
  Tape<double> t3;
  const Tensor<double> one = t3.value(ops::global_max_pool(t3, t3.input(Tensor<double>({1, 1, 1, 1}, -3.0))));
  EXPECT_EQ(one[0], -3.0);
}

TEST(Pooling, MaxPoolTieRoutesGradientToFirstElement) {
  Tape<double> tape;
  const VarId x = tape.input(Tensor<double>({1, 1, 2, 2}, 1.0));
  const VarId y = ops::max_pool(tape, x, 2, 2);
  tape.backward(y, Tensor<double>({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(tape.grad(x).storage(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Activations, DefinitionExamples) {
  const Tensor<double> v({1, 3}, {-1, 0, 2});
  EXPECT_EQ(apply_activation(v, Activation::ReLU).storage(), (std::vector<double>{0, 0, 2}));
  const Tensor<double> s = softmax_rows(Tensor<double>({1, 2}, {0, 0}));
  EXPECT_EQ(s.storage(), (std::vector<double>{0.5, 0.5}));
}

TEST(Activations, SoftmaxIsAProbabilityVector) {
  std::mt19937_64 rng(8);
  const Tensor<float> x = random_tensor<float>({16, 7}, rng, -30, 30);
  const Tensor<float> s = softmax_rows(x);
  for (std::size_t b = 0; b < 16; ++b) {
    double total = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      EXPECT_GE(s[b * 7 + k], 0.0f);
      total += s[b * 7 + k];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Concat, PreservesOrderAndChecksShapes) {
  Tape<float> tape;
  const VarId a = tape.input(Tensor<float>({2, 1}, {1, 2}));
  const VarId b = tape.input(Tensor<float>({2, 2}, {3, 4, 5, 6}));
  const VarId ab[] = {a, b};
  EXPECT_EQ(tape.value(ops::concat<float>(tape, ab)).storage(),
            (std::vector<float>{1, 3, 4, 2, 5, 6}));
  const VarId only[] = {a};
  EXPECT_EQ(tape.value(ops::concat<float>(tape, only)), tape.value(a));
  const VarId c = tape.input(Tensor<float>({3, 1}));
  const VarId bad[] = {a, c};
  EXPECT_THROW(ops::concat<float>(tape, bad), DimensionError);
}

TEST(Backward, ZeroResidualGivesZeroGradients) {
  std::mt19937_64 rng(9);
  Param<double> p("p", random_tensor<double>({2, 4}, rng));
  Tape<double> tape;
  ops::fc(tape, tape.input(random_tensor<double>({3, 3}, rng)), p, true, Activation::Sigmoid);
  tape.backward(Tensor<double>({3, 2})); // d/dy of 0.5|y - y*|^2 at y = y*
  for (double g : p.grad.storage())
    EXPECT_EQ(g, 0.0);
}

TEST(Backward, FcGradientIsOuterProduct) {
  std::mt19937_64 rng(10);
  const Tensor<double> x = random_tensor<double>({1, 3}, rng);
  Param<double> p("p", random_tensor<double>({2, 4}, rng));
  Tape<double> tape;
  ops::fc(tape, tape.input(x), p, true, Activation::Identity);
  const Tensor<double> up({1, 2}, {0.7, -1.3});
  tape.backward(up);
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_DOUBLE_EQ(p.grad[o * 4 + i], up[o] * x[i]);
    EXPECT_DOUBLE_EQ(p.grad[o * 4 + 3], up[o]); // homogeneous coordinate
  }
}

TEST(Backward, BeforeForwardIsAStateError) {
  Tape<double> tape;
  EXPECT_THROW(tape.backward(Tensor<double>({1})), StateError);
}

TEST(Backward, UnreachedParamsKeepZeroGrad) {
  std::mt19937_64 rng(11);
  Param<double> used("a", random_tensor<double>({2, 3}, rng));
  Param<double> unused("b", random_tensor<double>({2, 3}, rng));
  Tape<double> tape;
  ops::fc(tape, tape.input(random_tensor<double>({1, 2}, rng)), used, true, Activation::Identity);
  tape.backward(Tensor<double>({1, 2}, 1.0));
  for (double g : unused.grad.storage())
    EXPECT_EQ(g, 0.0);
}

TEST(FiniteDifference, QuadraticIsExact) {
  ParamStore<double> ps;
  ps.set("p", Tensor<double>({1}, {3.0}));
  const ScalarObjective<double> f = [](ParamStore<double> &s, bool grad) {
    const double p = s.at("p").value[0];
    if (grad)
      s.at("p").grad[0] = 2 * p;
    return p * p;
  };
  const FdReport r = finite_difference_check(f, ps, 1e-3);
  EXPECT_EQ(r.analytic, 6.0);
  EXPECT_NEAR(r.numeric, 6.0, 1e-12);
  EXPECT_LE(r.max_rel_error, 1e-12);
}

TEST(FiniteDifference, ConstantReportsZero) {
  ParamStore<double> ps;
  ps.set("p", Tensor<double>({3}, {1, 2, 3}));
  const ScalarObjective<double> f = [](ParamStore<double> &, bool) { return 4.0; };
  EXPECT_EQ(finite_difference_check(f, ps, 1e-3).max_rel_error, 0.0);
}

TEST(FiniteDifference, NonFiniteObjectiveIsAnEvaluationError) {
  ParamStore<double> ps;
  ps.set("p", Tensor<double>({1}, {1.0}));
  const ScalarObjective<double> f = [](ParamStore<double> &, bool) { return std::nan(""); };
  EXPECT_THROW(finite_difference_check(f, ps, 1e-3), EvaluationError);
}

TEST(FiniteDifference, PrimitiveCompositeGradients) {
  // conv (groups 2, stride 2) -> sigmoid -> max-pool -> flatten -> fc softmax,
  // all parameters checked.
  std::mt19937_64 rng(12);
  const Tensor<double> x = random_tensor<double>({2, 4, 6, 6}, rng);
  ParamStore<double> ps;
  ps.set("w", random_tensor<double>({4, 2, 3, 3}, rng));
  ps.set("p", random_tensor<double>({3, 4 * 2 * 2 + 1}, rng));
  const Tensor<double> target({2, 3}, {1, 0, 0, 0, 0, 1});
  const ScalarObjective<double> f = [&](ParamStore<double> &s, bool grad) {
    Tape<double> tape;
    VarId v = ops::conv2d(tape, tape.input(x), s.at("w"), {2, 2, 1, 1}, Activation::Sigmoid);
    v = ops::max_pool(tape, v, 2, 1);
    v = ops::flatten(tape, v);
    v = ops::fc(tape, v, s.at("p"), true, Activation::Softmax);
    const Tensor<double> &y = tape.value(v);
    double loss = 0.0;
    Tensor<double> g(y.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) {
      loss += 0.5 * (y[i] - target[i]) * (y[i] - target[i]);
      g[i] = y[i] - target[i];
    }
    if (grad)
      tape.backward(g);
    return loss;
  };
  EXPECT_LE(finite_difference_check(f, ps, 1e-3).max_rel_error, 1e-4);
}

TEST(Determinism, IdenticalInputsGiveIdenticalBits) {
  std::mt19937_64 a(13), b(13);
  const Tensor<float> xa = random_tensor<float>({2, 4, 5, 5}, a);
  const Tensor<float> xb = random_tensor<float>({2, 4, 5, 5}, b);
  Param<float> wa("w", random_tensor<float>({6, 2, 3, 3}, a));
  Param<float> wb("w", random_tensor<float>({6, 2, 3, 3}, b));
  EXPECT_EQ(run_conv(xa, wa, {2, 1, 1, 1}, Activation::ReLU),
            run_conv(xb, wb, {2, 1, 1, 1}, Activation::ReLU));
}
