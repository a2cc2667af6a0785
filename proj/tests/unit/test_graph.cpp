// SPDX-License-Identifier: Apache-2.0
// Routed forward/backward, policies and the dense rewrite.

#include <condnet/graph.hpp>

#include "support/nets.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace condnet;
using condnet::testing::random_params;
using condnet::testing::random_tensor;

namespace {

template <typename T>
Tensor<T> eval_node(const ArchSpec &arch, const std::string &node, ParamStore<T> &ps,
                    const Tensor<T> &x) {
  ArchSpec a = arch;
  a.output = node;
  const Graph g(a);
  return forward(g, ps, x).value();
}

/// Depth-2 tree of identity transforms: every leaf returns the input.
ArchSpec identity_tree() {
  ArchSpec a;
  a.input_shape = {3};
  a.nodes = {make_router("r0", kInputNode, 2, RouterInput::Raw),
             make_identity("a", kInputNode),
             make_identity("b", kInputNode),
             make_router("ra", "a", 2, RouterInput::Raw),
             make_identity("a0", "a"),
             make_identity("a1", "a"),
             make_combine("ca", "ra", {"a0", "a1"}),
             make_router("rb", "b", 2, RouterInput::Raw),
             make_identity("b0", "b"),
             make_identity("b1", "b"),
             make_combine("cb", "rb", {"b0", "b1"}),
             make_combine("root", "r0", {"ca", "cb"})};
  a.output = "root";
  return a;
}

} // namespace

TEST(Router, UniformForEqualLogits) {
  Param<double> p("r", Tensor<double>({3, 3})); // zero weights -> equal logits
  const Tensor<double> r = router_forward(Tensor<double>({1, 2}, {0.3, -1}), p, RouterInput::Raw);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(r[j], 1.0 / 3.0, 1e-15);
}

TEST(Router, SaturatesAndMatchesHandSoftmax) {
  Param<double> p("r", Tensor<double>({2, 2}, {0, 1.0, 0, 0})); // logits (1, 0) from bias
  const Tensor<double> r = router_forward(Tensor<double>({1, 1}, {5.0}), p, RouterInput::Raw);
  EXPECT_NEAR(r[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-12);
  EXPECT_NEAR(r[0], 0.7311, 1e-4);
  EXPECT_NEAR(r[1], 0.2689, 1e-4);

  Param<double> big("r", Tensor<double>({2, 2}, {0, 50.0, 0, -50.0}));
  const Tensor<double> s = router_forward(Tensor<double>({1, 1}, {0.0}), big, RouterInput::Raw);
  EXPECT_NEAR(s[0], 1.0, 1e-6);
  EXPECT_NEAR(s[1], 0.0, 1e-6);
}

TEST(Router, PooledSummaryReadsChannelMaxima) {
  Tensor<double> v({1, 2, 2, 2}, {1, 5, 2, 3, -1, -4, -2, -3});
  Param<double> p("r", Tensor<double>({2, 3}, {1, 0, 0, 0, 1, 0}));
  const Tensor<double> r = router_forward(v, p, RouterInput::Pooled);
  EXPECT_NEAR(r[0], std::exp(5.0) / (std::exp(5.0) + std::exp(-1.0)), 1e-12);
}

TEST(Policy, HandExamples) {
  const std::vector<double> r{0.5, 0.3, 0.2};
  const auto top2 = apply_policy<double>(r, RoutingPolicy::top(2));
  EXPECT_DOUBLE_EQ(top2.weights[0], 0.625);
  EXPECT_DOUBLE_EQ(top2.weights[1], 0.375);
  EXPECT_EQ(top2.weights[2], 0.0);
  EXPECT_EQ(top2.visited, (std::vector<std::uint8_t>{1, 1, 0}));

  const auto all = apply_policy<double>(r, RoutingPolicy::top(3));
  EXPECT_EQ(all.weights, r);
  EXPECT_EQ(apply_policy<double>(r, RoutingPolicy::soft()).weights, r);

  const std::vector<double> q{0.2, 0.8};
  const auto hard = apply_policy<double>(q, RoutingPolicy::hard());
  EXPECT_EQ(hard.weights, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(apply_policy<double>(q, RoutingPolicy::top(1)).weights, hard.weights);
}

TEST(Policy, TiesGoToLowerIndexAndRangeIsChecked) {
  const std::vector<double> r{0.25, 0.25, 0.25, 0.25};
  const auto top2 = apply_policy<double>(r, RoutingPolicy::top(2));
  EXPECT_EQ(top2.visited, (std::vector<std::uint8_t>{1, 1, 0, 0}));
  EXPECT_THROW(apply_policy<double>(r, RoutingPolicy::top(0)), ConfigError);
  EXPECT_THROW(apply_policy<double>(r, RoutingPolicy::top(5)), ConfigError);
}

TEST(Policy, WithoutRenormalizationSurvivorsKeepTheirWeight) {
  const std::vector<double> r{0.5, 0.3, 0.2};
  const auto top2 = apply_policy<double>(r, RoutingPolicy::top(2, false));
  EXPECT_EQ(top2.weights, (std::vector<double>{0.5, 0.3, 0.0}));
}

TEST(Forward, SoftMatchesAllRoutesWeightedSum) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    ArchSpec a = condnet::testing::random_routed_arch(rng, trial % 2 == 0);
    a.output = "mix";
    const Graph g(a);
    ParamStore<double> ps = random_params<double>(g, rng);
    const Tensor<double> x = random_tensor<double>(
        [&] { Shape s{3}; s.insert(s.end(), a.input_shape.begin(), a.input_shape.end()); return s; }(),
        rng);
    const Tensor<double> got = forward(g, ps, x).value();
    const NodeSpec &router = *a.find("router");
    const Tensor<double> trunk = eval_node(a, "trunk", ps, x);
    const Tensor<double> r = router_forward(trunk, ps.at("router.w"), router.router_input);
    const std::size_t R = router.routes, per = got.numel() / 3;
    Tensor<double> want(got.shape());
    for (std::size_t j = 0; j < R; ++j) {
      const Tensor<double> v = eval_node(a, "route" + std::to_string(j), ps, x);
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t k = 0; k < per; ++k)
          want[b * per + k] += r[b * R + j] * v[b * per + k];
    }
    for (std::size_t i = 0; i < got.numel(); ++i)
      EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Forward, HardRoutingReturnsTheChosenRouteExactly) {
  std::mt19937_64 rng(22);
  ArchSpec a = condnet::testing::random_routed_arch(rng, false);
  a.output = "mix";
  const Graph g(a);
  ParamStore<double> ps = random_params<double>(g, rng, 2.0);
  const Tensor<double> x = random_tensor<double>({6, a.input_shape[0]}, rng);
  const ForwardResult<double> fr = forward(g, ps, x, RoutingPolicy::hard());
  EXPECT_FALSE(fr.differentiable);
  const RoutedOutputs<double> &ro = fr.routed("router");
  const std::size_t per = fr.value().numel() / 6;
  for (std::size_t b = 0; b < 6; ++b) {
    std::size_t chosen = 0;
    for (std::size_t j = 0; j < ro.routes; ++j)
      if (ro.is_visited(b, j))
        chosen = j;
    const Tensor<double> v = eval_node(a, "route" + std::to_string(chosen), ps, x);
    for (std::size_t k = 0; k < per; ++k)
      EXPECT_EQ(fr.value()[b * per + k], v[b * per + k]);
  }
}

TEST(Forward, IdenticalRoutesUnderUniformWeightsGiveThatRoute) {
  ArchSpec a = condnet::testing::two_route_classifier(3);
  a.output = "mix";
  const Graph g(a);
  std::mt19937_64 rng(23);
  ParamStore<double> ps = random_params<double>(g, rng);
  ps.set("route1.w", ps.at("route0.w").value);
  ps.set("router.w", Tensor<double>({2, 3}));
  const Tensor<double> x = random_tensor<double>({4, 2}, rng);
  const Tensor<double> got = forward(g, ps, x).value();
  const Tensor<double> v = eval_node(a, "route0", ps, x);
  for (std::size_t i = 0; i < got.numel(); ++i)
    EXPECT_NEAR(got[i], v[i], 1e-15);
}

TEST(Forward, TopRIsIdenticalToSoft) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 6; ++trial) {
    const ArchSpec a = condnet::testing::random_routed_arch(rng, trial % 2 == 1);
    const Graph g(a);
    ParamStore<double> ps = random_params<double>(g, rng);
    Shape s{5};
    s.insert(s.end(), a.input_shape.begin(), a.input_shape.end());
    const Tensor<double> x = random_tensor<double>(s, rng);
    const std::size_t R = a.find("router")->routes;
    const ForwardResult<double> soft = forward(g, ps, x);
    const ForwardResult<double> top = forward(g, ps, x, RoutingPolicy::top(R));
    EXPECT_EQ(soft.value(), top.value());
    EXPECT_EQ(soft.routed("router").visited, top.routed("router").visited);
    EXPECT_EQ(soft.routed("router").weights, top.routed("router").weights);
    EXPECT_EQ(soft.visited_nodes, top.visited_nodes);
  }
}

TEST(Forward, WrongInputShapeIsADimensionError) {
  const Graph g(condnet::testing::two_route_classifier());
  std::mt19937_64 rng(25);
  ParamStore<float> ps = random_params<float>(g, rng);
  EXPECT_THROW(forward(g, ps, Tensor<float>({2, 3})), DimensionError);
}

TEST(Forward, TreeSpecializationVisitsOneRootToLeafPath) {
  const Graph g(identity_tree());
  std::mt19937_64 rng(26);
  ParamStore<double> ps = random_params<double>(g, rng, 3.0);
  const Tensor<double> x = random_tensor<double>({8, 3}, rng);
  const ForwardResult<double> fr = forward(g, ps, x, RoutingPolicy::hard());
  EXPECT_EQ(fr.value(), x); // every leaf is the identity
  for (const auto &visited : fr.visited_nodes) {
    std::size_t leaves = 0, inner = 0;
    for (std::size_t i : visited) {
      const std::string &id = g.node(i).id;
      leaves += id == "a0" || id == "a1" || id == "b0" || id == "b1";
      inner += id == "ra" || id == "rb";
    }
    EXPECT_EQ(leaves, 1u);
    EXPECT_EQ(inner, 1u);
  }
}

TEST(Forward, UnvisitedNodesRecordNoTapeEntries) {
  const Graph g(identity_tree());
  ParamStore<double> ps;
  ps.set("r0.w", Tensor<double>({2, 4}, {0, 0, 0, 9, 0, 0, 0, -9})); // always route a
  ps.set("ra.w", Tensor<double>({2, 4}, {0, 0, 0, -9, 0, 0, 0, 9})); // then a1
  ps.set("rb.w", Tensor<double>({2, 4}));
  const ForwardResult<double> fr =
      forward(g, ps, Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), RoutingPolicy::hard());
  // Identity nodes alias their input, so only routers and combines record.
  for (const char *id : {"rb", "cb"})
    EXPECT_EQ(fr.tape.count_tagged(id), 0u) << id;
  for (const char *id : {"r0", "ra", "ca", "root"})
    EXPECT_GT(fr.tape.count_tagged(id), 0u) << id;
  const Graph &gr = g;
  for (const auto &visited : fr.visited_nodes)
    for (std::size_t i : visited)
      for (const char *id : {"b", "b0", "b1", "a0"})
        EXPECT_NE(gr.node(i).id, id);
}

TEST(Backward, HardForwardIsNotDifferentiable) {
  const Graph g(condnet::testing::two_route_classifier());
  std::mt19937_64 rng(27);
  ParamStore<double> ps = random_params<double>(g, rng);
  ForwardResult<double> fr = forward(g, ps, random_tensor<double>({2, 2}, rng), RoutingPolicy::hard());
  EXPECT_THROW(backward_routed(fr, Tensor<double>({2, 2}, 1.0)), UnsupportedError);
}

TEST(Backward, SymmetricRoutesGiveZeroRouterGradient) {
  ArchSpec a = condnet::testing::two_route_classifier(3);
  const Graph g(a);
  std::mt19937_64 rng(28);
  ParamStore<double> ps = random_params<double>(g, rng);
  ps.set("route1.w", ps.at("route0.w").value);
  ps.set("router.w", Tensor<double>({2, 3}));
  ForwardResult<double> fr = forward(g, ps, random_tensor<double>({4, 2}, rng));
  ps.zero_grad();
  backward_routed(fr, random_tensor<double>({4, 2}, rng));
  for (double v : ps.at("router.w").grad.storage())
    EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, SaturatedRouteReceivesNoGradient) {
  const Graph g(condnet::testing::two_route_classifier(3));
  std::mt19937_64 rng(29);
  ParamStore<double> ps = random_params<double>(g, rng);
  ps.set("router.w", Tensor<double>({2, 3}, {0, 0, 40, 0, 0, -40}));
  ForwardResult<double> fr = forward(g, ps, random_tensor<double>({4, 2}, rng));
  ps.zero_grad();
  backward_routed(fr, random_tensor<double>({4, 2}, rng));
  double g0 = 0.0, g1 = 0.0;
  for (double v : ps.at("route0.w").grad.storage())
    g0 = std::max(g0, std::abs(v));
  for (double v : ps.at("route1.w").grad.storage())
    g1 = std::max(g1, std::abs(v));
  EXPECT_GT(g0, 1e-6);
  EXPECT_LT(g1, 1e-30);
}

TEST(Backward, ToyTwoRouteNetMatchesFiniteDifferences) {
  const Graph g(condnet::testing::two_route_classifier(3));
  std::mt19937_64 rng(30);
  ParamStore<double> ps = random_params<double>(g, rng);
  const Tensor<double> x = random_tensor<double>({5, 2}, rng);
  const Tensor<double> target = random_tensor<double>({5, 2}, rng);
  const ScalarObjective<double> f = [&](ParamStore<double> &s, bool grad) {
    ForwardResult<double> fr = forward(g, s, x);
    const LossValue<double> l = loss(fr.value(), target, LossKind::SquaredError);
    if (grad)
      backward_routed(fr, l.grad);
    return l.value;
  };
  EXPECT_LE(finite_difference_check(f, ps, 1e-3).max_rel_error, 1e-4);
}

TEST(Infer, ResultsDoNotDependOnThreadCount) {
  std::mt19937_64 rng(31);
  const ArchSpec a = condnet::testing::random_routed_arch(rng, true, true);
  const Graph g(a);
  ParamStore<float> ps = random_params<float>(g, rng);
  Shape s{37};
  s.insert(s.end(), a.input_shape.begin(), a.input_shape.end());
  const Tensor<float> x = random_tensor<float>(s, rng);
  const auto one = infer(g, ps, x, RoutingPolicy::top(1), 8, 1);
  const auto four = infer(g, ps, x, RoutingPolicy::top(1), 8, 4);
  EXPECT_EQ(one.outputs, four.outputs);
  EXPECT_EQ(one.visited, four.visited);
}

TEST(EquivalentDense, GroupedConvBecomesBlockDiagonalDense) {
  ArchSpec a;
  a.input_shape = {4, 5, 5};
  a.nodes = {make_conv("conv", kInputNode, 6, 3, 2, Activation::ReLU)};
  a.output = "conv";
  std::mt19937_64 rng(32);
  const Graph g(a);
  ParamStore<double> ps = random_params<double>(g, rng);
  const auto [dense, dps] = equivalent_dense(a, ps);
  ASSERT_EQ(dense.nodes.size(), 1u);
  EXPECT_EQ(dense.nodes[0].layer.groups, 1u);
  const Tensor<double> &w = dps.at("conv.w").value;
  ASSERT_EQ(w.shape(), (Shape{6, 4, 3, 3}));
  for (std::size_t o = 0; o < 6; ++o)
    for (std::size_t c = 0; c < 4; ++c)
      if (o / 3 != c / 2) {
        for (std::size_t k = 0; k < 9; ++k)
          EXPECT_EQ(w[(o * 4 + c) * 9 + k], 0.0);
      }
  const Tensor<double> x = random_tensor<double>({3, 4, 5, 5}, rng);
  ParamStore<double> dmut = dps;
  EXPECT_EQ(forward(g, ps, x).value(), forward(Graph(dense), dmut, x).value());
}

TEST(EquivalentDense, UngroupedNetIsUnchanged) {
  ArchSpec a;
  a.input_shape = {3, 4, 4};
  a.nodes = {make_conv("conv", kInputNode, 4, 3, 1, Activation::ReLU),
             make_pool("gmp", "conv", LayerKind::GlobalMaxPool),
             make_fc("fc", "gmp", 2, Activation::Identity)};
  a.output = "fc";
  std::mt19937_64 rng(33);
  ParamStore<float> ps = random_params<float>(Graph(a), rng);
  const auto [dense, dps] = equivalent_dense(a, ps);
  EXPECT_EQ(dense, a);
  EXPECT_TRUE(dps.same_values(ps));
}

TEST(EquivalentDense, RoutedBlocksAgreeWithDenseRewrite) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 10; ++trial) {
    const ArchSpec a = condnet::testing::random_implicit_arch(rng);
    const Graph g(a);
    ParamStore<double> pd = random_params<double>(g, rng);
    ParamStore<float> pf = pd.cast<float>();
    auto [dense_d, dpd] = equivalent_dense(a, pd);
    auto [dense_f, dpf] = equivalent_dense(a, pf);
    for (const NodeSpec &n : dense_d.nodes)
      EXPECT_NE(n.kind, NodeKind::Selection);
    Shape s{4};
    s.insert(s.end(), a.input_shape.begin(), a.input_shape.end());
    const Tensor<double> x = random_tensor<double>(s, rng);
    const Tensor<double> yd = forward(g, pd, x).value();
    const Tensor<double> zd = forward(Graph(dense_d), dpd, x).value();
    const Tensor<float> yf = forward(g, pf, x.cast<float>()).value();
    const Tensor<float> zf = forward(Graph(dense_f), dpf, x.cast<float>()).value();
    for (std::size_t i = 0; i < yd.numel(); ++i) {
      EXPECT_NEAR(yd[i], zd[i], 1e-12);
      EXPECT_NEAR(yf[i], zf[i], 1e-6);
    }
  }
}

TEST(EquivalentDense, ExplicitRouterIsUnsupported) {
  const ArchSpec a = condnet::testing::two_route_classifier();
  std::mt19937_64 rng(35);
  const ParamStore<float> ps = random_params<float>(Graph(a), rng);
  EXPECT_THROW(equivalent_dense(a, ps), UnsupportedError);
}
