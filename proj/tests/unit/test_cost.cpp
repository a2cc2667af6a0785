// SPDX-License-Identifier: Apache-2.0

#include <condnet/cost.hpp>

#include "support/nets.hpp"

#include <gtest/gtest.h>

using namespace condnet;
using condnet::testing::pick;
using condnet::testing::random_params;
using condnet::testing::random_tensor;

namespace {

/// trunk 40 MACs, router 22, route0 100, route1 300 (no bias on transforms).
ArchSpec priced_router_net() {
  ArchSpec a;
  a.input_shape = {4};
  a.nodes = {make_fc("trunk", kInputNode, 10, Activation::ReLU, false),
             make_router("router", "trunk", 2, RouterInput::Raw),
             make_fc("route0", "trunk", 10, Activation::ReLU, false),
             make_fc("route1", "trunk", 30, Activation::ReLU, false),
             make_selection("narrow", "route1", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}),
             make_combine("mix", "router", {"route0", "narrow"})};
  a.output = "mix";
  return a;
}

std::size_t index_of(const Graph &g, const std::string &id) {
  return g.info().index.at(id);
}

} // namespace

TEST(MacCount, HandExamples) {
  EXPECT_EQ(mac_count_conv(3, 64, 3, 3, 32, 32, 1), 1769472u);
  EXPECT_EQ(mac_count_conv(64, 64, 3, 3, 16, 16, 2) * 2, mac_count_conv(64, 64, 3, 3, 16, 16, 1));
  EXPECT_EQ(mac_count_fc(4096, 1000), 4096000u);
  EXPECT_THROW(mac_count_conv(6, 4, 3, 3, 8, 8, 4), ConfigError);
}

TEST(MacCount, MatchesInstrumentedReferenceExecutors) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t g = pick(rng, 1, 3);
    const std::size_t cin = g * pick(rng, 1, 3), cout = g * pick(rng, 1, 3);
    const std::size_t k = 2 * pick(rng, 0, 2) + 1, stride = pick(rng, 1, 2);
    const std::size_t h = pick(rng, k, 9), w = pick(rng, k, 9), pad = pick(rng, 0, k / 2);
    const ConvGeometry geom{g, stride, pad, pad};
    const Tensor<double> x = random_tensor<double>({2, cin, h, w}, rng);
    const Tensor<double> wt = random_tensor<double>({cout, cin / g, k, k}, rng);
    MacCounter counter;
    const Tensor<double> y = reference::conv2d_naive(x, wt, geom, &counter);
    EXPECT_EQ(counter.count,
              2 * mac_count_conv(cin, cout, k, k, y.dim(3), y.dim(2), g));

    const std::size_t m = pick(rng, 1, 12), n = pick(rng, 1, 12);
    const bool bias = trial % 2 == 0;
    MacCounter fc;
    reference::fc_naive(random_tensor<double>({3, m}, rng),
                        random_tensor<double>({n, m + (bias ? 1 : 0)}, rng), bias, &fc);
    EXPECT_EQ(fc.count, 3 * mac_count_fc(m + (bias ? 1 : 0), n));
  }
}

TEST(NodeCost, ConvAndFcNodesUseTheirShapes) {
  ArchSpec a;
  a.input_shape = {4, 8, 8};
  a.nodes = {make_conv("c", kInputNode, 8, 3, 2, Activation::ReLU),
             make_pool("p", "c", LayerKind::MaxPool, 2, 2),
             make_pool("f", "p", LayerKind::Flatten),
             make_fc("fc", "f", 5, Activation::Identity)};
  a.output = "fc";
  const Graph g(a);
  EXPECT_EQ(node_cost(g, 0).macs, 8u * 2 * 9 * 64);
  EXPECT_EQ(node_cost(g, 0).params, 8u * 2 * 9);
  EXPECT_EQ(node_cost(g, 1).macs, 0u);
  EXPECT_EQ(node_cost(g, 2).macs, 0u);
  EXPECT_EQ(node_cost(g, 3).macs, 5u * (128 + 1));
  const CostReport r = static_cost(g);
  EXPECT_EQ(r.total_macs, 8u * 2 * 9 * 64 + 5u * 129);
  EXPECT_EQ(r.total_params, param_count(g));
  EXPECT_EQ(r.to_csv().substr(0, 24), "node_id,kind,macs,params");
}

TEST(NodeCost, RouterIsChargedItsProjection) {
  const Graph g(priced_router_net());
  EXPECT_EQ(node_cost(g, index_of(g, "trunk")).macs, 40u);
  EXPECT_EQ(node_cost(g, index_of(g, "router")).macs, 22u);
  EXPECT_EQ(node_cost(g, index_of(g, "route0")).macs, 100u);
  EXPECT_EQ(node_cost(g, index_of(g, "route1")).macs, 300u);
  EXPECT_EQ(node_cost(g, index_of(g, "mix")).macs, 0u);
  EXPECT_EQ(static_cost(g).total_macs, 462u);
}

TEST(AmortizedCost, HalfAndHalfRoutingHandExample) {
  const Graph g(priced_router_net());
  const std::size_t t = index_of(g, "trunk"), r = index_of(g, "router"),
                    m = index_of(g, "mix"), a = index_of(g, "route0"),
                    b = index_of(g, "route1"), s = index_of(g, "narrow");
  const CostReport c = amortized_cost(g, {{t, r, a, m}, {t, r, b, s, m}});
  EXPECT_DOUBLE_EQ(c.amortized_macs, 40 + 22 + 0.5 * 100 + 0.5 * 300);
  EXPECT_EQ(c.samples, 2u);
  EXPECT_THROW(amortized_cost(g, {}), ArgumentError);
}

TEST(AmortizedCost, SoftRoutingEqualsStaticCostAndHardIsCheaper) {
  const Graph g(priced_router_net());
  std::mt19937_64 rng(42);
  ParamStore<double> ps = random_params<double>(g, rng, 2.0);
  const Tensor<double> x = random_tensor<double>({50, 4}, rng);
  const double full = static_cost(g).amortized_macs;
  EXPECT_DOUBLE_EQ(amortized_cost(g, ps, x, RoutingPolicy::soft()).amortized_macs, full);
  const CostReport hard = amortized_cost(g, ps, x, RoutingPolicy::hard());
  EXPECT_GE(hard.amortized_macs, 162.0);
  EXPECT_LE(hard.amortized_macs, 362.0);
  // Per-sample oracle from the visited lists.
  const InferenceResult<double> ir = infer(g, ps, x, RoutingPolicy::hard());
  double sum = 0;
  for (const auto &v : ir.visited)
    for (std::size_t i : v)
      sum += double(node_cost(g, i).macs);
  EXPECT_DOUBLE_EQ(hard.amortized_macs, sum / 50.0);
}

TEST(Breakdown, NormalizesToLargestBar) {
  ArchSpec a;
  a.input_shape = {10};
  a.nodes = {make_fc("a", kInputNode, 20, Activation::ReLU, false),
             make_fc("b", "a", 5, Activation::Identity, false)};
  a.output = "b";
  const auto raw = layer_breakdown(Graph(a));
  ASSERT_EQ(raw.size(), 2u);
  EXPECT_EQ(raw[0].macs, 200.0);
  EXPECT_EQ(raw[1].macs, 100.0);
  const auto norm = layer_breakdown(Graph(a), true);
  EXPECT_EQ(norm[0].macs, 1.0);
  EXPECT_EQ(norm[1].macs, 0.5);
}

TEST(Breakdown, RouteTaggedNodesShareABar) {
  ArchSpec a = priced_router_net();
  for (NodeSpec &n : a.nodes)
    if (n.id == "route0" || n.id == "route1")
      n.route_tag = RouteTag{1, n.id == "route0" ? 0u : 1u};
  const auto bars = layer_breakdown(Graph(a));
  ASSERT_EQ(bars.size(), 3u);
  EXPECT_EQ(bars[0].label, "trunk");
  EXPECT_EQ(bars[2].macs, 400.0);
}
