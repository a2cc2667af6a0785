// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cost.hpp
 * @brief  Multiply-accumulate and parameter counting.
 *
 * All counts are per sample. Activations, pooling, selection, concatenation
 * and the routed sum cost nothing; routers are charged for their projection
 * whenever they are reached.
 */
#pragma once

#include <condnet/arch.hpp>
#include <condnet/graph.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace condnet {

/// c_out * (c_in / g) * kx * ky * W * H, with W, H the output extents.
std::uint64_t mac_count_conv(std::size_t c_in, std::size_t c_out, std::size_t kx,
                             std::size_t ky, std::size_t W, std::size_t H,
                             std::size_t groups);
/// n_out * m_in; m_in already includes the homogeneous coordinate.
std::uint64_t mac_count_fc(std::size_t m_in, std::size_t n_out);

struct NodeCost {
  std::string id;
  NodeKind kind = NodeKind::Identity;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::optional<RouteTag> route_tag;
};

struct CostReport {
  std::vector<NodeCost> nodes;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
  /// Dataset mean of realized MACs (equals total_macs for a static report).
  double amortized_macs = 0.0;
  std::size_t samples = 0;

  /// node_id,kind,macs,params
  std::string to_csv() const;
  std::string to_json() const;
};

NodeCost node_cost(const Graph &graph, std::size_t node_index);
/// Every node evaluated (the soft-routing cost).
CostReport static_cost(const Graph &graph);
std::uint64_t param_count(const Graph &graph);

/// Mean over samples of the summed MACs of the nodes each sample visited.
CostReport amortized_cost(const Graph &graph,
                          const std::vector<std::vector<std::size_t>> &visited);

template <typename T>
CostReport amortized_cost(const Graph &graph, ParamStore<T> &params,
                          const Tensor<T> &x, const RoutingPolicy &policy,
                          std::size_t batch = 64, std::size_t threads = 1);

struct LayerBar {
  std::string label;
  double macs = 0.0;
};

/// Per-layer MAC totals in evaluation order. Nodes sharing a route tag layer
/// form one bar; other costed nodes get a bar each. With normalize the
/// largest bar is 1.
std::vector<LayerBar> layer_breakdown(const Graph &graph, bool normalize = false);

} // namespace condnet
