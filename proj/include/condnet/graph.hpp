// SPDX-License-Identifier: Apache-2.0
/**
 * @file   graph.hpp
 * @brief  Forward evaluation of conditional networks under a routing policy.
 *
 * Soft routing (and TopTau(R)) evaluates the whole batch at once and is fully
 * differentiable. Truncating policies evaluate each sample on its own so that
 * unvisited routes are never computed; such passes are inference-only.
 */
#pragma once

#include <condnet/arch.hpp>
#include <condnet/autodiff.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace condnet {

enum class RoutingMode { Soft, HardTop1, TopTau };

struct RoutingPolicy {
  RoutingMode mode = RoutingMode::Soft;
  std::size_t tau = 0;
  /// Rescale surviving weights to sum 1 after truncation.
  bool renormalize = true;

  static RoutingPolicy soft() { return {}; }
  static RoutingPolicy hard() { return {RoutingMode::HardTop1, 1, true}; }
  static RoutingPolicy top(std::size_t tau, bool renormalize = true) {
    return {RoutingMode::TopTau, tau, renormalize};
  }

  /// Number of routes kept for a router with R routes; throws ConfigError
  /// when tau is outside [1, R].
  std::size_t survivors(std::size_t routes) const;
  /// True when some route of an R-way router may be dropped.
  bool truncates(std::size_t routes) const;
  std::string describe() const;
};

template <typename T> struct PolicyResult {
  std::vector<T> weights;
  std::vector<std::uint8_t> visited;
};

/// Keeps the tau largest weights (ties to the lower index), zeroes the rest
/// and optionally renormalizes. With tau >= R the input is returned as is.
template <typename T>
PolicyResult<T> apply_policy(std::span<const T> r, const RoutingPolicy &policy);

/// softmax(P^R summary(v0)) for a batch; v0 is [B x ...].
template <typename T>
Tensor<T> router_forward(const Tensor<T> &v0, const Param<T> &p,
                         RouterInput summary = RouterInput::Pooled);

/// Per-router record of one forward pass. Row b of every matrix belongs to
/// sample b.
template <typename T> struct RoutedOutputs {
  std::string router;
  std::string combine;
  std::size_t routes = 0;
  Tensor<T> r;                        // [B x R] router outputs
  Tensor<T> weights;                  // [B x R] after the policy
  std::vector<std::uint8_t> visited;  // B*R
  std::vector<std::uint8_t> reached;  // B: router evaluated for sample b
  /// route_vars[b][j]: tape variable whose row route_rows[b] holds v_1^j for
  /// sample b (unset when the route was not visited).
  std::vector<std::vector<std::optional<VarId>>> route_vars;
  std::vector<std::size_t> route_rows;

  bool is_visited(std::size_t b, std::size_t j) const {
    return visited[b * routes + j] != 0;
  }
};

template <typename T> struct ForwardResult {
  Tape<T> tape;
  VarId output = 0;
  RoutingPolicy policy;
  bool differentiable = true;
  std::vector<RoutedOutputs<T>> routing;
  /// Node indices evaluated for each sample, in evaluation order.
  std::vector<std::vector<std::size_t>> visited_nodes;
  /// Batch-mode only: tape variable of every evaluated node.
  std::map<std::string, VarId> node_vars;

  const Tensor<T> &value() const { return tape.value(output); }
  const RoutedOutputs<T> &routed(const std::string &router) const;
  /// v_1^j for sample b as a [1 x ...] tensor; nullopt if unvisited.
  std::optional<Tensor<T>> route_output(const std::string &router, std::size_t b,
                                        std::size_t j) const;
};

template <typename T>
ForwardResult<T> forward(const Graph &graph, ParamStore<T> &params,
                         const Tensor<T> &x,
                         const RoutingPolicy &policy = RoutingPolicy::soft());

/// Back-propagates loss_grad (d loss / d output) into every reached Param.
/// Throws UnsupportedError for passes made with a truncating policy.
template <typename T>
void backward_routed(ForwardResult<T> &result, const Tensor<T> &loss_grad);

template <typename T> struct InferenceResult {
  Tensor<T> outputs;
  /// Node indices evaluated per sample.
  std::vector<std::vector<std::size_t>> visited;
};

/// Forward pass over a whole dataset in chunks of `batch` samples. Chunks are
/// distributed over `threads` workers and merged in chunk order, so results
/// do not depend on the thread count.
template <typename T>
InferenceResult<T> infer(const Graph &graph, ParamStore<T> &params,
                         const Tensor<T> &x, const RoutingPolicy &policy,
                         std::size_t batch = 64, std::size_t threads = 1);

/// Runs fn(i) for i in [0, n) on up to `threads` workers (1 = inline).
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)> &fn);

/// Rewrites an implicitly routed network (selection / concat / grouped conv)
/// into plain dense layers with block-structured weights. Throws
/// UnsupportedError if the network contains a router.
template <typename T>
std::pair<ArchSpec, ParamStore<T>> equivalent_dense(const ArchSpec &arch,
                                                    const ParamStore<T> &params);

/// Largest route count over the graph's routers; 0 when there is none.
std::size_t max_router_routes(const Graph &graph);

/// Dense [O x C x kh x kw] weights for a grouped [O x C/g x kh x kw] tensor;
/// cross-group entries are zero.
template <typename T>
Tensor<T> expand_groups(const Tensor<T> &w, std::size_t groups);

} // namespace condnet
