// SPDX-License-Identifier: Apache-2.0

#include <condnet/cost.hpp>

#include <json.hpp>

#include <algorithm>
#include <map>
#include <sstream>

namespace condnet {

std::uint64_t mac_count_conv(std::size_t c_in, std::size_t c_out, std::size_t kx,
                             std::size_t ky, std::size_t W, std::size_t H,
                             std::size_t groups) {
  if (groups == 0 || c_in % groups || c_out % groups)
    throw ConfigError("groups " + std::to_string(groups) +
                      " must divide channel counts " + std::to_string(c_in) +
                      " and " + std::to_string(c_out));
  return std::uint64_t(c_out) * (c_in / groups) * kx * ky * W * H;
}

std::uint64_t mac_count_fc(std::size_t m_in, std::size_t n_out) {
  return std::uint64_t(n_out) * m_in;
}

NodeCost node_cost(const Graph &graph, std::size_t i) {
  const NodeSpec &n = graph.node(i);
  NodeCost c{n.id, n.kind, 0, 0, n.route_tag};
  const auto p = node_param(n, graph.info());
  if (p)
    c.params = shape_numel(p->shape);
  if (n.kind == NodeKind::Router) {
    c.macs = mac_count_fc(p->shape[1], p->shape[0]);
  } else if (n.kind == NodeKind::Transform) {
    const LayerSpec &l = n.layer;
    const Shape &in = graph.shape(n.inputs[0]);
    const Shape &out = graph.shape(n.id);
    if (l.kind == LayerKind::Conv)
      c.macs = mac_count_conv(in[0], l.out, l.kernel_w, l.kernel_h, out[2], out[1],
                              l.groups);
    else if (l.kind == LayerKind::FullyConnected)
      c.macs = mac_count_fc(in[0] + (l.bias ? 1 : 0), l.out);
  }
  return c;
}

CostReport static_cost(const Graph &graph) {
  CostReport r;
  for (std::size_t i : graph.info().order) {
    r.nodes.push_back(node_cost(graph, i));
    r.total_macs += r.nodes.back().macs;
    r.total_params += r.nodes.back().params;
  }
  r.amortized_macs = static_cast<double>(r.total_macs);
  return r;
}

std::uint64_t param_count(const Graph &graph) {
  return static_cost(graph).total_params;
}

CostReport amortized_cost(const Graph &graph,
                          const std::vector<std::vector<std::size_t>> &visited) {
  if (visited.empty())
    throw ArgumentError("amortized cost needs a non-empty dataset");
  CostReport r = static_cost(graph);
  std::vector<std::uint64_t> macs(graph.spec().nodes.size());
  for (std::size_t i = 0; i < macs.size(); ++i)
    macs[i] = node_cost(graph, i).macs;
  std::uint64_t sum = 0;
  for (const auto &v : visited)
    for (std::size_t i : v)
      sum += macs.at(i);
  r.samples = visited.size();
  r.amortized_macs = static_cast<double>(sum) / static_cast<double>(visited.size());
  return r;
}

template <typename T>
CostReport amortized_cost(const Graph &graph, ParamStore<T> &params,
                          const Tensor<T> &x, const RoutingPolicy &policy,
                          std::size_t batch, std::size_t threads) {
  if (x.rank() < 2 || x.dim(0) == 0)
    throw ArgumentError("amortized cost needs a non-empty dataset");
  return amortized_cost(graph, infer(graph, params, x, policy, batch, threads).visited);
}

template CostReport amortized_cost(const Graph &, ParamStore<float> &,
                                   const Tensor<float> &, const RoutingPolicy &,
                                   std::size_t, std::size_t);
template CostReport amortized_cost(const Graph &, ParamStore<double> &,
                                   const Tensor<double> &, const RoutingPolicy &,
                                   std::size_t, std::size_t);

std::vector<LayerBar> layer_breakdown(const Graph &graph, bool normalize) {
  std::vector<LayerBar> bars;
  std::map<std::size_t, std::size_t> bar_of_layer;
  for (std::size_t i : graph.info().order) {
    const NodeCost c = node_cost(graph, i);
    if (c.macs == 0)
      continue;
    if (c.route_tag) {
      auto [it, fresh] = bar_of_layer.emplace(c.route_tag->layer, bars.size());
      if (fresh)
        bars.push_back({"layer" + std::to_string(c.route_tag->layer), 0.0});
      bars[it->second].macs += static_cast<double>(c.macs);
    } else {
      bars.push_back({c.id, static_cast<double>(c.macs)});
    }
  }
  if (normalize && !bars.empty()) {
    double top = 0;
    for (const LayerBar &b : bars)
      top = std::max(top, b.macs);
    if (top > 0)
      for (LayerBar &b : bars)
        b.macs /= top;
  }
  return bars;
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "node_id,kind,macs,params\n";
  for (const NodeCost &n : nodes)
    os << n.id << ',' << node_kind_name(n.kind) << ',' << n.macs << ',' << n.params
       << '\n';
  return os.str();
}

std::string CostReport::to_json() const {
  nlohmann::json j;
  j["total_macs"] = total_macs;
  j["total_params"] = total_params;
  j["amortized_macs"] = amortized_macs;
  j["samples"] = samples;
  j["nodes"] = nodes.size();
  return j.dump(2) + "\n";
}

} // namespace condnet
