// SPDX-License-Identifier: Apache-2.0

#include <condnet/arch.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace condnet {

using nlohmann::json;

std::string_view node_kind_name(NodeKind kind) {
  switch (kind) {
  case NodeKind::Transform: return "transform";
  case NodeKind::Identity: return "identity";
  case NodeKind::Selection: return "selection";
  case NodeKind::Concat: return "concat";
  case NodeKind::Router: return "router";
  case NodeKind::Combine: return "combine";
  }
  return "?";
}

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
  case LayerKind::Conv: return "conv";
  case LayerKind::FullyConnected: return "fc";
  case LayerKind::MaxPool: return "maxpool";
  case LayerKind::GlobalMaxPool: return "gmp";
  case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

namespace {

NodeKind parse_node_kind(const std::string &s) {
  for (NodeKind k : {NodeKind::Transform, NodeKind::Identity, NodeKind::Selection,
                     NodeKind::Concat, NodeKind::Router, NodeKind::Combine})
    if (node_kind_name(k) == s)
      return k;
  throw FormatError("unknown node kind '" + s + "'");
}

LayerKind parse_layer_kind(const std::string &s) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::FullyConnected, LayerKind::MaxPool,
                      LayerKind::GlobalMaxPool, LayerKind::Flatten})
    if (layer_kind_name(k) == s)
      return k;
  throw FormatError("unknown layer type '" + s + "'");
}

[[noreturn]] void invalid(const NodeSpec &node, const std::string &msg) {
  throw ValidationError("node '" + node.id + "' (" +
                        std::string(node_kind_name(node.kind)) + "): " + msg);
}

Shape infer_transform(const NodeSpec &node, const Shape &in) {
  const LayerSpec &l = node.layer;
  switch (l.kind) {
  case LayerKind::Conv: {
    if (in.size() != 3)
      invalid(node, "conv needs a [C,H,W] input, got " + shape_string(in));
    if (l.out == 0 || l.groups == 0 || l.kernel_h == 0 || l.kernel_w == 0 ||
        l.stride == 0)
      invalid(node, "conv sizes must be positive");
    if (in[0] % l.groups || l.out % l.groups)
      invalid(node, "groups " + std::to_string(l.groups) +
                        " must divide input channels " + std::to_string(in[0]) +
                        " and output channels " + std::to_string(l.out));
    if (l.act == Activation::Softmax)
      invalid(node, "softmax is only valid on fc outputs");
    if (in[1] + 2 * l.pad_h() < l.kernel_h || in[2] + 2 * l.pad_w() < l.kernel_w)
      invalid(node, "kernel larger than padded input " + shape_string(in));
    return {l.out, conv_out_extent(in[1], l.kernel_h, l.pad_h(), l.stride),
            conv_out_extent(in[2], l.kernel_w, l.pad_w(), l.stride)};
  }
  case LayerKind::FullyConnected:
    if (in.size() != 1)
      invalid(node, "fc needs a flat input, got " + shape_string(in) +
                        " (insert a flatten or gmp layer)");
    if (l.out == 0)
      invalid(node, "fc output size must be positive");
    return {l.out};
  case LayerKind::MaxPool:
    if (in.size() != 3)
      invalid(node, "maxpool needs a [C,H,W] input");
    if (l.kernel_h == 0 || l.stride == 0 || in[1] < l.kernel_h ||
        in[2] < l.kernel_h)
      invalid(node, "pool window does not fit " + shape_string(in));
    if (l.act == Activation::Softmax)
      invalid(node, "softmax is only valid on fc outputs");
    return {in[0], conv_out_extent(in[1], l.kernel_h, 0, l.stride),
            conv_out_extent(in[2], l.kernel_h, 0, l.stride)};
  case LayerKind::GlobalMaxPool:
    if (in.size() != 3)
      invalid(node, "gmp needs a [C,H,W] input");
    if (l.act == Activation::Softmax)
      invalid(node, "softmax is only valid on fc outputs");
    return {in[0]};
  case LayerKind::Flatten:
    return {shape_numel(in)};
  }
  invalid(node, "unknown layer");
}

Shape router_summary_shape(const NodeSpec &node, const Shape &in) {
  if (node.router_input == RouterInput::Pooled && in.size() == 3)
    return {in[0]};
  return {shape_numel(in)};
}

} // namespace

const NodeSpec *ArchSpec::find(const std::string &id) const {
  for (const NodeSpec &n : nodes)
    if (n.id == id)
      return &n;
  return nullptr;
}

ArchInfo validate(const ArchSpec &arch) {
  ArchInfo info;
  if (arch.input_shape.empty() || shape_numel(arch.input_shape) == 0)
    throw ValidationError("input shape must be non-empty");
  if (arch.input_shape.size() != 1 && arch.input_shape.size() != 3)
    throw ValidationError("input shape must be [features] or [C,H,W], got " +
                          shape_string(arch.input_shape));
  if (arch.nodes.empty())
    throw ValidationError("architecture has no nodes");

  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const NodeSpec &n = arch.nodes[i];
    if (n.id.empty() || n.id == kInputNode)
      throw ValidationError("invalid node id '" + n.id + "'");
    if (!info.index.emplace(n.id, i).second)
      throw ValidationError("duplicate node id '" + n.id + "'");
  }
  if (!info.index.count(arch.output))
    throw ValidationError("output node '" + arch.output + "' does not exist");

  // Arity and reference checks.
  std::map<std::string, std::size_t> consumers;
  for (const NodeSpec &n : arch.nodes) {
    if (n.inputs.empty())
      invalid(n, "has no inputs");
    const bool multi = n.kind == NodeKind::Concat || n.kind == NodeKind::Combine;
    if (!multi && n.inputs.size() != 1)
      invalid(n, "expects exactly one input");
    for (const std::string &in : n.inputs) {
      if (in != kInputNode && !info.index.count(in))
        invalid(n, "unknown input '" + in + "'");
      if (in == n.id)
        invalid(n, "consumes itself");
      ++consumers[in];
    }
    if (n.kind == NodeKind::Concat) {
      std::set<std::string> seen(n.inputs.begin(), n.inputs.end());
      if (seen.size() != n.inputs.size())
        invalid(n, "concat lists the same input twice");
    }
  }

  // Kahn's algorithm; ready nodes are taken in declaration order.
  std::vector<std::size_t> pending(arch.nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(arch.nodes.size());
  for (std::size_t i = 0; i < arch.nodes.size(); ++i)
    for (const std::string &in : arch.nodes[i].inputs)
      if (in != kInputNode) {
        ++pending[i];
        users[info.index.at(in)].push_back(i);
      }
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < arch.nodes.size(); ++i)
    if (pending[i] == 0)
      ready.insert(i);
  while (!ready.empty()) {
    const std::size_t i = *ready.begin();
    ready.erase(ready.begin());
    info.order.push_back(i);
    for (std::size_t u : users[i])
      if (--pending[u] == 0)
        ready.insert(u);
  }
  if (info.order.size() != arch.nodes.size())
    throw ValidationError("architecture graph contains a cycle");

  info.shapes[kInputNode] = arch.input_shape;
  for (std::size_t i : info.order) {
    const NodeSpec &n = arch.nodes[i];
    const Shape &in0 = info.shapes.at(n.inputs[0]);
    Shape out;
    switch (n.kind) {
    case NodeKind::Transform:
      out = infer_transform(n, in0);
      break;
    case NodeKind::Identity:
      out = in0;
      break;
    case NodeKind::Selection:
      if (n.selection.empty())
        invalid(n, "selection has no rows");
      for (std::size_t s : n.selection)
        if (s >= in0[0])
          invalid(n, "selection index " + std::to_string(s) +
                         " out of range for input " + shape_string(in0));
      out = in0;
      out[0] = n.selection.size();
      break;
    case NodeKind::Concat: {
      out = in0;
      out[0] = 0;
      for (const std::string &in : n.inputs) {
        const Shape &s = info.shapes.at(in);
        if (s.size() != in0.size() ||
            !std::equal(s.begin() + 1, s.end(), in0.begin() + 1))
          invalid(n, "operand '" + in + "' shape " + shape_string(s) +
                         " incompatible with " + shape_string(in0));
        out[0] += s[0];
      }
      break;
    }
    case NodeKind::Router:
      if (n.routes < 2)
        invalid(n, "a router needs at least 2 routes, got " +
                       std::to_string(n.routes));
      out = {n.routes};
      break;
    case NodeKind::Combine: {
      const NodeSpec *router = arch.find(n.inputs[0]);
      if (!router || router->kind != NodeKind::Router)
        invalid(n, "first input must be a router");
      if (n.inputs.size() != router->routes + 1)
        invalid(n, "router '" + router->id + "' has " +
                       std::to_string(router->routes) + " routes but " +
                       std::to_string(n.inputs.size() - 1) + " were given");
      if (consumers[router->id] != 1)
        invalid(n, "router '" + router->id + "' must feed exactly one combine");
      out = info.shapes.at(n.inputs[1]);
      for (std::size_t j = 2; j < n.inputs.size(); ++j)
        if (info.shapes.at(n.inputs[j]) != out)
          invalid(n, "route shapes differ: " + shape_string(out) + " vs " +
                         shape_string(info.shapes.at(n.inputs[j])));
      info.combine_of[router->id] = i;
      break;
    }
    }
    for (const std::string &in : n.inputs)
      if (n.kind != NodeKind::Combine || in != n.inputs[0]) {
        const NodeSpec *src = arch.find(in);
        if (src && src->kind == NodeKind::Router)
          invalid(n, "router outputs may only feed a combine node");
      }
    info.shapes[n.id] = std::move(out);
  }
  for (const NodeSpec &n : arch.nodes)
    if (n.kind == NodeKind::Router && !info.combine_of.count(n.id))
      invalid(n, "router is not consumed by a combine node");
  return info;
}

std::string param_id(const std::string &node_id) { return node_id + ".w"; }

std::optional<ParamInfo> node_param(const NodeSpec &node, const ArchInfo &info) {
  const Shape &in = info.shapes.at(node.inputs[0]);
  if (node.kind == NodeKind::Router) {
    const std::size_t m = router_summary_shape(node, in)[0];
    return ParamInfo{param_id(node.id), {node.routes, m + 1}, m + 1};
  }
  if (node.kind != NodeKind::Transform)
    return std::nullopt;
  const LayerSpec &l = node.layer;
  if (l.kind == LayerKind::Conv) {
    const std::size_t cin = in[0] / l.groups;
    return ParamInfo{param_id(node.id),
                     {l.out, cin, l.kernel_h, l.kernel_w},
                     cin * l.kernel_h * l.kernel_w};
  }
  if (l.kind == LayerKind::FullyConnected) {
    const std::size_t m = in[0] + (l.bias ? 1 : 0);
    return ParamInfo{param_id(node.id), {l.out, m}, m};
  }
  return std::nullopt;
}

std::vector<ParamInfo> arch_params(const ArchSpec &arch, const ArchInfo &info) {
  std::vector<ParamInfo> out;
  for (std::size_t i : info.order)
    if (auto p = node_param(arch.nodes[i], info))
      out.push_back(std::move(*p));
  return out;
}

Graph::Graph(ArchSpec spec) : spec_(std::move(spec)), info_(validate(spec_)) {}

const NodeSpec &Graph::node(const std::string &id) const {
  auto it = info_.index.find(id);
  if (it == info_.index.end())
    throw ArgumentError("no node '" + id + "'");
  return spec_.nodes[it->second];
}

std::size_t Graph::output_dim() const { return shape_numel(shape(spec_.output)); }

// ---- JSON -----------------------------------------------------------------

namespace {

json layer_to_json(const LayerSpec &l) {
  json j;
  j["type"] = layer_kind_name(l.kind);
  switch (l.kind) {
  case LayerKind::Conv:
    j["out"] = l.out;
    j["kernel"] = {l.kernel_h, l.kernel_w};
    j["groups"] = l.groups;
    j["stride"] = l.stride;
    if (l.padding)
      j["padding"] = *l.padding;
    else
      j["padding"] = "same";
    break;
  case LayerKind::FullyConnected:
    j["out"] = l.out;
    j["bias"] = l.bias;
    break;
  case LayerKind::MaxPool:
    j["kernel"] = l.kernel_h;
    j["stride"] = l.stride;
    break;
  case LayerKind::GlobalMaxPool:
  case LayerKind::Flatten:
    break;
  }
  j["act"] = activation_name(l.act);
  return j;
}

template <typename V> V get_or(const json &j, const char *key, V fallback) {
  auto it = j.find(key);
  return it == j.end() ? fallback : it->template get<V>();
}

LayerSpec layer_from_json(const json &j) {
  LayerSpec l;
  l.kind = parse_layer_kind(j.at("type").get<std::string>());
  l.out = get_or<std::size_t>(j, "out", 0);
  if (auto k = j.find("kernel"); k != j.end()) {
    if (k->is_array()) {
      if (k->size() != 2)
        throw FormatError("kernel must be a number or [kh, kw]");
      l.kernel_h = (*k)[0].get<std::size_t>();
      l.kernel_w = (*k)[1].get<std::size_t>();
    } else {
      l.kernel_h = l.kernel_w = k->get<std::size_t>();
    }
  } else if (l.kind == LayerKind::MaxPool) {
    l.kernel_h = l.kernel_w = 2;
  }
  if (l.kind == LayerKind::MaxPool)
    l.kernel_w = l.kernel_h;
  l.groups = get_or<std::size_t>(j, "groups", 1);
  l.stride = get_or<std::size_t>(j, "stride", l.kind == LayerKind::MaxPool ? l.kernel_h : 1);
  if (auto p = j.find("padding"); p != j.end() && !p->is_string())
    l.padding = p->get<std::size_t>();
  else if (p != j.end() && p->get<std::string>() != "same")
    throw FormatError("padding must be a number or \"same\"");
  l.bias = get_or<bool>(j, "bias", true);
  l.act = parse_activation(get_or<std::string>(j, "act", "identity"));
  return l;
}

json node_to_json(const NodeSpec &n) {
  json j;
  j["id"] = n.id;
  j["kind"] = node_kind_name(n.kind);
  j["inputs"] = n.inputs;
  switch (n.kind) {
  case NodeKind::Transform:
    j["layer"] = layer_to_json(n.layer);
    break;
  case NodeKind::Selection:
    j["indices"] = n.selection;
    break;
  case NodeKind::Router:
    j["routes"] = n.routes;
    j["router_input"] = n.router_input == RouterInput::Pooled ? "pooled" : "raw";
    break;
  default:
    break;
  }
  if (n.route_tag)
    j["route_tag"] = {n.route_tag->layer, n.route_tag->route};
  return j;
}

NodeSpec node_from_json(const json &j) {
  NodeSpec n;
  n.id = j.at("id").get<std::string>();
  n.kind = parse_node_kind(j.at("kind").get<std::string>());
  n.inputs = j.at("inputs").get<std::vector<std::string>>();
  switch (n.kind) {
  case NodeKind::Transform:
    n.layer = layer_from_json(j.at("layer"));
    break;
  case NodeKind::Selection:
    n.selection = j.at("indices").get<std::vector<std::size_t>>();
    break;
  case NodeKind::Router: {
    n.routes = j.at("routes").get<std::size_t>();
    const auto ri = get_or<std::string>(j, "router_input", "pooled");
    if (ri != "pooled" && ri != "raw")
      throw FormatError("router_input must be \"pooled\" or \"raw\"");
    n.router_input = ri == "raw" ? RouterInput::Raw : RouterInput::Pooled;
    break;
  }
  default:
    break;
  }
  if (auto t = j.find("route_tag"); t != j.end()) {
    if (!t->is_array() || t->size() != 2)
      throw FormatError("route_tag must be [layer, route]");
    n.route_tag = RouteTag{(*t)[0].get<std::size_t>(), (*t)[1].get<std::size_t>()};
  }
  return n;
}

} // namespace

std::string arch_to_json(const ArchSpec &arch) {
  json j;
  j["input_shape"] = arch.input_shape;
  j["output"] = arch.output;
  j["route_counts"] = arch.route_counts;
  json nodes = json::array();
  for (const NodeSpec &n : arch.nodes)
    nodes.push_back(node_to_json(n));
  j["nodes"] = std::move(nodes);
  return j.dump(2) + "\n";
}

ArchSpec arch_from_json(const std::string &text) {
  try {
    const json j = json::parse(text);
    ArchSpec arch;
    arch.input_shape = j.at("input_shape").get<Shape>();
    arch.output = j.at("output").get<std::string>();
    arch.route_counts = get_or<std::vector<std::size_t>>(j, "route_counts", {});
    for (const json &n : j.at("nodes"))
      arch.nodes.push_back(node_from_json(n));
    return arch;
  } catch (const json::exception &e) {
    throw FormatError(std::string("architecture file: ") + e.what());
  }
}

void save_arch(const std::filesystem::path &path, const ArchSpec &arch) {
  std::ofstream out(path);
  if (!out)
    throw FormatError("cannot open for writing: " + path.string());
  out << arch_to_json(arch);
}

ArchSpec load_arch(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw FormatError("cannot open architecture file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return arch_from_json(ss.str());
}

// ---- builders -----------------------------------------------------------------

namespace {
NodeSpec bare(std::string id, NodeKind kind, std::vector<std::string> inputs) {
  NodeSpec n;
  n.id = std::move(id);
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}
} // namespace

NodeSpec make_conv(std::string id, std::string input, std::size_t out,
                   std::size_t kernel, std::size_t groups, Activation act) {
  NodeSpec n = bare(std::move(id), NodeKind::Transform, {std::move(input)});
  n.layer.kind = LayerKind::Conv;
  n.layer.out = out;
  n.layer.kernel_h = n.layer.kernel_w = kernel;
  n.layer.groups = groups;
  n.layer.act = act;
  return n;
}

NodeSpec make_fc(std::string id, std::string input, std::size_t out,
                 Activation act, bool bias) {
  NodeSpec n = bare(std::move(id), NodeKind::Transform, {std::move(input)});
  n.layer.kind = LayerKind::FullyConnected;
  n.layer.out = out;
  n.layer.bias = bias;
  n.layer.act = act;
  return n;
}

NodeSpec make_pool(std::string id, std::string input, LayerKind kind,
                   std::size_t kernel, std::size_t stride) {
  NodeSpec n = bare(std::move(id), NodeKind::Transform, {std::move(input)});
  n.layer.kind = kind;
  if (kind == LayerKind::MaxPool) {
    n.layer.kernel_h = n.layer.kernel_w = kernel;
    n.layer.stride = stride;
  }
  return n;
}

NodeSpec make_selection(std::string id, std::string input,
                        std::vector<std::size_t> indices) {
  NodeSpec n = bare(std::move(id), NodeKind::Selection, {std::move(input)});
  n.selection = std::move(indices);
  return n;
}

NodeSpec make_concat(std::string id, std::vector<std::string> inputs) {
  return bare(std::move(id), NodeKind::Concat, std::move(inputs));
}

NodeSpec make_identity(std::string id, std::string input) {
  return bare(std::move(id), NodeKind::Identity, {std::move(input)});
}

NodeSpec make_router(std::string id, std::string input, std::size_t routes,
                     RouterInput summary) {
  NodeSpec n = bare(std::move(id), NodeKind::Router, {std::move(input)});
  n.routes = routes;
  n.router_input = summary;
  return n;
}

NodeSpec make_combine(std::string id, std::string router,
                      std::vector<std::string> routes) {
  NodeSpec n = bare(std::move(id), NodeKind::Combine, {std::move(router)});
  n.inputs.insert(n.inputs.end(), routes.begin(), routes.end());
  return n;
}

} // namespace condnet
