// SPDX-License-Identifier: Apache-2.0
/**
 * @file   arch.hpp
 * @brief  Declarative description of a conditional network DAG.
 *
 * Node vocabulary:
 *   transform  - a layer primitive (conv / fc / pooling / flatten) + activation
 *   identity   - passes its input through unchanged
 *   selection  - picks channels/features of its input (one 1 per row of S)
 *   concat     - joins inputs along the channel/feature dimension
 *   router     - softmax(P^R summary(v0)), a length-R weight vector
 *   combine    - sum_j r'(j) v^j over the routes of one router; inputs are
 *                [router, route_0, ..., route_{R-1}]
 *
 * The graph input is the implicit node "input". Shapes below are per sample
 * (no batch dimension): [features] or [channels, height, width].
 */
#pragma once

#include <condnet/autodiff.hpp>
#include <condnet/tensor.hpp>

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace condnet {

inline constexpr const char *kInputNode = "input";

enum class NodeKind { Transform, Identity, Selection, Concat, Router, Combine };
enum class LayerKind { Conv, FullyConnected, MaxPool, GlobalMaxPool, Flatten };
/// What a router reads: Pooled = global max-pool of feature maps (vectors
/// pass through), Raw = flattened input.
enum class RouterInput { Pooled, Raw };

std::string_view node_kind_name(NodeKind kind);
std::string_view layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::FullyConnected;
  /// Output channels (conv) or features (fc).
  std::size_t out = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;
  /// Zero padding; unset means "same" ((k - 1) / 2 per side).
  std::optional<std::size_t> padding;
  /// Homogeneous bias column (fc only).
  bool bias = true;
  Activation act = Activation::Identity;

  std::size_t pad_h() const { return padding ? *padding : (kernel_h - 1) / 2; }
  std::size_t pad_w() const { return padding ? *padding : (kernel_w - 1) / 2; }
  ConvGeometry geometry() const { return {groups, stride, pad_h(), pad_w()}; }

  bool operator==(const LayerSpec &) const = default;
};

/// (layer index, route index) of a node that belongs to one parallel route.
struct RouteTag {
  std::size_t layer = 0;
  std::size_t route = 0;
  bool operator==(const RouteTag &) const = default;
};

struct NodeSpec {
  std::string id;
  NodeKind kind = NodeKind::Identity;
  std::vector<std::string> inputs;
  LayerSpec layer;                    // transform
  std::vector<std::size_t> selection; // selection: row k of S picks selection[k]
  std::size_t routes = 0;             // router
  RouterInput router_input = RouterInput::Pooled;
  std::optional<RouteTag> route_tag;

  bool operator==(const NodeSpec &) const = default;
};

struct ArchSpec {
  Shape input_shape;
  std::vector<NodeSpec> nodes;
  std::string output;
  /// Route count per level (informational; set by family builders).
  std::vector<std::size_t> route_counts;

  const NodeSpec *find(const std::string &id) const;
  bool operator==(const ArchSpec &) const = default;
};

/// Result of static validation: a topological order and per-node shapes.
struct ArchInfo {
  std::vector<std::size_t> order;           // indices into ArchSpec::nodes
  std::map<std::string, std::size_t> index; // node id -> index
  std::map<std::string, Shape> shapes;      // node id -> per-sample shape
  /// Router id -> index of the combine node that consumes it.
  std::map<std::string, std::size_t> combine_of;
};

/// Checks acyclicity, references, kinds and every shape. Throws
/// ValidationError describing the first problem found.
ArchInfo validate(const ArchSpec &arch);

/// Shape and id of the learnable tensor a node owns, if any.
struct ParamInfo {
  std::string id;
  Shape shape;
  std::size_t fan_in = 0;
};
std::optional<ParamInfo> node_param(const NodeSpec &node, const ArchInfo &info);
std::vector<ParamInfo> arch_params(const ArchSpec &arch, const ArchInfo &info);
std::string param_id(const std::string &node_id);

/// Validated, immutable architecture.
class Graph {
public:
  explicit Graph(ArchSpec spec);
  const ArchSpec &spec() const { return spec_; }
  const ArchInfo &info() const { return info_; }
  const NodeSpec &node(std::size_t i) const { return spec_.nodes[i]; }
  const NodeSpec &node(const std::string &id) const;
  const Shape &shape(const std::string &id) const { return info_.shapes.at(id); }
  std::size_t output_dim() const;

private:
  ArchSpec spec_;
  ArchInfo info_;
};

// ---- serialization (JSON key/value tree) ----------------------------------

std::string arch_to_json(const ArchSpec &arch);
ArchSpec arch_from_json(const std::string &text);
void save_arch(const std::filesystem::path &path, const ArchSpec &arch);
ArchSpec load_arch(const std::filesystem::path &path);

// ---- builders -----------------------------------------------------------------

NodeSpec make_conv(std::string id, std::string input, std::size_t out,
                   std::size_t kernel, std::size_t groups, Activation act);
NodeSpec make_fc(std::string id, std::string input, std::size_t out,
                 Activation act, bool bias = true);
NodeSpec make_pool(std::string id, std::string input, LayerKind kind,
                   std::size_t kernel = 2, std::size_t stride = 2);
NodeSpec make_selection(std::string id, std::string input,
                        std::vector<std::size_t> indices);
NodeSpec make_concat(std::string id, std::vector<std::string> inputs);
NodeSpec make_identity(std::string id, std::string input);
NodeSpec make_router(std::string id, std::string input, std::size_t routes,
                     RouterInput summary = RouterInput::Pooled);
NodeSpec make_combine(std::string id, std::string router,
                      std::vector<std::string> routes);

} // namespace condnet
