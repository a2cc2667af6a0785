// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Parameters, the reverse-mode tape, and the layer primitives.
 *
 * Every primitive takes tape variables, computes its value eagerly and
 * appends one entry to the tape. Tape::backward walks the entries in reverse
 * and accumulates into Param::grad for every parameter that was reached.
 *
 * Tensor layouts: fully-connected inputs are [batch x features], convolution
 * inputs are [batch x channels x height x width]. Fully-connected weights use
 * homogeneous coordinates: with bias enabled, P is [out x (in + 1)] and the
 * last column multiplies an implicit constant 1.
 */
#pragma once

#include <condnet/tensor.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace condnet {

enum class Activation { Identity, ReLU, Sigmoid, Softmax };

std::string_view activation_name(Activation act);
Activation parse_activation(std::string_view name);

template <typename T> struct Param {
  std::string id;
  Tensor<T> value;
  Tensor<T> grad;

  Param(std::string id_, Tensor<T> value_)
      : id(std::move(id_)), value(std::move(value_)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Ordered collection of named parameters. Iteration order is the id order,
/// which keeps every traversal deterministic.
template <typename T> class ParamStore {
public:
  using Map = std::map<std::string, Param<T>>;

  /// Inserts or replaces.
  Param<T> &set(const std::string &id, Tensor<T> value);
  Param<T> &at(const std::string &id);
  const Param<T> &at(const std::string &id) const;
  Param<T> *find(const std::string &id);
  bool contains(const std::string &id) const { return params_.count(id) != 0; }
  void erase(const std::string &id) { params_.erase(id); }

  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;
  void zero_grad();

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

  template <typename U> ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto &[id, p] : params_)
      out.set(id, p.value.template cast<U>());
    return out;
  }

  /// Values equal bit-for-bit (gradients ignored).
  bool same_values(const ParamStore &other) const;

private:
  Map params_;
};

using VarId = std::size_t;

template <typename T> class Tape {
public:
  using BackwardFn = std::function<void(Tape &, VarId)>;

  struct Entry {
    std::string op;
    /// Graph node that issued the entry (empty outside graph evaluation).
    std::string tag;
    std::vector<VarId> operands;
    Tensor<T> value;
    /// Pre-activation for transform primitives, argmax indices for pooling.
    Tensor<T> saved;
    Param<T> *param = nullptr;
    BackwardFn backward;
  };

  VarId input(Tensor<T> value);
  /// Leaf bound to a parameter; repeated calls for the same Param return the
  /// same variable so gradient contributions are summed once.
  VarId param(Param<T> &p);
  VarId record(std::string op, std::vector<VarId> operands, Tensor<T> value,
               BackwardFn backward, Tensor<T> saved = Tensor<T>());

  const Tensor<T> &value(VarId v) const { return entry(v).value; }
  const Entry &entry(VarId v) const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Tag attached to subsequently recorded entries.
  void set_tag(std::string tag) { tag_ = std::move(tag); }
  const std::string &tag() const { return tag_; }
  std::size_t count_tagged(std::string_view tag) const;

  /// Seeds d(loss)/d(output) at the last entry and propagates.
  void backward(const Tensor<T> &loss_grad);
  void backward(VarId output, const Tensor<T> &loss_grad);

  /// Gradient slot of v, allocated (zeroed) on first access. Valid only from
  /// inside backward functions or after backward().
  Tensor<T> &grad(VarId v);
  bool has_grad(VarId v) const { return v < has_grad_.size() && has_grad_[v]; }

private:
  std::vector<Entry> entries_;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_grad_;
  std::map<const Param<T> *, VarId> param_vars_;
  std::string tag_;
};

/// Padding and stride of a convolution; groups split channels into
/// independent blocks.
struct ConvGeometry {
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

/// Output spatial size of a convolution or pooling window.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad,
                            std::size_t stride);

/// Counts multiply-accumulates executed by the reference executors.
struct MacCounter {
  std::uint64_t count = 0;
};

namespace ops {

/// sigma(P x) with homogeneous bias when `bias` is set.
template <typename T>
VarId fc(Tape<T> &tape, VarId x, Param<T> &p, bool bias, Activation act);

/// Grouped 2-D convolution followed by act. Output channel block b reads only
/// input channel block b.
template <typename T>
VarId conv2d(Tape<T> &tape, VarId x, Param<T> &w, const ConvGeometry &geom,
             Activation act);

template <typename T> VarId activate(Tape<T> &tape, VarId x, Activation act);
template <typename T>
VarId max_pool(Tape<T> &tape, VarId x, std::size_t kernel, std::size_t stride);
template <typename T> VarId global_max_pool(Tape<T> &tape, VarId x);
/// [B x C x H x W] -> [B x (C*H*W)]; 2-D inputs pass through.
template <typename T> VarId flatten(Tape<T> &tape, VarId x);
/// Concatenation along dimension 1, operand order preserved.
template <typename T> VarId concat(Tape<T> &tape, std::span<const VarId> xs);
/// Selection along dimension 1: output row k is input row indices[k].
template <typename T>
VarId select(Tape<T> &tape, VarId x, std::span<const std::size_t> indices);
/// Concatenation along the batch dimension.
template <typename T> VarId stack_batch(Tape<T> &tape, std::span<const VarId> xs);
/// out[b] = sum_j weights[b, j] * routes[j][b] over present routes. Routes
/// that are std::nullopt are never read; their weight must be zero.
template <typename T>
VarId weighted_sum(Tape<T> &tape, VarId weights,
                   std::span<const std::optional<VarId>> routes);

} // namespace ops

// Pure (tape-free) helpers.
template <typename T> Tensor<T> apply_activation(const Tensor<T> &x, Activation act);
template <typename T> Tensor<T> softmax_rows(const Tensor<T> &x);
template <typename T> T sigmoid(T x);

namespace reference {

/// Seven-loop convolution; increments counter once per multiply.
template <typename T>
Tensor<T> conv2d_naive(const Tensor<T> &x, const Tensor<T> &w,
                       const ConvGeometry &geom, MacCounter *counter = nullptr);
/// Triple-loop projection; increments counter once per multiply, including
/// the homogeneous coordinate.
template <typename T>
Tensor<T> fc_naive(const Tensor<T> &x, const Tensor<T> &p, bool bias,
                   MacCounter *counter = nullptr);

} // namespace reference

struct FdReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Scalar objective over a parameter set. When `with_grad` is true the
/// function must also run backward so every Param::grad holds d f / d param.
template <typename T>
using ScalarObjective = std::function<T(ParamStore<T> &params, bool with_grad)>;

/// Largest |analytic - central difference| / max(|analytic|, |central|, eps)
/// over every parameter element.
template <typename T>
FdReport finite_difference_check(const ScalarObjective<T> &f,
                                 ParamStore<T> &params, double h = 1e-3,
                                 double eps = 1e-6);

} // namespace condnet
