// SPDX-License-Identifier: Apache-2.0
/**
 * @file   analysis.hpp
 * @brief  Activation correlations between layers, block-diagonal reordering
 *         and the routed perceptron implied by zeroing off-block entries.
 *
 * Units: a flat layer contributes one unit per feature; a feature-map layer
 * contributes one unit per channel, valued by the channel's spatial mean.
 */
#pragma once

#include <condnet/arch.hpp>
#include <condnet/data.hpp>
#include <condnet/graph.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace condnet {

struct CorrelationMatrix {
  Tensor<double> lambda; // [units_i x units_j], Pearson, zero-variance -> 0
  std::string layer_i;
  std::string layer_j;
  std::vector<std::size_t> units_i; // unit index maps (identity unless reordered)
  std::vector<std::size_t> units_j;
  std::size_t samples = 0;
};

/// Pearson correlation over paired unit activations. Every sum runs over
/// sorted terms, so the result is bit-identical for any sample order.
class CorrelationAccumulator {
public:
  CorrelationAccumulator(std::size_t m, std::size_t n);
  /// a: [B x m], b: [B x n]; rows are paired samples.
  void add(const Tensor<double> &a, const Tensor<double> &b);
  std::size_t samples() const { return count_; }
  Tensor<double> correlation() const;

private:
  std::size_t m_, n_, count_ = 0;
  std::vector<double> a_, b_; // sample-major
};

/// Per-sample unit activations of a tape value ([B x ...] -> [B x units]).
Tensor<double> unit_activations(const Tensor<double> &value);

/// Correlation of layer_i's units with layer_j's units over the dataset.
/// layer_j must be reachable from layer_i.
template <typename T>
CorrelationMatrix activation_correlation(const Graph &graph, ParamStore<T> &params,
                                         const Dataset &data,
                                         const std::string &layer_i,
                                         const std::string &layer_j,
                                         std::size_t batch = 64);

struct BlockOrdering {
  std::size_t k = 1;
  std::vector<std::size_t> row_block; // block of each original row
  std::vector<std::size_t> col_block; // block of each original column
  std::vector<std::size_t> row_perm;  // new position -> original row
  std::vector<std::size_t> col_perm;
  double within_mass = 0.0;           // sum |lambda| inside blocks
  double total_mass = 0.0;
};

/// Average-linkage agglomerative clustering of rows on the cosine similarity
/// of their |lambda| profiles, down to k clusters (ties merge the lowest
/// indices first); each column joins the row cluster with the largest mean
/// |lambda|. Blocks are numbered by their smallest row.
BlockOrdering reorder_block_diagonal(const Tensor<double> &lambda, std::size_t k);

/// lambda with rows and columns permuted by the ordering.
Tensor<double> permute(const Tensor<double> &lambda, const BlockOrdering &ord);

struct ZeroedBlocks {
  Tensor<double> lambda;           // off-block entries zeroed, original order
  double retained_fraction = 0.0;  // within mass / total mass (1 if total 0)
  /// Selection pattern: block b connects rows row_groups[b] (inputs) to
  /// columns col_groups[b] (outputs). Empty blocks are dropped.
  std::vector<std::vector<std::size_t>> row_groups;
  std::vector<std::vector<std::size_t>> col_groups;
};

ZeroedBlocks zero_off_diagonal(const Tensor<double> &lambda, const BlockOrdering &ord);

/// Single-layer routed perceptron over a flat input of `inputs` features:
/// per block a selection of its input rows and an fc producing its output
/// columns, a concat, and a final selection restoring output order.
ArchSpec routed_perceptron(const ZeroedBlocks &blocks, std::size_t inputs,
                           Activation act, bool bias = true);

/// Routed-perceptron parameters cut from a dense [outputs x (inputs + bias)]
/// fc weight.
template <typename T>
ParamStore<T> routed_params_from_dense(const ZeroedBlocks &blocks,
                                       const Tensor<T> &dense, bool bias = true);

/// Dense fc weight with every connection outside the block pattern zeroed.
template <typename T>
Tensor<T> mask_dense(const ZeroedBlocks &blocks, const Tensor<T> &dense, bool bias = true);

/// Synthetic k-block correlation matrix: block entries in [0.5, 1] with
/// random sign, off-block noise in [-noise, noise], rows and columns
/// shuffled. Returns the matrix and the true block of every row / column.
struct SyntheticBlocks {
  Tensor<double> lambda;
  std::vector<std::size_t> row_block;
  std::vector<std::size_t> col_block;
};
SyntheticBlocks synthetic_block_matrix(std::size_t rows, std::size_t cols,
                                       std::size_t k, double noise,
                                       std::uint64_t seed);

/// Fraction of same-true-block pairs that the ordering places in the same
/// contiguous recovered block (rows and columns pooled).
double block_recall(const BlockOrdering &ord, const std::vector<std::size_t> &true_rows,
                    const std::vector<std::size_t> &true_cols);
/// Rand index of the recovered versus true assignment (rows and columns pooled).
double block_agreement(const BlockOrdering &ord,
                       const std::vector<std::size_t> &true_rows,
                       const std::vector<std::size_t> &true_cols);

/// Matrix as CSV (one row per line).
std::string matrix_csv(const Tensor<double> &m);

} // namespace condnet
