// SPDX-License-Identifier: Apache-2.0
/**
 * @file   search.hpp
 * @brief  Architecture families over per-layer route and filter counts, and
 *         exhaustive / random search on size-normalized accuracy.
 *
 * A family layer with R routes and F filters becomes
 *   conv: one convolution with R filter groups (F / R filters per group)
 *   fc:   R selections of the input blocks, one fc of F / R units per block,
 *         and a concat.
 * Convolutional trunks end in global max-pooling; every family ends in a
 * dense fc classifier that is not searched.
 */
#pragma once

#include <condnet/arch.hpp>
#include <condnet/cost.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace condnet {

struct FamilyLayer {
  LayerKind kind = LayerKind::Conv; // Conv or FullyConnected
  std::size_t filters = 8;          // F_orig
  std::size_t kernel = 3;
  Activation act = Activation::ReLU;
  bool pool_after = false;          // 2x2 max-pool (conv only)
};

struct SearchSpace {
  Shape input_shape;
  std::size_t classes = 2;
  std::vector<FamilyLayer> layers;
  /// Per layer: admissible route counts R_l and filter counts F_l.
  std::vector<std::vector<std::size_t>> route_domain;
  std::vector<std::vector<std::size_t>> filter_domain;

  /// R_l in {2^i : i <= route_exp_max}, F_l in {F_orig / 2^i : i <= filter_exp_max}.
  static SearchSpace powers_of_two(Shape input_shape, std::size_t classes,
                                   std::vector<FamilyLayer> layers,
                                   std::size_t route_exp_max,
                                   std::size_t filter_exp_max);
  void check() const;
};

struct SearchConfig {
  std::vector<std::size_t> routes;
  std::vector<std::size_t> filters;
  bool operator==(const SearchConfig &) const = default;
  /// "R=1-2;F=8-4"
  std::string label() const;
};

/// Throws ValidationError when a route count does not divide the channels
/// it splits.
ArchSpec build_family_arch(const SearchSpace &space, const SearchConfig &config);

/// Every valid configuration in lexicographic order of (routes, filters)
/// domain indices. Throws ArgumentError for an empty space.
std::vector<SearchConfig> enumerate(const SearchSpace &space);

/// accuracy / size; throws ArgumentError when size is 0.
double alpha(double accuracy, std::uint64_t size);

enum class SearchDriver { Exhaustive, Random };

struct SearchResult {
  std::size_t config_id = 0; // index in enumerate(space)
  SearchConfig config;
  ArchSpec arch;
  double accuracy = 0.0;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  double alpha = 0.0;
};

/// Trains and scores one configuration, returning accuracy in [0, 1]. Must be
/// safe to call concurrently when threads > 1.
using TrainEval = std::function<double(const ArchSpec &, const SearchConfig &)>;

struct SearchOptions {
  SearchDriver driver = SearchDriver::Exhaustive;
  std::size_t budget = 0; // Random only
  std::uint64_t seed = 0; // Random only
  std::size_t threads = 1;
};

/// Results sorted by alpha (descending, ties by config id). Random budgets
/// above the space size are clamped and reported in `warnings`.
std::vector<SearchResult> search(const SearchSpace &space, const SearchOptions &opt,
                                 const TrainEval &train_eval,
                                 std::vector<std::string> *warnings = nullptr);

/// config_id,routes,filters,accuracy,params,macs,alpha
std::string search_log_csv(const std::vector<SearchResult> &results);

std::string search_space_to_json(const SearchSpace &space);
SearchSpace search_space_from_json(const std::string &text);

} // namespace condnet
