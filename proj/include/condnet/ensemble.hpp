// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ensemble.hpp
 * @brief  Explicitly routed ensembles of frozen expert networks.
 *
 * The router emits one logit per expert; sigmoid(logit) is its predicted
 * probability that the expert classifies the image correctly. At operating
 * threshold theta, experts are visited in increasing cost order and the
 * visit stops as soon as the best predicted correctness among visited
 * experts reaches theta:
 *
 *   theta = 0   only the cheapest expert runs; the router is not evaluated
 *   theta >= 1  every expert runs
 *
 * The posterior is the average of visited experts' softmax outputs weighted
 * by their renormalized router scores. The realized cost of an image is the
 * sum of visited expert costs plus the router cost whenever it ran.
 */
#pragma once

#include <condnet/cost.hpp>
#include <condnet/data.hpp>
#include <condnet/trainer.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace condnet {

template <typename T> struct Expert {
  std::string name;
  Graph graph;
  ParamStore<T> params;
  /// Number of test-time views (1, or 10 crops/flips).
  std::size_t oversample = 1;

  /// Static MACs of one view times the view count.
  std::uint64_t cost() const;
};

template <typename T> struct Ensemble {
  std::vector<Expert<T>> experts;
  Graph router;
  ParamStore<T> router_params;
  /// When set, the router reads this node of the cheapest expert (on the
  /// unshifted view) instead of the image. That expert always runs, so the
  /// shared prefix adds nothing to the router cost.
  std::string shared_node;

  std::uint64_t router_cost() const;
  /// Expert indices sorted by cost (ties by index).
  std::vector<std::size_t> cost_order() const;
  void check() const;
};

/// The 10 deterministic views: shifts {0, up, down, left, right} x {plain,
/// mirrored}. Returns the first `count` of them.
std::vector<Tensor<float>> test_time_views(const Tensor<float> &x, std::size_t count);

/// Softmax posteriors of one expert, averaged over its views. [N x K].
template <typename T>
Tensor<T> expert_posteriors(const Expert<T> &expert, const Tensor<float> &x,
                            std::size_t threads = 1);

/// Everything needed to replay routing decisions for a dataset.
template <typename T> struct EnsembleOutputs {
  std::vector<Tensor<T>> posteriors; // per expert, [N x K]
  Tensor<T> scores;                  // [N x R] sigmoid of router logits
};

/// What the router consumes for images x: x itself, or the shared node's
/// output from the cheapest expert.
template <typename T>
Tensor<T> router_inputs(const Ensemble<T> &ens, const Tensor<float> &x);

template <typename T>
EnsembleOutputs<T> precompute(const Ensemble<T> &ens, const Tensor<float> &x,
                              std::size_t threads = 1);

/// [N x R] with entry 1 where expert r predicts the label.
template <typename T>
Tensor<float> correctness_targets(const Ensemble<T> &ens, const Dataset &data,
                                  const EnsembleOutputs<T> &outputs);

/// Trains the router on per-expert correctness with per-route logistic loss.
/// Expert parameters are never touched.
template <typename T>
TrainResult<T> train_router(Ensemble<T> &ens, const Dataset &data,
                            const SplitSpec &split, TrainConfig cfg,
                            std::size_t threads = 1);

struct RoutedPrediction {
  std::vector<double> posterior;
  std::vector<std::uint8_t> visited; // per expert
  bool router_used = false;
  std::uint64_t cost = 0;
  std::size_t predicted = 0;
};

/// Decision for sample i from precomputed outputs.
template <typename T>
RoutedPrediction route_and_predict(const Ensemble<T> &ens,
                                   const EnsembleOutputs<T> &outputs, std::size_t i,
                                   double theta);

/// Decision for a single image [1 x ...], evaluating only what is visited.
template <typename T>
RoutedPrediction route_and_predict(const Ensemble<T> &ens, const Tensor<float> &x,
                                   double theta);

struct EnsemblePoint {
  double theta = 0.0;
  double error = 0.0;
  double cost = 0.0; // amortized MACs
};

template <typename T>
std::vector<EnsemblePoint> sweep_curve(const Ensemble<T> &ens,
                                       const EnsembleOutputs<T> &outputs,
                                       const std::vector<std::size_t> &labels,
                                       const std::vector<double> &thetas);

struct BaselinePoint {
  double p = 0.0;
  double error = 0.0;
  double cost = 0.0;
};

/// Random mixing of two experts: expert b with probability p.
std::vector<BaselinePoint> baseline_curve(const EnsemblePoint &a,
                                          const EnsemblePoint &b,
                                          const std::vector<double> &ps);
/// Error of the mixing baseline at a given cost (clamped to the segment).
double baseline_error_at(const EnsemblePoint &a, const EnsemblePoint &b, double cost);

/// theta_op,error,amortized_macs
std::string curve_csv(const std::vector<EnsemblePoint> &points);
/// p,error,cost
std::string baseline_csv(const std::vector<BaselinePoint> &points);

/// Architectures of the block_classes expert scenario: a cheap expert that
/// reads only channel block 0, an expensive expert over all channels, and a
/// pooled router. Shapes follow SyntheticOptions.
struct ExpertScenario {
  ArchSpec cheap;
  ArchSpec expensive;
  ArchSpec router;
};
ExpertScenario block_expert_scenario(const SyntheticOptions &opt = {});

} // namespace condnet
