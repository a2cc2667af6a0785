// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Mini-batch SGD for any architecture, with soft routing throughout.
 *
 * Update per parameter w with data gradient g, step size gamma_t, decay
 * lambda and momentum mu:
 *
 *   v <- mu v - gamma_t g
 *   w <- w (1 - gamma_t lambda) + v
 *
 * gamma_t = gamma0 / (1 + gamma0 lambda t) / drop_factor^drops.
 */
#pragma once

#include <condnet/data.hpp>
#include <condnet/graph.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace condnet {

enum class LossKind { SquaredError, SoftmaxCrossEntropy, SigmoidCrossEntropy };

std::string_view loss_name(LossKind kind);
LossKind parse_loss(std::string_view name);

struct TrainConfig {
  double lr0 = 0.05;
  double weight_decay = 1e-4;
  std::size_t batch = 32;
  std::size_t max_epochs = 20;
  /// Plateau window in iterations; 0 disables schedule drops.
  std::size_t plateau_window = 0;
  double drop_factor = 10.0;
  std::size_t max_drops = 2;
  /// Validation accuracy gain (fraction) below which the window is a plateau.
  double plateau_tolerance = 0.001;
  /// Stop when a plateau is detected after the last allowed drop.
  bool early_stop = true;
  double momentum = 0.9;
  std::uint64_t seed = 7;
  LossKind loss = LossKind::SoftmaxCrossEntropy;
  bool augment = false;
  std::size_t threads = 1;

  /// Throws ConfigError on out-of-range fields.
  void check() const;
};

/// gamma0 / (1 + gamma0 lambda t), divided by drop_factor once per drop.
double learning_rate(std::size_t t, const TrainConfig &cfg, std::size_t drops = 0);

template <typename T> struct LossValue {
  T value = 0;
  Tensor<T> grad;
};

/// Batch-averaged loss and d loss / d y. Cross-entropy kinds take logits.
template <typename T>
LossValue<T> loss(const Tensor<T> &y, const Tensor<T> &target, LossKind kind);

/// [N x K] rows with a single 1 at labels[i].
template <typename T>
Tensor<T> one_hot(const std::vector<std::size_t> &labels, std::size_t classes);

/// Gaussian fan-in init with std sqrt(2 / fan_in) for every weight; the
/// homogeneous bias column starts at zero.
template <typename T> ParamStore<T> init_params(const Graph &graph, std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  /// Mean routing entropy on the validation data (0 without routers).
  double router_entropy = 0.0;
};

template <typename T> struct TrainResult {
  ParamStore<T> params;
  std::vector<EpochRecord> history;
  std::size_t iterations = 0;
  std::size_t drops = 0;
  bool stopped_early = false;

  /// epoch,train_loss,val_acc,lr
  std::string history_csv() const;
};

/// Trains from `init` (or from init_params(graph, cfg.seed) when null).
/// `targets`, if given, replaces the one-hot label targets ([N x out]).
template <typename T>
TrainResult<T> train(const Graph &graph, const Dataset &data, const SplitSpec &split,
                     const TrainConfig &cfg, const ParamStore<T> *init = nullptr,
                     const Tensor<float> *targets = nullptr);

/// One optimizer step on the current gradients. `velocity` holds the momentum
/// buffers and is created on first use.
template <typename T>
void sgd_step(ParamStore<T> &params, ParamStore<T> &velocity, double lr,
              const TrainConfig &cfg);

template <typename T> struct EvalResult {
  Tensor<T> outputs;
  std::vector<std::size_t> predictions;
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> visited;

  double error() const { return 1.0 - accuracy; }
};

template <typename T>
EvalResult<T> evaluate(const Graph &graph, ParamStore<T> &params, const Dataset &data,
                       const RoutingPolicy &policy = RoutingPolicy::soft(),
                       std::size_t batch = 64, std::size_t threads = 1);

/// Mean over samples and routers of -sum_j r_j log r_j under soft routing.
template <typename T>
double mean_router_entropy(const Graph &graph, ParamStore<T> &params,
                           const Tensor<T> &x);

struct TauPoint {
  std::size_t tau = 0;
  double error = 0.0;
  double amortized_macs = 0.0;
};

/// Error and amortized cost at each operating point TopTau(tau).
template <typename T>
std::vector<TauPoint> sweep_tau(const Graph &graph, ParamStore<T> &params,
                                const Dataset &data, const std::vector<std::size_t> &taus,
                                bool renormalize = true, std::size_t threads = 1);

/// tau,error,amortized_macs,params
std::string tau_curve_csv(const std::vector<TauPoint> &points, std::uint64_t params);

/// Row-wise argmax (ties to the lower index).
template <typename T> std::vector<std::size_t> argmax_rows(const Tensor<T> &y);

} // namespace condnet
