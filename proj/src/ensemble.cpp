// SPDX-License-Identifier: Apache-2.0

#include <condnet/ensemble.hpp>

#include <algorithm>
#include <numeric>
#include <sstream>

namespace condnet {

template <typename T> std::uint64_t Expert<T>::cost() const {
  return static_cost(graph).total_macs * oversample;
}

template <typename T> std::uint64_t Ensemble<T>::router_cost() const {
  return static_cost(router).total_macs;
}

template <typename T> std::vector<std::size_t> Ensemble<T>::cost_order() const {
  std::vector<std::size_t> order(experts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return experts[a].cost() < experts[b].cost();
  });
  return order;
}

template <typename T> void Ensemble<T>::check() const {
  if (experts.size() < 2)
    throw ConfigError("an ensemble needs at least 2 experts");
  if (router.output_dim() != experts.size())
    throw ConfigError("router has " + std::to_string(router.output_dim()) +
                      " outputs for " + std::to_string(experts.size()) + " experts");
  for (const Expert<T> &e : experts) {
    if (e.oversample < 1 || e.oversample > 10)
      throw ConfigError("expert '" + e.name + "' oversampling must be in [1, 10]");
    if (e.graph.spec().input_shape != experts[0].graph.spec().input_shape)
      throw ConfigError("expert '" + e.name + "' input shape differs from '" +
                        experts[0].name + "'");
    if (e.graph.output_dim() != experts[0].graph.output_dim())
      throw ConfigError("experts disagree on the class count");
  }
  Shape want = experts[0].graph.spec().input_shape;
  if (!shared_node.empty()) {
    const Expert<T> &cheap = experts[cost_order()[0]];
    if (!cheap.graph.info().shapes.count(shared_node) || shared_node == kInputNode)
      throw ConfigError("shared node '" + shared_node + "' is not a node of expert '" +
                        cheap.name + "'");
    want = cheap.graph.shape(shared_node);
  }
  if (router.spec().input_shape != want)
    throw ConfigError("router input " + shape_string(router.spec().input_shape) +
                      " does not match " + shape_string(want));
}

template struct Expert<float>;
template struct Expert<double>;
template struct Ensemble<float>;
template struct Ensemble<double>;

std::vector<Tensor<float>> test_time_views(const Tensor<float> &x, std::size_t count) {
  static constexpr long shifts[5][2] = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  if (count == 0 || count > 10)
    throw ConfigError("view count must be in [1, 10]");
  std::vector<Tensor<float>> views;
  for (std::size_t v = 0; v < count; ++v) {
    const bool mirror = v >= 5;
    const auto &s = shifts[v % 5];
    views.push_back(v == 0 ? x : shift_image(x, s[0], s[1], mirror));
  }
  return views;
}

template <typename T>
Tensor<T> expert_posteriors(const Expert<T> &expert, const Tensor<float> &x,
                            std::size_t threads) {
  const std::vector<Tensor<float>> views = test_time_views(x, expert.oversample);
  ParamStore<T> &params = const_cast<ParamStore<T> &>(expert.params);
  Tensor<T> acc;
  for (const Tensor<float> &v : views) {
    const Tensor<T> p = softmax_rows(
        infer(expert.graph, params, v.template cast<T>(), RoutingPolicy::soft(), 64,
              threads)
            .outputs);
    if (acc.empty())
      acc = p;
    else
      for (std::size_t i = 0; i < acc.numel(); ++i)
        acc[i] += p[i];
  }
  if (views.size() > 1)
    for (std::size_t i = 0; i < acc.numel(); ++i)
      acc[i] /= static_cast<T>(views.size());
  return acc;
}

template <typename T>
Tensor<T> router_inputs(const Ensemble<T> &ens, const Tensor<float> &x) {
  if (ens.shared_node.empty())
    return x.template cast<T>();
  const Expert<T> &cheap = ens.experts[ens.cost_order()[0]];
  ParamStore<T> &params = const_cast<ParamStore<T> &>(cheap.params);
  const std::size_t N = x.dim(0), chunk = 64;
  Shape shape = cheap.graph.shape(ens.shared_node);
  const std::size_t width = shape_numel(shape);
  shape.insert(shape.begin(), N);
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < N; b += chunk) {
    const std::size_t e = std::min(N, b + chunk);
    const ForwardResult<T> fr =
        forward(cheap.graph, params, x.rows(b, e).template cast<T>());
    const Tensor<T> &v = fr.tape.value(fr.node_vars.at(ens.shared_node));
    std::copy(v.data().begin(), v.data().end(), out.ptr() + b * width);
  }
  return out;
}

template <typename T>
EnsembleOutputs<T> precompute(const Ensemble<T> &ens, const Tensor<float> &x,
                              std::size_t threads) {
  ens.check();
  EnsembleOutputs<T> out;
  for (const Expert<T> &e : ens.experts)
    out.posteriors.push_back(expert_posteriors(e, x, threads));
  ParamStore<T> &rp = const_cast<ParamStore<T> &>(ens.router_params);
  Tensor<T> logits =
      infer(ens.router, rp, router_inputs(ens, x), RoutingPolicy::soft(), 64, threads)
          .outputs;
  for (std::size_t i = 0; i < logits.numel(); ++i)
    logits[i] = sigmoid(logits[i]);
  out.scores = std::move(logits);
  return out;
}

template <typename T>
Tensor<float> correctness_targets(const Ensemble<T> &ens, const Dataset &data,
                                  const EnsembleOutputs<T> &outputs) {
  const std::size_t N = data.size(), R = ens.experts.size();
  if (outputs.posteriors.size() != R)
    throw DataError("expert outputs missing: have " +
                    std::to_string(outputs.posteriors.size()) + " of " +
                    std::to_string(R) + " experts");
  Tensor<float> t({N, R});
  for (std::size_t r = 0; r < R; ++r) {
    if (outputs.posteriors[r].rank() != 2 || outputs.posteriors[r].dim(0) != N)
      throw DataError("expert '" + ens.experts[r].name + "' has outputs for " +
                      std::to_string(outputs.posteriors[r].rank() == 2
                                         ? outputs.posteriors[r].dim(0)
                                         : 0) +
                      " of " + std::to_string(N) + " images");
    const auto pred = argmax_rows(outputs.posteriors[r]);
    for (std::size_t i = 0; i < N; ++i)
      t[i * R + r] = pred[i] == data.labels[i] ? 1.0f : 0.0f;
  }
  return t;
}

template <typename T>
TrainResult<T> train_router(Ensemble<T> &ens, const Dataset &data,
                            const SplitSpec &split, TrainConfig cfg,
                            std::size_t threads) {
  ens.check();
  EnsembleOutputs<T> outputs;
  for (const Expert<T> &e : ens.experts)
    outputs.posteriors.push_back(expert_posteriors(e, data.images, threads));
  const Tensor<float> targets = correctness_targets(ens, data, outputs);
  cfg.loss = LossKind::SigmoidCrossEntropy;
  cfg.threads = threads;
  if (!ens.shared_node.empty()) {
    // Shifted copies of an image would not match the shared features.
    cfg.augment = false;
    Dataset features = data;
    features.images = router_inputs(ens, data.images).template cast<float>();
    TrainResult<T> res =
        train(ens.router, features, split, cfg, &ens.router_params, &targets);
    ens.router_params = res.params.template cast<T>();
    return res;
  }
  TrainResult<T> res = train(ens.router, data, split, cfg, &ens.router_params, &targets);
  ens.router_params = res.params.template cast<T>();
  return res;
}

namespace {

template <typename T>
RoutedPrediction decide(const Ensemble<T> &ens, double theta,
                        const std::function<const T *()> &scores,
                        const std::function<std::vector<double>(std::size_t)> &posterior) {
  const std::vector<std::size_t> order = ens.cost_order();
  RoutedPrediction out;
  out.visited.assign(ens.experts.size(), 0);
  std::vector<std::vector<double>> post(ens.experts.size());
  auto visit = [&](std::size_t e) {
    out.visited[e] = 1;
    out.cost += ens.experts[e].cost();
    post[e] = posterior(e);
  };
  visit(order[0]);
  if (theta <= 0.0) {
    out.posterior = post[order[0]];
  } else {
    out.router_used = true;
    out.cost += ens.router_cost();
    const T *s = scores();
    double best = s[order[0]];
    for (std::size_t k = 1; k < order.size(); ++k) {
      if (theta < 1.0 && best >= theta)
        break;
      visit(order[k]);
      best = std::max(best, double(s[order[k]]));
    }
    double total = 0.0;
    for (std::size_t e = 0; e < ens.experts.size(); ++e)
      if (out.visited[e])
        total += s[e];
    const std::size_t K = post[order[0]].size();
    out.posterior.assign(K, 0.0);
    std::size_t n_visited = 0;
    for (std::size_t e = 0; e < ens.experts.size(); ++e)
      n_visited += out.visited[e];
    for (std::size_t e = 0; e < ens.experts.size(); ++e) {
      if (!out.visited[e])
        continue;
      const double w = total > 0.0 ? s[e] / total : 1.0 / double(n_visited);
      for (std::size_t k = 0; k < K; ++k)
        out.posterior[k] += w * post[e][k];
    }
  }
  out.predicted = static_cast<std::size_t>(
      std::max_element(out.posterior.begin(), out.posterior.end()) -
      out.posterior.begin());
  return out;
}

} // namespace

template <typename T>
RoutedPrediction route_and_predict(const Ensemble<T> &ens,
                                   const EnsembleOutputs<T> &outputs, std::size_t i,
                                   double theta) {
  const std::size_t R = ens.experts.size();
  if (outputs.posteriors.size() != R)
    throw DataError("expert outputs missing");
  return decide<T>(
      ens, theta, [&] { return outputs.scores.ptr() + i * R; },
      [&](std::size_t e) {
        const Tensor<T> &p = outputs.posteriors[e];
        const std::size_t K = p.dim(1);
        return std::vector<double>(p.ptr() + i * K, p.ptr() + (i + 1) * K);
      });
}

template <typename T>
RoutedPrediction route_and_predict(const Ensemble<T> &ens, const Tensor<float> &x,
                                   double theta) {
  ens.check();
  if (x.rank() < 2 || x.dim(0) != 1)
    throw DimensionError("route_and_predict expects a single image [1 x ...]");
  Tensor<T> scores;
  return decide<T>(
      ens, theta,
      [&] {
        ParamStore<T> &rp = const_cast<ParamStore<T> &>(ens.router_params);
        scores = forward(ens.router, rp, router_inputs(ens, x)).value();
        for (std::size_t j = 0; j < scores.numel(); ++j)
          scores[j] = sigmoid(scores[j]);
        return static_cast<const T *>(scores.ptr());
      },
      [&](std::size_t e) {
        const Tensor<T> p = expert_posteriors(ens.experts[e], x);
        return std::vector<double>(p.data().begin(), p.data().end());
      });
}

template <typename T>
std::vector<EnsemblePoint> sweep_curve(const Ensemble<T> &ens,
                                       const EnsembleOutputs<T> &outputs,
                                       const std::vector<std::size_t> &labels,
                                       const std::vector<double> &thetas) {
  if (thetas.empty())
    throw ArgumentError("theta grid is empty");
  if (labels.empty())
    throw ArgumentError("sweep needs a non-empty dataset");
  std::vector<EnsemblePoint> pts;
  for (double theta : thetas) {
    std::uint64_t cost = 0;
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const RoutedPrediction rp = route_and_predict(ens, outputs, i, theta);
      cost += rp.cost;
      wrong += rp.predicted != labels[i];
    }
    const double n = static_cast<double>(labels.size());
    pts.push_back({theta, static_cast<double>(wrong) / n, static_cast<double>(cost) / n});
  }
  return pts;
}

#define CONDNET_INSTANTIATE_ENSEMBLE(T)                                        \
  template Tensor<T> expert_posteriors(const Expert<T> &, const Tensor<float> &, \
                                       std::size_t);                           \
  template Tensor<T> router_inputs(const Ensemble<T> &, const Tensor<float> &);  \
  template EnsembleOutputs<T> precompute(const Ensemble<T> &,                  \
                                         const Tensor<float> &, std::size_t);  \
  template Tensor<float> correctness_targets(const Ensemble<T> &, const Dataset &, \
                                             const EnsembleOutputs<T> &);      \
  template TrainResult<T> train_router(Ensemble<T> &, const Dataset &,         \
                                       const SplitSpec &, TrainConfig, std::size_t); \
  template RoutedPrediction route_and_predict(const Ensemble<T> &,             \
                                              const EnsembleOutputs<T> &,      \
                                              std::size_t, double);            \
  template RoutedPrediction route_and_predict(const Ensemble<T> &,             \
                                              const Tensor<float> &, double);  \
  template std::vector<EnsemblePoint> sweep_curve(                             \
      const Ensemble<T> &, const EnsembleOutputs<T> &,                         \
      const std::vector<std::size_t> &, const std::vector<double> &);

CONDNET_INSTANTIATE_ENSEMBLE(float)
CONDNET_INSTANTIATE_ENSEMBLE(double)
#undef CONDNET_INSTANTIATE_ENSEMBLE

std::vector<BaselinePoint> baseline_curve(const EnsemblePoint &a,
                                          const EnsemblePoint &b,
                                          const std::vector<double> &ps) {
  std::vector<BaselinePoint> out;
  for (double p : ps) {
    if (p < 0.0 || p > 1.0)
      throw ArgumentError("mixing probability outside [0, 1]");
    out.push_back({p, (1.0 - p) * a.error + p * b.error, (1.0 - p) * a.cost + p * b.cost});
  }
  return out;
}

double baseline_error_at(const EnsemblePoint &a, const EnsemblePoint &b, double cost) {
  if (b.cost == a.cost)
    return std::min(a.error, b.error);
  const double p = std::clamp((cost - a.cost) / (b.cost - a.cost), 0.0, 1.0);
  return (1.0 - p) * a.error + p * b.error;
}

std::string curve_csv(const std::vector<EnsemblePoint> &points) {
  std::ostringstream os;
  os.precision(17);
  os << "theta_op,error,amortized_macs\n";
  for (const EnsemblePoint &p : points)
    os << p.theta << ',' << p.error << ',' << p.cost << '\n';
  return os.str();
}

std::string baseline_csv(const std::vector<BaselinePoint> &points) {
  std::ostringstream os;
  os.precision(17);
  os << "p,error,cost\n";
  for (const BaselinePoint &p : points)
    os << p.p << ',' << p.error << ',' << p.cost << '\n';
  return os.str();
}

ExpertScenario block_expert_scenario(const SyntheticOptions &opt) {
  const std::size_t C = opt.channels, block = C / opt.groups;
  const Shape in{C, opt.size, opt.size};
  ExpertScenario s;

  s.cheap.input_shape = in;
  std::vector<std::size_t> first(block);
  std::iota(first.begin(), first.end(), 0);
  s.cheap.nodes = {make_selection("block0", kInputNode, first),
                   make_conv("conv", "block0", 4, 3, 1, Activation::ReLU),
                   make_pool("gmp", "conv", LayerKind::GlobalMaxPool),
                   make_fc("fc", "gmp", opt.classes, Activation::Identity)};
  s.cheap.output = "fc";

  s.expensive.input_shape = in;
  s.expensive.nodes = {make_conv("conv1", kInputNode, 16, 3, 1, Activation::ReLU),
                       make_conv("conv2", "conv1", 16, 3, 1, Activation::ReLU),
                       make_pool("gmp", "conv2", LayerKind::GlobalMaxPool),
                       make_fc("fc", "gmp", opt.classes, Activation::Identity)};
  s.expensive.output = "fc";

  s.router.input_shape = in;
  s.router.nodes = {make_pool("gmp", kInputNode, LayerKind::GlobalMaxPool),
                    make_fc("fc", "gmp", 2, Activation::Identity)};
  s.router.output = "fc";
  return s;
}

} // namespace condnet
