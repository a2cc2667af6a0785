// SPDX-License-Identifier: Apache-2.0

#include <condnet/trainer.hpp>
#include <condnet/cost.hpp>
#include <condnet/simd/kernels.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace condnet {

std::string_view loss_name(LossKind kind) {
  switch (kind) {
  case LossKind::SquaredError: return "squared_error";
  case LossKind::SoftmaxCrossEntropy: return "cross_entropy";
  case LossKind::SigmoidCrossEntropy: return "sigmoid_cross_entropy";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  for (LossKind k : {LossKind::SquaredError, LossKind::SoftmaxCrossEntropy,
                     LossKind::SigmoidCrossEntropy})
    if (loss_name(k) == name)
      return k;
  throw ConfigError("unknown loss '" + std::string(name) + "'");
}

void TrainConfig::check() const {
  if (!(lr0 >= 0.0) || !std::isfinite(lr0))
    throw ConfigError("initial learning rate must be >= 0");
  if (!(weight_decay >= 0.0))
    throw ConfigError("weight decay must be >= 0");
  if (batch == 0)
    throw ConfigError("batch size must be >= 1");
  if (!(drop_factor > 1.0))
    throw ConfigError("schedule drop factor must be > 1");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ConfigError("momentum must be in [0, 1)");
}

double learning_rate(std::size_t t, const TrainConfig &cfg, std::size_t drops) {
  double lr = cfg.lr0 / (1.0 + cfg.lr0 * cfg.weight_decay * static_cast<double>(t));
  for (std::size_t i = 0; i < drops; ++i)
    lr /= cfg.drop_factor;
  return lr;
}

template <typename T>
LossValue<T> loss(const Tensor<T> &y, const Tensor<T> &target, LossKind kind) {
  require_same_shape(y.shape(), target.shape(), "loss");
  if (!y.all_finite() || !target.all_finite())
    throw EvaluationError("loss input contains NaN or Inf");
  if (y.rank() != 2)
    throw DimensionError("loss expects [batch x outputs], got " +
                         shape_string(y.shape()));
  const std::size_t B = y.dim(0), K = y.dim(1);
  const T inv_b = T(1) / static_cast<T>(B);
  LossValue<T> out{T(0), Tensor<T>(y.shape())};
  switch (kind) {
  case LossKind::SquaredError:
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const T d = y[i] - target[i];
      out.value += T(0.5) * d * d;
      out.grad[i] = d * inv_b;
    }
    break;
  case LossKind::SoftmaxCrossEntropy: {
    const Tensor<T> p = softmax_rows(y);
    for (std::size_t b = 0; b < B; ++b) {
      T mx = y[b * K];
      for (std::size_t k = 1; k < K; ++k)
        mx = std::max(mx, y[b * K + k]);
      T z = 0;
      for (std::size_t k = 0; k < K; ++k)
        z += std::exp(y[b * K + k] - mx);
      const T log_z = mx + std::log(z);
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t i = b * K + k;
        out.value += target[i] * (log_z - y[i]);
        out.grad[i] = (p[i] - target[i]) * inv_b;
      }
    }
    break;
  }
  case LossKind::SigmoidCrossEntropy:
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const T v = y[i];
      // softplus(v) - t v, computed without overflow.
      const T softplus = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
      out.value += softplus - target[i] * v;
      out.grad[i] = (sigmoid(v) - target[i]) * inv_b;
    }
    break;
  }
  out.value *= inv_b;
  if (!std::isfinite(out.value))
    throw EvaluationError("loss is not finite");
  return out;
}

template LossValue<float> loss(const Tensor<float> &, const Tensor<float> &, LossKind);
template LossValue<double> loss(const Tensor<double> &, const Tensor<double> &,
                                LossKind);

template <typename T>
Tensor<T> one_hot(const std::vector<std::size_t> &labels, std::size_t classes) {
  Tensor<T> t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes)
      throw DataError("label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(classes) + ")");
    t[i * classes + labels[i]] = T(1);
  }
  return t;
}

template Tensor<float> one_hot(const std::vector<std::size_t> &, std::size_t);
template Tensor<double> one_hot(const std::vector<std::size_t> &, std::size_t);

template <typename T> ParamStore<T> init_params(const Graph &graph, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<T> ps;
  for (const ParamInfo &p : arch_params(graph.spec(), graph.info())) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(p.fan_in)));
    Tensor<T> w(p.shape);
    for (std::size_t i = 0; i < w.numel(); ++i)
      w[i] = static_cast<T>(dist(rng));
    const NodeSpec &n = graph.node(p.id.substr(0, p.id.size() - 2));
    const bool homogeneous =
        n.kind == NodeKind::Router ||
        (n.layer.kind == LayerKind::FullyConnected && n.layer.bias);
    if (homogeneous) {
      const std::size_t cols = p.shape[1];
      for (std::size_t r = 0; r < p.shape[0]; ++r)
        w[r * cols + cols - 1] = T(0);
    }
    ps.set(p.id, std::move(w));
  }
  return ps;
}

template ParamStore<float> init_params(const Graph &, std::uint64_t);
template ParamStore<double> init_params(const Graph &, std::uint64_t);

template <typename T>
void sgd_step(ParamStore<T> &params, ParamStore<T> &velocity, double lr,
              const TrainConfig &cfg) {
  const auto &k = simd::kernels<T>();
  const T gamma = static_cast<T>(lr);
  const T mu = static_cast<T>(cfg.momentum);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  for (auto &[id, p] : params) {
    Param<T> *v = velocity.find(id);
    if (!v)
      v = &velocity.set(id, Tensor<T>(p.value.shape()));
    const std::size_t n = p.value.numel();
    k.scale(mu, v->value.ptr(), n);
    k.axpy(-gamma, p.grad.ptr(), v->value.ptr(), n);
    k.scale(decay, p.value.ptr(), n);
    k.axpy(T(1), v->value.ptr(), p.value.ptr(), n);
  }
}

template void sgd_step(ParamStore<float> &, ParamStore<float> &, double,
                       const TrainConfig &);
template void sgd_step(ParamStore<double> &, ParamStore<double> &, double,
                       const TrainConfig &);

template <typename T> std::vector<std::size_t> argmax_rows(const Tensor<T> &y) {
  if (y.rank() != 2)
    throw DimensionError("argmax_rows expects [batch x outputs]");
  const std::size_t B = y.dim(0), K = y.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (y[b * K + k] > y[b * K + best])
        best = k;
    out[b] = best;
  }
  return out;
}

template std::vector<std::size_t> argmax_rows(const Tensor<float> &);
template std::vector<std::size_t> argmax_rows(const Tensor<double> &);

template <typename T>
EvalResult<T> evaluate(const Graph &graph, ParamStore<T> &params, const Dataset &data,
                       const RoutingPolicy &policy, std::size_t batch,
                       std::size_t threads) {
  if (data.size() == 0)
    throw ArgumentError("cannot evaluate on an empty dataset");
  InferenceResult<T> ir =
      infer(graph, params, data.images.template cast<T>(), policy, batch, threads);
  EvalResult<T> res;
  res.predictions = argmax_rows(ir.outputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    correct += res.predictions[i] == data.labels[i];
  res.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  res.outputs = std::move(ir.outputs);
  res.visited = std::move(ir.visited);
  return res;
}

template EvalResult<float> evaluate(const Graph &, ParamStore<float> &,
                                    const Dataset &, const RoutingPolicy &,
                                    std::size_t, std::size_t);
template EvalResult<double> evaluate(const Graph &, ParamStore<double> &,
                                     const Dataset &, const RoutingPolicy &,
                                     std::size_t, std::size_t);

template <typename T>
std::vector<TauPoint> sweep_tau(const Graph &graph, ParamStore<T> &params,
                                const Dataset &data, const std::vector<std::size_t> &taus,
                                bool renormalize, std::size_t threads) {
  if (taus.empty())
    throw ArgumentError("tau sweep needs at least one operating point");
  std::vector<TauPoint> out;
  for (std::size_t tau : taus) {
    const EvalResult<T> ev =
        evaluate(graph, params, data, RoutingPolicy::top(tau, renormalize), 64, threads);
    out.push_back({tau, ev.error(), amortized_cost(graph, ev.visited).amortized_macs});
  }
  return out;
}

template std::vector<TauPoint> sweep_tau(const Graph &, ParamStore<float> &,
                                         const Dataset &, const std::vector<std::size_t> &,
                                         bool, std::size_t);
template std::vector<TauPoint> sweep_tau(const Graph &, ParamStore<double> &,
                                         const Dataset &, const std::vector<std::size_t> &,
                                         bool, std::size_t);

std::string tau_curve_csv(const std::vector<TauPoint> &points, std::uint64_t params) {
  std::ostringstream os;
  os.precision(17);
  os << "tau,error,amortized_macs,params\n";
  for (const TauPoint &p : points)
    os << p.tau << ',' << p.error << ',' << p.amortized_macs << ',' << params << '\n';
  return os.str();
}

template <typename T>
double mean_router_entropy(const Graph &graph, ParamStore<T> &params,
                           const Tensor<T> &x) {
  const ForwardResult<T> fr = forward(graph, params, x, RoutingPolicy::soft());
  if (fr.routing.empty())
    return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (const RoutedOutputs<T> &ro : fr.routing)
    for (std::size_t b = 0; b < x.dim(0); ++b) {
      double h = 0.0;
      for (std::size_t j = 0; j < ro.routes; ++j) {
        const double r = ro.r[b * ro.routes + j];
        if (r > 0)
          h -= r * std::log(r);
      }
      total += h;
      ++count;
    }
  return total / static_cast<double>(count);
}

template double mean_router_entropy(const Graph &, ParamStore<float> &,
                                    const Tensor<float> &);
template double mean_router_entropy(const Graph &, ParamStore<double> &,
                                    const Tensor<double> &);

template <typename T> std::string TrainResult<T>::history_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_acc,lr\n";
  for (const EpochRecord &r : history)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_acc << ',' << r.lr << '\n';
  return os.str();
}

template struct TrainResult<float>;
template struct TrainResult<double>;

namespace {

double multilabel_accuracy(const Tensor<double> &logits, const Tensor<float> &targets) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < logits.numel(); ++i)
    ok += (logits[i] > 0.0) == (targets[i] > 0.5f);
  return static_cast<double>(ok) / static_cast<double>(logits.numel());
}

template <typename T>
Tensor<float> gather_rows(const Tensor<float> &t, const std::vector<std::size_t> &idx) {
  Shape s = t.shape();
  const std::size_t stride = t.numel() / s[0];
  s[0] = idx.size();
  std::vector<float> data;
  data.reserve(idx.size() * stride);
  for (std::size_t i : idx)
    data.insert(data.end(), t.ptr() + i * stride, t.ptr() + (i + 1) * stride);
  return Tensor<float>(std::move(s), std::move(data));
}

} // namespace

template <typename T>
TrainResult<T> train(const Graph &graph, const Dataset &data, const SplitSpec &split,
                     const TrainConfig &cfg, const ParamStore<T> *init,
                     const Tensor<float> *targets) {
  cfg.check();
  data.check();
  split.check(data.size());
  if (split.train.empty())
    throw ArgumentError("training split is empty");
  if (data.sample_shape() != graph.spec().input_shape)
    throw DimensionError("dataset samples " + shape_string(data.sample_shape()) +
                         " do not match architecture input " +
                         shape_string(graph.spec().input_shape));
  const std::size_t out_dim = graph.output_dim();
  if (!targets && out_dim != data.classes)
    throw DimensionError("architecture output " + std::to_string(out_dim) +
                         " does not match " + std::to_string(data.classes) +
                         " classes");
  if (targets && (targets->rank() != 2 || targets->dim(0) != data.size() ||
                  targets->dim(1) != out_dim))
    throw DimensionError("targets " + shape_string(targets->shape()) +
                         " do not match dataset / output size");

  const Tensor<float> all_targets =
      targets ? *targets : one_hot<float>(data.labels, data.classes);
  const Dataset val = data.subset(split.val.empty() ? split.train : split.val);
  const Tensor<float> val_targets =
      gather_rows<T>(all_targets, split.val.empty() ? split.train : split.val);

  TrainResult<T> res;
  res.params = init ? init->template cast<T>() : init_params<T>(graph, cfg.seed);
  ParamStore<T> velocity;
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order = split.train;
  std::vector<std::pair<std::size_t, double>> checkpoints; // (iteration, val_acc)
  std::size_t since_drop = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = learning_rate(res.iterations, cfg, res.drops);
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch) {
      const std::vector<std::size_t> idx(
          order.begin() + lo, order.begin() + std::min(order.size(), lo + cfg.batch));
      Tensor<float> xb = data.subset(idx).images;
      if (cfg.augment)
        xb = augment(xb, rng);
      const Tensor<T> tb = gather_rows<T>(all_targets, idx).template cast<T>();
      lr = learning_rate(res.iterations, cfg, res.drops);
      try {
        res.params.zero_grad();
        ForwardResult<T> fr = forward(graph, res.params, xb.template cast<T>());
        const LossValue<T> lv = loss(fr.value(), tb, cfg.loss);
        backward_routed(fr, lv.grad);
        for (auto &[id, p] : res.params)
          if (!p.grad.all_finite())
            throw EvaluationError("gradient of '" + id + "' is not finite");
        sgd_step(res.params, velocity, lr, cfg);
        loss_sum += static_cast<double>(lv.value) * static_cast<double>(idx.size());
        const auto pred = argmax_rows(fr.value());
        for (std::size_t b = 0; b < idx.size(); ++b)
          correct += pred[b] == data.labels[idx[b]];
      } catch (const EvaluationError &e) {
        throw EvaluationError("training diverged at epoch " + std::to_string(epoch) +
                              ", iteration " + std::to_string(res.iterations) +
                              " (lr " + std::to_string(lr) + "): " + e.what());
      }
      ++res.iterations;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.iteration = res.iterations;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.lr = lr;
    if (targets) {
      const InferenceResult<T> ir =
          infer(graph, res.params, val.images.template cast<T>(),
                RoutingPolicy::soft(), 64, cfg.threads);
      rec.val_acc = multilabel_accuracy(ir.outputs.template cast<double>(), val_targets);
    } else {
      rec.val_acc = evaluate(graph, res.params, val, RoutingPolicy::soft(), 64,
                             cfg.threads)
                        .accuracy;
    }
    rec.router_entropy =
        mean_router_entropy(graph, res.params, val.images.template cast<T>());
    res.history.push_back(rec);

    if (cfg.plateau_window == 0)
      continue;
    checkpoints.emplace_back(res.iterations, rec.val_acc);
    // Latest checkpoint at least one window old, counted from the last drop.
    std::optional<double> past;
    for (std::size_t i = since_drop; i + 1 < checkpoints.size(); ++i)
      if (checkpoints[i].first + cfg.plateau_window <= res.iterations)
        past = checkpoints[i].second;
    if (!past || rec.val_acc - *past >= cfg.plateau_tolerance)
      continue;
    if (res.drops < cfg.max_drops) {
      ++res.drops;
      since_drop = checkpoints.size() - 1;
    } else if (cfg.early_stop) {
      res.stopped_early = true;
      break;
    }
  }
  return res;
}

template TrainResult<float> train(const Graph &, const Dataset &, const SplitSpec &,
                                  const TrainConfig &, const ParamStore<float> *,
                                  const Tensor<float> *);
template TrainResult<double> train(const Graph &, const Dataset &, const SplitSpec &,
                                   const TrainConfig &, const ParamStore<double> *,
                                   const Tensor<float> *);

} // namespace condnet
