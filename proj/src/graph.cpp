// SPDX-License-Identifier: Apache-2.0

#include <condnet/graph.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <numeric>
#include <set>

namespace condnet {

std::size_t RoutingPolicy::survivors(std::size_t routes) const {
  switch (mode) {
  case RoutingMode::Soft:
    return routes;
  case RoutingMode::HardTop1:
    return 1;
  case RoutingMode::TopTau:
    if (tau < 1 || tau > routes)
      throw ConfigError("tau = " + std::to_string(tau) +
                        " outside [1, " + std::to_string(routes) + "]");
    return tau;
  }
  return routes;
}

bool RoutingPolicy::truncates(std::size_t routes) const {
  return survivors(routes) < routes;
}

std::string RoutingPolicy::describe() const {
  switch (mode) {
  case RoutingMode::Soft:
    return "soft";
  case RoutingMode::HardTop1:
    return "hard";
  case RoutingMode::TopTau:
    return "top" + std::to_string(tau) + (renormalize ? "" : "-raw");
  }
  return "?";
}

template <typename T>
PolicyResult<T> apply_policy(std::span<const T> r, const RoutingPolicy &policy) {
  const std::size_t R = r.size();
  if (R == 0)
    throw ConfigError("apply_policy on an empty weight vector");
  const std::size_t keep = policy.survivors(R);
  PolicyResult<T> out{std::vector<T>(r.begin(), r.end()),
                      std::vector<std::uint8_t>(R, 1)};
  if (keep >= R)
    return out;
  std::vector<std::size_t> idx(R);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });
  std::fill(out.visited.begin(), out.visited.end(), 0);
  T total = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    out.visited[idx[i]] = 1;
    total += r[idx[i]];
  }
  for (std::size_t j = 0; j < R; ++j) {
    if (!out.visited[j])
      out.weights[j] = T(0);
    else if (policy.renormalize && total > T(0))
      out.weights[j] = r[j] / total;
  }
  return out;
}

template PolicyResult<float> apply_policy(std::span<const float>, const RoutingPolicy &);
template PolicyResult<double> apply_policy(std::span<const double>,
                                           const RoutingPolicy &);

namespace {

template <typename T>
VarId router_summary(Tape<T> &tape, VarId x, RouterInput summary) {
  const std::size_t rank = tape.value(x).rank();
  if (rank == 4)
    return summary == RouterInput::Pooled ? ops::global_max_pool(tape, x)
                                          : ops::flatten(tape, x);
  return rank == 2 ? x : ops::flatten(tape, x);
}

} // namespace

template <typename T>
Tensor<T> router_forward(const Tensor<T> &v0, const Param<T> &p,
                         RouterInput summary) {
  if (p.value.rank() != 2 || p.value.dim(0) < 2)
    throw ConfigError("router needs at least 2 routes, weights are " +
                      shape_string(p.value.shape()));
  Tape<T> tape;
  Param<T> copy = p;
  const VarId s = router_summary(tape, tape.input(v0), summary);
  return tape.value(ops::fc(tape, s, copy, true, Activation::Softmax));
}

template Tensor<float> router_forward(const Tensor<float> &, const Param<float> &,
                                      RouterInput);
template Tensor<double> router_forward(const Tensor<double> &,
                                       const Param<double> &, RouterInput);

template <typename T>
const RoutedOutputs<T> &ForwardResult<T>::routed(const std::string &router) const {
  for (const auto &ro : routing)
    if (ro.router == router)
      return ro;
  throw ArgumentError("no router '" + router + "' in this forward pass");
}

template <typename T>
std::optional<Tensor<T>> ForwardResult<T>::route_output(const std::string &router,
                                                        std::size_t b,
                                                        std::size_t j) const {
  const RoutedOutputs<T> &ro = routed(router);
  if (b >= ro.route_vars.size() || !ro.route_vars[b][j])
    return std::nullopt;
  const std::size_t row = ro.route_rows[b];
  return tape.value(*ro.route_vars[b][j]).rows(row, row + 1);
}

template struct ForwardResult<float>;
template struct ForwardResult<double>;

namespace {

template <typename T> class Evaluator {
public:
  Evaluator(const Graph &g, ParamStore<T> &params, ForwardResult<T> &res,
            std::map<std::string, std::size_t> &router_slot)
      : g_(g), params_(params), res_(res), slot_(router_slot),
        memo_(g.spec().nodes.size()) {}

  /// Evaluates `output` for rows [first, first + count) of the batch, whose
  /// tape input is `input`. Returns the output variable.
  VarId run(VarId input, std::size_t first, std::size_t count,
            std::vector<std::size_t> &visited) {
    std::fill(memo_.begin(), memo_.end(), std::nullopt);
    input_ = input;
    first_ = first;
    count_ = count;
    visited_ = &visited;
    return eval(g_.spec().output);
  }

  const std::vector<std::optional<VarId>> &memo() const { return memo_; }

private:
  Tape<T> &tape() { return res_.tape; }

  Param<T> &param_of(const NodeSpec &n) {
    Param<T> *p = params_.find(param_id(n.id));
    if (!p)
      throw StateError("missing parameter '" + param_id(n.id) + "'");
    return *p;
  }

  VarId eval(const std::string &id) {
    if (id == kInputNode)
      return input_;
    const std::size_t idx = g_.info().index.at(id);
    if (memo_[idx])
      return *memo_[idx];
    const NodeSpec &n = g_.node(idx);
    std::vector<VarId> ins;
    if (n.kind != NodeKind::Combine)
      for (const std::string &in : n.inputs)
        ins.push_back(eval(in));
    tape().set_tag(n.id);
    VarId out = 0;
    switch (n.kind) {
    case NodeKind::Transform:
      out = transform(n, ins[0]);
      break;
    case NodeKind::Identity:
      out = ins[0];
      break;
    case NodeKind::Selection:
      out = ops::select(tape(), ins[0], std::span<const std::size_t>(n.selection));
      break;
    case NodeKind::Concat:
      out = ops::concat(tape(), std::span<const VarId>(ins));
      break;
    case NodeKind::Router: {
      const VarId s = router_summary(tape(), ins[0], n.router_input);
      out = ops::fc(tape(), s, param_of(n), true, Activation::Softmax);
      break;
    }
    case NodeKind::Combine:
      out = combine(n);
      break;
    }
    tape().set_tag("");
    memo_[idx] = out;
    visited_->push_back(idx);
    return out;
  }

  VarId transform(const NodeSpec &n, VarId x) {
    const LayerSpec &l = n.layer;
    switch (l.kind) {
    case LayerKind::Conv:
      return ops::conv2d(tape(), x, param_of(n), l.geometry(), l.act);
    case LayerKind::FullyConnected:
      return ops::fc(tape(), x, param_of(n), l.bias, l.act);
    case LayerKind::MaxPool:
      return act(ops::max_pool(tape(), x, l.kernel_h, l.stride), l.act);
    case LayerKind::GlobalMaxPool:
      return act(ops::global_max_pool(tape(), x), l.act);
    case LayerKind::Flatten:
      return act(ops::flatten(tape(), x), l.act);
    }
    throw StateError("unknown layer kind");
  }

  VarId act(VarId x, Activation a) {
    return a == Activation::Identity ? x : ops::activate(tape(), x, a);
  }

  VarId combine(const NodeSpec &n) {
    const VarId rv = eval(n.inputs[0]);
    RoutedOutputs<T> &ro = res_.routing[slot_.at(n.inputs[0])];
    const std::size_t R = ro.routes;
    const Tensor<T> r = tape().value(rv);
    tape().set_tag(n.id);
    VarId wv = rv;
    std::vector<std::uint8_t> any_visit(R, 0);
    for (std::size_t b = 0; b < count_; ++b) {
      const std::size_t row = first_ + b;
      const std::span<const T> rrow(r.ptr() + b * R, R);
      PolicyResult<T> pr = apply_policy(rrow, res_.policy);
      std::copy(rrow.begin(), rrow.end(), ro.r.ptr() + row * R);
      std::copy(pr.weights.begin(), pr.weights.end(), ro.weights.ptr() + row * R);
      std::copy(pr.visited.begin(), pr.visited.end(), ro.visited.begin() + row * R);
      ro.reached[row] = 1;
      for (std::size_t j = 0; j < R; ++j)
        any_visit[j] |= pr.visited[j];
    }
    if (res_.policy.truncates(R))
      wv = tape().input(ro.weights.rows(first_, first_ + count_));

    std::vector<std::optional<VarId>> routes(R);
    for (std::size_t j = 0; j < R; ++j)
      if (any_visit[j])
        routes[j] = eval(n.inputs[1 + j]);
    for (std::size_t b = 0; b < count_; ++b) {
      ro.route_vars[first_ + b] = routes;
      ro.route_rows[first_ + b] = b;
    }
    tape().set_tag(n.id);
    return ops::weighted_sum(tape(), wv,
                             std::span<const std::optional<VarId>>(routes));
  }

  const Graph &g_;
  ParamStore<T> &params_;
  ForwardResult<T> &res_;
  std::map<std::string, std::size_t> &slot_;
  std::vector<std::optional<VarId>> memo_;
  VarId input_ = 0;
  std::size_t first_ = 0;
  std::size_t count_ = 0;
  std::vector<std::size_t> *visited_ = nullptr;
};

} // namespace

template <typename T>
ForwardResult<T> forward(const Graph &graph, ParamStore<T> &params,
                         const Tensor<T> &x, const RoutingPolicy &policy) {
  const ArchSpec &spec = graph.spec();
  Shape expect{x.rank() ? x.dim(0) : 0};
  expect.insert(expect.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (x.shape() != expect || x.dim(0) == 0)
    throw DimensionError("input " + shape_string(x.shape()) +
                         " does not match architecture input " +
                         shape_string(spec.input_shape) + " with a batch dimension");
  const std::size_t B = x.dim(0);

  ForwardResult<T> res;
  res.policy = policy;
  bool truncating = false;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i : graph.info().order) {
    const NodeSpec &n = graph.node(i);
    if (n.kind != NodeKind::Router)
      continue;
    truncating |= policy.truncates(n.routes); // also range-checks tau
    RoutedOutputs<T> ro;
    ro.router = n.id;
    ro.combine = graph.node(graph.info().combine_of.at(n.id)).id;
    ro.routes = n.routes;
    ro.r = Tensor<T>({B, n.routes});
    ro.weights = Tensor<T>({B, n.routes});
    ro.visited.assign(B * n.routes, 0);
    ro.reached.assign(B, 0);
    ro.route_vars.assign(B, std::vector<std::optional<VarId>>(n.routes));
    ro.route_rows.assign(B, 0);
    slot[n.id] = res.routing.size();
    res.routing.push_back(std::move(ro));
  }
  res.differentiable = !truncating;

  Evaluator<T> ev(graph, params, res, slot);
  if (!truncating) {
    std::vector<std::size_t> visited;
    res.output = ev.run(res.tape.input(x), 0, B, visited);
    res.visited_nodes.assign(B, visited);
    for (std::size_t i = 0; i < ev.memo().size(); ++i)
      if (ev.memo()[i])
        res.node_vars[graph.node(i).id] = *ev.memo()[i];
    return res;
  }

  std::vector<VarId> outs;
  res.visited_nodes.resize(B);
  for (std::size_t b = 0; b < B; ++b)
    outs.push_back(ev.run(res.tape.input(x.rows(b, b + 1)), b, 1,
                          res.visited_nodes[b]));
  res.output = ops::stack_batch(res.tape, std::span<const VarId>(outs));
  return res;
}

template <typename T>
void backward_routed(ForwardResult<T> &result, const Tensor<T> &loss_grad) {
  if (!result.differentiable)
    throw UnsupportedError("cannot back-propagate through a '" +
                           result.policy.describe() +
                           "' forward pass; training requires soft routing");
  result.tape.backward(result.output, loss_grad);
}

template ForwardResult<float> forward(const Graph &, ParamStore<float> &,
                                      const Tensor<float> &, const RoutingPolicy &);
template ForwardResult<double> forward(const Graph &, ParamStore<double> &,
                                       const Tensor<double> &,
                                       const RoutingPolicy &);
template void backward_routed(ForwardResult<float> &, const Tensor<float> &);
template void backward_routed(ForwardResult<double> &, const Tensor<double> &);

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)> &fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i)
      fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure)
            failure = std::current_exception();
        }
      }
    });
  for (auto &th : pool)
    th.join();
  if (failure)
    std::rethrow_exception(failure);
}

template <typename T>
InferenceResult<T> infer(const Graph &graph, ParamStore<T> &params,
                         const Tensor<T> &x, const RoutingPolicy &policy,
                         std::size_t batch, std::size_t threads) {
  if (x.rank() < 2 || x.dim(0) == 0)
    throw ArgumentError("inference needs a non-empty batch");
  batch = std::max<std::size_t>(1, batch);
  const std::size_t N = x.dim(0);
  const std::size_t chunks = (N + batch - 1) / batch;
  std::vector<Tensor<T>> outs(chunks);
  std::vector<std::vector<std::vector<std::size_t>>> visits(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * batch, hi = std::min(N, lo + batch);
    ForwardResult<T> fr = forward(graph, params, x.rows(lo, hi), policy);
    outs[c] = fr.value();
    visits[c] = std::move(fr.visited_nodes);
  });
  InferenceResult<T> res;
  Shape s = outs[0].shape();
  s[0] = N;
  std::vector<T> data;
  data.reserve(shape_numel(s));
  for (std::size_t c = 0; c < chunks; ++c) {
    data.insert(data.end(), outs[c].data().begin(), outs[c].data().end());
    for (auto &v : visits[c])
      res.visited.push_back(std::move(v));
  }
  res.outputs = Tensor<T>(std::move(s), std::move(data));
  return res;
}

template InferenceResult<float> infer(const Graph &, ParamStore<float> &,
                                      const Tensor<float> &, const RoutingPolicy &,
                                      std::size_t, std::size_t);
template InferenceResult<double> infer(const Graph &, ParamStore<double> &,
                                       const Tensor<double> &,
                                       const RoutingPolicy &, std::size_t,
                                       std::size_t);

// ---- dense equivalent --------------------------------------------------------

template <typename T>
Tensor<T> expand_groups(const Tensor<T> &w, std::size_t groups) {
  if (w.rank() != 4 || groups == 0 || w.dim(0) % groups)
    throw ConfigError("cannot expand " + shape_string(w.shape()) + " into " +
                      std::to_string(groups) + " groups");
  const std::size_t O = w.dim(0), cg = w.dim(1), kk = w.dim(2) * w.dim(3);
  const std::size_t C = cg * groups, og = O / groups;
  Tensor<T> out({O, C, w.dim(2), w.dim(3)});
  for (std::size_t o = 0; o < O; ++o) {
    const std::size_t g = o / og;
    for (std::size_t c = 0; c < cg; ++c)
      std::copy_n(w.ptr() + (o * cg + c) * kk, kk,
                  out.ptr() + (o * C + g * cg + c) * kk);
  }
  return out;
}

template Tensor<float> expand_groups(const Tensor<float> &, std::size_t);
template Tensor<double> expand_groups(const Tensor<double> &, std::size_t);

namespace {

struct RouteBranch {
  std::size_t transform;              // node index
  std::optional<std::size_t> select;  // node index of the unwrapped selection
  std::string source;
  std::vector<std::size_t> channels;  // source channel feeding each input row
};

bool same_layer_family(const LayerSpec &a, const LayerSpec &b) {
  if (a.kind != b.kind || a.act != b.act)
    return false;
  if (a.kind == LayerKind::Conv)
    return a.kernel_h == b.kernel_h && a.kernel_w == b.kernel_w &&
           a.stride == b.stride && a.pad_h() == b.pad_h() && a.pad_w() == b.pad_w();
  return a.kind == LayerKind::FullyConnected;
}

/// One merge of Concat <- Transform <- [Selection] <- common source. Returns
/// false when no concat in the graph matches.
template <typename T>
bool merge_one(ArchSpec &arch, ParamStore<T> &params) {
  const ArchInfo info = validate(arch);
  std::map<std::string, std::size_t> consumers;
  for (const NodeSpec &n : arch.nodes)
    for (const std::string &in : n.inputs)
      ++consumers[in];

  for (std::size_t ci : info.order) {
    const NodeSpec &cat = arch.nodes[ci];
    if (cat.kind != NodeKind::Concat)
      continue;
    std::vector<RouteBranch> branches;
    bool ok = true;
    for (const std::string &tid : cat.inputs) {
      if (tid == kInputNode || consumers[tid] != 1 || tid == arch.output) {
        ok = false;
        break;
      }
      const std::size_t ti = info.index.at(tid);
      const NodeSpec &t = arch.nodes[ti];
      if (t.kind != NodeKind::Transform ||
          (t.layer.kind != LayerKind::Conv &&
           t.layer.kind != LayerKind::FullyConnected) ||
          !same_layer_family(t.layer, arch.nodes[info.index.at(cat.inputs[0])].layer)) {
        ok = false;
        break;
      }
      RouteBranch br{ti, std::nullopt, t.inputs[0], {}};
      const NodeSpec *s = arch.find(t.inputs[0]);
      if (s && s->kind == NodeKind::Selection && consumers[s->id] == 1 &&
          s->id != arch.output) {
        br.select = info.index.at(s->id);
        br.source = s->inputs[0];
        br.channels = s->selection;
      } else {
        br.channels.resize(info.shapes.at(br.source)[0]);
        std::iota(br.channels.begin(), br.channels.end(), 0);
      }
      branches.push_back(std::move(br));
    }
    if (!ok || branches.empty())
      continue;
    const std::string &src = branches[0].source;
    if (!std::all_of(branches.begin(), branches.end(),
                     [&](const RouteBranch &b) { return b.source == src; }))
      continue;

    const LayerSpec &l0 = arch.nodes[branches[0].transform].layer;
    const std::size_t C = info.shapes.at(src)[0];
    std::size_t total_out = 0;
    bool any_bias = false;
    for (const RouteBranch &b : branches) {
      total_out += arch.nodes[b.transform].layer.out;
      any_bias |= arch.nodes[b.transform].layer.bias;
    }

    Tensor<T> dense;
    if (l0.kind == LayerKind::Conv) {
      const std::size_t kh = l0.kernel_h, kw = l0.kernel_w, kk = kh * kw;
      dense = Tensor<T>({total_out, C, kh, kw});
      std::size_t row = 0;
      for (const RouteBranch &b : branches) {
        const NodeSpec &t = arch.nodes[b.transform];
        const Tensor<T> w = expand_groups(params.at(param_id(t.id)).value,
                                          t.layer.groups);
        const std::size_t cin = w.dim(1);
        for (std::size_t o = 0; o < t.layer.out; ++o, ++row)
          for (std::size_t k = 0; k < cin; ++k)
            for (std::size_t q = 0; q < kk; ++q)
              dense[(row * C + b.channels[k]) * kk + q] += w[(o * cin + k) * kk + q];
      }
    } else {
      const std::size_t width = C + (any_bias ? 1 : 0);
      dense = Tensor<T>({total_out, width});
      std::size_t row = 0;
      for (const RouteBranch &b : branches) {
        const NodeSpec &t = arch.nodes[b.transform];
        const Tensor<T> &w = params.at(param_id(t.id)).value;
        const std::size_t m = b.channels.size(), stride = w.dim(1);
        for (std::size_t o = 0; o < t.layer.out; ++o, ++row) {
          for (std::size_t k = 0; k < m; ++k)
            dense[row * width + b.channels[k]] += w[o * stride + k];
          if (t.layer.bias)
            dense[row * width + C] = w[o * stride + m];
        }
      }
    }

    NodeSpec merged;
    merged.id = cat.id;
    merged.kind = NodeKind::Transform;
    merged.inputs = {src};
    merged.layer = l0;
    merged.layer.out = total_out;
    merged.layer.groups = 1;
    merged.layer.bias = any_bias;

    std::set<std::size_t> drop;
    for (const RouteBranch &b : branches) {
      drop.insert(b.transform);
      params.erase(param_id(arch.nodes[b.transform].id));
      if (b.select)
        drop.insert(*b.select);
    }
    std::vector<NodeSpec> nodes;
    for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
      if (i == ci)
        nodes.push_back(merged);
      else if (!drop.count(i))
        nodes.push_back(arch.nodes[i]);
    }
    arch.nodes = std::move(nodes);
    params.set(param_id(merged.id), std::move(dense));
    return true;
  }
  return false;
}

} // namespace

template <typename T>
std::pair<ArchSpec, ParamStore<T>> equivalent_dense(const ArchSpec &arch,
                                                    const ParamStore<T> &params) {
  validate(arch);
  for (const NodeSpec &n : arch.nodes)
    if (n.kind == NodeKind::Router || n.kind == NodeKind::Combine)
      throw UnsupportedError("node '" + n.id +
                             "' is an explicit router; only implicitly routed "
                             "networks have a dense equivalent");
  ArchSpec out = arch;
  ParamStore<T> ps;
  for (const auto &[id, p] : params)
    ps.set(id, p.value);
  while (merge_one(out, ps)) {
  }
  for (NodeSpec &n : out.nodes)
    if (n.kind == NodeKind::Transform && n.layer.kind == LayerKind::Conv &&
        n.layer.groups > 1) {
      Param<T> &p = ps.at(param_id(n.id));
      ps.set(param_id(n.id), expand_groups(p.value, n.layer.groups));
      n.layer.groups = 1;
    }
  if (!(out == arch)) {
    for (NodeSpec &n : out.nodes)
      n.route_tag.reset();
    std::fill(out.route_counts.begin(), out.route_counts.end(), 1);
  }
  validate(out);
  return {std::move(out), std::move(ps)};
}

template std::pair<ArchSpec, ParamStore<float>>
equivalent_dense(const ArchSpec &, const ParamStore<float> &);
template std::pair<ArchSpec, ParamStore<double>>
equivalent_dense(const ArchSpec &, const ParamStore<double> &);

std::size_t max_router_routes(const Graph &graph) {
  std::size_t r = 0;
  for (const NodeSpec &n : graph.spec().nodes)
    if (n.kind == NodeKind::Router)
      r = std::max(r, n.routes);
  return r;
}

} // namespace condnet
