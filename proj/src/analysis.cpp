// SPDX-License-Identifier: Apache-2.0

#include <condnet/analysis.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace condnet {

CorrelationAccumulator::CorrelationAccumulator(std::size_t m, std::size_t n)
    : m_(m), n_(n) {}

void CorrelationAccumulator::add(const Tensor<double> &a, const Tensor<double> &b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != m_ || b.dim(1) != n_ ||
      a.dim(0) != b.dim(0))
    throw DimensionError("correlation update " + shape_string(a.shape()) + " / " +
                         shape_string(b.shape()));
  a_.insert(a_.end(), a.storage().begin(), a.storage().end());
  b_.insert(b_.end(), b.storage().begin(), b.storage().end());
  count_ += a.dim(0);
}

namespace {

double sorted_sum(std::vector<double> &terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms)
    s += t;
  return s;
}

} // namespace

Tensor<double> CorrelationAccumulator::correlation() const {
  if (count_ == 0)
    throw ArgumentError("correlation over an empty dataset");
  const std::size_t N = count_;
  std::vector<double> terms(N);
  // Centered columns; means come from order-free sums.
  auto centered = [&](const std::vector<double> &x, std::size_t width) {
    std::vector<double> c(x.size());
    for (std::size_t u = 0; u < width; ++u) {
      for (std::size_t s = 0; s < N; ++s)
        terms[s] = x[s * width + u];
      const double mean = sorted_sum(terms) / static_cast<double>(N);
      for (std::size_t s = 0; s < N; ++s)
        c[u * N + s] = x[s * width + u] - mean;
    }
    return c;
  };
  const std::vector<double> ca = centered(a_, m_), cb = centered(b_, n_);
  auto moment = [&](const double *x, const double *y) {
    for (std::size_t s = 0; s < N; ++s)
      terms[s] = x[s] * y[s];
    return sorted_sum(terms);
  };
  std::vector<double> va(m_), vb(n_);
  for (std::size_t i = 0; i < m_; ++i)
    va[i] = moment(&ca[i * N], &ca[i * N]);
  for (std::size_t j = 0; j < n_; ++j)
    vb[j] = moment(&cb[j * N], &cb[j * N]);
  Tensor<double> out({m_, n_});
  for (std::size_t i = 0; i < m_; ++i)
    for (std::size_t j = 0; j < n_; ++j) {
      const double den = std::sqrt(va[i] * vb[j]);
      out[i * n_ + j] =
          den > 0.0 ? std::clamp(moment(&ca[i * N], &cb[j * N]) / den, -1.0, 1.0) : 0.0;
    }
  return out;
}

Tensor<double> unit_activations(const Tensor<double> &v) {
  if (v.rank() == 2)
    return v;
  if (v.rank() == 4) {
    const std::size_t B = v.dim(0), C = v.dim(1), hw = v.dim(2) * v.dim(3);
    Tensor<double> out({B, C});
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      double s = 0.0;
      for (std::size_t p = 0; p < hw; ++p)
        s += v[bc * hw + p];
      out[bc] = s / static_cast<double>(hw);
    }
    return out;
  }
  return v.reshape({v.dim(0), v.numel() / v.dim(0)});
}

namespace {

bool reachable(const Graph &g, const std::string &from, const std::string &to) {
  if (from == to)
    return false;
  std::vector<std::string> stack{to};
  std::set<std::string> seen;
  while (!stack.empty()) {
    const std::string id = stack.back();
    stack.pop_back();
    if (id == kInputNode || !seen.insert(id).second)
      continue;
    for (const std::string &in : g.node(id).inputs) {
      if (in == from)
        return true;
      stack.push_back(in);
    }
  }
  return false;
}

} // namespace

template <typename T>
CorrelationMatrix activation_correlation(const Graph &graph, ParamStore<T> &params,
                                         const Dataset &data,
                                         const std::string &layer_i,
                                         const std::string &layer_j,
                                         std::size_t batch) {
  if (data.size() == 0)
    throw ArgumentError("activation correlation needs a non-empty dataset");
  for (const std::string *id : {&layer_i, &layer_j})
    if (*id != kInputNode && !graph.info().index.count(*id))
      throw ArgumentError("no layer '" + *id + "'");
  if (!reachable(graph, layer_i, layer_j))
    throw ArgumentError("layer '" + layer_j + "' does not consume '" + layer_i + "'");
  const auto units = [&](const std::string &id) {
    const Shape &s = graph.shape(id);
    return s.size() == 3 ? s[0] : shape_numel(s);
  };
  CorrelationAccumulator acc(units(layer_i), units(layer_j));
  batch = std::max<std::size_t>(1, batch);
  for (std::size_t lo = 0; lo < data.size(); lo += batch) {
    const std::size_t hi = std::min(data.size(), lo + batch);
    const Tensor<T> x = data.images.rows(lo, hi).template cast<T>();
    ForwardResult<T> fr = forward(graph, params, x, RoutingPolicy::soft());
    auto value_of = [&](const std::string &id) {
      if (id == kInputNode)
        return x.template cast<double>();
      auto it = fr.node_vars.find(id);
      if (it == fr.node_vars.end())
        throw ArgumentError("layer '" + id + "' is not evaluated for the output");
      return fr.tape.value(it->second).template cast<double>();
    };
    acc.add(unit_activations(value_of(layer_i)), unit_activations(value_of(layer_j)));
  }
  CorrelationMatrix cm;
  cm.lambda = acc.correlation();
  cm.layer_i = layer_i;
  cm.layer_j = layer_j;
  cm.units_i.resize(cm.lambda.dim(0));
  cm.units_j.resize(cm.lambda.dim(1));
  std::iota(cm.units_i.begin(), cm.units_i.end(), 0);
  std::iota(cm.units_j.begin(), cm.units_j.end(), 0);
  cm.samples = acc.samples();
  return cm;
}

template CorrelationMatrix activation_correlation(const Graph &, ParamStore<float> &,
                                                  const Dataset &, const std::string &,
                                                  const std::string &, std::size_t);
template CorrelationMatrix activation_correlation(const Graph &, ParamStore<double> &,
                                                  const Dataset &, const std::string &,
                                                  const std::string &, std::size_t);

// ---- reordering --------------------------------------------------------------------

BlockOrdering reorder_block_diagonal(const Tensor<double> &lambda, std::size_t k) {
  if (lambda.rank() != 2)
    throw DimensionError("block reordering expects a matrix");
  const std::size_t m = lambda.dim(0), n = lambda.dim(1);
  if (k < 1 || k > std::min(m, n))
    throw ArgumentError("block count " + std::to_string(k) + " must be in [1, " +
                        std::to_string(std::min(m, n)) + "]");

  // Cosine similarity between |lambda| row profiles.
  std::vector<double> norm(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      norm[i] += lambda[i * n + j] * lambda[i * n + j];
  for (double &v : norm)
    v = std::sqrt(v);
  std::vector<double> sim(m * m, 0.0);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) {
      double d = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        d += std::abs(lambda[a * n + j]) * std::abs(lambda[b * n + j]);
      const double den = norm[a] * norm[b];
      sim[a * m + b] = sim[b * m + a] = den > 0.0 ? d / den : 0.0;
    }

  // Average linkage: cluster similarity = mean pairwise similarity.
  std::vector<std::vector<std::size_t>> clusters(m);
  for (std::size_t i = 0; i < m; ++i)
    clusters[i] = {i};
  std::vector<double> link = sim; // cluster-level sums, indexed by slot
  std::vector<bool> alive(m, true);
  for (std::size_t live = m; live > k; --live) {
    double best = -1.0;
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < m; ++a) {
      if (!alive[a])
        continue;
      for (std::size_t b = a + 1; b < m; ++b) {
        if (!alive[b])
          continue;
        const double avg = link[a * m + b] /
                           double(clusters[a].size() * clusters[b].size());
        if (avg > best) {
          best = avg;
          ba = a;
          bb = b;
        }
      }
    }
    for (std::size_t c = 0; c < m; ++c)
      if (alive[c] && c != ba && c != bb) {
        link[ba * m + c] += link[bb * m + c];
        link[c * m + ba] = link[ba * m + c];
      }
    clusters[ba].insert(clusters[ba].end(), clusters[bb].begin(), clusters[bb].end());
    std::sort(clusters[ba].begin(), clusters[ba].end());
    clusters[bb].clear();
    alive[bb] = false;
  }

  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t a = 0; a < m; ++a)
    if (alive[a])
      groups.push_back(clusters[a]);
  std::sort(groups.begin(), groups.end(),
            [](const auto &x, const auto &y) { return x.front() < y.front(); });

  BlockOrdering ord;
  ord.k = k;
  ord.row_block.assign(m, 0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t i : groups[g])
      ord.row_block[i] = g;
  ord.col_block.assign(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double best = -1.0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      double s = 0.0;
      for (std::size_t i : groups[g])
        s += std::abs(lambda[i * n + j]);
      s /= double(groups[g].size());
      if (s > best) {
        best = s;
        ord.col_block[j] = g;
      }
    }
  }
  ord.row_perm.resize(m);
  ord.col_perm.resize(n);
  std::iota(ord.row_perm.begin(), ord.row_perm.end(), 0);
  std::iota(ord.col_perm.begin(), ord.col_perm.end(), 0);
  std::stable_sort(ord.row_perm.begin(), ord.row_perm.end(),
                   [&](std::size_t a, std::size_t b) {
                     return ord.row_block[a] < ord.row_block[b];
                   });
  std::stable_sort(ord.col_perm.begin(), ord.col_perm.end(),
                   [&](std::size_t a, std::size_t b) {
                     return ord.col_block[a] < ord.col_block[b];
                   });
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = std::abs(lambda[i * n + j]);
      ord.total_mass += v;
      if (ord.row_block[i] == ord.col_block[j])
        ord.within_mass += v;
    }
  return ord;
}

Tensor<double> permute(const Tensor<double> &lambda, const BlockOrdering &ord) {
  const std::size_t m = lambda.dim(0), n = lambda.dim(1);
  Tensor<double> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = lambda[ord.row_perm[i] * n + ord.col_perm[j]];
  return out;
}

ZeroedBlocks zero_off_diagonal(const Tensor<double> &lambda, const BlockOrdering &ord) {
  const std::size_t m = lambda.dim(0), n = lambda.dim(1);
  if (ord.row_block.size() != m || ord.col_block.size() != n)
    throw DimensionError("block assignment does not match " +
                         shape_string(lambda.shape()));
  ZeroedBlocks z;
  z.lambda = lambda;
  double within = 0.0, total = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = std::abs(lambda[i * n + j]);
      total += v;
      if (ord.row_block[i] == ord.col_block[j])
        within += v;
      else
        z.lambda[i * n + j] = 0.0;
    }
  z.retained_fraction = total > 0.0 ? within / total : 1.0;
  const std::size_t blocks =
      1 + std::max(*std::max_element(ord.row_block.begin(), ord.row_block.end()),
                   *std::max_element(ord.col_block.begin(), ord.col_block.end()));
  for (std::size_t b = 0; b < blocks; ++b) {
    std::vector<std::size_t> rows, cols;
    for (std::size_t i = 0; i < m; ++i)
      if (ord.row_block[i] == b)
        rows.push_back(i);
    for (std::size_t j = 0; j < n; ++j)
      if (ord.col_block[j] == b)
        cols.push_back(j);
    if (rows.empty() || cols.empty())
      continue;
    z.row_groups.push_back(std::move(rows));
    z.col_groups.push_back(std::move(cols));
  }
  return z;
}

ArchSpec routed_perceptron(const ZeroedBlocks &blocks, std::size_t inputs,
                           Activation act, bool bias) {
  if (blocks.row_groups.empty())
    throw ArgumentError("block pattern is empty");
  ArchSpec arch;
  arch.input_shape = {inputs};
  std::vector<std::string> parts;
  std::vector<std::size_t> produced; // output column at each concat position
  for (std::size_t b = 0; b < blocks.row_groups.size(); ++b) {
    const std::string sid = "sel" + std::to_string(b), fid = "fc" + std::to_string(b);
    NodeSpec s = make_selection(sid, kInputNode, blocks.row_groups[b]);
    NodeSpec f = make_fc(fid, sid, blocks.col_groups[b].size(), act, bias);
    s.route_tag = f.route_tag = RouteTag{0, b};
    arch.nodes.push_back(std::move(s));
    arch.nodes.push_back(std::move(f));
    parts.push_back(fid);
    produced.insert(produced.end(), blocks.col_groups[b].begin(),
                    blocks.col_groups[b].end());
  }
  arch.nodes.push_back(make_concat("cat", parts));
  std::vector<std::size_t> inverse(produced.size());
  for (std::size_t p = 0; p < produced.size(); ++p)
    inverse.at(produced[p]) = p;
  arch.nodes.push_back(make_selection("order", "cat", inverse));
  arch.output = "order";
  arch.route_counts = {blocks.row_groups.size()};
  validate(arch);
  return arch;
}

template <typename T>
ParamStore<T> routed_params_from_dense(const ZeroedBlocks &blocks,
                                       const Tensor<T> &dense, bool bias) {
  const std::size_t width = dense.dim(1), m = width - (bias ? 1 : 0);
  ParamStore<T> ps;
  for (std::size_t b = 0; b < blocks.row_groups.size(); ++b) {
    const auto &rows = blocks.row_groups[b];
    const auto &cols = blocks.col_groups[b];
    const std::size_t w = rows.size() + (bias ? 1 : 0);
    Tensor<T> p({cols.size(), w});
    for (std::size_t o = 0; o < cols.size(); ++o) {
      for (std::size_t k = 0; k < rows.size(); ++k)
        p[o * w + k] = dense[cols[o] * width + rows[k]];
      if (bias)
        p[o * w + rows.size()] = dense[cols[o] * width + m];
    }
    ps.set(param_id("fc" + std::to_string(b)), std::move(p));
  }
  return ps;
}

template <typename T>
Tensor<T> mask_dense(const ZeroedBlocks &blocks, const Tensor<T> &dense, bool bias) {
  const std::size_t width = dense.dim(1), m = width - (bias ? 1 : 0);
  Tensor<T> out(dense.shape());
  for (std::size_t b = 0; b < blocks.row_groups.size(); ++b)
    for (std::size_t o : blocks.col_groups[b]) {
      for (std::size_t i : blocks.row_groups[b])
        out[o * width + i] = dense[o * width + i];
      if (bias)
        out[o * width + m] = dense[o * width + m];
    }
  return out;
}

template ParamStore<float> routed_params_from_dense(const ZeroedBlocks &,
                                                    const Tensor<float> &, bool);
template ParamStore<double> routed_params_from_dense(const ZeroedBlocks &,
                                                     const Tensor<double> &, bool);
template Tensor<float> mask_dense(const ZeroedBlocks &, const Tensor<float> &, bool);
template Tensor<double> mask_dense(const ZeroedBlocks &, const Tensor<double> &, bool);

SyntheticBlocks synthetic_block_matrix(std::size_t rows, std::size_t cols,
                                       std::size_t k, double noise,
                                       std::uint64_t seed) {
  if (k == 0 || k > std::min(rows, cols))
    throw ArgumentError("block count must be in [1, min(rows, cols)]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> amp(0.5, 1.0), off(-noise, noise);
  std::bernoulli_distribution sign(0.5);
  std::vector<std::size_t> rb(rows), cb(cols);
  for (std::size_t i = 0; i < rows; ++i)
    rb[i] = i * k / rows;
  for (std::size_t j = 0; j < cols; ++j)
    cb[j] = j * k / cols;
  std::vector<std::size_t> rp(rows), cp(cols);
  std::iota(rp.begin(), rp.end(), 0);
  std::iota(cp.begin(), cp.end(), 0);
  std::shuffle(rp.begin(), rp.end(), rng);
  std::shuffle(cp.begin(), cp.end(), rng);
  SyntheticBlocks out;
  out.lambda = Tensor<double>({rows, cols});
  out.row_block.resize(rows);
  out.col_block.resize(cols);
  for (std::size_t i = 0; i < rows; ++i)
    out.row_block[i] = rb[rp[i]];
  for (std::size_t j = 0; j < cols; ++j)
    out.col_block[j] = cb[cp[j]];
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double v = out.row_block[i] == out.col_block[j] ? amp(rng) : off(rng);
      if (out.row_block[i] == out.col_block[j] && sign(rng))
        v = -v;
      out.lambda[i * cols + j] = v;
    }
  return out;
}

namespace {

std::vector<std::size_t> pooled(const std::vector<std::size_t> &a,
                                const std::vector<std::size_t> &b) {
  std::vector<std::size_t> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

} // namespace

double block_recall(const BlockOrdering &ord, const std::vector<std::size_t> &true_rows,
                    const std::vector<std::size_t> &true_cols) {
  std::size_t same = 0, kept = 0;
  auto tally = [&](const std::vector<std::size_t> &truth,
                   const std::vector<std::size_t> &perm,
                   const std::vector<std::size_t> &blk) {
    // Position of each original index in the permuted order.
    std::vector<std::size_t> pos(perm.size());
    for (std::size_t p = 0; p < perm.size(); ++p)
      pos[perm[p]] = p;
    for (std::size_t a = 0; a < truth.size(); ++a)
      for (std::size_t b = a + 1; b < truth.size(); ++b) {
        if (truth[a] != truth[b])
          continue;
        ++same;
        // Same recovered block; blocks are contiguous in the permutation.
        if (blk[a] == blk[b]) {
          const std::size_t lo = std::min(pos[a], pos[b]), hi = std::max(pos[a], pos[b]);
          bool contiguous = true;
          for (std::size_t p = lo; p <= hi && contiguous; ++p)
            contiguous = blk[perm[p]] == blk[a];
          kept += contiguous;
        }
      }
  };
  tally(true_rows, ord.row_perm, ord.row_block);
  tally(true_cols, ord.col_perm, ord.col_block);
  return same ? static_cast<double>(kept) / static_cast<double>(same) : 1.0;
}

double block_agreement(const BlockOrdering &ord,
                       const std::vector<std::size_t> &true_rows,
                       const std::vector<std::size_t> &true_cols) {
  const std::vector<std::size_t> truth = pooled(true_rows, true_cols);
  const std::vector<std::size_t> got = pooled(ord.row_block, ord.col_block);
  std::size_t agree = 0, pairs = 0;
  for (std::size_t a = 0; a < truth.size(); ++a)
    for (std::size_t b = a + 1; b < truth.size(); ++b) {
      ++pairs;
      agree += (truth[a] == truth[b]) == (got[a] == got[b]);
    }
  return pairs ? static_cast<double>(agree) / static_cast<double>(pairs) : 1.0;
}

std::string matrix_csv(const Tensor<double> &m) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t rows = m.dim(0), cols = m.numel() / rows;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j)
      os << (j ? "," : "") << m[i * cols + j];
    os << '\n';
  }
  return os.str();
}

} // namespace condnet
