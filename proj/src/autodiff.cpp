// SPDX-License-Identifier: Apache-2.0

#include <condnet/autodiff.hpp>
#include <condnet/simd/kernels.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace condnet {

std::string_view activation_name(Activation act) {
  switch (act) {
  case Activation::Identity:
    return "identity";
  case Activation::ReLU:
    return "relu";
  case Activation::Sigmoid:
    return "sigmoid";
  case Activation::Softmax:
    return "softmax";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "none")
    return Activation::Identity;
  if (name == "relu")
    return Activation::ReLU;
  if (name == "sigmoid")
    return Activation::Sigmoid;
  if (name == "softmax")
    return Activation::Softmax;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

// ---- ParamStore ------------------------------------------------------------

template <typename T>
Param<T> &ParamStore<T>::set(const std::string &id, Tensor<T> value) {
  params_.erase(id);
  return params_.emplace(id, Param<T>(id, std::move(value))).first->second;
}

template <typename T> Param<T> &ParamStore<T>::at(const std::string &id) {
  auto it = params_.find(id);
  if (it == params_.end())
    throw StateError("missing parameter '" + id + "'");
  return it->second;
}

template <typename T>
const Param<T> &ParamStore<T>::at(const std::string &id) const {
  auto it = params_.find(id);
  if (it == params_.end())
    throw StateError("missing parameter '" + id + "'");
  return it->second;
}

template <typename T> Param<T> *ParamStore<T>::find(const std::string &id) {
  auto it = params_.find(id);
  return it == params_.end() ? nullptr : &it->second;
}

template <typename T> std::size_t ParamStore<T>::element_count() const {
  std::size_t n = 0;
  for (const auto &[id, p] : params_)
    n += p.value.numel();
  return n;
}

template <typename T> void ParamStore<T>::zero_grad() {
  for (auto &[id, p] : params_)
    p.zero_grad();
}

template <typename T>
bool ParamStore<T>::same_values(const ParamStore &other) const {
  if (params_.size() != other.params_.size())
    return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b)
    if (a->first != b->first || !(a->second.value == b->second.value))
      return false;
  return true;
}

template class ParamStore<float>;
template class ParamStore<double>;

// ---- Tape ------------------------------------------------------------------

template <typename T> VarId Tape<T>::input(Tensor<T> value) {
  Entry e;
  e.op = "input";
  e.tag = tag_;
  e.value = std::move(value);
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

template <typename T> VarId Tape<T>::param(Param<T> &p) {
  if (auto it = param_vars_.find(&p); it != param_vars_.end())
    return it->second;
  Entry e;
  e.op = "param";
  e.tag = tag_;
  e.value = p.value;
  e.param = &p;
  entries_.push_back(std::move(e));
  const VarId v = entries_.size() - 1;
  param_vars_.emplace(&p, v);
  return v;
}

template <typename T>
VarId Tape<T>::record(std::string op, std::vector<VarId> operands,
                      Tensor<T> value, BackwardFn backward, Tensor<T> saved) {
  for (VarId v : operands)
    if (v >= entries_.size())
      throw StateError("tape operand " + std::to_string(v) +
                       " recorded after its consumer '" + op + "'");
  if (!value.all_finite())
    throw EvaluationError("non-finite value produced by '" + op + "'" +
                          (tag_.empty() ? "" : " at node '" + tag_ + "'"));
  Entry e;
  e.op = std::move(op);
  e.tag = tag_;
  e.operands = std::move(operands);
  e.value = std::move(value);
  e.saved = std::move(saved);
  e.backward = std::move(backward);
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

template <typename T> const typename Tape<T>::Entry &Tape<T>::entry(VarId v) const {
  if (v >= entries_.size())
    throw StateError("unknown tape variable " + std::to_string(v));
  return entries_[v];
}

template <typename T> std::size_t Tape<T>::count_tagged(std::string_view tag) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(),
      [&](const Entry &e) { return e.tag == tag && e.op != "param"; }));
}

template <typename T> Tensor<T> &Tape<T>::grad(VarId v) {
  if (v >= entries_.size())
    throw StateError("unknown tape variable " + std::to_string(v));
  if (grads_.size() < entries_.size()) {
    grads_.resize(entries_.size());
    has_grad_.resize(entries_.size(), false);
  }
  if (!has_grad_[v]) {
    grads_[v] = Tensor<T>(entries_[v].value.shape());
    has_grad_[v] = true;
  }
  return grads_[v];
}

template <typename T> void Tape<T>::backward(const Tensor<T> &loss_grad) {
  if (entries_.empty())
    throw StateError("backward called before any forward pass was recorded");
  backward(entries_.size() - 1, loss_grad);
}

template <typename T>
void Tape<T>::backward(VarId output, const Tensor<T> &loss_grad) {
  if (entries_.empty())
    throw StateError("backward called before any forward pass was recorded");
  if (output >= entries_.size())
    throw StateError("backward from unknown variable");
  require_same_shape(loss_grad.shape(), entries_[output].value.shape(),
                     "loss gradient");
  grads_.assign(entries_.size(), Tensor<T>());
  has_grad_.assign(entries_.size(), false);
  grad(output) = loss_grad;
  for (VarId k = output + 1; k-- > 0;) {
    if (!has_grad_[k])
      continue;
    Entry &e = entries_[k];
    if (e.param) {
      simd::kernels<T>().axpy(T(1), grads_[k].ptr(), e.param->grad.ptr(),
                              grads_[k].numel());
    } else if (e.backward) {
      e.backward(*this, k);
    }
  }
}

template class Tape<float>;
template class Tape<double>;

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad,
                            std::size_t stride) {
  if (stride == 0)
    throw ConfigError("stride must be positive");
  if (in + 2 * pad < kernel)
    throw DimensionError("kernel " + std::to_string(kernel) +
                         " larger than padded input " +
                         std::to_string(in + 2 * pad));
  return (in + 2 * pad - kernel) / stride + 1;
}

// ---- activations -------------------------------------------------------------

template <typename T> T sigmoid(T x) {
  if (x >= T(0))
    return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template float sigmoid(float);
template double sigmoid(double);

template <typename T> Tensor<T> softmax_rows(const Tensor<T> &x) {
  if (x.rank() != 2)
    throw DimensionError("softmax expects [batch x features], got " +
                         shape_string(x.shape()));
  Tensor<T> y(x.shape());
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    const T *in = x.ptr() + r * cols;
    T *out = y.ptr() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      mx = std::max(mx, in[c]);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - mx);
      total += out[c];
    }
    for (std::size_t c = 0; c < cols; ++c)
      out[c] /= total;
  }
  return y;
}

template Tensor<float> softmax_rows(const Tensor<float> &);
template Tensor<double> softmax_rows(const Tensor<double> &);

template <typename T>
Tensor<T> apply_activation(const Tensor<T> &x, Activation act) {
  switch (act) {
  case Activation::Identity:
    return x;
  case Activation::ReLU: {
    Tensor<T> y(x.shape());
    simd::kernels<T>().relu(x.ptr(), y.ptr(), x.numel());
    return y;
  }
  case Activation::Sigmoid: {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
      y[i] = sigmoid(x[i]);
    return y;
  }
  case Activation::Softmax:
    return softmax_rows(x);
  }
  return x;
}

template Tensor<float> apply_activation(const Tensor<float> &, Activation);
template Tensor<double> apply_activation(const Tensor<double> &, Activation);

namespace {

/// g_pre += d act / d pre applied to g_out.
template <typename T>
void activation_backward(Activation act, const Tensor<T> &pre,
                         const Tensor<T> &out, const Tensor<T> &g_out,
                         Tensor<T> &g_pre) {
  const auto &k = simd::kernels<T>();
  const std::size_t n = g_out.numel();
  switch (act) {
  case Activation::Identity:
    k.axpy(T(1), g_out.ptr(), g_pre.ptr(), n);
    break;
  case Activation::ReLU:
    k.relu_backward(pre.ptr(), g_out.ptr(), g_pre.ptr(), n);
    break;
  case Activation::Sigmoid:
    for (std::size_t i = 0; i < n; ++i)
      g_pre[i] += g_out[i] * out[i] * (T(1) - out[i]);
    break;
  case Activation::Softmax: {
    const std::size_t rows = out.dim(0), cols = out.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const T *y = out.ptr() + r * cols;
      const T *g = g_out.ptr() + r * cols;
      const T inner = k.dot(g, y, cols);
      T *gp = g_pre.ptr() + r * cols;
      for (std::size_t c = 0; c < cols; ++c)
        gp[c] += y[c] * (g[c] - inner);
    }
    break;
  }
  }
}

/// d loss / d pre-activation for an entry whose saved tensor is the
/// pre-activation.
template <typename T>
Tensor<T> pre_activation_grad(Tape<T> &tape, VarId self, Activation act) {
  const auto &e = tape.entry(self);
  Tensor<T> g_pre(e.value.shape());
  activation_backward(act, e.saved, e.value, tape.grad(self), g_pre);
  return g_pre;
}

void require_rank(const Shape &s, std::size_t rank, const char *what) {
  if (s.size() != rank)
    throw DimensionError(std::string(what) + " expects rank " +
                         std::to_string(rank) + " input, got " +
                         shape_string(s));
}

// ---- convolution kernels -------------------------------------------------------

struct ConvDims {
  std::size_t batch, c_in, h, w, c_out, kh, kw, ho, wo, hp, wp, cin_g, cout_g;
};

template <typename T>
ConvDims conv_dims(const Shape &xs, const Shape &ws, const ConvGeometry &g) {
  require_rank(xs, 4, "conv2d");
  require_rank(ws, 4, "conv2d weights");
  ConvDims d{};
  d.batch = xs[0];
  d.c_in = xs[1];
  d.h = xs[2];
  d.w = xs[3];
  d.c_out = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  if (g.groups == 0 || d.c_in % g.groups != 0 || d.c_out % g.groups != 0)
    throw ConfigError("group count " + std::to_string(g.groups) +
                      " does not divide channels (in " +
                      std::to_string(d.c_in) + ", out " +
                      std::to_string(d.c_out) + ")");
  d.cin_g = d.c_in / g.groups;
  d.cout_g = d.c_out / g.groups;
  if (ws[1] != d.cin_g)
    throw DimensionError("conv2d weights " + shape_string(ws) +
                         " do not match input " + shape_string(xs) +
                         " with " + std::to_string(g.groups) + " groups");
  d.ho = conv_out_extent(d.h, d.kh, g.pad_h, g.stride);
  d.wo = conv_out_extent(d.w, d.kw, g.pad_w, g.stride);
  d.hp = d.h + 2 * g.pad_h;
  d.wp = d.w + 2 * g.pad_w;
  return d;
}

/// Copies sample b of x into a zero-padded [C x Hp x Wp] buffer.
template <typename T>
void pad_sample(const Tensor<T> &x, std::size_t b, const ConvDims &d,
                const ConvGeometry &g, std::vector<T> &buf) {
  buf.assign(d.c_in * d.hp * d.wp, T(0));
  for (std::size_t c = 0; c < d.c_in; ++c)
    for (std::size_t y = 0; y < d.h; ++y) {
      const T *src = x.ptr() + ((b * d.c_in + c) * d.h + y) * d.w;
      T *dst = buf.data() + (c * d.hp + y + g.pad_h) * d.wp + g.pad_w;
      std::copy(src, src + d.w, dst);
    }
}

/// Pre-activation of a grouped convolution. For stride 1 each (channel,
/// ky, kx) tap is one axpy over the padded-width output plane; the
/// accumulation order per output element matches reference::conv2d_naive.
template <typename T>
Tensor<T> conv_forward(const Tensor<T> &x, const Tensor<T> &w,
                       const ConvGeometry &g) {
  const ConvDims d = conv_dims<T>(x.shape(), w.shape(), g);
  if (g.stride != 1)
    return reference::conv2d_naive(x, w, g);
  const auto &k = simd::kernels<T>();
  Tensor<T> out({d.batch, d.c_out, d.ho, d.wo});
  const std::size_t span_len = (d.ho - 1) * d.wp + d.wo;
  std::vector<T> padded;
  std::vector<T> plane(span_len);
  for (std::size_t b = 0; b < d.batch; ++b) {
    pad_sample(x, b, d, g, padded);
    for (std::size_t o = 0; o < d.c_out; ++o) {
      std::fill(plane.begin(), plane.end(), T(0));
      const std::size_t group = o / d.cout_g;
      for (std::size_t ci = 0; ci < d.cin_g; ++ci) {
        const T *src = padded.data() + (group * d.cin_g + ci) * d.hp * d.wp;
        const T *wk = w.ptr() + ((o * d.cin_g + ci) * d.kh) * d.kw;
        for (std::size_t ky = 0; ky < d.kh; ++ky)
          for (std::size_t kx = 0; kx < d.kw; ++kx)
            k.axpy(wk[ky * d.kw + kx], src + ky * d.wp + kx, plane.data(),
                   span_len);
      }
      T *dst = out.ptr() + (b * d.c_out + o) * d.ho * d.wo;
      for (std::size_t y = 0; y < d.ho; ++y)
        std::copy(plane.data() + y * d.wp, plane.data() + y * d.wp + d.wo,
                  dst + y * d.wo);
    }
  }
  return out;
}

/// Accumulates weight and input gradients of a grouped convolution given the
/// gradient at its pre-activation.
template <typename T>
void conv_backward(const Tensor<T> &x, const Tensor<T> &w,
                   const ConvGeometry &g, const Tensor<T> &g_pre,
                   Tensor<T> *g_x, Tensor<T> *g_w) {
  const ConvDims d = conv_dims<T>(x.shape(), w.shape(), g);
  if (g.stride != 1) {
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t o = 0; o < d.c_out; ++o) {
        const std::size_t group = o / d.cout_g;
        for (std::size_t y = 0; y < d.ho; ++y)
          for (std::size_t xo = 0; xo < d.wo; ++xo) {
            const T go = g_pre[((b * d.c_out + o) * d.ho + y) * d.wo + xo];
            for (std::size_t ci = 0; ci < d.cin_g; ++ci) {
              const std::size_t c = group * d.cin_g + ci;
              for (std::size_t ky = 0; ky < d.kh; ++ky) {
                const std::ptrdiff_t iy = std::ptrdiff_t(y * g.stride + ky) -
                                          std::ptrdiff_t(g.pad_h);
                if (iy < 0 || iy >= std::ptrdiff_t(d.h))
                  continue;
                for (std::size_t kx = 0; kx < d.kw; ++kx) {
                  const std::ptrdiff_t ix = std::ptrdiff_t(xo * g.stride + kx) -
                                            std::ptrdiff_t(g.pad_w);
                  if (ix < 0 || ix >= std::ptrdiff_t(d.w))
                    continue;
                  const std::size_t xi =
                      ((b * d.c_in + c) * d.h + std::size_t(iy)) * d.w +
                      std::size_t(ix);
                  const std::size_t wi = ((o * d.cin_g + ci) * d.kh + ky) * d.kw + kx;
                  if (g_w)
                    (*g_w)[wi] += go * x[xi];
                  if (g_x)
                    (*g_x)[xi] += go * w[wi];
                }
              }
            }
          }
      }
    return;
  }

  const auto &k = simd::kernels<T>();
  const std::size_t span_len = (d.ho - 1) * d.wp + d.wo;
  std::vector<T> padded;
  std::vector<T> g_padded;
  std::vector<T> plane(span_len);
  for (std::size_t b = 0; b < d.batch; ++b) {
    pad_sample(x, b, d, g, padded);
    if (g_x)
      g_padded.assign(d.c_in * d.hp * d.wp, T(0));
    for (std::size_t o = 0; o < d.c_out; ++o) {
      std::fill(plane.begin(), plane.end(), T(0));
      const T *src = g_pre.ptr() + (b * d.c_out + o) * d.ho * d.wo;
      for (std::size_t y = 0; y < d.ho; ++y)
        std::copy(src + y * d.wo, src + (y + 1) * d.wo, plane.data() + y * d.wp);
      const std::size_t group = o / d.cout_g;
      for (std::size_t ci = 0; ci < d.cin_g; ++ci) {
        const std::size_t c = group * d.cin_g + ci;
        const T *in = padded.data() + c * d.hp * d.wp;
        const std::size_t wbase = ((o * d.cin_g + ci) * d.kh) * d.kw;
        for (std::size_t ky = 0; ky < d.kh; ++ky)
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const std::size_t off = ky * d.wp + kx;
            const std::size_t wi = wbase + ky * d.kw + kx;
            if (g_w)
              (*g_w)[wi] += k.dot(plane.data(), in + off, span_len);
            if (g_x)
              k.axpy(w[wi], plane.data(),
                     g_padded.data() + c * d.hp * d.wp + off, span_len);
          }
      }
    }
    if (g_x)
      for (std::size_t c = 0; c < d.c_in; ++c)
        for (std::size_t y = 0; y < d.h; ++y) {
          const T *srow =
              g_padded.data() + (c * d.hp + y + g.pad_h) * d.wp + g.pad_w;
          T *drow = g_x->ptr() + ((b * d.c_in + c) * d.h + y) * d.w;
          k.axpy(T(1), srow, drow, d.w);
        }
  }
}

} // namespace

// ---- primitives ----------------------------------------------------------------

namespace ops {

template <typename T>
VarId fc(Tape<T> &tape, VarId xv, Param<T> &p, bool bias, Activation act) {
  const Tensor<T> &x = tape.value(xv);
  require_rank(x.shape(), 2, "fc");
  require_rank(p.value.shape(), 2, "fc weights");
  const std::size_t batch = x.dim(0), m = x.dim(1), n = p.value.dim(0);
  if (p.value.dim(1) != m + (bias ? 1 : 0))
    throw DimensionError("fc weights " + shape_string(p.value.shape()) +
                         " incompatible with input " + shape_string(x.shape()) +
                         (bias ? " (homogeneous)" : ""));
  const auto &k = simd::kernels<T>();
  const std::size_t stride = p.value.dim(1);
  Tensor<T> pre({batch, n});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < n; ++o) {
      const T *row = p.value.ptr() + o * stride;
      T v = k.dot(row, x.ptr() + b * m, m);
      if (bias)
        v += row[m];
      pre[b * n + o] = v;
    }
  Tensor<T> out = apply_activation(pre, act);
  const VarId pv = tape.param(p);
  return tape.record(
      "fc", {xv, pv}, std::move(out),
      [bias, act, batch, m, n, stride](Tape<T> &t, VarId self) {
        const Tensor<T> g_pre = pre_activation_grad(t, self, act);
        const auto &e = t.entry(self);
        const Tensor<T> &x = t.value(e.operands[0]);
        const Tensor<T> &w = t.value(e.operands[1]);
        const auto &k = simd::kernels<T>();
        Tensor<T> &gw = t.grad(e.operands[1]);
        Tensor<T> &gx = t.grad(e.operands[0]);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < n; ++o) {
            const T go = g_pre[b * n + o];
            if (go == T(0))
              continue;
            k.axpy(go, x.ptr() + b * m, gw.ptr() + o * stride, m);
            if (bias)
              gw[o * stride + m] += go;
            k.axpy(go, w.ptr() + o * stride, gx.ptr() + b * m, m);
          }
      },
      std::move(pre));
}

template <typename T>
VarId conv2d(Tape<T> &tape, VarId xv, Param<T> &w, const ConvGeometry &geom,
             Activation act) {
  if (act == Activation::Softmax)
    throw ConfigError("softmax activation is not defined for feature maps");
  Tensor<T> pre = conv_forward(tape.value(xv), w.value, geom);
  Tensor<T> out = apply_activation(pre, act);
  const VarId wv = tape.param(w);
  return tape.record(
      "conv2d", {xv, wv}, std::move(out),
      [geom, act](Tape<T> &t, VarId self) {
        const Tensor<T> g_pre = pre_activation_grad(t, self, act);
        const auto &e = t.entry(self);
        conv_backward(t.value(e.operands[0]), t.value(e.operands[1]), geom,
                      g_pre, &t.grad(e.operands[0]), &t.grad(e.operands[1]));
      },
      std::move(pre));
}

template <typename T> VarId activate(Tape<T> &tape, VarId xv, Activation act) {
  const Tensor<T> &x = tape.value(xv);
  if (act == Activation::Softmax)
    require_rank(x.shape(), 2, "softmax");
  return tape.record(
      std::string(activation_name(act)), {xv}, apply_activation(x, act),
      [act](Tape<T> &t, VarId self) {
        const auto &e = t.entry(self);
        activation_backward(act, t.value(e.operands[0]), e.value, t.grad(self),
                            t.grad(e.operands[0]));
      });
}

template <typename T>
VarId max_pool(Tape<T> &tape, VarId xv, std::size_t kernel, std::size_t stride) {
  const Tensor<T> &x = tape.value(xv);
  require_rank(x.shape(), 4, "max_pool");
  if (kernel == 0)
    throw ConfigError("max_pool kernel must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t ho = conv_out_extent(H, kernel, 0, stride);
  const std::size_t wo = conv_out_extent(W, kernel, 0, stride);
  Tensor<T> out({B, C, ho, wo});
  Tensor<T> argmax({B, C, ho, wo});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T *in = x.ptr() + bc * H * W;
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xo = 0; xo < wo; ++xo) {
        std::size_t best = (y * stride) * W + xo * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (y * stride + ky) * W + xo * stride + kx;
            if (in[idx] > in[best])
              best = idx;
          }
        out[(bc * ho + y) * wo + xo] = in[best];
        argmax[(bc * ho + y) * wo + xo] = static_cast<T>(best);
      }
  }
  return tape.record(
      "max_pool", {xv}, std::move(out),
      [H, W](Tape<T> &t, VarId self) {
        const auto &e = t.entry(self);
        const Tensor<T> &g = t.grad(self);
        Tensor<T> &gx = t.grad(e.operands[0]);
        const std::size_t per = e.value.dim(2) * e.value.dim(3);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const std::size_t plane = i / per;
          gx[plane * H * W + static_cast<std::size_t>(e.saved[i])] += g[i];
        }
      },
      std::move(argmax));
}

template <typename T> VarId global_max_pool(Tape<T> &tape, VarId xv) {
  const Tensor<T> &x = tape.value(xv);
  require_rank(x.shape(), 4, "global_max_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0)
    throw DimensionError("global_max_pool on empty feature map");
  Tensor<T> out({B, C});
  Tensor<T> argmax({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T *in = x.ptr() + bc * HW;
    std::size_t best = 0;
    for (std::size_t i = 1; i < HW; ++i)
      if (in[i] > in[best])
        best = i;
    out[bc] = in[best];
    argmax[bc] = static_cast<T>(best);
  }
  return tape.record(
      "global_max_pool", {xv}, std::move(out),
      [HW](Tape<T> &t, VarId self) {
        const auto &e = t.entry(self);
        const Tensor<T> &g = t.grad(self);
        Tensor<T> &gx = t.grad(e.operands[0]);
        for (std::size_t bc = 0; bc < g.numel(); ++bc)
          gx[bc * HW + static_cast<std::size_t>(e.saved[bc])] += g[bc];
      },
      std::move(argmax));
}

template <typename T> VarId flatten(Tape<T> &tape, VarId xv) {
  const Tensor<T> &x = tape.value(xv);
  if (x.rank() == 2)
    return xv;
  const std::size_t B = x.dim(0);
  return tape.record("flatten", {xv}, x.reshape({B, x.numel() / B}),
                     [](Tape<T> &t, VarId self) {
                       const auto &e = t.entry(self);
                       const Tensor<T> &g = t.grad(self);
                       simd::kernels<T>().axpy(T(1), g.ptr(),
                                               t.grad(e.operands[0]).ptr(),
                                               g.numel());
                     });
}

template <typename T> VarId concat(Tape<T> &tape, std::span<const VarId> xs) {
  if (xs.empty())
    throw DimensionError("concat needs at least one operand");
  if (xs.size() == 1)
    return xs[0];
  const Shape &first = tape.value(xs[0]).shape();
  if (first.size() < 2)
    throw DimensionError("concat expects rank >= 2 operands");
  std::size_t channels = 0;
  for (VarId v : xs) {
    const Shape &s = tape.value(v).shape();
    Shape a = s, b = first;
    if (a.size() != b.size())
      throw DimensionError("concat operand " + shape_string(s) +
                           " does not match " + shape_string(first));
    a[1] = b[1] = 0;
    if (a != b)
      throw DimensionError("concat operand " + shape_string(s) +
                           " does not match " + shape_string(first) +
                           " outside the channel dimension");
    channels += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = channels;
  const std::size_t B = first[0];
  const std::size_t inner = shape_numel(first) / (first[0] * first[1]);
  Tensor<T> out(out_shape);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t c0 = 0;
    for (VarId v : xs) {
      const Tensor<T> &x = tape.value(v);
      const std::size_t cs = x.dim(1);
      std::copy(x.ptr() + b * cs * inner, x.ptr() + (b + 1) * cs * inner,
                out.ptr() + (b * channels + c0) * inner);
      c0 += cs;
    }
  }
  return tape.record(
      "concat", std::vector<VarId>(xs.begin(), xs.end()), std::move(out),
      [B, inner, channels](Tape<T> &t, VarId self) {
        const auto &e = t.entry(self);
        const Tensor<T> &g = t.grad(self);
        std::size_t c0 = 0;
        for (VarId v : e.operands) {
          const std::size_t cs = t.value(v).dim(1);
          Tensor<T> &gx = t.grad(v);
          for (std::size_t b = 0; b < B; ++b)
            simd::kernels<T>().axpy(T(1),
                                    g.ptr() + (b * channels + c0) * inner,
                                    gx.ptr() + b * cs * inner, cs * inner);
          c0 += cs;
        }
      });
}

template <typename T>
VarId select(Tape<T> &tape, VarId xv, std::span<const std::size_t> indices) {
  const Tensor<T> &x = tape.value(xv);
  if (x.rank() < 2)
    throw DimensionError("select expects rank >= 2 input");
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t inner = x.numel() / (B * C == 0 ? 1 : B * C);
  for (std::size_t i : indices)
    if (i >= C)
      throw DimensionError("selection index " + std::to_string(i) +
                           " out of range for " + shape_string(x.shape()));
  Shape s = x.shape();
  s[1] = indices.size();
  Tensor<T> out(s);
  const std::size_t K = indices.size();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      std::copy(x.ptr() + (b * C + indices[k]) * inner,
                x.ptr() + (b * C + indices[k] + 1) * inner,
                out.ptr() + (b * K + k) * inner);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return tape.record("select", {xv}, std::move(out),
                     [idx, B, C, K, inner](Tape<T> &t, VarId self) {
                       const auto &e = t.entry(self);
                       const Tensor<T> &g = t.grad(self);
                       Tensor<T> &gx = t.grad(e.operands[0]);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t k = 0; k < K; ++k)
                           simd::kernels<T>().axpy(
                               T(1), g.ptr() + (b * K + k) * inner,
                               gx.ptr() + (b * C + idx[k]) * inner, inner);
                     });
}

template <typename T> VarId stack_batch(Tape<T> &tape, std::span<const VarId> xs) {
  if (xs.empty())
    throw DimensionError("stack_batch needs at least one operand");
  if (xs.size() == 1)
    return xs[0];
  Shape s = tape.value(xs[0]).shape();
  std::size_t rows = 0;
  std::vector<T> data;
  for (VarId v : xs) {
    const Tensor<T> &x = tape.value(v);
    Shape a = x.shape(), b = s;
    a[0] = b[0] = 0;
    if (a != b)
      throw DimensionError("stack_batch operand " + shape_string(x.shape()) +
                           " does not match " + shape_string(s));
    rows += x.dim(0);
    data.insert(data.end(), x.data().begin(), x.data().end());
  }
  s[0] = rows;
  return tape.record("stack_batch", std::vector<VarId>(xs.begin(), xs.end()),
                     Tensor<T>(s, std::move(data)), [](Tape<T> &t, VarId self) {
                       const auto &e = t.entry(self);
                       const Tensor<T> &g = t.grad(self);
                       std::size_t off = 0;
                       for (VarId v : e.operands) {
                         Tensor<T> &gx = t.grad(v);
                         simd::kernels<T>().axpy(T(1), g.ptr() + off, gx.ptr(),
                                                 gx.numel());
                         off += gx.numel();
                       }
                     });
}

template <typename T>
VarId weighted_sum(Tape<T> &tape, VarId wv,
                   std::span<const std::optional<VarId>> routes) {
  const Tensor<T> &w = tape.value(wv);
  require_rank(w.shape(), 2, "weighted_sum weights");
  const std::size_t B = w.dim(0), R = w.dim(1);
  if (routes.size() != R)
    throw DimensionError("weighted_sum: " + std::to_string(routes.size()) +
                         " routes for " + std::to_string(R) + " weights");
  const Shape *shape = nullptr;
  std::vector<VarId> operands{wv};
  std::vector<std::size_t> present;
  for (std::size_t j = 0; j < R; ++j) {
    if (!routes[j]) {
      for (std::size_t b = 0; b < B; ++b)
        if (w[b * R + j] != T(0))
          throw StateError("unvisited route " + std::to_string(j) +
                           " carries non-zero weight");
      continue;
    }
    const Shape &s = tape.value(*routes[j]).shape();
    if (shape && s != *shape)
      throw DimensionError("route outputs disagree: " + shape_string(s) +
                           " vs " + shape_string(*shape));
    if (s[0] != B)
      throw DimensionError("route output batch " + shape_string(s) +
                           " does not match weights " + shape_string(w.shape()));
    shape = &s;
    operands.push_back(*routes[j]);
    present.push_back(j);
  }
  if (!shape)
    throw StateError("weighted_sum with no visited route");
  const auto &k = simd::kernels<T>();
  Tensor<T> out(*shape);
  const std::size_t inner = out.numel() / B;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < present.size(); ++p)
      k.axpy(w[b * R + present[p]], tape.value(operands[p + 1]).ptr() + b * inner,
             out.ptr() + b * inner, inner);
  return tape.record(
      "weighted_sum", std::move(operands), std::move(out),
      [present, B, R, inner](Tape<T> &t, VarId self) {
        const auto &e = t.entry(self);
        const Tensor<T> &g = t.grad(self);
        const Tensor<T> &w = t.value(e.operands[0]);
        const auto &k = simd::kernels<T>();
        Tensor<T> &gw = t.grad(e.operands[0]);
        for (std::size_t p = 0; p < present.size(); ++p) {
          const VarId rv = e.operands[p + 1];
          const Tensor<T> &v = t.value(rv);
          Tensor<T> &gv = t.grad(rv);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t j = present[p];
            gw[b * R + j] += k.dot(g.ptr() + b * inner, v.ptr() + b * inner, inner);
            k.axpy(w[b * R + j], g.ptr() + b * inner, gv.ptr() + b * inner,
                   inner);
          }
        }
      });
}

#define CONDNET_INSTANTIATE_OPS(T)                                             \
  template VarId fc(Tape<T> &, VarId, Param<T> &, bool, Activation);          \
  template VarId conv2d(Tape<T> &, VarId, Param<T> &, const ConvGeometry &,    \
                        Activation);                                           \
  template VarId activate(Tape<T> &, VarId, Activation);                       \
  template VarId max_pool(Tape<T> &, VarId, std::size_t, std::size_t);         \
  template VarId global_max_pool(Tape<T> &, VarId);                            \
  template VarId flatten(Tape<T> &, VarId);                                    \
  template VarId concat(Tape<T> &, std::span<const VarId>);                    \
  template VarId select(Tape<T> &, VarId, std::span<const std::size_t>);       \
  template VarId stack_batch(Tape<T> &, std::span<const VarId>);               \
  template VarId weighted_sum(Tape<T> &, VarId,                                \
                              std::span<const std::optional<VarId>>);

CONDNET_INSTANTIATE_OPS(float)
CONDNET_INSTANTIATE_OPS(double)
#undef CONDNET_INSTANTIATE_OPS

} // namespace ops

// ---- reference executors ---------------------------------------------------------

namespace reference {

template <typename T>
Tensor<T> conv2d_naive(const Tensor<T> &x, const Tensor<T> &w,
                       const ConvGeometry &g, MacCounter *counter) {
  const ConvDims d = conv_dims<T>(x.shape(), w.shape(), g);
  Tensor<T> out({d.batch, d.c_out, d.ho, d.wo});
  std::uint64_t macs = 0;
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t o = 0; o < d.c_out; ++o) {
      const std::size_t group = o / d.cout_g;
      for (std::size_t y = 0; y < d.ho; ++y)
        for (std::size_t xo = 0; xo < d.wo; ++xo) {
          T acc = 0;
          for (std::size_t ci = 0; ci < d.cin_g; ++ci) {
            const std::size_t c = group * d.cin_g + ci;
            for (std::size_t ky = 0; ky < d.kh; ++ky)
              for (std::size_t kx = 0; kx < d.kw; ++kx) {
                const std::ptrdiff_t iy =
                    std::ptrdiff_t(y * g.stride + ky) - std::ptrdiff_t(g.pad_h);
                const std::ptrdiff_t ix =
                    std::ptrdiff_t(xo * g.stride + kx) - std::ptrdiff_t(g.pad_w);
                const bool inside = iy >= 0 && iy < std::ptrdiff_t(d.h) &&
                                    ix >= 0 && ix < std::ptrdiff_t(d.w);
                const T v = inside ? x[((b * d.c_in + c) * d.h + std::size_t(iy)) *
                                           d.w +
                                       std::size_t(ix)]
                                   : T(0);
                acc += w[((o * d.cin_g + ci) * d.kh + ky) * d.kw + kx] * v;
                ++macs;
              }
          }
          out[((b * d.c_out + o) * d.ho + y) * d.wo + xo] = acc;
        }
    }
  if (counter)
    counter->count += macs;
  return out;
}

template <typename T>
Tensor<T> fc_naive(const Tensor<T> &x, const Tensor<T> &p, bool bias,
                   MacCounter *counter) {
  require_rank(x.shape(), 2, "fc");
  require_rank(p.shape(), 2, "fc weights");
  const std::size_t B = x.dim(0), m = x.dim(1), n = p.dim(0);
  if (p.dim(1) != m + (bias ? 1 : 0))
    throw DimensionError("fc weights " + shape_string(p.shape()) +
                         " incompatible with input " + shape_string(x.shape()));
  Tensor<T> out({B, n});
  std::uint64_t macs = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < n; ++o) {
      T acc = 0;
      for (std::size_t i = 0; i < p.dim(1); ++i) {
        const T xi = i < m ? x[b * m + i] : T(1);
        acc += p[o * p.dim(1) + i] * xi;
        ++macs;
      }
      out[b * n + o] = acc;
    }
  if (counter)
    counter->count += macs;
  return out;
}

template Tensor<float> conv2d_naive(const Tensor<float> &, const Tensor<float> &,
                                    const ConvGeometry &, MacCounter *);
template Tensor<double> conv2d_naive(const Tensor<double> &,
                                     const Tensor<double> &,
                                     const ConvGeometry &, MacCounter *);
template Tensor<float> fc_naive(const Tensor<float> &, const Tensor<float> &,
                                bool, MacCounter *);
template Tensor<double> fc_naive(const Tensor<double> &, const Tensor<double> &,
                                 bool, MacCounter *);

} // namespace reference

// ---- finite differences ------------------------------------------------------------

template <typename T>
FdReport finite_difference_check(const ScalarObjective<T> &f,
                                 ParamStore<T> &params, double h, double eps) {
  params.zero_grad();
  const T base = f(params, true);
  if (!std::isfinite(static_cast<double>(base)))
    throw EvaluationError("objective is not finite at the base point");
  FdReport report;
  for (auto &[id, p] : params) {
    const Tensor<T> analytic = p.grad;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const T saved = p.value[i];
      p.value[i] = saved + static_cast<T>(h);
      const double plus = static_cast<double>(f(params, false));
      p.value[i] = saved - static_cast<T>(h);
      const double minus = static_cast<double>(f(params, false));
      p.value[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus))
        throw EvaluationError("objective not finite while perturbing '" + id +
                              "'[" + std::to_string(i) + "]");
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), eps});
      const double rel = std::abs(a - numeric) / denom;
      if (report.checked == 0 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = id;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
      ++report.checked;
    }
  }
  return report;
}

template FdReport finite_difference_check(const ScalarObjective<float> &,
                                          ParamStore<float> &, double, double);
template FdReport finite_difference_check(const ScalarObjective<double> &,
                                          ParamStore<double> &, double, double);

} // namespace condnet
