#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "bam/tensor.hpp"

namespace bam {

template <typename S>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid for the graph's lifetime.
template <typename S>
struct Var {
  Graph<S>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor<S>& val() const;
  const std::vector<int>& shape() const { return val().shape; }
};

/// Per-parameter gradient accumulators, indexed like the owning ParamStore.
template <typename S>
struct Grads {
  std::vector<Tensor<S>> slots;

  explicit Grads(std::size_t n = 0) : slots(n) {}

  void accumulate(int index, const Tensor<S>& g) {
    auto& slot = slots.at(static_cast<std::size_t>(index));
    if (slot.size() == 0)
      slot = g;
    else
      slot.data += g.data;
  }

  void add(const Grads& other) {
    if (slots.size() != other.slots.size())
      throw std::invalid_argument("grad size mismatch");
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (other.slots[i].size() == 0) continue;
      if (slots[i].size() == 0)
        slots[i] = other.slots[i];
      else
        slots[i].data += other.slots[i].data;
    }
  }
};

/// Reverse-mode tape. Build a fresh graph per forward pass, call backward()
/// on a scalar root, then read parameter gradients out of a Grads. Nodes
/// whose inputs carry no gradient are recorded without a backward closure,
/// so frozen subgraphs cost nothing on the reverse sweep.
template <typename S>
class Graph {
 public:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool needs_grad = false;
    int param = -1;
    std::function<void(Graph&, int)> backward;
  };

  int add_node(Tensor<S> value, bool needs_grad, int param = -1) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.param = param;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  Var<S> constant(Tensor<S> value) {
    return {this, add_node(std::move(value), false)};
  }

  Var<S> param(const Tensor<S>& value, int index, bool trainable) {
    return {this, add_node(value, trainable, index)};
  }

  Tensor<S>& grad_of(int id) {
    Node& n = node(id);
    if (n.grad.size() == 0) n.grad = Tensor<S>::zeros(n.value.shape);
    return n.grad;
  }

  bool has_grad(int id) const { return node(id).grad.size() != 0; }

  /// Propagate from a scalar root. Parameter gradients are accumulated into
  /// `grads` (when non-null) for every trainable leaf reached.
  void backward(Var<S> root, Grads<S>* grads) {
    if (root.graph != this) throw std::invalid_argument("root from another graph");
    if (node(root.id).value.size() != 1)
      throw std::invalid_argument("backward root must be scalar");
    grad_of(root.id).data.setConstant(S(1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = node(i);
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param >= 0 && grads != nullptr) grads->accumulate(n.param, n.grad);
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename S>
const Tensor<S>& Var<S>::val() const {
  return graph->node(id).value;
}

namespace detail {

template <typename S>
bool any_needs_grad(const std::vector<Var<S>>& vars) {
  for (const auto& v : vars)
    if (v.graph->node(v.id).needs_grad) return true;
  return false;
}

template <typename S>
int record(Graph<S>& g, Tensor<S> value, std::vector<Var<S>> inputs,
           std::function<void(Graph<S>&, int)> backward) {
  const bool needs = any_needs_grad(inputs);
  int id = g.add_node(std::move(value), needs);
  if (needs) g.node(id).backward = std::move(backward);
  return id;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Graph<S>& g = *a.graph;
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("add: shape mismatch");
  Tensor<S> out = a.val();
  out.data += b.val().data;
  int id = detail::record<S>(g, std::move(out), {a, b}, [a, b](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    if (gg.node(a.id).needs_grad) gg.grad_of(a.id).data += go.data;
    if (gg.node(b.id).needs_grad) gg.grad_of(b.id).data += go.data;
  });
  return {&g, id};
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Graph<S>& g = *a.graph;
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("sub: shape mismatch");
  Tensor<S> out = a.val();
  out.data -= b.val().data;
  int id = detail::record<S>(g, std::move(out), {a, b}, [a, b](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    if (gg.node(a.id).needs_grad) gg.grad_of(a.id).data += go.data;
    if (gg.node(b.id).needs_grad) gg.grad_of(b.id).data -= go.data;
  });
  return {&g, id};
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Graph<S>& g = *a.graph;
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("mul: shape mismatch");
  Tensor<S> out = a.val();
  out.data *= b.val().data;
  int id = detail::record<S>(g, std::move(out), {a, b}, [a, b](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    if (gg.node(a.id).needs_grad)
      gg.grad_of(a.id).data += go.data * gg.node(b.id).value.data;
    if (gg.node(b.id).needs_grad)
      gg.grad_of(b.id).data += go.data * gg.node(a.id).value.data;
  });
  return {&g, id};
}

template <typename S>
Var<S> scale(Var<S> x, S k) {
  Graph<S>& g = *x.graph;
  Tensor<S> out = x.val();
  out.data *= k;
  int id = detail::record<S>(g, std::move(out), {x}, [x, k](Graph<S>& gg, int self) {
    gg.grad_of(x.id).data += k * gg.node(self).grad.data;
  });
  return {&g, id};
}

template <typename S>
Var<S> relu(Var<S> x) {
  Graph<S>& g = *x.graph;
  Tensor<S> out = x.val();
  out.data = out.data.max(S(0));
  int id = detail::record<S>(g, std::move(out), {x}, [x](Graph<S>& gg, int self) {
    const auto& xin = gg.node(x.id).value.data;
    gg.grad_of(x.id).data +=
        gg.node(self).grad.data * (xin > S(0)).template cast<S>();
  });
  return {&g, id};
}

/// Full reduction to a scalar.
template <typename S>
Var<S> sum(Var<S> x) {
  Graph<S>& g = *x.graph;
  Tensor<S> out = Tensor<S>::scalar(x.val().data.sum());
  int id = detail::record<S>(g, std::move(out), {x}, [x](Graph<S>& gg, int self) {
    gg.grad_of(x.id).data += gg.node(self).grad.data[0];
  });
  return {&g, id};
}

template <typename S>
Var<S> mean_of(const std::vector<Var<S>>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("mean_of: empty list");
  Var<S> acc = scalars[0];
  for (std::size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
  return scale(acc, S(1) / static_cast<S>(scalars.size()));
}

/// s / (s + m) for a scalar var and positive constant m.
template <typename S>
Var<S> squash(Var<S> s, S m) {
  Graph<S>& g = *s.graph;
  if (s.val().size() != 1) throw std::invalid_argument("squash: scalar expected");
  const S sv = s.val()[0];
  Tensor<S> out = Tensor<S>::scalar(sv / (sv + m));
  int id = detail::record<S>(g, std::move(out), {s}, [s, m](Graph<S>& gg, int self) {
    const S sv2 = gg.node(s.id).value[0];
    const S d = m / ((sv2 + m) * (sv2 + m));
    gg.grad_of(s.id).data[0] += gg.node(self).grad.data[0] * d;
  });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Linear algebra ops
// ---------------------------------------------------------------------------

/// y = W x for W {m,n} and x {n}.
template <typename S>
Var<S> matvec(Var<S> w, Var<S> x) {
  Graph<S>& g = *w.graph;
  const int m = w.val().dim(0), n = w.val().dim(1);
  if (x.val().rank() != 1 || x.val().dim(0) != n)
    throw std::invalid_argument("matvec: shape mismatch");
  Tensor<S> out({m});
  out.vec() = w.val().mat(m, n) * x.val().vec();
  int id = detail::record<S>(g, std::move(out), {w, x}, [w, x, m, n](Graph<S>& gg, int self) {
    const auto& go = gg.node(self).grad;
    if (gg.node(w.id).needs_grad)
      gg.grad_of(w.id).mat(m, n) += go.vec() * gg.node(x.id).value.vec().transpose();
    if (gg.node(x.id).needs_grad)
      gg.grad_of(x.id).vec() += gg.node(w.id).value.mat(m, n).transpose() * go.vec();
  });
  return {&g, id};
}

/// y = W^T x for W {n,m} and x {n}.
template <typename S>
Var<S> matvec_t(Var<S> w, Var<S> x) {
  Graph<S>& g = *w.graph;
  const int n = w.val().dim(0), m = w.val().dim(1);
  if (x.val().rank() != 1 || x.val().dim(0) != n)
    throw std::invalid_argument("matvec_t: shape mismatch");
  Tensor<S> out({m});
  out.vec() = w.val().mat(n, m).transpose() * x.val().vec();
  int id = detail::record<S>(g, std::move(out), {w, x}, [w, x, n, m](Graph<S>& gg, int self) {
    const auto& go = gg.node(self).grad;
    if (gg.node(w.id).needs_grad)
      gg.grad_of(w.id).mat(n, m) += gg.node(x.id).value.vec() * go.vec().transpose();
    if (gg.node(x.id).needs_grad)
      gg.grad_of(x.id).vec() += gg.node(w.id).value.mat(n, m) * go.vec();
  });
  return {&g, id};
}

/// Weighted sum of same-shaped tensors with a {K} weight vector:
/// out = sum_i weights[i] * inputs[i].
template <typename S>
Var<S> lincomb(const std::vector<Var<S>>& inputs, Var<S> weights) {
  if (inputs.empty()) throw std::invalid_argument("lincomb: empty inputs");
  Graph<S>& g = *weights.graph;
  const int k = static_cast<int>(inputs.size());
  if (weights.val().size() != k) throw std::invalid_argument("lincomb: weight count mismatch");
  Tensor<S> out = Tensor<S>::zeros(inputs[0].val().shape);
  for (int i = 0; i < k; ++i) {
    if (!inputs[i].val().same_shape(out)) throw std::invalid_argument("lincomb: shape mismatch");
    out.data += weights.val()[i] * inputs[i].val().data;
  }
  std::vector<Var<S>> all = inputs;
  all.push_back(weights);
  std::vector<int> in_ids;
  for (const auto& v : inputs) in_ids.push_back(v.id);
  int id = detail::record<S>(g, std::move(out), all,
                             [in_ids, weights](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    for (std::size_t i = 0; i < in_ids.size(); ++i) {
      const int xi = in_ids[i];
      if (gg.node(xi).needs_grad)
        gg.grad_of(xi).data += gg.node(weights.id).value[static_cast<std::int64_t>(i)] * go.data;
      if (gg.node(weights.id).needs_grad)
        gg.grad_of(weights.id).data[static_cast<std::int64_t>(i)] +=
            (go.data * gg.node(xi).value.data).sum();
    }
  });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> concat_channels(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: empty");
  Graph<S>& g = *parts[0].graph;
  const int h = parts[0].val().dim(1), w = parts[0].val().dim(2);
  int ctotal = 0;
  for (const auto& p : parts) {
    if (p.val().rank() != 3 || p.val().dim(1) != h || p.val().dim(2) != w)
      throw std::invalid_argument("concat: spatial mismatch");
    ctotal += p.val().dim(0);
  }
  Tensor<S> out({ctotal, h, w});
  std::int64_t off = 0;
  for (const auto& p : parts) {
    out.data.segment(off, p.val().size()) = p.val().data;
    off += p.val().size();
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  int id = detail::record<S>(g, std::move(out), parts, [ids](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    std::int64_t off2 = 0;
    for (int pid : ids) {
      const std::int64_t n = gg.node(pid).value.size();
      if (gg.node(pid).needs_grad)
        gg.grad_of(pid).data += go.data.segment(off2, n);
      off2 += n;
    }
  });
  return {&g, id};
}

/// Channels [c0, c1) of a {C,H,W} tensor.
template <typename S>
Var<S> slice_channels(Var<S> x, int c0, int c1) {
  Graph<S>& g = *x.graph;
  const auto& xs = x.val().shape;
  if (c0 < 0 || c1 > xs[0] || c0 >= c1) throw std::invalid_argument("slice: bad range");
  const std::int64_t plane = static_cast<std::int64_t>(xs[1]) * xs[2];
  Tensor<S> out({c1 - c0, xs[1], xs[2]});
  out.data = x.val().data.segment(c0 * plane, (c1 - c0) * plane);
  int id = detail::record<S>(g, std::move(out), {x}, [x, c0, c1, plane](Graph<S>& gg, int self) {
    gg.grad_of(x.id).data.segment(c0 * plane, (c1 - c0) * plane) += gg.node(self).grad.data;
  });
  return {&g, id};
}

/// Sum a {C,H,W} map over channels into {1,H,W}.
template <typename S>
Var<S> sum_channels(Var<S> x) {
  Graph<S>& g = *x.graph;
  const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<S> out({1, h, w});
  for (int ci = 0; ci < c; ++ci) out.data += x.val().data.segment(ci * plane, plane);
  int id = detail::record<S>(g, std::move(out), {x}, [x, c, plane](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    auto& gx = gg.grad_of(x.id);
    for (int ci = 0; ci < c; ++ci) gx.data.segment(ci * plane, plane) += go.data;
  });
  return {&g, id};
}

/// Expand a {C} vector to a constant {C,H,W} map.
template <typename S>
Var<S> broadcast_to_map(Var<S> v, int h, int w) {
  Graph<S>& g = *v.graph;
  if (v.val().rank() != 1) throw std::invalid_argument("broadcast: vector expected");
  const int c = v.val().dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<S> out({c, h, w});
  for (int i = 0; i < c; ++i) out.data.segment(i * plane, plane).setConstant(v.val()[i]);
  int id = detail::record<S>(g, std::move(out), {v}, [v, c, plane](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    auto& gv = gg.grad_of(v.id);
    for (int i = 0; i < c; ++i) gv.data[i] += go.data.segment(i * plane, plane).sum();
  });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvSpec {
  int stride = 1;
  int pad = 1;
  int dilation = 1;
};

inline int conv_out_extent(int in, int kernel, const ConvSpec& spec) {
  const int eff = spec.dilation * (kernel - 1) + 1;
  return (in + 2 * spec.pad - eff) / spec.stride + 1;
}

namespace detail {

template <typename S>
Tensor<S> im2col(const Tensor<S>& x, int kh, int kw, const ConvSpec& spec,
                 int ho, int wo) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<S> cols({c * kh * kw, ho * wo});
  std::int64_t row = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++row) {
        S* dst = cols.data.data() + row * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * spec.stride - spec.pad + ky * spec.dilation;
          if (iy < 0 || iy >= h) {
            std::fill(dst + static_cast<std::int64_t>(oy) * wo,
                      dst + static_cast<std::int64_t>(oy + 1) * wo, S(0));
            continue;
          }
          const S* src = x.data.data() + (static_cast<std::int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * spec.stride - spec.pad + kx * spec.dilation;
            dst[static_cast<std::int64_t>(oy) * wo + ox] =
                (ix >= 0 && ix < w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im_add(const Tensor<S>& cols, int c, int h, int w, int kh, int kw,
                const ConvSpec& spec, int ho, int wo, Tensor<S>& dx) {
  std::int64_t row = 0;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++row) {
        const S* src = cols.data.data() + row * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * spec.stride - spec.pad + ky * spec.dilation;
          if (iy < 0 || iy >= h) continue;
          S* dst = dx.data.data() + (static_cast<std::int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * spec.stride - spec.pad + kx * spec.dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[static_cast<std::int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-d convolution: x {C,H,W}, w {F,C,kh,kw}, b {F} -> {F,Ho,Wo}.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, const ConvSpec& spec) {
  Graph<S>& g = *x.graph;
  const auto& xs = x.val().shape;
  const auto& ws = w.val().shape;
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0])
    throw std::invalid_argument("conv2d: shape mismatch");
  const int f = ws[0], c = ws[1], kh = ws[2], kw = ws[3];
  const int ho = conv_out_extent(xs[1], kh, spec);
  const int wo = conv_out_extent(xs[2], kw, spec);
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");
  if (b.val().size() != f) throw std::invalid_argument("conv2d: bias mismatch");

  auto cols = std::make_shared<Tensor<S>>(detail::im2col(x.val(), kh, kw, spec, ho, wo));
  Tensor<S> out({f, ho, wo});
  out.mat(f, static_cast<std::int64_t>(ho) * wo).noalias() =
      w.val().mat(f, static_cast<std::int64_t>(c) * kh * kw) *
      cols->mat(static_cast<std::int64_t>(c) * kh * kw, static_cast<std::int64_t>(ho) * wo);
  for (int fi = 0; fi < f; ++fi)
    out.data.segment(static_cast<std::int64_t>(fi) * ho * wo, static_cast<std::int64_t>(ho) * wo) +=
        b.val()[fi];

  const int h = xs[1], wdt = xs[2];
  int id = detail::record<S>(
      g, std::move(out), {x, w, b},
      [x, w, b, cols, spec, f, c, kh, kw, h, wdt, ho, wo](Graph<S>& gg, int self) {
        const Tensor<S>& go = gg.node(self).grad;
        const std::int64_t hw = static_cast<std::int64_t>(ho) * wo;
        const std::int64_t ckk = static_cast<std::int64_t>(c) * kh * kw;
        auto gmat = go.mat(f, hw);
        if (gg.node(w.id).needs_grad)
          gg.grad_of(w.id).mat(f, ckk).noalias() += gmat * cols->mat(ckk, hw).transpose();
        if (gg.node(b.id).needs_grad) {
          auto& gb = gg.grad_of(b.id);
          for (int fi = 0; fi < f; ++fi) gb.data[fi] += gmat.row(fi).sum();
        }
        if (gg.node(x.id).needs_grad) {
          Tensor<S> dcols({static_cast<int>(ckk), static_cast<int>(hw)});
          dcols.mat(ckk, hw).noalias() =
              gg.node(w.id).value.mat(f, ckk).transpose() * gmat;
          detail::col2im_add(dcols, c, h, wdt, kh, kw, spec, ho, wo, gg.grad_of(x.id));
        }
      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Group normalization over a {C,H,W} map with per-channel affine params.
template <typename S>
Var<S> group_norm(Var<S> x, Var<S> gamma, Var<S> beta, int groups, S eps = S(1e-5)) {
  Graph<S>& g = *x.graph;
  const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
  if (c % groups != 0) throw std::invalid_argument("group_norm: channels % groups != 0");
  if (gamma.val().size() != c || beta.val().size() != c)
    throw std::invalid_argument("group_norm: affine size mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const int cg = c / groups;
  const std::int64_t gsize = cg * plane;

  auto xhat = std::make_shared<Tensor<S>>(Tensor<S>::zeros({c, h, w}));
  auto inv_sigma = std::make_shared<std::vector<S>>(static_cast<std::size_t>(groups));
  Tensor<S> out({c, h, w});
  for (int gi = 0; gi < groups; ++gi) {
    auto seg = x.val().data.segment(gi * gsize, gsize);
    const S mu = seg.mean();
    const S var = (seg - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(gi)] = is;
    xhat->data.segment(gi * gsize, gsize) = (seg - mu) * is;
  }
  for (int ci = 0; ci < c; ++ci)
    out.data.segment(ci * plane, plane) =
        gamma.val()[ci] * xhat->data.segment(ci * plane, plane) + beta.val()[ci];

  int id = detail::record<S>(
      g, std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_sigma, groups, c, plane, cg, gsize](Graph<S>& gg, int self) {
        const Tensor<S>& go = gg.node(self).grad;
        if (gg.node(gamma.id).needs_grad) {
          auto& ggam = gg.grad_of(gamma.id);
          for (int ci = 0; ci < c; ++ci)
            ggam.data[ci] +=
                (go.data.segment(ci * plane, plane) * xhat->data.segment(ci * plane, plane)).sum();
        }
        if (gg.node(beta.id).needs_grad) {
          auto& gbet = gg.grad_of(beta.id);
          for (int ci = 0; ci < c; ++ci) gbet.data[ci] += go.data.segment(ci * plane, plane).sum();
        }
        if (gg.node(x.id).needs_grad) {
          auto& gx = gg.grad_of(x.id);
          Tensor<S> dxhat = Tensor<S>::zeros(go.shape);
          for (int ci = 0; ci < c; ++ci)
            dxhat.data.segment(ci * plane, plane) =
                go.data.segment(ci * plane, plane) * gg.node(gamma.id).value[ci];
          for (int gi = 0; gi < groups; ++gi) {
            auto dxh = dxhat.data.segment(gi * gsize, gsize);
            auto xh = xhat->data.segment(gi * gsize, gsize);
            const S m1 = dxh.mean();
            const S m2 = (dxh * xh).mean();
            gx.data.segment(gi * gsize, gsize) +=
                (*inv_sigma)[static_cast<std::size_t>(gi)] * (dxh - m1 - xh * m2);
          }
        }
      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

/// Channel softmax at every spatial location of a {C,H,W} map.
template <typename S>
Var<S> softmax_channels(Var<S> x) {
  Graph<S>& g = *x.graph;
  const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<S> out({c, h, w});
  for (std::int64_t p = 0; p < plane; ++p) {
    S mx = x.val().data[p];
    for (int ci = 1; ci < c; ++ci) mx = std::max(mx, x.val().data[ci * plane + p]);
    S z = S(0);
    for (int ci = 0; ci < c; ++ci) {
      const S e = std::exp(x.val().data[ci * plane + p] - mx);
      out.data[ci * plane + p] = e;
      z += e;
    }
    for (int ci = 0; ci < c; ++ci) out.data[ci * plane + p] /= z;
  }
  int id = detail::record<S>(g, std::move(out), {x}, [x, c, plane](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    const Tensor<S>& y = gg.node(self).value;
    auto& gx = gg.grad_of(x.id);
    for (std::int64_t p = 0; p < plane; ++p) {
      S dot = S(0);
      for (int ci = 0; ci < c; ++ci) dot += go.data[ci * plane + p] * y.data[ci * plane + p];
      for (int ci = 0; ci < c; ++ci)
        gx.data[ci * plane + p] += y.data[ci * plane + p] * (go.data[ci * plane + p] - dot);
    }
  });
  return {&g, id};
}

template <typename S>
Var<S> softmax_vec(Var<S> x) {
  Graph<S>& g = *x.graph;
  const std::int64_t n = x.val().size();
  Tensor<S> out = x.val();
  const S mx = out.data.maxCoeff();
  out.data = (out.data - mx).exp();
  out.data /= out.data.sum();
  int id = detail::record<S>(g, std::move(out), {x}, [x, n](Graph<S>& gg, int self) {
    const auto& go = gg.node(self).grad.data;
    const auto& y = gg.node(self).value.data;
    const S dot = (go * y).sum();
    (void)n;
    gg.grad_of(x.id).data += y * (go - dot);
  });
  return {&g, id};
}

inline constexpr double kLogClamp = 1e-12;

/// Mean pixel-wise cross-entropy of a {C,H,W} probability map against an
/// integer label map; log is clamped at 1e-12.
template <typename S>
Var<S> cross_entropy_prob(Var<S> prob, const LabelMap& labels) {
  Graph<S>& g = *prob.graph;
  const int c = prob.val().dim(0), h = prob.val().dim(1), w = prob.val().dim(2);
  if (labels.height != h || labels.width != w)
    throw std::invalid_argument("cross_entropy: label shape mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto lbl = std::make_shared<LabelMap>(labels);
  S total = S(0);
  for (std::int64_t p = 0; p < plane; ++p) {
    const std::int32_t l = labels.labels[static_cast<std::size_t>(p)];
    if (l < 0 || l >= c) throw std::invalid_argument("cross_entropy: label out of range");
    total -= std::log(std::max(prob.val().data[l * plane + p], S(kLogClamp)));
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(plane));
  int id = detail::record<S>(g, std::move(out), {prob}, [prob, lbl, plane](Graph<S>& gg, int self) {
    const S gs = gg.node(self).grad.data[0];
    auto& gp = gg.grad_of(prob.id);
    const auto& pv = gg.node(prob.id).value.data;
    for (std::int64_t p = 0; p < plane; ++p) {
      const std::int32_t l = lbl->labels[static_cast<std::size_t>(p)];
      const S pval = pv[l * plane + p];
      if (pval > S(kLogClamp))
        gp.data[l * plane + p] -= gs / (static_cast<S>(plane) * pval);
    }
  });
  return {&g, id};
}

/// Mean binary cross-entropy of a foreground probability map ({H,W} or
/// {1,H,W}) against a binary mask; both logs clamped at 1e-12.
template <typename S>
Var<S> binary_cross_entropy_prob(Var<S> prob, const LabelMap& mask) {
  Graph<S>& g = *prob.graph;
  const auto& ps = prob.val().shape;
  const int h = ps.size() == 3 ? ps[1] : ps[0];
  const int w = ps.size() == 3 ? ps[2] : ps[1];
  if (ps.size() == 3 && ps[0] != 1) throw std::invalid_argument("bce: single channel expected");
  if (mask.height != h || mask.width != w) throw std::invalid_argument("bce: mask shape mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto msk = std::make_shared<LabelMap>(mask);
  S total = S(0);
  for (std::int64_t p = 0; p < plane; ++p) {
    const std::int32_t y = mask.labels[static_cast<std::size_t>(p)];
    if (y != 0 && y != 1) throw std::invalid_argument("bce: mask must be binary");
    const S pv = prob.val().data[p];
    total -= (y == 1) ? std::log(std::max(pv, S(kLogClamp)))
                      : std::log(std::max(S(1) - pv, S(kLogClamp)));
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(plane));
  int id = detail::record<S>(g, std::move(out), {prob}, [prob, msk, plane](Graph<S>& gg, int self) {
    const S gs = gg.node(self).grad.data[0];
    auto& gp = gg.grad_of(prob.id);
    const auto& pv = gg.node(prob.id).value.data;
    for (std::int64_t p = 0; p < plane; ++p) {
      const std::int32_t y = msk->labels[static_cast<std::size_t>(p)];
      if (y == 1) {
        if (pv[p] > S(kLogClamp)) gp.data[p] -= gs / (static_cast<S>(plane) * pv[p]);
      } else {
        if (S(1) - pv[p] > S(kLogClamp))
          gp.data[p] += gs / (static_cast<S>(plane) * (S(1) - pv[p]));
      }
    }
  });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Resampling and pooling
// ---------------------------------------------------------------------------

namespace detail {

struct ResizeAxis {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

inline ResizeAxis resize_axis(int in, int out) {
  ResizeAxis a;
  a.lo.resize(static_cast<std::size_t>(out));
  a.hi.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    a.lo[static_cast<std::size_t>(i)] = lo;
    a.hi[static_cast<std::size_t>(i)] = std::min(lo + 1, in - 1);
    a.frac[static_cast<std::size_t>(i)] = src - lo;
  }
  return a;
}

}  // namespace detail

/// Bilinear resampling of a {C,H,W} map to {C,Ho,Wo} (half-pixel centers).
template <typename S>
Var<S> resize_bilinear(Var<S> x, int ho, int wo) {
  Graph<S>& g = *x.graph;
  const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
  auto ay = std::make_shared<detail::ResizeAxis>(detail::resize_axis(h, ho));
  auto ax = std::make_shared<detail::ResizeAxis>(detail::resize_axis(w, wo));
  Tensor<S> out({c, ho, wo});
  for (int ci = 0; ci < c; ++ci) {
    const S* src = x.val().data.data() + static_cast<std::int64_t>(ci) * h * w;
    S* dst = out.data.data() + static_cast<std::int64_t>(ci) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const int y0 = ay->lo[oy], y1 = ay->hi[oy];
      const S fy = static_cast<S>(ay->frac[oy]);
      for (int ox = 0; ox < wo; ++ox) {
        const int x0 = ax->lo[ox], x1 = ax->hi[ox];
        const S fx = static_cast<S>(ax->frac[ox]);
        const S v00 = src[static_cast<std::int64_t>(y0) * w + x0];
        const S v01 = src[static_cast<std::int64_t>(y0) * w + x1];
        const S v10 = src[static_cast<std::int64_t>(y1) * w + x0];
        const S v11 = src[static_cast<std::int64_t>(y1) * w + x1];
        dst[static_cast<std::int64_t>(oy) * wo + ox] =
            (S(1) - fy) * ((S(1) - fx) * v00 + fx * v01) + fy * ((S(1) - fx) * v10 + fx * v11);
      }
    }
  }
  int id = detail::record<S>(g, std::move(out), {x}, [x, ay, ax, c, h, w, ho, wo](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    auto& gx = gg.grad_of(x.id);
    for (int ci = 0; ci < c; ++ci) {
      S* dst = gx.data.data() + static_cast<std::int64_t>(ci) * h * w;
      const S* src = go.data.data() + static_cast<std::int64_t>(ci) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const int y0 = ay->lo[oy], y1 = ay->hi[oy];
        const S fy = static_cast<S>(ay->frac[oy]);
        for (int ox = 0; ox < wo; ++ox) {
          const int x0 = ax->lo[ox], x1 = ax->hi[ox];
          const S fx = static_cast<S>(ax->frac[ox]);
          const S gv = src[static_cast<std::int64_t>(oy) * wo + ox];
          dst[static_cast<std::int64_t>(y0) * w + x0] += (S(1) - fy) * (S(1) - fx) * gv;
          dst[static_cast<std::int64_t>(y0) * w + x1] += (S(1) - fy) * fx * gv;
          dst[static_cast<std::int64_t>(y1) * w + x0] += fy * (S(1) - fx) * gv;
          dst[static_cast<std::int64_t>(y1) * w + x1] += fy * fx * gv;
        }
      }
    }
  });
  return {&g, id};
}

/// Adaptive average pooling of a {C,H,W} map to a {C,ph,pw} grid.
template <typename S>
Var<S> adaptive_avg_pool(Var<S> x, int ph, int pw) {
  Graph<S>& g = *x.graph;
  const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
  if (ph < 1 || pw < 1) throw std::invalid_argument("pool: bad grid");
  auto bin = [](int i, int n, int p) {
    return std::pair<int, int>{(i * n) / p, ((i + 1) * n + p - 1) / p};
  };
  Tensor<S> out({c, ph, pw});
  for (int ci = 0; ci < c; ++ci) {
    for (int by = 0; by < ph; ++by) {
      auto [y0, y1] = bin(by, h, ph);
      for (int bx = 0; bx < pw; ++bx) {
        auto [x0, x1] = bin(bx, w, pw);
        S acc = S(0);
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) acc += x.val().at(ci, y, xx);
        out.at(ci, by, bx) = acc / static_cast<S>((y1 - y0) * (x1 - x0));
      }
    }
  }
  int id = detail::record<S>(g, std::move(out), {x}, [x, c, h, w, ph, pw](Graph<S>& gg, int self) {
    auto bin = [](int i, int n, int p) {
      return std::pair<int, int>{(i * n) / p, ((i + 1) * n + p - 1) / p};
    };
    const Tensor<S>& go = gg.node(self).grad;
    auto& gx = gg.grad_of(x.id);
    for (int ci = 0; ci < c; ++ci) {
      for (int by = 0; by < ph; ++by) {
        auto [y0, y1] = bin(by, h, ph);
        for (int bx = 0; bx < pw; ++bx) {
          auto [x0, x1] = bin(bx, w, pw);
          const S gv = go.at(ci, by, bx) / static_cast<S>((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx) gx.at(ci, y, xx) += gv;
        }
      }
    }
  });
  return {&g, id};
}

/// Masked average pooling: per-channel weighted spatial mean of f {C,h,w}
/// under fixed non-negative weights {h,w}, with an epsilon-guarded
/// denominator. Returns a {C} vector.
template <typename S>
Var<S> masked_average_pool(Var<S> f, const Tensor<S>& weights, S eps = S(1e-5)) {
  Graph<S>& g = *f.graph;
  const int c = f.val().dim(0), h = f.val().dim(1), w = f.val().dim(2);
  if (weights.rank() != 2 || weights.dim(0) != h || weights.dim(1) != w)
    throw std::invalid_argument("masked_average_pool: weight shape mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto wshared = std::make_shared<Tensor<S>>(weights);
  const S denom = weights.data.sum() + eps;
  Tensor<S> out({c});
  for (int ci = 0; ci < c; ++ci)
    out.data[ci] = (f.val().data.segment(ci * plane, plane) * weights.data).sum() / denom;
  int id = detail::record<S>(g, std::move(out), {f}, [f, wshared, denom, c, plane](Graph<S>& gg, int self) {
    const Tensor<S>& go = gg.node(self).grad;
    auto& gf = gg.grad_of(f.id);
    for (int ci = 0; ci < c; ++ci)
      gf.data.segment(ci * plane, plane) += (go.data[ci] / denom) * wshared->data;
  });
  return {&g, id};
}

}  // namespace bam
