#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "smcd/error.hpp"
#include "smcd/tensor.hpp"

namespace smcd {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy.
template <typename T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return g->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  bool requires_grad() const { return g->requires_grad(id); }
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order, so walking them backwards is a valid topological order.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>& dy)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }
  Var<T> leaf(Tensor<T> v, bool requires_grad) {
    return push(std::move(v), requires_grad && grad_enabled_, {});
  }

  /// Records an op result. The backward closure is kept only when some input
  /// requires a gradient.
  Var<T> make(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& in : inputs) rg = rg || requires_grad(in.id);
    return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
  }
  Var<T> make(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_)
      for (const auto& in : inputs) rg = rg || requires_grad(in.id);
    return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer for a node, zero-allocated on first access. Returns
  /// nullptr for nodes that do not take part in differentiation.
  Tensor<T>* grad(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }
  const Tensor<T>* grad_if_any(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad.size() == n.value.size() && n.requires_grad ? &n.grad : nullptr;
  }

  void backward(Var<T> loss) {
    SMCD_REQUIRE(loss.g == this && loss.value().size() == 1, ContractViolation,
                 "backward needs a scalar node of this graph");
    if (!requires_grad(loss.id)) return;
    (*grad(loss.id))[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> v, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, rg, std::move(bw)});
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

namespace ops {

namespace detail {
template <typename T>
void accumulate(Graph<T>& g, int id, const Tensor<T>& d) {
  if (Tensor<T>* gr = g.grad(id)) {
    T* p = gr->data();
    const T* q = d.data();
    for (std::size_t i = 0; i < d.size(); ++i) p[i] += q[i];
  }
}
inline int rows_of(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= static_cast<std::size_t>(s[i]);
  return static_cast<int>(n);
}
}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  SMCD_REQUIRE(a.shape() == b.shape(), ShapeError,
               "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ia = a.id, ib = b.id;
  return a.g->make(std::move(out), {a, b}, [ia, ib](Graph<T>& g, const Tensor<T>& dy) {
    detail::accumulate(g, ia, dy);
    detail::accumulate(g, ib, dy);
  });
}

/// x[..., C] + v[C]
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> v) {
  const int c = x.dim(-1);
  SMCD_REQUIRE(static_cast<int>(v.value().size()) == c, ShapeError, "add_bias: width mismatch");
  Tensor<T> out = x.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vv[i % static_cast<std::size_t>(c)];
  const int ix = x.id, iv = v.id;
  return x.g->make(std::move(out), {x, v}, [ix, iv, c](Graph<T>& g, const Tensor<T>& dy) {
    detail::accumulate(g, ix, dy);
    if (Tensor<T>* gv = g.grad(iv))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gv)[i % static_cast<std::size_t>(c)] += dy[i];
  });
}

/// x[B, ...] + y[1, ...], broadcasting y over the leading axis.
template <typename T>
Var<T> add_broadcast_leading(Var<T> x, Var<T> y) {
  const std::size_t inner = y.value().size();
  SMCD_REQUIRE(inner > 0 && x.value().size() % inner == 0 && y.dim(0) == 1, ShapeError,
               "add_broadcast_leading: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  Tensor<T> out = x.value();
  const auto& yv = y.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[i % inner];
  const int ix = x.id, iy = y.id;
  return x.g->make(std::move(out), {x, y}, [ix, iy, inner](Graph<T>& g, const Tensor<T>& dy) {
    detail::accumulate(g, ix, dy);
    if (Tensor<T>* gy = g.grad(iy))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gy)[i % inner] += dy[i];
  });
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v *= c;
  const int ix = x.id;
  return x.g->make(std::move(out), {x}, [ix, c](Graph<T>& g, const Tensor<T>& dy) {
    if (Tensor<T>* gx = g.grad(ix))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += c * dy[i];
  });
}

/// s * x with s a single-element node.
template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  SMCD_REQUIRE(s.value().size() == 1, ShapeError, "mul_scalar: gate must be a scalar");
  const T sv = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v *= sv;
  const int ix = x.id, is = s.id;
  return x.g->make(std::move(out), {x, s}, [ix, is, sv](Graph<T>& g, const Tensor<T>& dy) {
    const Tensor<T>& xv = g.value(ix);
    if (Tensor<T>* gs = g.grad(is)) {
      T acc = 0;
      for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * xv[i];
      (*gs)[0] += acc;
    }
    if (Tensor<T>* gx = g.grad(ix))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += sv * dy[i];
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = std::tanh(v);
  const int ix = x.id;
  Tensor<T> y = out;
  return x.g->make(std::move(out), {x}, [ix, y = std::move(y)](Graph<T>& g, const Tensor<T>& dy) {
    if (Tensor<T>* gx = g.grad(ix))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> silu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (T(1) + std::exp(-xv[i]));
  const int ix = x.id;
  return x.g->make(std::move(out), {x}, [ix](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>* gx = g.grad(ix);
    if (!gx) return;
    const Tensor<T>& xv = g.value(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-xv[i]));
      (*gx)[i] += dy[i] * s * (T(1) + xv[i] * (T(1) - s));
    }
  });
}

/// x[..., K] * W[K, N] -> [..., N], optionally plus bias b[N].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b = std::nullopt) {
  const int k = x.dim(-1);
  SMCD_REQUIRE(w.value().rank() == 2 && w.dim(0) == k, ShapeError,
               "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int n = w.dim(1);
  Shape os = x.shape();
  os.back() = n;
  Tensor<T> out(os);
  auto y = as_matrix(out);
  y.noalias() = as_matrix(x.value()) * as_matrix(w.value());
  if (b) {
    SMCD_REQUIRE(static_cast<int>(b->value().size()) == n, ShapeError, "linear: bias width mismatch");
    y.rowwise() += ConstMatMap<T>(b->value().data(), 1, n).row(0);
  }
  const int ix = x.id, iw = w.id, ib = b ? b->id : -1;
  std::vector<Var<T>> ins{x, w};
  if (b) ins.push_back(*b);
  return x.g->make(std::move(out), ins, [ix, iw, ib, n](Graph<T>& g, const Tensor<T>& dy) {
    auto dym = as_matrix(dy);
    if (Tensor<T>* gx = g.grad(ix)) as_matrix(*gx).noalias() += dym * as_matrix(g.value(iw)).transpose();
    if (Tensor<T>* gw = g.grad(iw)) as_matrix(*gw).noalias() += as_matrix(g.value(ix)).transpose() * dym;
    if (ib >= 0)
      if (Tensor<T>* gb = g.grad(ib)) MatMap<T>(gb->data(), 1, n) += dym.colwise().sum();
  });
}

/// Normalizes each row over the last dimension, then applies gamma/beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const int c = x.dim(-1);
  const int rows = detail::rows_of(x.shape());
  SMCD_REQUIRE(static_cast<int>(gamma.value().size()) == c && static_cast<int>(beta.value().size()) == c,
               ShapeError, "layer_norm: affine width mismatch");
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const T* xr = xv.data() + static_cast<std::size_t>(r) * c;
    double mean = 0, var = 0;
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= c;
    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= c;
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
    inv_std[r] = is;
    for (int j = 0; j < c; ++j) {
      const std::size_t o = static_cast<std::size_t>(r) * c + j;
      xhat[o] = static_cast<T>(xr[j] - mean) * is;
      out[o] = xhat[o] * gv[j] + bv[j];
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.g->make(std::move(out), {x, gamma, beta},
                   [ix, ig, ib, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       Graph<T>& g, const Tensor<T>& dy) {
                     const auto& gv = g.value(ig);
                     Tensor<T>* gg = g.grad(ig);
                     Tensor<T>* gb = g.grad(ib);
                     Tensor<T>* gx = g.grad(ix);
                     std::vector<T> dxhat(static_cast<std::size_t>(c));
                     for (int r = 0; r < rows; ++r) {
                       const std::size_t base = static_cast<std::size_t>(r) * c;
                       T m1 = 0, m2 = 0;
                       for (int j = 0; j < c; ++j) {
                         const T d = dy[base + j];
                         if (gg) (*gg)[j] += d * xhat[base + j];
                         if (gb) (*gb)[j] += d;
                         dxhat[j] = d * gv[j];
                         m1 += dxhat[j];
                         m2 += dxhat[j] * xhat[base + j];
                       }
                       if (!gx) continue;
                       m1 /= c;
                       m2 /= c;
                       for (int j = 0; j < c; ++j)
                         (*gx)[base + j] += inv_std[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
                     }
                   });
}

/// Group normalization over x[B, H, W, C] (any middle dims): statistics per
/// (batch, channel group) across all positions.
template <typename T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& xs = x.shape();
  const int c = xs.back();
  SMCD_REQUIRE(groups > 0 && c % groups == 0, ShapeError, "group_norm: channels not divisible by groups");
  SMCD_REQUIRE(static_cast<int>(gamma.value().size()) == c && static_cast<int>(beta.value().size()) == c,
               ShapeError, "group_norm: affine width mismatch");
  const int b = xs[0];
  const int positions = static_cast<int>(x.value().size() / (static_cast<std::size_t>(b) * c));
  const int cg = c / groups;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  std::vector<T> inv_std(static_cast<std::size_t>(b) * groups);
  const double n = static_cast<double>(positions) * cg;
  for (int bi = 0; bi < b; ++bi) {
    const std::size_t base = static_cast<std::size_t>(bi) * positions * c;
    for (int gi = 0; gi < groups; ++gi) {
      double mean = 0, var = 0;
      for (int p = 0; p < positions; ++p)
        for (int j = gi * cg; j < (gi + 1) * cg; ++j) mean += xv[base + static_cast<std::size_t>(p) * c + j];
      mean /= n;
      for (int p = 0; p < positions; ++p)
        for (int j = gi * cg; j < (gi + 1) * cg; ++j) {
          const double d = xv[base + static_cast<std::size_t>(p) * c + j] - mean;
          var += d * d;
        }
      var /= n;
      const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
      inv_std[static_cast<std::size_t>(bi) * groups + gi] = is;
      for (int p = 0; p < positions; ++p)
        for (int j = gi * cg; j < (gi + 1) * cg; ++j) {
          const std::size_t o = base + static_cast<std::size_t>(p) * c + j;
          xhat[o] = static_cast<T>(xv[o] - mean) * is;
          out[o] = xhat[o] * gv[j] + bv[j];
        }
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.g->make(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, b, c, groups, cg, positions, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph<T>& g, const Tensor<T>& dy) {
        const auto& gv = g.value(ig);
        Tensor<T>* gg = g.grad(ig);
        Tensor<T>* gb = g.grad(ib);
        Tensor<T>* gx = g.grad(ix);
        const T n = static_cast<T>(positions * cg);
        for (int bi = 0; bi < b; ++bi) {
          const std::size_t base = static_cast<std::size_t>(bi) * positions * c;
          for (int gi = 0; gi < groups; ++gi) {
            T m1 = 0, m2 = 0;
            for (int p = 0; p < positions; ++p)
              for (int j = gi * cg; j < (gi + 1) * cg; ++j) {
                const std::size_t o = base + static_cast<std::size_t>(p) * c + j;
                if (gg) (*gg)[j] += dy[o] * xhat[o];
                if (gb) (*gb)[j] += dy[o];
                const T dxh = dy[o] * gv[j];
                m1 += dxh;
                m2 += dxh * xhat[o];
              }
            if (!gx) continue;
            m1 /= n;
            m2 /= n;
            const T is = inv_std[static_cast<std::size_t>(bi) * groups + gi];
            for (int p = 0; p < positions; ++p)
              for (int j = gi * cg; j < (gi + 1) * cg; ++j) {
                const std::size_t o = base + static_cast<std::size_t>(p) * c + j;
                (*gx)[o] += is * (dy[o] * gv[j] - m1 - xhat[o] * m2);
              }
          }
        }
      });
}

namespace detail {
// Rows of the 3x3 patch matrix for x[B,H,W,C] with zero padding; column
// layout is (ky, kx, c).
template <typename T>
Tensor<T> im2col3x3(const Tensor<T>& x) {
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<T> cols(Shape{b * h * w, 9 * c});
  T* out = cols.data();
  const T* in = x.data();
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        T* row = out + ((static_cast<std::size_t>(bi) * h + y) * w + xx) * 9 * c;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int sy = y + ky - 1, sx = xx + kx - 1;
            T* dst = row + (ky * 3 + kx) * c;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              std::fill(dst, dst + c, T(0));
            } else {
              const T* src = in + ((static_cast<std::size_t>(bi) * h + sy) * w + sx) * c;
              std::copy(src, src + c, dst);
            }
          }
      }
  return cols;
}

template <typename T>
void col2im3x3_add(const Tensor<T>& dcols, Tensor<T>& dx) {
  const int b = dx.dim(0), h = dx.dim(1), w = dx.dim(2), c = dx.dim(3);
  const T* in = dcols.data();
  T* out = dx.data();
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const T* row = in + ((static_cast<std::size_t>(bi) * h + y) * w + xx) * 9 * c;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int sy = y + ky - 1, sx = xx + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            const T* src = row + (ky * 3 + kx) * c;
            T* dst = out + ((static_cast<std::size_t>(bi) * h + sy) * w + sx) * c;
            for (int j = 0; j < c; ++j) dst[j] += src[j];
          }
      }
}
}  // namespace detail

/// Same-padded 3x3 convolution on channels-last x[B,H,W,Cin] with weight
/// [9*Cin, Cout] laid out (ky, kx, cin) x cout.
template <typename T>
Var<T> conv3x3(Var<T> x, Var<T> w, Var<T> bias) {
  SMCD_REQUIRE(x.value().rank() == 4, ShapeError, "conv3x3: input must be [B,H,W,C]");
  const int cin = x.dim(3);
  SMCD_REQUIRE(w.value().rank() == 2 && w.dim(0) == 9 * cin, ShapeError,
               "conv3x3: weight " + shape_str(w.shape()) + " vs input channels " + std::to_string(cin));
  const int cout = w.dim(1);
  SMCD_REQUIRE(static_cast<int>(bias.value().size()) == cout, ShapeError, "conv3x3: bias width mismatch");
  Tensor<T> cols = detail::im2col3x3(x.value());
  Tensor<T> out(Shape{x.dim(0), x.dim(1), x.dim(2), cout});
  auto y = as_matrix(out);
  y.noalias() = as_matrix(cols) * as_matrix(w.value());
  y.rowwise() += ConstMatMap<T>(bias.value().data(), 1, cout).row(0);
  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.g->make(std::move(out), {x, w, bias},
                   [ix, iw, ib, cout, cols = std::move(cols)](Graph<T>& g, const Tensor<T>& dy) {
                     auto dym = as_matrix(dy);
                     if (Tensor<T>* gw = g.grad(iw)) as_matrix(*gw).noalias() += as_matrix(cols).transpose() * dym;
                     if (Tensor<T>* gb = g.grad(ib)) MatMap<T>(gb->data(), 1, cout) += dym.colwise().sum();
                     if (Tensor<T>* gx = g.grad(ix)) {
                       Tensor<T> dcols(cols.shape());
                       as_matrix(dcols).noalias() = dym * as_matrix(g.value(iw)).transpose();
                       detail::col2im3x3_add(dcols, *gx);
                     }
                   });
}

/// 2x2 average pooling on [B,H,W,C].
template <typename T>
Var<T> avg_pool2(Var<T> x) {
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  SMCD_REQUIRE(h % 2 == 0 && w % 2 == 0, ShapeError, "avg_pool2: odd spatial size");
  const auto& xv = x.value();
  Tensor<T> out(Shape{b, h / 2, w / 2, c});
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx)
        for (int j = 0; j < c; ++j) {
          T s = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              s += xv[((static_cast<std::size_t>(bi) * h + 2 * y + dy) * w + 2 * xx + dx) * c + j];
          out[((static_cast<std::size_t>(bi) * (h / 2) + y) * (w / 2) + xx) * c + j] = s * T(0.25);
        }
  const int ix = x.id;
  return x.g->make(std::move(out), {x}, [ix, b, h, w, c](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>* gx = g.grad(ix);
    if (!gx) return;
    for (int bi = 0; bi < b; ++bi)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          for (int j = 0; j < c; ++j)
            (*gx)[((static_cast<std::size_t>(bi) * h + y) * w + xx) * c + j] +=
                T(0.25) * dy[((static_cast<std::size_t>(bi) * (h / 2) + y / 2) * (w / 2) + xx / 2) * c + j];
  });
}

/// Nearest-neighbour 2x upsampling on [B,H,W,C].
template <typename T>
Var<T> upsample2(Var<T> x) {
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const auto& xv = x.value();
  Tensor<T> out(Shape{b, 2 * h, 2 * w, c});
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        std::copy_n(xv.data() + ((static_cast<std::size_t>(bi) * h + y / 2) * w + xx / 2) * c, c,
                    out.data() + ((static_cast<std::size_t>(bi) * 2 * h + y) * 2 * w + xx) * c);
  const int ix = x.id;
  return x.g->make(std::move(out), {x}, [ix, b, h, w, c](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>* gx = g.grad(ix);
    if (!gx) return;
    for (int bi = 0; bi < b; ++bi)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          for (int j = 0; j < c; ++j)
            (*gx)[((static_cast<std::size_t>(bi) * h + y / 2) * w + xx / 2) * c + j] +=
                dy[((static_cast<std::size_t>(bi) * 2 * h + y) * 2 * w + xx) * c + j];
  });
}

/// Concatenates along the last dimension.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const int ca = a.dim(-1), cb = b.dim(-1);
  const int rows = detail::rows_of(a.shape());
  SMCD_REQUIRE(rows == detail::rows_of(b.shape()), ShapeError, "concat_channels: row count mismatch");
  Shape os = a.shape();
  os.back() = ca + cb;
  Tensor<T> out(os);
  auto o = as_matrix(out);
  o.leftCols(ca) = as_matrix(a.value());
  o.rightCols(cb) = as_matrix(b.value());
  const int ia = a.id, ib = b.id;
  return a.g->make(std::move(out), {a, b}, [ia, ib, ca, cb](Graph<T>& g, const Tensor<T>& dy) {
    auto d = as_matrix(dy);
    if (Tensor<T>* ga = g.grad(ia)) as_matrix(*ga) += d.leftCols(ca);
    if (Tensor<T>* gb = g.grad(ib)) as_matrix(*gb) += d.rightCols(cb);
  });
}

/// [B, La, C] ++ [B, Lb, C] -> [B, La+Lb, C]
template <typename T>
Var<T> concat_tokens(Var<T> a, Var<T> b) {
  SMCD_REQUIRE(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
               ShapeError, "concat_tokens: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int bsz = a.dim(0), la = a.dim(1), lb = b.dim(1), c = a.dim(2);
  Tensor<T> out(Shape{bsz, la + lb, c});
  const std::size_t sa = static_cast<std::size_t>(la) * c, sb = static_cast<std::size_t>(lb) * c;
  for (int i = 0; i < bsz; ++i) {
    std::copy_n(a.value().data() + i * sa, sa, out.data() + i * (sa + sb));
    std::copy_n(b.value().data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
  }
  const int ia = a.id, ib = b.id;
  return a.g->make(std::move(out), {a, b}, [ia, ib, bsz, sa, sb](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>* ga = g.grad(ia);
    Tensor<T>* gb = g.grad(ib);
    for (int i = 0; i < bsz; ++i) {
      const T* src = dy.data() + i * (sa + sb);
      if (ga)
        for (std::size_t j = 0; j < sa; ++j) (*ga)[i * sa + j] += src[j];
      if (gb)
        for (std::size_t j = 0; j < sb; ++j) (*gb)[i * sb + j] += src[sa + j];
    }
  });
}

/// Swaps the first two axes: [A, B, C] -> [B, A, C].
template <typename T>
Var<T> swap_leading(Var<T> x) {
  SMCD_REQUIRE(x.value().rank() == 3, ShapeError, "swap_leading: expects rank 3");
  const int a = x.dim(0), b = x.dim(1), c = x.dim(2);
  const auto& xv = x.value();
  Tensor<T> out(Shape{b, a, c});
  for (int i = 0; i < a; ++i)
    for (int j = 0; j < b; ++j)
      std::copy_n(xv.data() + (static_cast<std::size_t>(i) * b + j) * c, c,
                  out.data() + (static_cast<std::size_t>(j) * a + i) * c);
  const int ix = x.id;
  return x.g->make(std::move(out), {x}, [ix, a, b, c](Graph<T>& g, const Tensor<T>& dy) {
    Tensor<T>* gx = g.grad(ix);
    if (!gx) return;
    for (int i = 0; i < a; ++i)
      for (int j = 0; j < b; ++j)
        for (int k = 0; k < c; ++k)
          (*gx)[(static_cast<std::size_t>(i) * b + j) * c + k] += dy[(static_cast<std::size_t>(j) * a + i) * c + k];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  const int ix = x.id;
  return x.g->make(std::move(out), {x}, [ix](Graph<T>& g, const Tensor<T>& dy) {
    detail::accumulate(g, ix, dy);
  });
}

/// [F, C, H, W] <-> [F, H, W, C] layout changes.
template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
  const int f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(Shape{f, h, w, c});
  for (int fi = 0; fi < f; ++fi)
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < h * w; ++p)
        out[(static_cast<std::size_t>(fi) * h * w + p) * c + ci] = x[(static_cast<std::size_t>(fi) * c + ci) * h * w + p];
  return out;
}
template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& x) {
  const int f = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<T> out(Shape{f, c, h, w});
  for (int fi = 0; fi < f; ++fi)
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < h * w; ++p)
        out[(static_cast<std::size_t>(fi) * c + ci) * h * w + p] = x[(static_cast<std::size_t>(fi) * h * w + p) * c + ci];
  return out;
}

/// Differentiable [F, H, W, C] -> [F, C, H, W].
template <typename T>
Var<T> channels_first(Var<T> x) {
  SMCD_REQUIRE(x.value().rank() == 4, ShapeError, "channels_first: expects rank 4");
  const int ix = x.id;
  return x.g->make(to_channels_first(x.value()), {x}, [ix](Graph<T>& g, const Tensor<T>& dy) {
    detail::accumulate(g, ix, to_channels_last(dy));
  });
}

/// Scaled dot-product attention, batched and multi-head.
///   q: [B, Lq, d], k: [Bk, Lk, d], v: [Bk, Lk, dv] with Bk in {1, B}
/// Channels are split into `heads` contiguous chunks. key_mask, when given,
/// holds B*Lk flags; keys with flag 0 receive zero weight.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, const std::vector<unsigned char>* key_mask = nullptr) {
  SMCD_REQUIRE(q.value().rank() == 3 && k.value().rank() == 3 && v.value().rank() == 3, ShapeError,
               "attention: operands must be rank 3");
  const int b = q.dim(0), lq = q.dim(1), d = q.dim(2);
  const int bk = k.dim(0), lk = k.dim(1), dv = v.dim(2);
  SMCD_REQUIRE(k.dim(2) == d, ShapeError, "attention: query/key width mismatch");
  SMCD_REQUIRE(v.dim(0) == bk && v.dim(1) == lk, ShapeError, "attention: key/value length mismatch");
  SMCD_REQUIRE(bk == b || bk == 1, ShapeError, "attention: key batch must be 1 or match queries");
  SMCD_REQUIRE(heads >= 1 && d % heads == 0 && dv % heads == 0, ShapeError,
               "attention: width not divisible by head count");
  SMCD_REQUIRE(lk >= 1, ShapeError, "attention: no keys");
  if (key_mask)
    SMCD_REQUIRE(key_mask->size() == static_cast<std::size_t>(b) * lk, ShapeError, "attention: mask size");
  const int dh = d / heads, dvh = dv / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const RowMatrix<T>, 0, Stride>;
  using MMap = Eigen::Map<RowMatrix<T>, 0, Stride>;

  Tensor<T> out(Shape{b, lq, dv});
  Tensor<T> probs(Shape{b, heads, lq, lk});
  const T* qd = q.value().data();
  const T* kd = k.value().data();
  const T* vd = v.value().data();
  for (int bi = 0; bi < b; ++bi) {
    const int kb = bk == 1 ? 0 : bi;
    for (int h = 0; h < heads; ++h) {
      CMap qh(qd + static_cast<std::size_t>(bi) * lq * d + h * dh, lq, dh, Stride(d));
      CMap kh(kd + static_cast<std::size_t>(kb) * lk * d + h * dh, lk, dh, Stride(d));
      CMap vh(vd + static_cast<std::size_t>(kb) * lk * dv + h * dvh, lk, dvh, Stride(dv));
      MatMap<T> p(probs.data() + (static_cast<std::size_t>(bi) * heads + h) * lq * lk, lq, lk);
      p.noalias() = (qh * kh.transpose()) * sc;
      for (int i = 0; i < lq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < lk; ++j)
          if (!key_mask || (*key_mask)[static_cast<std::size_t>(bi) * lk + j]) mx = std::max(mx, p(i, j));
        T s = 0;
        for (int j = 0; j < lk; ++j) {
          const bool on = !key_mask || (*key_mask)[static_cast<std::size_t>(bi) * lk + j];
          p(i, j) = on ? std::exp(p(i, j) - mx) : T(0);
          s += p(i, j);
        }
        p.row(i) /= s;
      }
      MMap oh(out.data() + static_cast<std::size_t>(bi) * lq * dv + h * dvh, lq, dvh, Stride(dv));
      oh.noalias() = p * vh;
    }
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return q.g->make(
      std::move(out), {q, k, v},
      [iq, ik, iv, b, bk, lq, lk, d, dv, dh, dvh, heads, sc, probs = std::move(probs)](Graph<T>& g,
                                                                                     const Tensor<T>& dy) {
        Tensor<T>* gq = g.grad(iq);
        Tensor<T>* gk = g.grad(ik);
        Tensor<T>* gv = g.grad(iv);
        const T* qd = g.value(iq).data();
        const T* kd = g.value(ik).data();
        const T* vd = g.value(iv).data();
        RowMatrix<T> dp(lq, lk);
        for (int bi = 0; bi < b; ++bi) {
          const int kb = bk == 1 ? 0 : bi;
          for (int h = 0; h < heads; ++h) {
            ConstMatMap<T> p(probs.data() + (static_cast<std::size_t>(bi) * heads + h) * lq * lk, lq, lk);
            CMap doh(dy.data() + static_cast<std::size_t>(bi) * lq * dv + h * dvh, lq, dvh, Stride(dv));
            CMap vh(vd + static_cast<std::size_t>(kb) * lk * dv + h * dvh, lk, dvh, Stride(dv));
            if (gv) {
              MMap gvh(gv->data() + static_cast<std::size_t>(kb) * lk * dv + h * dvh, lk, dvh, Stride(dv));
              gvh.noalias() += p.transpose() * doh;
            }
            if (!gq && !gk) continue;
            dp.noalias() = doh * vh.transpose();
            for (int i = 0; i < lq; ++i) {
              const T dot = p.row(i).dot(dp.row(i));
              dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            dp *= sc;
            if (gq) {
              CMap kh(kd + static_cast<std::size_t>(kb) * lk * d + h * dh, lk, dh, Stride(d));
              MMap gqh(gq->data() + static_cast<std::size_t>(bi) * lq * d + h * dh, lq, dh, Stride(d));
              gqh.noalias() += dp * kh;
            }
            if (gk) {
              CMap qh(qd + static_cast<std::size_t>(bi) * lq * d + h * dh, lq, dh, Stride(d));
              MMap gkh(gk->data() + static_cast<std::size_t>(kb) * lk * d + h * dh, lk, dh, Stride(d));
              gkh.noalias() += dp.transpose() * qh;
            }
          }
        }
      });
}

/// mean((pred - target)^2) against a constant target.
template <typename T>
Var<T> mse(Var<T> pred, const Tensor<T>& target) {
  SMCD_REQUIRE(pred.shape() == target.shape(), ShapeError,
               "mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const auto& pv = pred.value();
  double acc = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = static_cast<double>(pv[i]) - target[i];
    acc += d * d;
  }
  const double n = static_cast<double>(pv.size());
  const int ip = pred.id;
  Tensor<T> tgt = target;
  return pred.g->make(Tensor<T>::scalar(static_cast<T>(acc / n)), {pred},
                      [ip, n, tgt = std::move(tgt)](Graph<T>& g, const Tensor<T>& dy) {
                        Tensor<T>* gp = g.grad(ip);
                        if (!gp) return;
                        const auto& pv = g.value(ip);
                        const T c = static_cast<T>(2.0 / n) * dy[0];
                        for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += c * (pv[i] - tgt[i]);
                      });
}

}  // namespace ops
}  // namespace smcd
