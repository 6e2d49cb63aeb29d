#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "core.hpp"

// Minimal dense-tensor reverse-mode differentiation. A Graph records every
// operation of one forward pass; backward() replays the recorded closures in
// reverse creation order. Tensors are row-major with the last axis fastest,
// i.e. [N, C, D, H, W] with W contiguous.
namespace vesselforge::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(ad::numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != ad::numel(shape)) throw ShapeError("tensor data length does not match shape " + shape_str(shape));
  }
  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  // Elements per sample-channel plane: product of dims after the first two.
  std::size_t spatial() const {
    std::size_t n = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) n *= static_cast<std::size_t>(shape[i]);
    return n;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
  std::vector<T> m;  // optimizer first moment
  std::vector<T> v;  // optimizer second moment
};

// Named parameters in insertion order.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ShapeError("duplicate parameter name " + name);
    Parameter<T> p;
    p.name = name;
    p.value = Tensor<T>(std::move(shape));
    const auto n = p.value.numel();
    p.grad.assign(n, T{});
    p.m.assign(n, T{});
    p.v.assign(n, T{});
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Parameter<T>& at(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("unknown parameter " + name);
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T{});
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.value.shape);
      for (std::size_t i = 0; i < p.value.numel(); ++i) q.value.data[i] = static_cast<U>(p.value.data[i]);
    }
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
  bool valid() const { return id != none; }
};

template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void(Graph&, Var)> backward;
  };

  Var constant(Tensor<T> t) { return push(std::move(t), false); }
  Var leaf(Tensor<T> t) { return push(std::move(t), true); }

  // Binds a parameter; its gradient is accumulated into p.grad by backward().
  Var parameter(Parameter<T>& p) {
    Var v = push(p.value, true);
    bindings_.emplace_back(v.id, &p);
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape; }
  bool requires_grad(Var v) const { return v.valid() && nodes_[v.id].requires_grad; }

  // Gradient buffer of v, allocated on first use.
  std::vector<T>& grad(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), T{});
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  // Records a result node. `backward(graph, self)` runs only if some input
  // needs a gradient; it reads grad(self) and accumulates into its inputs.
  Var record(Tensor<T> value, const std::vector<Var>& inputs, std::function<void(Graph&, Var)> backward) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || requires_grad(in);
    Var v = push(std::move(value), rg);
    if (rg) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  void backward(Var root) {
    if (value(root).numel() != 1) throw ShapeError("backward() needs a scalar root");
    grad(root)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, Var{i});
    }
    for (const auto& [id, p] : bindings_) {
      const auto& gsrc = nodes_[id].grad;
      if (gsrc.empty()) continue;
      for (std::size_t k = 0; k < gsrc.size(); ++k) p->grad[k] += gsrc[k];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Tensor<T> t, bool rg) {
    nodes_.push_back(Node{std::move(t), {}, rg, {}});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::size_t, Parameter<T>*>> bindings_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_5d(const Shape& s, const std::string& op) {
  require(s.size() == 5, op + ": expected [N,C,D,H,W], got " + shape_str(s));
}

// Visits every (output row, input row, tap) triple of a stride-1 3D
// cross-correlation together with the valid x range of the output row.
template <typename F>
void for_each_tap(int K, int pad, int D, int H, int W, int Do, int Ho, int Wo, F&& body) {
  for (int kz = 0; kz < K; ++kz)
    for (int z = 0; z < Do; ++z) {
      const int zi = z + kz - pad;
      if (zi < 0 || zi >= D) continue;
      for (int ky = 0; ky < K; ++ky)
        for (int y = 0; y < Ho; ++y) {
          const int yi = y + ky - pad;
          if (yi < 0 || yi >= H) continue;
          for (int kx = 0; kx < K; ++kx) {
            const int off = kx - pad;
            const int x0 = std::max(0, -off), x1 = std::min(Wo, W - off);
            if (x0 >= x1) continue;
            body((std::size_t(z) * Ho + y) * Wo, (std::size_t(zi) * H + yi) * W + off, (kz * K + ky) * K + kx, x0,
                 x1);
          }
        }
    }
}

}  // namespace detail

// Stride-1 cross-correlation with zero padding. w: [Co, Ci, K, K, K], b: [Co]
// or an invalid Var for no bias.
template <typename T>
Var conv3d(Graph<T>& g, Var x, Var w, Var b, int pad, const std::string& layer = "conv3d") {
  const Shape xs = g.shape(x);
  const Shape ws = g.shape(w);
  detail::require_5d(xs, layer);
  detail::require(ws.size() == 5 && ws[1] == xs[1] && ws[2] == ws[3] && ws[3] == ws[4],
                  layer + ": kernel " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (b.valid()) detail::require(g.shape(b) == Shape{ws[0]}, layer + ": bias shape mismatch");
  const int N = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
  const int Co = ws[0], K = ws[2];
  const int Do = D + 2 * pad - K + 1, Ho = H + 2 * pad - K + 1, Wo = W + 2 * pad - K + 1;
  detail::require(Do > 0 && Ho > 0 && Wo > 0, layer + ": output would be empty");
  const std::size_t in_plane = std::size_t(D) * H * W, out_plane = std::size_t(Do) * Ho * Wo;
  const std::size_t ksz = std::size_t(K) * K * K;

  Tensor<T> out({N, Co, Do, Ho, Wo});
  {
    const T* X = g.value(x).data.data();
    const T* Wt = g.value(w).data.data();
    T* Y = out.data.data();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        T* yp = Y + (std::size_t(n) * Co + co) * out_plane;
        if (b.valid()) std::fill(yp, yp + out_plane, g.value(b).data[co]);
        for (int ci = 0; ci < Ci; ++ci) {
          const T* xp = X + (std::size_t(n) * Ci + ci) * in_plane;
          const T* wp = Wt + (std::size_t(co) * Ci + ci) * ksz;
          detail::for_each_tap(K, pad, D, H, W, Do, Ho, Wo,
                               [&](std::size_t orow, std::size_t irow, int tap, int x0, int x1) {
                                 const T wv = wp[tap];
                                 T* o = yp + orow;
                                 const T* i = xp + irow;
                                 for (int xx = x0; xx < x1; ++xx) o[xx] += wv * i[xx];
                               });
        }
      }
  }

  return g.record(std::move(out), {x, w, b}, [=](Graph<T>& gr, Var self) {
    const T* GY = gr.grad(self).data();
    const T* X = gr.value(x).data.data();
    const T* Wt = gr.value(w).data.data();
    if (gr.requires_grad(x)) {
      T* GX = gr.grad(x).data();
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const T* gy = GY + (std::size_t(n) * Co + co) * out_plane;
          for (int ci = 0; ci < Ci; ++ci) {
            T* gx = GX + (std::size_t(n) * Ci + ci) * in_plane;
            const T* wp = Wt + (std::size_t(co) * Ci + ci) * ksz;
            detail::for_each_tap(K, pad, D, H, W, Do, Ho, Wo,
                                 [&](std::size_t orow, std::size_t irow, int tap, int x0, int x1) {
                                   const T wv = wp[tap];
                                   const T* o = gy + orow;
                                   T* i = gx + irow;
                                   for (int xx = x0; xx < x1; ++xx) i[xx] += wv * o[xx];
                                 });
          }
        }
    }
    if (gr.requires_grad(w)) {
      T* GW = gr.grad(w).data();
      // Row products are accumulated per tap and x position, then reduced once,
      // so the innermost loop stays a plain elementwise update.
      std::vector<T> per_tap(ksz * std::size_t(Wo));
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const T* gy = GY + (std::size_t(n) * Co + co) * out_plane;
          for (int ci = 0; ci < Ci; ++ci) {
            const T* xp = X + (std::size_t(n) * Ci + ci) * in_plane;
            T* gw = GW + (std::size_t(co) * Ci + ci) * ksz;
            std::fill(per_tap.begin(), per_tap.end(), T{});
            detail::for_each_tap(K, pad, D, H, W, Do, Ho, Wo,
                                 [&](std::size_t orow, std::size_t irow, int tap, int x0, int x1) {
                                   T* a = per_tap.data() + std::size_t(tap) * Wo;
                                   const T* o = gy + orow;
                                   const T* i = xp + irow;
                                   for (int xx = x0; xx < x1; ++xx) a[xx] += o[xx] * i[xx];
                                 });
            for (std::size_t t = 0; t < ksz; ++t) {
              T s{};
              for (int xx = 0; xx < Wo; ++xx) s += per_tap[t * Wo + xx];
              gw[t] += s;
            }
          }
        }
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad(b);
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const T* gy = GY + (std::size_t(n) * Co + co) * out_plane;
          T s{};
          for (std::size_t k = 0; k < out_plane; ++k) s += gy[k];
          gb[co] += s;
        }
    }
  });
}

// Transposed convolution with a 2x2x2 kernel and stride 2 (exact doubling).
// w: [Ci, Co, 2, 2, 2], b: [Co].
template <typename T>
Var conv_transpose3d(Graph<T>& g, Var x, Var w, Var b, const std::string& layer = "conv_transpose3d") {
  const Shape xs = g.shape(x);
  const Shape ws = g.shape(w);
  detail::require_5d(xs, layer);
  detail::require(ws == Shape{xs[1], ws[1], 2, 2, 2},
                  layer + ": kernel " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  const int N = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4], Co = ws[1];
  if (b.valid()) detail::require(g.shape(b) == Shape{Co}, layer + ": bias shape mismatch");
  const int Do = 2 * D, Ho = 2 * H, Wo = 2 * W;
  const std::size_t in_plane = std::size_t(D) * H * W, out_plane = std::size_t(Do) * Ho * Wo;

  Tensor<T> out({N, Co, Do, Ho, Wo});
  {
    const T* X = g.value(x).data.data();
    const T* Wt = g.value(w).data.data();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        T* yp = out.data.data() + (std::size_t(n) * Co + co) * out_plane;
        if (b.valid()) std::fill(yp, yp + out_plane, g.value(b).data[co]);
        for (int ci = 0; ci < Ci; ++ci) {
          const T* xp = X + (std::size_t(n) * Ci + ci) * in_plane;
          const T* wp = Wt + (std::size_t(ci) * Co + co) * 8;
          for (int z = 0; z < D; ++z)
            for (int a = 0; a < 2; ++a)
              for (int y = 0; y < H; ++y)
                for (int c = 0; c < 2; ++c) {
                  T* orow = yp + (std::size_t(2 * z + a) * Ho + 2 * y + c) * Wo;
                  const T* irow = xp + (std::size_t(z) * H + y) * W;
                  const T w0 = wp[(a * 2 + c) * 2], w1 = wp[(a * 2 + c) * 2 + 1];
                  for (int xx = 0; xx < W; ++xx) {
                    orow[2 * xx] += w0 * irow[xx];
                    orow[2 * xx + 1] += w1 * irow[xx];
                  }
                }
        }
      }
  }

  return g.record(std::move(out), {x, w, b}, [=](Graph<T>& gr, Var self) {
    const T* GY = gr.grad(self).data();
    const T* X = gr.value(x).data.data();
    const T* Wt = gr.value(w).data.data();
    const bool gx_needed = gr.requires_grad(x), gw_needed = gr.requires_grad(w);
    T* GX = gx_needed ? gr.grad(x).data() : nullptr;
    T* GW = gw_needed ? gr.grad(w).data() : nullptr;
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        const T* gy = GY + (std::size_t(n) * Co + co) * out_plane;
        for (int ci = 0; ci < Ci; ++ci) {
          const T* xp = X + (std::size_t(n) * Ci + ci) * in_plane;
          T* gx = gx_needed ? GX + (std::size_t(n) * Ci + ci) * in_plane : nullptr;
          const T* wp = Wt + (std::size_t(ci) * Co + co) * 8;
          T gw_local[8] = {};
          for (int z = 0; z < D; ++z)
            for (int a = 0; a < 2; ++a)
              for (int y = 0; y < H; ++y)
                for (int c = 0; c < 2; ++c) {
                  const T* grow = gy + (std::size_t(2 * z + a) * Ho + 2 * y + c) * Wo;
                  const std::size_t ibase = (std::size_t(z) * H + y) * W;
                  const int k0 = (a * 2 + c) * 2;
                  if (gx) {
                    const T w0 = wp[k0], w1 = wp[k0 + 1];
                    for (int xx = 0; xx < W; ++xx) gx[ibase + xx] += w0 * grow[2 * xx] + w1 * grow[2 * xx + 1];
                  }
                  if (GW) {
                    T s0{}, s1{};
                    for (int xx = 0; xx < W; ++xx) {
                      s0 += xp[ibase + xx] * grow[2 * xx];
                      s1 += xp[ibase + xx] * grow[2 * xx + 1];
                    }
                    gw_local[k0] += s0;
                    gw_local[k0 + 1] += s1;
                  }
                }
          if (GW)
            for (int k = 0; k < 8; ++k) GW[(std::size_t(ci) * Co + co) * 8 + k] += gw_local[k];
        }
      }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad(b);
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const T* gy = GY + (std::size_t(n) * Co + co) * out_plane;
          T s{};
          for (std::size_t k = 0; k < out_plane; ++k) s += gy[k];
          gb[co] += s;
        }
    }
  });
}

// Per-sample, per-channel normalisation over the spatial axes followed by a
// learned affine map. scale/shift: [C].
template <typename T>
Var instance_norm(Graph<T>& g, Var x, Var scale, Var shift, double eps) {
  const Shape xs = g.shape(x);
  detail::require(xs.size() >= 3, "instance_norm: expected [N,C,...], got " + shape_str(xs));
  const int N = xs[0], C = xs[1];
  detail::require(g.shape(scale) == Shape{C} && g.shape(shift) == Shape{C}, "instance_norm: affine shape mismatch");
  const std::size_t M = g.value(x).spatial();
  auto xhat = std::make_shared<std::vector<T>>(g.value(x).numel());
  auto inv_std = std::make_shared<std::vector<T>>(std::size_t(N) * C);

  Tensor<T> out(xs);
  const T* X = g.value(x).data.data();
  const T* G = g.value(scale).data.data();
  const T* B = g.value(shift).data.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (std::size_t(n) * C + c) * M;
      T mean{};
      for (std::size_t k = 0; k < M; ++k) mean += X[base + k];
      mean /= static_cast<T>(M);
      T var{};
      for (std::size_t k = 0; k < M; ++k) var += (X[base + k] - mean) * (X[base + k] - mean);
      var /= static_cast<T>(M);
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      (*inv_std)[std::size_t(n) * C + c] = is;
      for (std::size_t k = 0; k < M; ++k) {
        const T h = (X[base + k] - mean) * is;
        (*xhat)[base + k] = h;
        out.data[base + k] = G[c] * h + B[c];
      }
    }

  return g.record(std::move(out), {x, scale, shift}, [=](Graph<T>& gr, Var self) {
    const T* GY = gr.grad(self).data();
    const T* Gm = gr.value(scale).data.data();
    const bool need_x = gr.requires_grad(x), need_s = gr.requires_grad(scale), need_b = gr.requires_grad(shift);
    T* GX = need_x ? gr.grad(x).data() : nullptr;
    T* GS = need_s ? gr.grad(scale).data() : nullptr;
    T* GB = need_b ? gr.grad(shift).data() : nullptr;
    const auto& H = *xhat;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (std::size_t(n) * C + c) * M;
        T sum_dy{}, sum_dy_h{};
        for (std::size_t k = 0; k < M; ++k) {
          sum_dy += GY[base + k];
          sum_dy_h += GY[base + k] * H[base + k];
        }
        if (GS) GS[c] += sum_dy_h;
        if (GB) GB[c] += sum_dy;
        if (GX) {
          const T is = (*inv_std)[std::size_t(n) * C + c];
          const T mf = static_cast<T>(M);
          for (std::size_t k = 0; k < M; ++k)
            GX[base + k] += Gm[c] * is / mf * (mf * GY[base + k] - sum_dy - H[base + k] * sum_dy_h);
        }
      }
  });
}

template <typename T>
Var leaky_relu(Graph<T>& g, Var x, double slope) {
  Tensor<T> out = g.value(x);
  const T s = static_cast<T>(slope);
  for (auto& v : out.data) v = v > T(0) ? v : s * v;
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    const auto& X = gr.value(x).data;
    auto& gx = gr.grad(x);
    for (std::size_t k = 0; k < gy.size(); ++k) gx[k] += X[k] > T(0) ? gy[k] : s * gy[k];
  });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  return leaky_relu(g, x, 0.0);
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    const auto& y = gr.value(self).data;
    auto& gx = gr.grad(x);
    for (std::size_t k = 0; k < gy.size(); ++k) gx[k] += gy[k] * y[k] * (T(1) - y[k]);
  });
}

// 2x2x2 max pooling with stride 2; spatial dims must be even.
template <typename T>
Var max_pool2(Graph<T>& g, Var x) {
  const Shape xs = g.shape(x);
  detail::require_5d(xs, "max_pool2");
  const int N = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
  detail::require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0, "max_pool2: spatial dims must be even, got " + shape_str(xs));
  const int Do = D / 2, Ho = H / 2, Wo = W / 2;
  Tensor<T> out({N, C, Do, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const T* X = g.value(x).data.data();
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::size_t base = std::size_t(nc) * D * H * W;
    for (int z = 0; z < Do; ++z)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx, ++o) {
          std::size_t best = base + (std::size_t(2 * z) * H + 2 * y) * W + 2 * xx;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i = base + (std::size_t(2 * z + dz) * H + 2 * y + dy) * W + 2 * xx + dx;
                if (X[i] > X[best]) best = i;
              }
          (*argmax)[o] = best;
          out.data[o] = X[best];
        }
  }
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    auto& gx = gr.grad(x);
    for (std::size_t k = 0; k < gy.size(); ++k) gx[(*argmax)[k]] += gy[k];
  });
}

// Inverted dropout: identity unless training; survivors scaled by 1/(1-rate).
template <typename T>
Var dropout(Graph<T>& g, Var x, double rate, bool train, Rng& rng) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  auto mask = std::make_shared<std::vector<T>>(g.value(x).numel());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng.uniform() >= rate ? keep_scale : T(0);
  Tensor<T> out = g.value(x);
  for (std::size_t k = 0; k < out.numel(); ++k) out.data[k] *= (*mask)[k];
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    auto& gx = gr.grad(x);
    for (std::size_t k = 0; k < gy.size(); ++k) gx[k] += gy[k] * (*mask)[k];
  });
}

// x: [N, F], w: [O, F], b: [O] -> [N, O]
template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b, const std::string& layer = "linear") {
  const Shape xs = g.shape(x), ws = g.shape(w);
  detail::require(xs.size() == 2 && ws.size() == 2 && ws[1] == xs[1],
                  layer + ": weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  const int N = xs[0], F = xs[1], O = ws[0];
  if (b.valid()) detail::require(g.shape(b) == Shape{O}, layer + ": bias shape mismatch");
  Tensor<T> out({N, O});
  const auto& X = g.value(x).data;
  const auto& Wt = g.value(w).data;
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      T s = b.valid() ? g.value(b).data[o] : T{};
      for (int f = 0; f < F; ++f) s += Wt[std::size_t(o) * F + f] * X[std::size_t(n) * F + f];
      out.data[std::size_t(n) * O + o] = s;
    }
  return g.record(std::move(out), {x, w, b}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    const auto& Xv = gr.value(x).data;
    const auto& Wv = gr.value(w).data;
    if (gr.requires_grad(x)) {
      auto& gx = gr.grad(x);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
          for (int f = 0; f < F; ++f) gx[std::size_t(n) * F + f] += gy[std::size_t(n) * O + o] * Wv[std::size_t(o) * F + f];
    }
    if (gr.requires_grad(w)) {
      auto& gw = gr.grad(w);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
          for (int f = 0; f < F; ++f) gw[std::size_t(o) * F + f] += gy[std::size_t(n) * O + o] * Xv[std::size_t(n) * F + f];
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad(b);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) gb[o] += gy[std::size_t(n) * O + o];
    }
  });
}

// [N, C, ...] -> [N, C]
template <typename T>
Var global_avg_pool(Graph<T>& g, Var x) {
  const Shape xs = g.shape(x);
  detail::require(xs.size() >= 3, "global_avg_pool: expected [N,C,...]");
  const int N = xs[0], C = xs[1];
  const std::size_t M = g.value(x).spatial();
  Tensor<T> out({N, C});
  const auto& X = g.value(x).data;
  for (std::size_t nc = 0; nc < std::size_t(N) * C; ++nc) {
    T s{};
    for (std::size_t k = 0; k < M; ++k) s += X[nc * M + k];
    out.data[nc] = s / static_cast<T>(M);
  }
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    auto& gx = gr.grad(x);
    for (std::size_t nc = 0; nc < std::size_t(N) * C; ++nc) {
      const T v = gy[nc] / static_cast<T>(M);
      for (std::size_t k = 0; k < M; ++k) gx[nc * M + k] += v;
    }
  });
}

// Concatenation along axis 1; all other dims must agree.
template <typename T>
Var concat(Graph<T>& g, Var a, Var b) {
  const Shape as = g.shape(a), bs = g.shape(b);
  detail::require(as.size() == bs.size() && as.size() >= 2 && as[0] == bs[0] &&
                      std::equal(as.begin() + 2, as.end(), bs.begin() + 2),
                  "concat: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  const int N = as[0], Ca = as[1], Cb = bs[1];
  const std::size_t M = g.value(a).spatial();
  Shape os = as;
  os[1] = Ca + Cb;
  Tensor<T> out(os);
  const auto& A = g.value(a).data;
  const auto& B = g.value(b).data;
  for (int n = 0; n < N; ++n) {
    std::copy_n(A.begin() + std::ptrdiff_t(std::size_t(n) * Ca * M), std::size_t(Ca) * M,
                out.data.begin() + std::ptrdiff_t(std::size_t(n) * (Ca + Cb) * M));
    std::copy_n(B.begin() + std::ptrdiff_t(std::size_t(n) * Cb * M), std::size_t(Cb) * M,
                out.data.begin() + std::ptrdiff_t((std::size_t(n) * (Ca + Cb) + Ca) * M));
  }
  return g.record(std::move(out), {a, b}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    for (int n = 0; n < N; ++n) {
      if (gr.requires_grad(a)) {
        auto& ga = gr.grad(a);
        for (std::size_t k = 0; k < std::size_t(Ca) * M; ++k)
          ga[std::size_t(n) * Ca * M + k] += gy[std::size_t(n) * (Ca + Cb) * M + k];
      }
      if (gr.requires_grad(b)) {
        auto& gb = gr.grad(b);
        for (std::size_t k = 0; k < std::size_t(Cb) * M; ++k)
          gb[std::size_t(n) * Cb * M + k] += gy[(std::size_t(n) * (Ca + Cb) + Ca) * M + k];
      }
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::require(g.shape(a) == g.shape(b),
                  "add: shape mismatch " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
  Tensor<T> out = g.value(a);
  const auto& B = g.value(b).data;
  for (std::size_t k = 0; k < out.numel(); ++k) out.data[k] += B[k];
  return g.record(std::move(out), {a, b}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      auto& gv = gr.grad(v);
      for (std::size_t k = 0; k < gy.size(); ++k) gv[k] += gy[k];
    }
  });
}

// x: [N, C, S...] times m: [N, 1, S...], broadcast over channels.
template <typename T>
Var mul_channels(Graph<T>& g, Var x, Var m) {
  const Shape xs = g.shape(x), ms = g.shape(m);
  detail::require(xs.size() == ms.size() && ms.size() >= 3 && ms[0] == xs[0] && ms[1] == 1 &&
                      std::equal(xs.begin() + 2, xs.end(), ms.begin() + 2),
                  "mul_channels: incompatible shapes " + shape_str(xs) + " and " + shape_str(ms));
  const int N = xs[0], C = xs[1];
  const std::size_t M = g.value(x).spatial();
  Tensor<T> out = g.value(x);
  const auto& Mv = g.value(m).data;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t k = 0; k < M; ++k) out.data[(std::size_t(n) * C + c) * M + k] *= Mv[std::size_t(n) * M + k];
  return g.record(std::move(out), {x, m}, [=](Graph<T>& gr, Var self) {
    const auto& gy = gr.grad(self);
    const auto& Xv = gr.value(x).data;
    const auto& Mv2 = gr.value(m).data;
    const bool need_x = gr.requires_grad(x), need_m = gr.requires_grad(m);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t k = 0; k < M; ++k) {
          const std::size_t i = (std::size_t(n) * C + c) * M + k;
          if (need_x) gr.grad(x)[i] += gy[i] * Mv2[std::size_t(n) * M + k];
          if (need_m) gr.grad(m)[std::size_t(n) * M + k] += gy[i] * Xv[i];
        }
  });
}

// sum_i coeffs[i] * terms[i] over scalar terms.
template <typename T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& terms, const std::vector<double>& coeffs) {
  detail::require(terms.size() == coeffs.size() && !terms.empty(), "weighted_sum: size mismatch");
  T s{};
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require(g.value(terms[i]).numel() == 1, "weighted_sum: terms must be scalars");
    s += static_cast<T>(coeffs[i]) * g.value(terms[i]).data[0];
  }
  Tensor<T> out({1}, s);
  return g.record(std::move(out), terms, [=](Graph<T>& gr, Var self) {
    const T gy = gr.grad(self)[0];
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (gr.requires_grad(terms[i])) gr.grad(terms[i])[0] += static_cast<T>(coeffs[i]) * gy;
  });
}

}  // namespace vesselforge::ad
