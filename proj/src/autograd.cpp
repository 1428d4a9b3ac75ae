#include "aesr/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace aesr::ag {
namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Var<T>* v : inputs)
    if (v->defined() && v->requires_grad()) return true;
  return false;
}

// Wraps `value` in a node; records parents and the backward closure only when
// some input participates in differentiation.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Var<T>& v : inputs) needs = needs || (v.defined() && v.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (Var<T>& v : inputs)
      if (v.defined()) node->parents.push_back(v.node());
    node->backward = std::move(backward);
  }
  return Var<T>::from_node(std::move(node));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

// Output element count of a column chunk kept below this many elements.
constexpr std::size_t kIm2colBudget = std::size_t{1} << 23;

// Fills col (K x rows*Wo) for output rows [y0, y0+rows) of image plane set `src`.
template <typename T>
void im2col(const T* src, int cin, int h, int w, int k, int stride, int pad, int wo, int y0, int rows, T* col) {
  const std::size_t cols = static_cast<std::size_t>(rows) * wo;
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<std::size_t>((ci * k + ky) * k + kx)) * cols;
        const T* plane = src + static_cast<std::size_t>(ci) * h * w;
        for (int r = 0; r < rows; ++r) {
          const int iy = (y0 + r) * stride - pad + ky;
          T* drow = dst + static_cast<std::size_t>(r) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wo, T(0));
            continue;
          }
          const T* srow = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int cin, int h, int w, int k, int stride, int pad, int wo, int y0, int rows, T* dst) {
  const std::size_t cols = static_cast<std::size_t>(rows) * wo;
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<std::size_t>((ci * k + ky) * k + kx)) * cols;
        T* plane = dst + static_cast<std::size_t>(ci) * h * w;
        for (int r = 0; r < rows; ++r) {
          const int iy = (y0 + r) * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* srow = src + static_cast<std::size_t>(r) * wo;
          T* drow = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
}

template <typename T>
Var<T> unary(const Var<T>& a, auto&& f, auto&& df_from_x_y) {
  Tensor<T> out(a.shape());
  const Tensor<T>& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(std::move(out), {a}, [df_from_x_y](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df_from_x_y(p.value[i], self.value[i]);
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
T Var<T>::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape().str());
  return node_->value[0];
}

template <typename T>
void Var<T>::backward() const {
  if (node_->value.size() != 1) throw ShapeError("backward() needs a one-element output, got " + shape().str());
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order without recursion depth limits.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node<T>* n : order)
    if (n->backward) n->grad = Tensor<T>();
}

// --- convolution --------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding) {
  const Shape xs = x.shape(), ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square");
  if (xs.c != ws.c) throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                                     std::to_string(ws.c));
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias size mismatch");
  }
  const int k = ws.h;
  const int ho = (xs.h + 2 * padding - k) / stride + 1;
  const int wo = (xs.w + 2 * padding - k) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: input " + xs.str() + " too small for kernel");
  const int cout = ws.n;
  const std::size_t kdim = static_cast<std::size_t>(ws.c) * k * k;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;
  const int chunk_rows =
      std::clamp(static_cast<int>(kIm2colBudget / std::max<std::size_t>(kdim * wo, 1)), 1, ho);

  Tensor<T> out(Shape{xs.n, cout, ho, wo});
  const CMapMat<T> wm(weight.value().data(), cout, static_cast<Eigen::Index>(kdim));
  std::vector<T> col;
  for (int n = 0; n < xs.n; ++n) {
    const T* src = x.value().plane(n, 0);
    T* dst = out.plane(n, 0);
    if (pointwise) {
      const CMapMat<T> xm(src, xs.c, static_cast<Eigen::Index>(xs.plane()));
      MapMat<T>(dst, cout, static_cast<Eigen::Index>(xs.plane())).noalias() = wm * xm;
    } else {
      for (int y0 = 0; y0 < ho; y0 += chunk_rows) {
        const int rows = std::min(chunk_rows, ho - y0);
        const std::size_t ncols = static_cast<std::size_t>(rows) * wo;
        col.resize(kdim * ncols);
        im2col(src, xs.c, xs.h, xs.w, k, stride, padding, wo, y0, rows, col.data());
        const CMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ncols));
        RowMat<T> res = wm * cm;
        for (int co = 0; co < cout; ++co) {
          std::copy(res.row(co).data(), res.row(co).data() + ncols,
                    dst + static_cast<std::size_t>(co) * ho * wo + static_cast<std::size_t>(y0) * wo);
        }
      }
    }
    if (bias.defined()) {
      for (int co = 0; co < cout; ++co) {
        const T b = bias.value()[co];
        T* p = dst + static_cast<std::size_t>(co) * ho * wo;
        for (std::size_t i = 0; i < static_cast<std::size_t>(ho) * wo; ++i) p[i] += b;
      }
    }
  }

  return make_result<T>(std::move(out), {x, weight, bias}, [=](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    Node<T>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const CMapMat<T> wmat(wn.value.data(), cout, static_cast<Eigen::Index>(kdim));
    std::vector<T> colbuf;
    RowMat<T> dw = RowMat<T>::Zero(cout, static_cast<Eigen::Index>(kdim));
    for (int n = 0; n < xs.n; ++n) {
      const T* src = xn.value.plane(n, 0);
      const T* gout = self.grad.plane(n, 0);
      if (pointwise) {
        const std::size_t P = xs.plane();
        const CMapMat<T> gm(gout, cout, static_cast<Eigen::Index>(P));
        if (wn.requires_grad) dw.noalias() += gm * CMapMat<T>(src, xs.c, static_cast<Eigen::Index>(P)).transpose();
        if (xn.requires_grad) {
          MapMat<T>(xn.grad_buffer().plane(n, 0), xs.c, static_cast<Eigen::Index>(P)).noalias() +=
              wmat.transpose() * gm;
        }
        continue;
      }
      for (int y0 = 0; y0 < ho; y0 += chunk_rows) {
        const int rows = std::min(chunk_rows, ho - y0);
        const std::size_t ncols = static_cast<std::size_t>(rows) * wo;
        RowMat<T> gm(cout, static_cast<Eigen::Index>(ncols));
        for (int co = 0; co < cout; ++co) {
          const T* g = gout + static_cast<std::size_t>(co) * ho * wo + static_cast<std::size_t>(y0) * wo;
          std::copy(g, g + ncols, gm.row(co).data());
        }
        if (wn.requires_grad) {
          colbuf.resize(kdim * ncols);
          im2col(src, xs.c, xs.h, xs.w, k, stride, padding, wo, y0, rows, colbuf.data());
          dw.noalias() +=
              gm * CMapMat<T>(colbuf.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(ncols))
                       .transpose();
        }
        if (xn.requires_grad) {
          RowMat<T> dcol = wmat.transpose() * gm;
          col2im(dcol.data(), xs.c, xs.h, xs.w, k, stride, padding, wo, y0, rows, xn.grad_buffer().plane(n, 0));
        }
      }
    }
    if (wn.requires_grad) {
      Tensor<T>& g = wn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dw.data()[i];
    }
    if (bn && bn->requires_grad) {
      Tensor<T>& g = bn->grad_buffer();
      for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < cout; ++co) {
          const T* p = self.grad.plane(n, co);
          double s = 0;
          for (std::size_t i = 0; i < static_cast<std::size_t>(ho) * wo; ++i) s += p[i];
          g[co] += static_cast<T>(s);
        }
    }
  });
}

// --- elementwise --------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor<T>& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node<T>& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const T sign = k == 0 ? T(1) : T(-1);
      Tensor<T>& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor<T>& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor<T>& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> mul_channels(const Var<T>& gate, const Var<T>& x) {
  const Shape gs = gate.shape(), xs = x.shape();
  if (gs.c != 1 || gs.n != xs.n || gs.h != xs.h || gs.w != xs.w) {
    throw ShapeError("mul_channels: gate " + gs.str() + " does not broadcast over " + xs.str());
  }
  Tensor<T> out = x.value();
  const std::size_t P = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      T* o = out.plane(n, c);
      const T* g = gate.value().plane(n, 0);
      for (std::size_t i = 0; i < P; ++i) o[i] *= g[i];
    }
  return make_result<T>(std::move(out), {gate, x}, [xs, P](Node<T>& self) {
    Node<T>& pg = *self.parents[0];
    Node<T>& px = *self.parents[1];
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const T* go = self.grad.plane(n, c);
        if (pg.requires_grad) {
          T* gg = pg.grad_buffer().plane(n, 0);
          const T* xv = px.value.plane(n, c);
          for (std::size_t i = 0; i < P; ++i) gg[i] += go[i] * xv[i];
        }
        if (px.requires_grad) {
          T* gx = px.grad_buffer().plane(n, c);
          const T* gv = pg.value.plane(n, 0);
          for (std::size_t i = 0; i < P; ++i) gx[i] += go[i] * gv[i];
        }
      }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary<T>(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_constant(const Var<T>& a, T c) {
  return unary<T>(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub_scalar(const Var<T>& a, const Var<T>& s) {
  if (s.value().size() != 1) throw ShapeError("sub_scalar: subtrahend must hold one element");
  Tensor<T> out = a.value();
  const T sv = s.value()[0];
  for (T& v : out.values()) v -= sv;
  return make_result<T>(std::move(out), {a, s}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& ps = *self.parents[1];
    double total = 0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) total += self.grad[i];
    if (pa.requires_grad) {
      Tensor<T>& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (ps.requires_grad) ps.grad_buffer()[0] -= static_cast<T>(total);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary<T>(
      a, [slope](T x) { return x > 0 ? x : slope * x; }, [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x, T) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}

// --- resampling ---------------------------------------------------------------

template <typename T>
Var<T> upsample_nearest(const Var<T>& a, int factor) {
  if (factor < 1) throw ArgumentError("upsample_nearest: factor must be >= 1");
  const Shape s = a.shape();
  const int oh = s.h * factor, ow = s.w * factor;
  Tensor<T> out(Shape{s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = a.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
          dst[static_cast<std::size_t>(y) * ow + x] = src[static_cast<std::size_t>(y / factor) * s.w + x / factor];
    }
  return make_result<T>(std::move(out), {a}, [s, factor, oh, ow](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* d = p.grad_buffer().plane(n, c);
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x)
            d[static_cast<std::size_t>(y / factor) * s.w + x / factor] += g[static_cast<std::size_t>(y) * ow + x];
      }
  });
}

namespace {

struct LinearTap {
  int i0, i1;
  double w0, w1;
};

std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double src = std::max((i + 0.5) * ratio - 0.5, 0.0);
    const int i0 = std::min(static_cast<int>(src), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double l = src - i0;
    taps[i] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> resize_bilinear(const Var<T>& a, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize_bilinear: non-positive output size");
  const Shape s = a.shape();
  const auto ty = linear_taps(s.h, out_h);
  const auto tx = linear_taps(s.w, out_w);
  Tensor<T> out(Shape{s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = a.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        const LinearTap& vy = ty[y];
        const T* r0 = src + static_cast<std::size_t>(vy.i0) * s.w;
        const T* r1 = src + static_cast<std::size_t>(vy.i1) * s.w;
        for (int x = 0; x < out_w; ++x) {
          const LinearTap& vx = tx[x];
          dst[static_cast<std::size_t>(y) * out_w + x] =
              static_cast<T>(vy.w0 * (vx.w0 * r0[vx.i0] + vx.w1 * r0[vx.i1]) +
                             vy.w1 * (vx.w0 * r1[vx.i0] + vx.w1 * r1[vx.i1]));
        }
      }
    }
  return make_result<T>(std::move(out), {a}, [s, ty, tx, out_h, out_w](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* d = p.grad_buffer().plane(n, c);
        for (int y = 0; y < out_h; ++y) {
          const LinearTap& vy = ty[y];
          T* r0 = d + static_cast<std::size_t>(vy.i0) * s.w;
          T* r1 = d + static_cast<std::size_t>(vy.i1) * s.w;
          for (int x = 0; x < out_w; ++x) {
            const LinearTap& vx = tx[x];
            const T gv = g[static_cast<std::size_t>(y) * out_w + x];
            r0[vx.i0] += static_cast<T>(vy.w0 * vx.w0 * gv);
            r0[vx.i1] += static_cast<T>(vy.w0 * vx.w1 * gv);
            r1[vx.i0] += static_cast<T>(vy.w1 * vx.w0 * gv);
            r1[vx.i1] += static_cast<T>(vy.w1 * vx.w1 * gv);
          }
        }
      }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& a) {
  const Shape s = a.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avg_pool2: odd spatial size " + s.str());
  const int oh = s.h / 2, ow = s.w / 2;
  Tensor<T> out(Shape{s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = a.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const T* r0 = src + static_cast<std::size_t>(2 * y) * s.w + 2 * x;
          const T* r1 = r0 + s.w;
          dst[static_cast<std::size_t>(y) * ow + x] = T(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
        }
    }
  return make_result<T>(std::move(out), {a}, [s, oh, ow](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* d = p.grad_buffer().plane(n, c);
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            const T q = T(0.25) * g[static_cast<std::size_t>(y) * ow + x];
            T* r0 = d + static_cast<std::size_t>(2 * y) * s.w + 2 * x;
            T* r1 = r0 + s.w;
            r0[0] += q;
            r0[1] += q;
            r1[0] += q;
            r1[1] += q;
          }
      }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: no inputs");
  Shape s = parts[0].shape();
  int total = 0;
  for (const Var<T>& p : parts) {
    const Shape ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) throw ShapeError("concat_channels: mismatched " + ps.str());
    total += ps.c;
  }
  Tensor<T> out(Shape{s.n, total, s.h, s.w});
  const std::size_t P = s.plane();
  for (int n = 0; n < s.n; ++n) {
    int offset = 0;
    for (const Var<T>& p : parts) {
      const T* src = p.value().plane(n, 0);
      std::copy(src, src + P * p.shape().c, out.plane(n, offset));
      offset += p.shape().c;
    }
  }
  return make_result<T>(std::move(out), parts, [P](Node<T>& self) {
    const int batch = self.value.batch();
    for (int n = 0; n < batch; ++n) {
      int offset = 0;
      for (auto& p : self.parents) {
        const int c = p->value.channels();
        if (p->requires_grad) {
          const T* g = self.grad.plane(n, offset);
          T* d = p->grad_buffer().plane(n, 0);
          for (std::size_t i = 0; i < P * c; ++i) d[i] += g[i];
        }
        offset += c;
      }
    }
  });
}

// --- reductions ---------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  double s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(s)), {a}, [](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    const T g = self.grad[0];
    for (T& v : p.grad_buffer().values()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T count = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / count);
}

template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "l1_loss");
  const std::size_t count = a.value().size();
  double s = 0;
  for (std::size_t i = 0; i < count; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  return make_result<T>(Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(s / static_cast<double>(count))), {a, b}, [count](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    const T g = self.grad[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const T d = pa.value[i] - pb.value[i];
      const T sgn = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
      if (pa.requires_grad) pa.grad_buffer()[i] += g * sgn;
      if (pb.requires_grad) pb.grad_buffer()[i] -= g * sgn;
    }
  });
}

// --- spectral normalization -----------------------------------------------------

template <typename T>
T estimate_spectral_norm(const Tensor<T>& weight, Tensor<T>& u, int iterations, std::vector<T>* v_out) {
  const int rows = weight.batch();
  const std::size_t cols = weight.size() / static_cast<std::size_t>(std::max(rows, 1));
  if (u.size() != static_cast<std::size_t>(rows)) throw ShapeError("spectral norm: u has wrong length");
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const CMapMat<T> w(weight.data(), rows, static_cast<Eigen::Index>(cols));
  Eigen::Map<Vec> uv(u.data(), rows);
  constexpr T eps = T(1e-12);
  Vec v(static_cast<Eigen::Index>(cols));
  for (int it = 0; it < iterations; ++it) {
    v = w.transpose() * uv;
    v /= std::max(v.norm(), eps);
    Vec wu = w * v;
    const T n = wu.norm();
    if (n > eps) uv = wu / n;
  }
  v = w.transpose() * uv;
  const T sigma = v.norm();
  v /= std::max(sigma, eps);
  if (v_out) v_out->assign(v.data(), v.data() + v.size());
  return std::max(sigma, eps);
}

template <typename T>
Var<T> spectral_norm(const Var<T>& weight, Tensor<T>& u, int iterations) {
  std::vector<T> v;
  const T sigma = estimate_spectral_norm(weight.value(), u, iterations, &v);
  Tensor<T> out = weight.value();
  for (T& x : out.values()) x /= sigma;
  std::vector<T> uvec(u.values().begin(), u.values().end());
  return make_result<T>(std::move(out), {weight}, [sigma, uvec = std::move(uvec), v = std::move(v)](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    // d(W/sigma)/dW with sigma = u^T W v: (G - <G, W/sigma> u v^T) / sigma
    T inner = 0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) inner += self.grad[i] * self.value[i];
    Tensor<T>& g = p.grad_buffer();
    const std::size_t cols = v.size();
    for (std::size_t r = 0; r < uvec.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        g[i] += (self.grad[i] - inner * uvec[r] * v[c]) / sigma;
      }
  });
}

#define AESR_INSTANTIATE(T)                                                                        \
  template class Var<T>;                                                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                    \
  template Var<T> add(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul_channels(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale(const Var<T>&, T);                                                         \
  template Var<T> add_constant(const Var<T>&, T);                                                  \
  template Var<T> sub_scalar(const Var<T>&, const Var<T>&);                                        \
  template Var<T> relu(const Var<T>&);                                                             \
  template Var<T> leaky_relu(const Var<T>&, T);                                                    \
  template Var<T> sigmoid(const Var<T>&);                                                          \
  template Var<T> softplus(const Var<T>&);                                                         \
  template Var<T> upsample_nearest(const Var<T>&, int);                                            \
  template Var<T> resize_bilinear(const Var<T>&, int, int);                                        \
  template Var<T> avg_pool2(const Var<T>&);                                                        \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                     \
  template Var<T> sum(const Var<T>&);                                                              \
  template Var<T> mean(const Var<T>&);                                                             \
  template Var<T> l1_loss(const Var<T>&, const Var<T>&);                                           \
  template T estimate_spectral_norm(const Tensor<T>&, Tensor<T>&, int, std::vector<T>*);           \
  template Var<T> spectral_norm(const Var<T>&, Tensor<T>&, int);

AESR_INSTANTIATE(float)
AESR_INSTANTIATE(double)

}  // namespace aesr::ag
