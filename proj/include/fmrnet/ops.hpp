#pragma once

// Differentiable tensor operations used by the networks, the losses and the
// feature rearrangement module. Layouts are NCHW for feature maps and
// row-major [rows, cols] for matrices.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fmrnet/autograd.hpp"
#include "fmrnet/tensor.hpp"

namespace fmrnet::ops {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <class T>
void accumulate(Node<T>& p, const Tensor<T>& g) {
  if (p.requires_grad) p.grad_buffer() += g;
}

template <class T, class F>
Var<T> unary(const Var<T>& a, F&& fwd_and_deriv) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  Tensor<T> d(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) fwd_and_deriv(x[i], y[i], d[i]);
  return make_result<T>(std::move(y), {a}, [d = std::move(d)](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const auto& go = n.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * d[i];
  });
}

struct ConvGeometry {
  int n, c, h, w;    // image side (conv input / transposed-conv output)
  int k, s, p;       // kernel, stride, padding
  int oh, ow;        // column side (conv output / transposed-conv input)
};

// [C*k*k, N*oh*ow] patch matrix from an NCHW buffer.
template <class T>
MatR<T> im2col(const T* src, const ConvGeometry& g) {
  MatR<T> cols(static_cast<Eigen::Index>(g.c) * g.k * g.k, static_cast<Eigen::Index>(g.n) * g.oh * g.ow);
  const Eigen::Index plane = static_cast<Eigen::Index>(g.oh) * g.ow;
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols.data() + ((static_cast<Eigen::Index>(c) * g.k + ki) * g.k + kj) * cols.cols();
        for (int n = 0; n < g.n; ++n) {
          const T* img = src + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
          T* out = row + n * plane;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy = oy * g.s - g.p + ki;
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.s - g.p + kj;
              out[oy * g.ow + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? img[iy * g.w + ix] : T(0);
            }
          }
        }
      }
  return cols;
}

// Adjoint of im2col: scatters-adds columns back into an NCHW buffer.
template <class T>
void col2im(const MatR<T>& cols, T* dst, const ConvGeometry& g) {
  const Eigen::Index plane = static_cast<Eigen::Index>(g.oh) * g.ow;
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols.data() + ((static_cast<Eigen::Index>(c) * g.k + ki) * g.k + kj) * cols.cols();
        for (int n = 0; n < g.n; ++n) {
          T* img = dst + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
          const T* in = row + n * plane;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy = oy * g.s - g.p + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.s - g.p + kj;
              if (ix >= 0 && ix < g.w) img[iy * g.w + ix] += in[oy * g.ow + ox];
            }
          }
        }
      }
}

// NCHW -> [C, N*H*W]
template <class T>
MatR<T> channels_first(const Tensor<T>& x) {
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index hw = static_cast<Eigen::Index>(x.dim(2)) * x.dim(3);
  MatR<T> m(c, n * hw);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(x.data() + (static_cast<std::size_t>(b) * c + ch) * hw, hw, m.data() + ch * m.cols() + b * hw);
  return m;
}

// [C, N*H*W] -> NCHW (accumulating)
template <class T>
void add_channels_first(const MatR<T>& m, Tensor<T>& x) {
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index hw = static_cast<Eigen::Index>(x.dim(2)) * x.dim(3);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      T* dst = x.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      const T* src = m.data() + ch * m.cols() + b * hw;
      for (Eigen::Index i = 0; i < hw; ++i) dst[i] += src[i];
    }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y = a.value();
  y += b.value();
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    const auto& g = n.grad_buffer();
    detail::accumulate(parent(n, 0), g);
    detail::accumulate(parent(n, 1), g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    const auto& g = n.grad_buffer();
    detail::accumulate(parent(n, 0), g);
    auto& pb = parent(n, 1);
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    const auto& g = n.grad_buffer();
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa.value[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x, T& y, T& d) {
    y = s * x;
    d = s;
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x, T& y, T& d) {
    y = x + s;
    d = T(1);
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x, T& y, T& d) {
    y = x * x;
    d = T(2) * x;
  });
}

template <class T>
Var<T> abs(const Var<T>& a) {
  return detail::unary(a, [](T x, T& y, T& d) {
    y = std::abs(x);
    d = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x, T& y, T& d) {
    y = std::exp(x);
    d = y;
  });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x, T& y, T& d) {
    y = std::log(x);
    d = T(1) / x;
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(a, [](T x, T& y, T& d) {
    y = T(1) / (T(1) + std::exp(-x));
    d = y * (T(1) - y);
  });
}

// log(1 + e^x), computed without overflow.
template <class T>
inline T softplus_value(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  return detail::unary(a, [](T x, T& y, T& d) {
    y = softplus_value(x);
    d = T(1) / (T(1) + std::exp(-x));
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return detail::unary(a, [slope](T x, T& y, T& d) {
    y = x > T(0) ? x : slope * x;
    d = x > T(0) ? T(1) : slope;
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return leaky_relu(a, T(0));
}

// Elementwise binary cross entropy against a constant label, from logits:
// -[y log sigmoid(l) + (1-y) log(1 - sigmoid(l))] = softplus(l) - y*l.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, T label) {
  return detail::unary(logits, [label](T l, T& y, T& d) {
    y = softplus_value(l) - label * l;
    d = T(1) / (T(1) + std::exp(-l)) - label;
  });
}

// ------------------------------------------------------------------ reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    const T g = n.grad_buffer()[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// sqrt(sum of squares) of a whole tensor; the gradient at zero is taken as 0.
template <class T>
Var<T> frobenius_norm(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().values()) s += v * v;
  const T norm = std::sqrt(s);
  return make_result<T>(Tensor<T>::scalar(norm), {a}, [norm](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad || norm <= T(0)) return;
    const T g = n.grad_buffer()[0] / norm;
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * p.value[i];
  });
}

// Euclidean norm along the last dimension; result drops that dimension.
template <class T>
Var<T> norm_lastdim(const Var<T>& a, T eps = T(0)) {
  const auto& x = a.value();
  const int d = x.dim(-1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (int j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    y[r] = std::sqrt(s);
  }
  return make_result<T>(y, {a}, [y, d, rows, eps](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = n.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      if (y[r] <= eps || y[r] == T(0)) continue;
      const T f = g[r] / y[r];
      for (int j = 0; j < d; ++j) gp[r * d + j] += f * p.value[r * d + j];
    }
  });
}

// --------------------------------------------------------------------- shapes

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(y), {a}, [](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = n.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
  });
}

// Concatenates NCHW tensors along the channel axis.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& x = a.value();
  const auto& z = b.value();
  detail::require(x.rank() == 4 && z.rank() == 4 && x.dim(0) == z.dim(0) && x.dim(2) == z.dim(2) &&
                      x.dim(3) == z.dim(3),
                  "concat_channels: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(z.shape()));
  const int n = x.dim(0), ca = x.dim(1), cb = z.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y({n, ca + cb, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * ca * hw, ca * hw, y.data() + i * (ca + cb) * hw);
    std::copy_n(z.data() + i * cb * hw, cb * hw, y.data() + (i * (ca + cb) + ca) * hw);
  }
  return make_result<T>(std::move(y), {a, b}, [n, ca, cb, hw](Node<T>& nd) {
    const auto& g = nd.grad_buffer();
    auto& pa = parent(nd, 0);
    auto& pb = parent(nd, 1);
    for (int i = 0; i < n; ++i) {
      if (pa.requires_grad) {
        auto& ga = pa.grad_buffer();
        for (std::size_t j = 0; j < ca * hw; ++j) ga[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (std::size_t j = 0; j < cb * hw; ++j) gb[i * cb * hw + j] += g[(i * (ca + cb) + ca) * hw + j];
      }
    }
  });
}

// Concatenates along the leading (batch) axis.
template <class T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_batch: no inputs");
  Shape shape = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    detail::require(s.size() == shape.size() && std::equal(s.begin() + 1, s.end(), shape.begin() + 1),
                    "concat_batch: incompatible shapes");
    total += s[0];
  }
  shape[0] = total;
  Tensor<T> y(shape);
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().data(), p.value().data() + p.size(), y.data() + off);
    off += p.size();
  }
  return make_result<T>(std::move(y), parts, [offsets](Node<T>& n) {
    const auto& g = n.grad_buffer();
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = parent(n, k);
      if (!p.requires_grad) continue;
      auto& gp = p.grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
    }
  });
}

// Rows [begin, end) of the leading axis.
template <class T>
Var<T> slice_batch(const Var<T>& a, int begin, int end) {
  const auto& x = a.value();
  detail::require(begin >= 0 && end <= x.dim(0) && begin < end, "slice_batch: bad range");
  Shape shape = x.shape();
  const std::size_t inner = x.size() / static_cast<std::size_t>(shape[0]);
  shape[0] = end - begin;
  Tensor<T> y(shape);
  std::copy_n(x.data() + begin * inner, y.size(), y.data());
  return make_result<T>(std::move(y), {a}, [begin, inner](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = n.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gp[begin * inner + i] += g[i];
  });
}

// ------------------------------------------------------------------ linear algebra

// y[N,out] = x[N,in] * w[out,in]^T + b[out]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require(x.value().rank() == 2 && w.value().rank() == 2 && x.dim(1) == w.dim(1),
                  "linear: shape mismatch " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor<T> y({n, out});
  MapR<T> ym(y.data(), n, out);
  CMapR<T> xm(x.value().data(), n, in);
  CMapR<T> wm(w.value().data(), out, in);
  ym.noalias() = xm * wm.transpose();
  if (b.defined())
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out; ++j) ym(i, j) += b.value()[j];
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(y), inputs, [n, in, out](Node<T>& nd) {
    CMapR<T> g(nd.grad_buffer().data(), n, out);
    auto& px = parent(nd, 0);
    auto& pw = parent(nd, 1);
    if (px.requires_grad) {
      MapR<T> gx(px.grad_buffer().data(), n, in);
      gx.noalias() += g * CMapR<T>(pw.value.data(), out, in);
    }
    if (pw.requires_grad) {
      MapR<T> gw(pw.grad_buffer().data(), out, in);
      gw.noalias() += g.transpose() * CMapR<T>(px.value.data(), n, in);
    }
    if (nd.parents.size() > 2) {
      auto& pb = parent(nd, 2);
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < out; ++j) gb[j] += g(i, j);
      }
    }
  });
}

// y[M,N] = a[M,K] * b[K,N]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  Tensor<T> y({m, nn});
  MapR<T>(y.data(), m, nn).noalias() = CMapR<T>(a.value().data(), m, k) * CMapR<T>(b.value().data(), k, nn);
  return make_result<T>(std::move(y), {a, b}, [m, k, nn](Node<T>& nd) {
    CMapR<T> g(nd.grad_buffer().data(), m, nn);
    auto& pa = parent(nd, 0);
    auto& pb = parent(nd, 1);
    if (pa.requires_grad)
      MapR<T>(pa.grad_buffer().data(), m, k).noalias() += g * CMapR<T>(pb.value.data(), k, nn).transpose();
    if (pb.requires_grad)
      MapR<T>(pb.grad_buffer().data(), k, nn).noalias() += CMapR<T>(pa.value.data(), m, k).transpose() * g;
  });
}

// Batched product: a[B,M,K] * b[B,K,N], or a * b^T with b[B,N,K] when
// transpose_b is set.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0), "bmm: expected rank-3 operands");
  const int batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const int nn = transpose_b ? bv.dim(1) : bv.dim(2);
  detail::require((transpose_b ? bv.dim(2) : bv.dim(1)) == k,
                  "bmm: inner dimension mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor<T> y({batch, m, nn});
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * nn,
                    sy = static_cast<std::size_t>(m) * nn;
  for (int i = 0; i < batch; ++i) {
    CMapR<T> am(av.data() + i * sa, m, k);
    MapR<T> ym(y.data() + i * sy, m, nn);
    if (transpose_b)
      ym.noalias() = am * CMapR<T>(bv.data() + i * sb, nn, k).transpose();
    else
      ym.noalias() = am * CMapR<T>(bv.data() + i * sb, k, nn);
  }
  return make_result<T>(std::move(y), {a, b}, [=](Node<T>& nd) {
    auto& pa = parent(nd, 0);
    auto& pb = parent(nd, 1);
    const auto& g = nd.grad_buffer();
    for (int i = 0; i < batch; ++i) {
      CMapR<T> gm(g.data() + i * sy, m, nn);
      if (pa.requires_grad) {
        MapR<T> ga(pa.grad_buffer().data() + i * sa, m, k);
        if (transpose_b)
          ga.noalias() += gm * CMapR<T>(pb.value.data() + i * sb, nn, k);
        else
          ga.noalias() += gm * CMapR<T>(pb.value.data() + i * sb, k, nn).transpose();
      }
      if (pb.requires_grad) {
        CMapR<T> am(pa.value.data() + i * sa, m, k);
        if (transpose_b)
          MapR<T>(pb.grad_buffer().data() + i * sb, nn, k).noalias() += gm.transpose() * am;
        else
          MapR<T>(pb.grad_buffer().data() + i * sb, k, nn).noalias() += am.transpose() * gm;
      }
    }
  });
}

// Softmax over the last dimension.
template <class T>
Var<T> softmax_lastdim(const Var<T>& a) {
  const auto& x = a.value();
  const int d = x.dim(-1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T* yr = y.data() + r * d;
    T mx = xr[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    T s = T(0);
    for (int j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (int j = 0; j < d; ++j) yr[j] /= s;
  }
  return make_result<T>(y, {a}, [y, d, rows](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = n.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (int j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (int j = 0; j < d; ++j) gp[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

// Scales each last-dimension row to unit length. Rows with norm below eps map
// to zero, so their cosine with anything is 0.
template <class T>
Var<T> l2_normalize_lastdim(const Var<T>& a, T eps) {
  const auto& x = a.value();
  const int d = x.dim(-1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  Tensor<T> y(x.shape());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (int j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    norms[r] = std::sqrt(s);
    if (norms[r] >= eps)
      for (int j = 0; j < d; ++j) y[r * d + j] = x[r * d + j] / norms[r];
  }
  return make_result<T>(y, {a}, [y, norms, d, rows, eps](Node<T>& n) {
    auto& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = n.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] < eps) continue;
      T dot = T(0);
      for (int j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
      for (int j = 0; j < d; ++j) gp[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
    }
  });
}

// ------------------------------------------------------------------ convolution

inline int conv_out_size(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }
inline int conv_transpose_out_size(int in, int k, int s, int p) { return (in - 1) * s - 2 * p + k; }

// x[N,Ci,H,W], w[Co,Ci,k,k], b[Co] (optional)
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require(xv.rank() == 4 && wv.rank() == 4 && xv.dim(1) == wv.dim(1) && wv.dim(2) == wv.dim(3),
                  "conv2d: shape mismatch " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int co = wv.dim(0), k = wv.dim(2);
  const int oh = conv_out_size(h, k, stride, pad), ow = conv_out_size(wd, k, stride, pad);
  detail::require(oh > 0 && ow > 0, "conv2d: input too small");
  const detail::ConvGeometry geo{n, ci, h, wd, k, stride, pad, oh, ow};
  auto cols = detail::im2col(xv.data(), geo);
  CMapR<T> wm(wv.data(), co, static_cast<Eigen::Index>(ci) * k * k);
  MatR<T> om = wm * cols;
  if (b.defined())
    for (int c = 0; c < co; ++c) om.row(c).array() += b.value()[c];
  Tensor<T> y({n, co, oh, ow});
  detail::add_channels_first(om, y);
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(y), inputs, [geo, co, cols = std::move(cols)](Node<T>& nd) {
    const MatR<T> gm = detail::channels_first(nd.grad_buffer());
    auto& px = parent(nd, 0);
    auto& pw = parent(nd, 1);
    const Eigen::Index ckk = static_cast<Eigen::Index>(geo.c) * geo.k * geo.k;
    if (pw.requires_grad) MapR<T>(pw.grad_buffer().data(), co, ckk).noalias() += gm * cols.transpose();
    if (px.requires_grad) {
      MatR<T> dcols = CMapR<T>(pw.value.data(), co, ckk).transpose() * gm;
      detail::col2im(dcols, px.grad_buffer().data(), geo);
    }
    if (nd.parents.size() > 2) {
      auto& pb = parent(nd, 2);
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        for (int c = 0; c < co; ++c) gb[c] += gm.row(c).sum();
      }
    }
  });
}

// x[N,Ci,H,W], w[Ci,Co,k,k], b[Co] (optional); the adjoint of conv2d.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require(xv.rank() == 4 && wv.rank() == 4 && xv.dim(1) == wv.dim(0) && wv.dim(2) == wv.dim(3),
                  "conv_transpose2d: shape mismatch " + shape_str(xv.shape()) + " vs weight " +
                      shape_str(wv.shape()));
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int co = wv.dim(1), k = wv.dim(2);
  const int oh = conv_transpose_out_size(h, k, stride, pad), ow = conv_transpose_out_size(wd, k, stride, pad);
  const detail::ConvGeometry geo{n, co, oh, ow, k, stride, pad, h, wd};
  const Eigen::Index ckk = static_cast<Eigen::Index>(co) * k * k;
  MatR<T> xm = detail::channels_first(xv);
  MatR<T> cols = CMapR<T>(wv.data(), ci, ckk).transpose() * xm;
  Tensor<T> y({n, co, oh, ow});
  detail::col2im(cols, y.data(), geo);
  if (b.defined()) {
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < co; ++c) {
        T* dst = y.data() + (static_cast<std::size_t>(i) * co + c) * plane;
        for (std::size_t j = 0; j < plane; ++j) dst[j] += b.value()[c];
      }
  }
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(y), inputs, [geo, ci, ckk, xm = std::move(xm)](Node<T>& nd) {
    const auto& g = nd.grad_buffer();
    auto& px = parent(nd, 0);
    auto& pw = parent(nd, 1);
    MatR<T> dcols = detail::im2col(g.data(), geo);
    if (pw.requires_grad) MapR<T>(pw.grad_buffer().data(), ci, ckk).noalias() += xm * dcols.transpose();
    if (px.requires_grad) {
      MatR<T> dx = CMapR<T>(pw.value.data(), ci, ckk) * dcols;
      detail::add_channels_first(dx, px.grad_buffer());
    }
    if (nd.parents.size() > 2) {
      auto& pb = parent(nd, 2);
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        const std::size_t plane = static_cast<std::size_t>(geo.h) * geo.w;
        for (int i = 0; i < geo.n; ++i)
          for (int c = 0; c < geo.c; ++c) {
            const T* src = g.data() + (static_cast<std::size_t>(i) * geo.c + c) * plane;
            T s = T(0);
            for (std::size_t j = 0; j < plane; ++j) s += src[j];
            gb[c] += s;
          }
      }
    }
  });
}

// ------------------------------------------------------------ normalization

template <class T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

// Batch normalization over every axis but the channel axis (dim 1). Works on
// [N,C] and [N,C,H,W]. In training mode batch statistics are used and the
// running estimates are updated; otherwise running estimates are used.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                  bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 2 || xv.rank() == 4, "batch_norm: expected rank 2 or 4");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = xv.rank() == 4 ? static_cast<std::size_t>(xv.dim(2)) * xv.dim(3) : 1;
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  detail::require(gamma.size() == static_cast<std::size_t>(c), "batch_norm: gamma size mismatch");
  std::vector<T> mu(c), inv_std(c);
  if (training) {
    detail::require(m > 1, "batch_norm: training mode needs more than one value per channel");
    for (int ch = 0; ch < c; ++ch) {
      T s = T(0), s2 = T(0);
      for (int i = 0; i < n; ++i) {
        const T* src = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) s += src[j];
      }
      const T mean_c = s / static_cast<T>(m);
      for (int i = 0; i < n; ++i) {
        const T* src = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) s2 += (src[j] - mean_c) * (src[j] - mean_c);
      }
      const T var = s2 / static_cast<T>(m);
      mu[ch] = mean_c;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      stats.running_mean[ch] = (T(1) - momentum) * stats.running_mean[ch] + momentum * mean_c;
      stats.running_var[ch] =
          (T(1) - momentum) * stats.running_var[ch] + momentum * s2 / static_cast<T>(m - 1);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  Tensor<T> xhat(xv.shape());
  Tensor<T> y(xv.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        xhat[base + j] = (xv[base + j] - mu[ch]) * inv_std[ch];
        y[base + j] = gamma.value()[ch] * xhat[base + j] + beta.value()[ch];
      }
    }
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [n, c, hw, m, training, inv_std, xhat = std::move(xhat)](Node<T>& nd) {
                          const auto& g = nd.grad_buffer();
                          auto& px = parent(nd, 0);
                          auto& pg = parent(nd, 1);
                          auto& pb = parent(nd, 2);
                          for (int ch = 0; ch < c; ++ch) {
                            T sum_g = T(0), sum_gx = T(0);
                            for (int i = 0; i < n; ++i) {
                              const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                              for (std::size_t j = 0; j < hw; ++j) {
                                sum_g += g[base + j];
                                sum_gx += g[base + j] * xhat[base + j];
                              }
                            }
                            if (pg.requires_grad) pg.grad_buffer()[ch] += sum_gx;
                            if (pb.requires_grad) pb.grad_buffer()[ch] += sum_g;
                            if (!px.requires_grad) continue;
                            auto& gx = px.grad_buffer();
                            const T gam = pg.value[ch];
                            const T k = gam * inv_std[ch];
                            for (int i = 0; i < n; ++i) {
                              const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                              for (std::size_t j = 0; j < hw; ++j) {
                                if (training)
                                  gx[base + j] += k * (g[base + j] - sum_g / static_cast<T>(m) -
                                                       xhat[base + j] * sum_gx / static_cast<T>(m));
                                else
                                  gx[base + j] += k * g[base + j];
                              }
                            }
                          }
                        });
}

// ------------------------------------------------------- texton block layout

// x[N,C,H,W] -> [N, (H/K)*(W/K), C*K*K]; blocks in row-major order, each
// flattened as (c, ki, kj).
template <class T>
Var<T> unfold_blocks(const Var<T>& x, int k) {
  const auto& xv = x.value();
  detail::require(xv.rank() == 4, "unfold_blocks: expected NCHW");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  detail::require(k > 0 && h % k == 0 && w % k == 0,
                  "feature map " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by texton size " +
                      std::to_string(k));
  const int gh = h / k, gw = w / k, d = c * k * k;
  std::vector<std::size_t> index(xv.size());
  for (int b = 0; b < n; ++b)
    for (int bi = 0; bi < gh; ++bi)
      for (int bj = 0; bj < gw; ++bj)
        for (int ch = 0; ch < c; ++ch)
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const std::size_t dst =
                  ((static_cast<std::size_t>(b) * gh * gw + bi * gw + bj) * d) + (ch * k + ki) * k + kj;
              index[dst] = ((static_cast<std::size_t>(b) * c + ch) * h + bi * k + ki) * w + bj * k + kj;
            }
  Tensor<T> y({n, gh * gw, d});
  for (std::size_t i = 0; i < index.size(); ++i) y[i] = xv[index[i]];
  return make_result<T>(std::move(y), {x}, [index = std::move(index)](Node<T>& nd) {
    auto& p = parent(nd, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = nd.grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) gp[index[i]] += g[i];
  });
}

// Inverse of unfold_blocks.
template <class T>
Var<T> fold_blocks(const Var<T>& blocks, int c, int h, int w, int k) {
  const auto& bv = blocks.value();
  detail::require(bv.rank() == 3 && h % k == 0 && w % k == 0 && bv.dim(1) == (h / k) * (w / k) &&
                      bv.dim(2) == c * k * k,
                  "fold_blocks: inconsistent shape " + shape_str(bv.shape()));
  const int n = bv.dim(0), gh = h / k, gw = w / k, d = c * k * k;
  std::vector<std::size_t> index(bv.size());
  for (int b = 0; b < n; ++b)
    for (int bi = 0; bi < gh; ++bi)
      for (int bj = 0; bj < gw; ++bj)
        for (int ch = 0; ch < c; ++ch)
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const std::size_t src =
                  ((static_cast<std::size_t>(b) * gh * gw + bi * gw + bj) * d) + (ch * k + ki) * k + kj;
              index[src] = ((static_cast<std::size_t>(b) * c + ch) * h + bi * k + ki) * w + bj * k + kj;
            }
  Tensor<T> y({n, c, h, w});
  for (std::size_t i = 0; i < index.size(); ++i) y[index[i]] = bv[i];
  return make_result<T>(std::move(y), {blocks}, [index = std::move(index)](Node<T>& nd) {
    auto& p = parent(nd, 0);
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    const auto& g = nd.grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) gp[i] += g[index[i]];
  });
}

// Spatial 3x3 smoothing of a stack of maps laid out as [N, gh*gw, Q]. Each
// output is the kernel-weighted mean of the in-bounds neighbours, so constant
// maps are preserved and simplex rows stay on the simplex for a nonnegative
// kernel.
template <class T>
Var<T> smooth_grid(const Var<T>& s, int gh, int gw, const Var<T>& kernel) {
  const auto& sv = s.value();
  detail::require(sv.rank() == 3 && sv.dim(1) == gh * gw, "smooth_grid: layout mismatch");
  detail::require(kernel.size() == 9, "smooth_grid: kernel must be 3x3");
  const int n = sv.dim(0), q = sv.dim(2);
  const auto& kv = kernel.value();
  std::vector<T> den(static_cast<std::size_t>(gh) * gw, T(0));
  for (int i = 0; i < gh; ++i)
    for (int j = 0; j < gw; ++j)
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj)
          if (i + di >= 0 && i + di < gh && j + dj >= 0 && j + dj < gw)
            den[i * gw + j] += kv[(di + 1) * 3 + dj + 1];
  Tensor<T> y(sv.shape());
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) {
        T* out = y.data() + (static_cast<std::size_t>(b) * gh * gw + i * gw + j) * q;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            if (i + di < 0 || i + di >= gh || j + dj < 0 || j + dj >= gw) continue;
            const T wgt = kv[(di + 1) * 3 + dj + 1] / den[i * gw + j];
            const T* in = sv.data() + (static_cast<std::size_t>(b) * gh * gw + (i + di) * gw + j + dj) * q;
            for (int t = 0; t < q; ++t) out[t] += wgt * in[t];
          }
      }
  return make_result<T>(y, {s, kernel}, [n, q, gh, gw, den, y](Node<T>& nd) {
    auto& ps = parent(nd, 0);
    auto& pk = parent(nd, 1);
    const auto& g = nd.grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < gh; ++i)
        for (int j = 0; j < gw; ++j) {
          const std::size_t at = (static_cast<std::size_t>(b) * gh * gw + i * gw + j) * q;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              if (i + di < 0 || i + di >= gh || j + dj < 0 || j + dj >= gw) continue;
              const int ko = (di + 1) * 3 + dj + 1;
              const std::size_t from = (static_cast<std::size_t>(b) * gh * gw + (i + di) * gw + j + dj) * q;
              const T inv = T(1) / den[i * gw + j];
              if (ps.requires_grad) {
                auto& gs = ps.grad_buffer();
                const T wgt = pk.value[ko] * inv;
                for (int t = 0; t < q; ++t) gs[from + t] += wgt * g[at + t];
              }
              if (pk.requires_grad) {
                T acc = T(0);
                for (int t = 0; t < q; ++t) acc += g[at + t] * (ps.value[from + t] - y[at + t]);
                pk.grad_buffer()[ko] += acc * inv;
              }
            }
        }
  });
}

}  // namespace fmrnet::ops
