#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vcas/errors.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

namespace detail {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw InvalidArgument(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                          ", got shape " + t.shape().str());
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

// Splits a shape around `axis` into (outer, axis length, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
  if (axis >= s.rank()) throw InvalidArgument("axis " + std::to_string(axis) + " out of range for " + s.str());
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (grad_enabled({&a, &b})) {
    record_op(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (grad_enabled({&a, &b})) {
    record_op(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * s;
  if (grad_enabled({&a})) {
    record_op(out, [a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (auto v : a.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (grad_enabled({&a})) {
    record_op(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      T g = out.grad()[0];
      for (auto& v : a.grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Concatenates two NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 4, "concat_channels", "a");
  detail::require_rank(b, 4, "concat_channels", "b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw InvalidArgument("concat_channels: batch/spatial mismatch " + a.shape().str() + " vs " + b.shape().str());
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw, out.data() + i * (ca + cb) * hw + ca * hw);
  }
  if (grad_enabled({&a, &b})) {
    record_op(out, [a, b, out, n, ca, cb, hw]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = g.data() + i * (ca + cb) * hw;
        if (a.requires_grad()) {
          T* ga = a.grad().data() + i * ca * hw;
          for (std::size_t j = 0; j < ca * hw; ++j) ga[j] += src[j];
        }
        if (b.requires_grad()) {
          T* gb = b.grad().data() + i * cb * hw;
          for (std::size_t j = 0; j < cb * hw; ++j) gb[j] += src[ca * hw + j];
        }
      }
    });
  }
  return out;
}

// N×C×H×W -> N×C spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    out[i] = acc / static_cast<T>(hw);
  }
  if (grad_enabled({&x})) {
    record_op(out, [x, out, nc, hw]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < nc; ++i) {
        T v = g[i] / static_cast<T>(hw);
        for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += v;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

// col[k, p] for one image; k = (c*kh + i)*kw + j.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        const T* plane = x + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = plane + iy * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.p();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        T* plane = dx + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = plane + iy * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation of an NCHW input with an OIHW weight plus per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  detail::require_rank(bias, 1, "conv2d", "bias");
  if (stride < 1) throw InvalidArgument("conv2d: stride must be positive");
  if (padding < 0) throw InvalidArgument("conv2d: padding must be non-negative");
  if (weight.dim(1) != x.dim(1))
    throw InvalidArgument("conv2d: input channels (dim 1) " + std::to_string(x.dim(1)) +
                          " != weight in-channels (dim 1) " + std::to_string(weight.dim(1)));
  if (bias.dim(0) != weight.dim(0))
    throw InvalidArgument("conv2d: bias length (dim 0) " + std::to_string(bias.dim(0)) +
                          " != weight out-channels (dim 0) " + std::to_string(weight.dim(0)));
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
                         static_cast<std::size_t>(stride), static_cast<std::size_t>(padding), 0, 0};
  if (g.kh > g.h + 2 * g.pad)
    throw InvalidArgument("conv2d: kernel height (dim 2) exceeds padded input height");
  if (g.kw > g.w + 2 * g.pad)
    throw InvalidArgument("conv2d: kernel width (dim 3) exceeds padded input width");
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t K = g.k(), P = g.p();
  const bool track = grad_enabled({&x, &weight, &bias});
  std::vector<T> cols(track ? g.n * K * P : K * P);
  Tensor<T> out(Shape{g.n, g.o, g.oh, g.ow});
  const T* w = weight.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    T* col = cols.data() + (track ? n * K * P : 0);
    detail::im2col(x.data() + n * g.c * g.h * g.w, g, col);
    T* y = out.data() + n * g.o * P;
    for (std::size_t o = 0; o < g.o; ++o) {
      T* yo = y + o * P;
      std::fill_n(yo, P, bias[o]);
      const T* wo = w + o * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T wk = wo[k];
        const T* ck = col + k * P;
        for (std::size_t p = 0; p < P; ++p) yo[p] += wk * ck[p];
      }
    }
  }

  if (track) {
    record_op(out, [x, weight, bias, out, g, cols = std::move(cols)]() mutable {
      if (!out.has_grad()) return;
      const std::size_t K = g.k(), P = g.p();
      auto gy_all = out.grad();
      std::vector<T> colT(P * K), dcol(K * P), dx(g.c * g.h * g.w);
      for (std::size_t n = 0; n < g.n; ++n) {
        const T* gy = gy_all.data() + n * g.o * P;
        const T* col = cols.data() + n * K * P;
        if (bias.requires_grad()) {
          auto gb = bias.grad();
          for (std::size_t o = 0; o < g.o; ++o) {
            T acc = 0;
            for (std::size_t p = 0; p < P; ++p) acc += gy[o * P + p];
            gb[o] += acc;
          }
        }
        if (weight.requires_grad()) {
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t p = 0; p < P; ++p) colT[p * K + k] = col[k * P + p];
          T* gw = weight.grad().data();
          for (std::size_t o = 0; o < g.o; ++o) {
            T* gwo = gw + o * K;
            for (std::size_t p = 0; p < P; ++p) {
              const T v = gy[o * P + p];
              if (v == T(0)) continue;
              const T* cp = colT.data() + p * K;
              for (std::size_t k = 0; k < K; ++k) gwo[k] += v * cp[k];
            }
          }
        }
        if (x.requires_grad()) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          const T* w = weight.data();
          for (std::size_t o = 0; o < g.o; ++o) {
            const T* gyo = gy + o * P;
            for (std::size_t k = 0; k < K; ++k) {
              const T wk = w[o * K + k];
              T* dk = dcol.data() + k * P;
              for (std::size_t p = 0; p < P; ++p) dk[p] += wk * gyo[p];
            }
          }
          // Gather into a scratch image first so each input element receives a
          // single addition per op.
          std::fill(dx.begin(), dx.end(), T(0));
          detail::col2im_add(dcol.data(), g, dx.data());
          T* gx = x.grad().data() + n * g.c * g.h * g.w;
          for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations and normalization
// ---------------------------------------------------------------------------

// max(0, x); the subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (grad_enabled({&x})) {
    record_op(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require_rank(x, 4, "group_norm", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups < 1 || c % static_cast<std::size_t>(groups) != 0)
    throw InvalidArgument("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                          std::to_string(groups));
  if (gamma.numel() != c || beta.numel() != c)
    throw InvalidArgument("group_norm: gamma/beta must have " + std::to_string(c) + " entries");
  const std::size_t G = static_cast<std::size_t>(groups), cg = c / G, m = cg * hw;

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(n * G);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < G; ++gi) {
      const std::size_t base = (b * c + gi * cg) * hw;
      T mu = 0;
      for (std::size_t i = 0; i < m; ++i) mu += x[base + i];
      mu /= static_cast<T>(m);
      T var = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const T d = x[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(m);
      const T inv = T(1) / std::sqrt(var + eps);
      inv_std[b * G + gi] = inv;
      for (std::size_t ch = 0; ch < cg; ++ch) {
        const std::size_t cc = gi * cg + ch;
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t idx = base + ch * hw + i;
          xhat[idx] = (x[idx] - mu) * inv;
          out[idx] = gamma[cc] * xhat[idx] + beta[cc];
        }
      }
    }

  if (grad_enabled({&x, &gamma, &beta})) {
    record_op(out, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, G, cg,
                    m]() mutable {
      if (!out.has_grad()) return;
      auto gy = out.grad();
      if (gamma.requires_grad() || beta.requires_grad()) {
        auto gg = gamma.grad();
        auto gb = beta.grad();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t cc = 0; cc < c; ++cc) {
            T sg = 0, sb = 0;
            const std::size_t base = (b * c + cc) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sg += gy[base + i] * xhat[base + i];
              sb += gy[base + i];
            }
            if (gamma.requires_grad()) gg[cc] += sg;
            if (beta.requires_grad()) gb[cc] += sb;
          }
      }
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t gi = 0; gi < G; ++gi) {
          const std::size_t base = (b * c + gi * cg) * hw;
          T mean_d = 0, mean_dx = 0;
          for (std::size_t ch = 0; ch < cg; ++ch) {
            const T gm = gamma[gi * cg + ch];
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = base + ch * hw + i;
              const T d = gy[idx] * gm;
              mean_d += d;
              mean_dx += d * xhat[idx];
            }
          }
          mean_d /= static_cast<T>(m);
          mean_dx /= static_cast<T>(m);
          const T inv = inv_std[b * G + gi];
          for (std::size_t ch = 0; ch < cg; ++ch) {
            const T gm = gamma[gi * cg + ch];
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = base + ch * hw + i;
              gx[idx] += inv * (gy[idx] * gm - mean_d - xhat[idx] * mean_dx);
            }
          }
        }
    });
  }
  return out;
}

// Numerically stable softmax along `axis` (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  if (grad_enabled({&x})) {
    record_op(out, [x, out, outer, len, inner]() mutable {
      if (!out.has_grad()) return;
      auto gy = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t k = 0; k < len; ++k) dot += gy[base + k * inner] * out[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += out[i] * (gy[i] - dot);
          }
        }
    });
  }
  return out;
}

// Divides by the L2 norm along `axis`; norms below eps divide by eps instead.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = T(1e-12)) {
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  Tensor<T> out(x.shape());
  std::vector<T> denom(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T ss = 0;
      for (std::size_t k = 0; k < len; ++k) ss += x[base + k * inner] * x[base + k * inner];
      const T d = std::max(std::sqrt(ss), eps);
      denom[o * inner + in] = d;
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = x[base + k * inner] / d;
    }
  if (grad_enabled({&x})) {
    record_op(out, [x, out, denom = std::move(denom), outer, len, inner, eps]() mutable {
      if (!out.has_grad()) return;
      auto gy = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          const T d = denom[o * inner + in];
          if (d > eps) {
            T dot = 0;
            for (std::size_t k = 0; k < len; ++k) dot += gy[base + k * inner] * out[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t i = base + k * inner;
              gx[i] += (gy[i] - out[i] * dot) / d;
            }
          } else {
            for (std::size_t k = 0; k < len; ++k) gx[base + k * inner] += gy[base + k * inner] / d;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and sampling
// ---------------------------------------------------------------------------

struct PoolWindow {
  std::size_t kernel_h, kernel_w, stride_h, stride_w;
};

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, PoolWindow win) {
  detail::require_rank(x, 4, "avg_pool2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (win.kernel_h < 1 || win.kernel_w < 1 || win.stride_h < 1 || win.stride_w < 1)
    throw InvalidArgument("avg_pool2d: kernel and stride must be positive");
  if (win.kernel_h > h || win.kernel_w > w)
    throw InvalidArgument("avg_pool2d: kernel " + std::to_string(win.kernel_h) + "x" + std::to_string(win.kernel_w) +
                          " exceeds spatial dims " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t oh = (h - win.kernel_h) / win.stride_h + 1;
  const std::size_t ow = (w - win.kernel_w) / win.stride_w + 1;
  const T area = static_cast<T>(win.kernel_h * win.kernel_w);
  Tensor<T> out(Shape{n, c, oh, ow});
  for (std::size_t pc = 0; pc < n * c; ++pc) {
    const T* src = x.data() + pc * h * w;
    T* dst = out.data() + pc * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (std::size_t i = 0; i < win.kernel_h; ++i)
          for (std::size_t j = 0; j < win.kernel_w; ++j)
            acc += src[(oy * win.stride_h + i) * w + ox * win.stride_w + j];
        dst[oy * ow + ox] = acc / area;
      }
  }
  if (grad_enabled({&x})) {
    record_op(out, [x, out, win, n, c, h, w, oh, ow, area]() mutable {
      if (!out.has_grad()) return;
      auto gy = out.grad();
      auto gx = x.grad();
      for (std::size_t pc = 0; pc < n * c; ++pc)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T v = gy[pc * oh * ow + oy * ow + ox] / area;
            for (std::size_t i = 0; i < win.kernel_h; ++i)
              for (std::size_t j = 0; j < win.kernel_w; ++j)
                gx[pc * h * w + (oy * win.stride_h + i) * w + ox * win.stride_w + j] += v;
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride) {
  if (kernel < 1 || stride < 1) throw InvalidArgument("avg_pool2d: kernel and stride must be positive");
  const auto k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
  return avg_pool2d(x, PoolWindow{k, k, s, s});
}

template <typename T>
struct Sampled {
  Tensor<T> output;
  Mask valid;  // N×1×H×W, 1 where the coordinate was inside the frame
};

// Bilinear sampling of `x` (N×C×H×W) at absolute pixel coordinates
// `coords` (N×2×Ho×Wo; channel 0 = column x, channel 1 = row y).
// Out-of-frame coordinates are clamped to the border and flagged invalid.
// Differentiable with respect to `x` only.
template <typename T>
Sampled<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& coords) {
  detail::require_rank(x, 4, "bilinear_sample", "input");
  detail::require_rank(coords, 4, "bilinear_sample", "coords");
  if (coords.dim(0) != x.dim(0) || coords.dim(1) != 2)
    throw InvalidArgument("bilinear_sample: coords must be N×2×H×W, got " + coords.shape().str());
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = coords.dim(2), ow = coords.dim(3), op = oh * ow;

  struct Tap {
    std::size_t i00, i01, i10, i11;
    T w00, w01, w10, w11;
  };
  std::vector<Tap> taps(n * op);
  Sampled<T> res{Tensor<T>(Shape{n, c, oh, ow}), Mask(Shape{n, 1, oh, ow})};
  const T xmax = static_cast<T>(w - 1), ymax = static_cast<T>(h - 1);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < op; ++p) {
      T cx = coords[(b * 2) * op + p];
      T cy = coords[(b * 2 + 1) * op + p];
      const bool inside = cx >= T(0) && cx <= xmax && cy >= T(0) && cy <= ymax;
      res.valid[b * op + p] = inside ? 1 : 0;
      cx = std::clamp(cx, T(0), xmax);
      cy = std::clamp(cy, T(0), ymax);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(cx));
      const std::size_t y0 = static_cast<std::size_t>(std::floor(cy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const T fx = cx - static_cast<T>(x0), fy = cy - static_cast<T>(y0);
      taps[b * op + p] = Tap{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1,
                             (T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
    }
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = x.data() + (b * c + ch) * h * w;
      T* dst = res.output.data() + (b * c + ch) * op;
      for (std::size_t p = 0; p < op; ++p) {
        const Tap& t = taps[b * op + p];
        dst[p] = t.w00 * src[t.i00] + t.w01 * src[t.i01] + t.w10 * src[t.i10] + t.w11 * src[t.i11];
      }
    }
  if (grad_enabled({&x})) {
    Tensor<T> out = res.output;
    record_op(out, [x, out, taps = std::move(taps), n, c, h, w, op]() mutable {
      if (!out.has_grad()) return;
      auto gy = out.grad();
      auto gx = x.grad();
      std::vector<T> dst(h * w);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::fill(dst.begin(), dst.end(), T(0));
          const T* g = gy.data() + (b * c + ch) * op;
          for (std::size_t p = 0; p < op; ++p) {
            const Tap& t = taps[b * op + p];
            dst[t.i00] += t.w00 * g[p];
            dst[t.i01] += t.w01 * g[p];
            dst[t.i10] += t.w10 * g[p];
            dst[t.i11] += t.w11 * g[p];
          }
          T* out_grad = gx.data() + (b * c + ch) * h * w;
          for (std::size_t i = 0; i < h * w; ++i) out_grad[i] += dst[i];
        }
    });
  }
  return res;
}

}  // namespace vcas
