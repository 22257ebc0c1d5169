#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "snic/tensor.hpp"

namespace snic {

enum class Pad { kSame, kValid };

namespace detail {

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

template <typename T>
inline T stable_sigmoid(T t) {
  if (t >= T(0)) {
    return T(1) / (T(1) + std::exp(-t));
  }
  T e = std::exp(t);
  return e / (T(1) + e);
}

struct ConvGeom {
  int64_t out_h = 0, out_w = 0;
  int64_t pad_top = 0, pad_left = 0;
};

inline ConvGeom conv_geom(int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, Pad pad) {
  ConvGeom g;
  if (pad == Pad::kValid) {
    check(h >= kh && w >= kw, "conv2d: valid padding needs input >= kernel, input " +
                                  std::to_string(h) + "x" + std::to_string(w) + " kernel " +
                                  std::to_string(kh) + "x" + std::to_string(kw));
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  } else {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    int64_t total_h = std::max<int64_t>((g.out_h - 1) * stride + kh - h, 0);
    int64_t total_w = std::max<int64_t>((g.out_w - 1) * stride + kw - w, 0);
    g.pad_top = total_h / 2;
    g.pad_left = total_w / 2;
  }
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g->record([a, b, out]() mutable {
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g->record([a, b, out]() mutable {
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g->record([a, b, out]() mutable {
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        const auto& bv2 = b.data();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        const auto& av2 = a.data();
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av2[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  if (wants_grad(g, a, b)) {
    out.set_requires_grad(true);
    g->record([a, b, out]() mutable {
      const auto& go = out.grad();
      const auto& av2 = a.data();
      const auto& bv2 = b.data();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bv2[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * av2[i] / (bv2[i] * bv2[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(Graph<T>* g, const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out]() mutable {
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul_scalar(Graph<T>* g, const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out, c]() mutable {
      const auto& go = out.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_op(Graph<T>* g, const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out]() mutable {
      const auto& go = out.grad();
      const auto& av2 = a.data();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / av2[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp_op(Graph<T>* g, const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out]() mutable {
      const auto& go = out.grad();
      const auto& oval = out.data();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * oval[i];
    });
  }
  return out;
}

// x^e for positive x. Callers clamp first when the base can touch zero.
template <typename T>
Tensor<T> pow_scalar(Graph<T>* g, const Tensor<T>& a, T e) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::pow(av[i], e);
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out, e]() mutable {
      const auto& go = out.grad();
      const auto& av2 = a.data();
      const auto& oval = out.data();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * e * oval[i] / av2[i];
    });
  }
  return out;
}

// max(x, floor); the gradient passes only where x is above the floor.
template <typename T>
Tensor<T> clamp_min(Graph<T>* g, const Tensor<T>& a, T floor_v) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > floor_v ? av[i] : floor_v;
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out, floor_v]() mutable {
      const auto& go = out.grad();
      const auto& av2 = a.data();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i)
        if (av2[i] > floor_v) ga[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(Graph<T>* g, const Tensor<T>& a, T slope) {
  Tensor<T> out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : slope * av[i];
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out, slope]() mutable {
      const auto& go = out.grad();
      const auto& av2 = a.data();
      auto& ga = a.grad();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (av2[i] > T(0) ? T(1) : slope);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>* g, const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out]() mutable {
      T go = out.grad()[0];
      auto& ga = a.grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(Graph<T>* g, const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  T inv = T(1) / static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  if (wants_grad(g, a)) {
    out.set_requires_grad(true);
    g->record([a, out, inv]() mutable {
      T go = out.grad()[0] * inv;
      auto& ga = a.grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// Cross-correlation, NCHW input, OIHW kernel. Differentiable in input,
// kernel and bias; the input gradient is the exact adjoint scatter.
template <typename T>
Tensor<T> conv2d(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int64_t stride, Pad pad) {
  check(input.shape().size() == 4, "conv2d: input must be NCHW, got " + shape_str(input.shape()));
  check(kernel.shape().size() == 4, "conv2d: kernel must be OIHW, got " + shape_str(kernel.shape()));
  check(stride >= 1, "conv2d: stride must be >= 1");
  const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t n_o = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  check(kc == n_c, "conv2d: kernel expects " + std::to_string(kc) + " input channels, input has " +
                       std::to_string(n_c));
  check(bias.defined() && bias.numel() == n_o,
        "conv2d: bias length must equal output channels (" + std::to_string(n_o) + ")");
  const auto geom = detail::conv_geom(h, w, kh, kw, stride, pad);
  const int64_t oh = geom.out_h, ow = geom.out_w, pt = geom.pad_top, pl = geom.pad_left;

  Tensor<T> out({n_n, n_o, oh, ow});
  const T* in = input.data().data();
  const T* kp = kernel.data().data();
  const T* bp = bias.data().data();
  T* op = out.data().data();
  for (int64_t n = 0; n < n_n; ++n) {
    for (int64_t o = 0; o < n_o; ++o) {
      T* obase = op + ((n * n_o + o) * oh) * ow;
      std::fill(obase, obase + oh * ow, bp[o]);
      for (int64_t c = 0; c < n_c; ++c) {
        const T* ibase = in + ((n * n_c + c) * h) * w;
        const T* kbase = kp + ((o * n_c + c) * kh) * kw;
        for (int64_t ky = 0; ky < kh; ++ky) {
          for (int64_t kx = 0; kx < kw; ++kx) {
            const T kv = kbase[ky * kw + kx];
            if (kv == T(0)) continue;
            for (int64_t oy = 0; oy < oh; ++oy) {
              const int64_t iy = oy * stride - pt + ky;
              if (iy < 0 || iy >= h) continue;
              const T* irow = ibase + iy * w;
              T* orow = obase + oy * ow;
              for (int64_t ox = 0; ox < ow; ++ox) {
                const int64_t ix = ox * stride - pl + kx;
                if (ix >= 0 && ix < w) orow[ox] += kv * irow[ix];
              }
            }
          }
        }
      }
    }
  }

  if (wants_grad(g, input, kernel, bias)) {
    out.set_requires_grad(true);
    g->record([input, kernel, bias, out, stride, pt, pl]() mutable {
      const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t n_o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      const auto& go = out.grad();
      if (bias.requires_grad()) {
        auto& gb = bias.grad();
        for (int64_t n = 0; n < n_n; ++n)
          for (int64_t o = 0; o < n_o; ++o) {
            const T* grow = go.data() + ((n * n_o + o) * oh) * ow;
            T acc = T(0);
            for (int64_t i = 0; i < oh * ow; ++i) acc += grow[i];
            gb[o] += acc;
          }
      }
      if (input.requires_grad()) {
        auto& gi = input.grad();
        const T* kp = kernel.data().data();
        for (int64_t n = 0; n < n_n; ++n)
          for (int64_t o = 0; o < n_o; ++o) {
            const T* gbase = go.data() + ((n * n_o + o) * oh) * ow;
            for (int64_t c = 0; c < n_c; ++c) {
              T* ibase = gi.data() + ((n * n_c + c) * h) * w;
              const T* kbase = kp + ((o * n_c + c) * kh) * kw;
              for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const T kv = kbase[ky * kw + kx];
                  if (kv == T(0)) continue;
                  for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy * stride - pt + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* irow = ibase + iy * w;
                    const T* grow = gbase + oy * ow;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                      const int64_t ix = ox * stride - pl + kx;
                      if (ix >= 0 && ix < w) irow[ix] += kv * grow[ox];
                    }
                  }
                }
            }
          }
      }
      if (kernel.requires_grad()) {
        auto& gk = kernel.grad();
        const T* in = input.data().data();
        for (int64_t n = 0; n < n_n; ++n)
          for (int64_t o = 0; o < n_o; ++o) {
            const T* gbase = go.data() + ((n * n_o + o) * oh) * ow;
            for (int64_t c = 0; c < n_c; ++c) {
              const T* ibase = in + ((n * n_c + c) * h) * w;
              T* kbase = gk.data() + ((o * n_c + c) * kh) * kw;
              for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                  T acc = T(0);
                  for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy * stride - pt + ky;
                    if (iy < 0 || iy >= h) continue;
                    const T* irow = ibase + iy * w;
                    const T* grow = gbase + oy * ow;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                      const int64_t ix = ox * stride - pl + kx;
                      if (ix >= 0 && ix < w) acc += irow[ix] * grow[ox];
                    }
                  }
                  kbase[ky * kw + kx] += acc;
                }
            }
          }
      }
    });
  }
  return out;
}

// Adjoint of conv2d under the same stride/padding. Kernel layout is
// [in_channels, out_channels, kh, kw] so that a conv with that kernel maps
// out_channels -> in_channels; this op runs the mapping the other way.
template <typename T>
Tensor<T> conv2d_transpose(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int64_t stride, Pad pad) {
  check(input.shape().size() == 4, "conv2d_transpose: input must be NCHW, got " + shape_str(input.shape()));
  check(kernel.shape().size() == 4, "conv2d_transpose: kernel must be 4-d, got " + shape_str(kernel.shape()));
  check(stride >= 1, "conv2d_transpose: stride must be >= 1");
  const int64_t n_n = input.dim(0), n_i = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int64_t ki = kernel.dim(0), n_c = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  check(ki == n_i, "conv2d_transpose: kernel expects " + std::to_string(ki) +
                       " input channels, input has " + std::to_string(n_i));
  check(bias.defined() && bias.numel() == n_c,
        "conv2d_transpose: bias length must equal output channels (" + std::to_string(n_c) + ")");
  int64_t oh, ow;
  if (pad == Pad::kSame) {
    oh = ih * stride;
    ow = iw * stride;
  } else {
    oh = (ih - 1) * stride + kh;
    ow = (iw - 1) * stride + kw;
  }
  const auto geom = detail::conv_geom(oh, ow, kh, kw, stride, pad);
  check(geom.out_h == ih && geom.out_w == iw,
        "conv2d_transpose: inconsistent geometry for input " + shape_str(input.shape()));
  const int64_t pt = geom.pad_top, pl = geom.pad_left;

  Tensor<T> out({n_n, n_c, oh, ow});
  const T* in = input.data().data();
  const T* kp = kernel.data().data();
  const T* bp = bias.data().data();
  T* op = out.data().data();
  for (int64_t n = 0; n < n_n; ++n)
    for (int64_t c = 0; c < n_c; ++c) {
      T* obase = op + ((n * n_c + c) * oh) * ow;
      std::fill(obase, obase + oh * ow, bp[c]);
    }
  for (int64_t n = 0; n < n_n; ++n)
    for (int64_t o = 0; o < n_i; ++o) {
      const T* ibase = in + ((n * n_i + o) * ih) * iw;
      for (int64_t c = 0; c < n_c; ++c) {
        T* obase = op + ((n * n_c + c) * oh) * ow;
        const T* kbase = kp + ((o * n_c + c) * kh) * kw;
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx) {
            const T kv = kbase[ky * kw + kx];
            if (kv == T(0)) continue;
            for (int64_t y = 0; y < ih; ++y) {
              const int64_t ty = y * stride - pt + ky;
              if (ty < 0 || ty >= oh) continue;
              const T* irow = ibase + y * iw;
              T* orow = obase + ty * ow;
              for (int64_t x = 0; x < iw; ++x) {
                const int64_t tx = x * stride - pl + kx;
                if (tx >= 0 && tx < ow) orow[tx] += kv * irow[x];
              }
            }
          }
      }
    }

  if (wants_grad(g, input, kernel, bias)) {
    out.set_requires_grad(true);
    g->record([input, kernel, bias, out, stride, pt, pl]() mutable {
      const int64_t n_n = input.dim(0), n_i = input.dim(1), ih = input.dim(2), iw = input.dim(3);
      const int64_t n_c = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      const auto& go = out.grad();
      if (bias.requires_grad()) {
        auto& gb = bias.grad();
        for (int64_t n = 0; n < n_n; ++n)
          for (int64_t c = 0; c < n_c; ++c) {
            const T* grow = go.data() + ((n * n_c + c) * oh) * ow;
            T acc = T(0);
            for (int64_t i = 0; i < oh * ow; ++i) acc += grow[i];
            gb[c] += acc;
          }
      }
      if (input.requires_grad()) {
        auto& gi = input.grad();
        const T* kp = kernel.data().data();
        for (int64_t n = 0; n < n_n; ++n)
          for (int64_t o = 0; o < n_i; ++o) {
            T* ibase = gi.data() + ((n * n_i + o) * ih) * iw;
            for (int64_t c = 0; c < n_c; ++c) {
              const T* gbase = go.data() + ((n * n_c + c) * oh) * ow;
              const T* kbase = kp + ((o * n_c + c) * kh) * kw;
              for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const T kv = kbase[ky * kw + kx];
                  if (kv == T(0)) continue;
                  for (int64_t y = 0; y < ih; ++y) {
                    const int64_t ty = y * stride - pt + ky;
                    if (ty < 0 || ty >= oh) continue;
                    T* irow = ibase + y * iw;
                    const T* grow = gbase + ty * ow;
                    for (int64_t x = 0; x < iw; ++x) {
                      const int64_t tx = x * stride - pl + kx;
                      if (tx >= 0 && tx < ow) irow[x] += kv * grow[tx];
                    }
                  }
                }
            }
          }
      }
      if (kernel.requires_grad()) {
        auto& gk = kernel.grad();
        const T* in = input.data().data();
        for (int64_t n = 0; n < n_n; ++n)
          for (int64_t o = 0; o < n_i; ++o) {
            const T* ibase = in + ((n * n_i + o) * ih) * iw;
            for (int64_t c = 0; c < n_c; ++c) {
              const T* gbase = go.data() + ((n * n_c + c) * oh) * ow;
              T* kbase = gk.data() + ((o * n_c + c) * kh) * kw;
              for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                  T acc = T(0);
                  for (int64_t y = 0; y < ih; ++y) {
                    const int64_t ty = y * stride - pt + ky;
                    if (ty < 0 || ty >= oh) continue;
                    const T* irow = ibase + y * iw;
                    const T* grow = gbase + ty * ow;
                    for (int64_t x = 0; x < iw; ++x) {
                      const int64_t tx = x * stride - pl + kx;
                      if (tx >= 0 && tx < ow) acc += irow[x] * grow[tx];
                    }
                  }
                  kbase[ky * kw + kx] += acc;
                }
            }
          }
      }
    });
  }
  return out;
}

// Same fixed 2-d window applied to every channel, valid padding, stride 1.
// The window is treated as a constant (only the input gets a gradient).
template <typename T>
Tensor<T> depthwise_conv2d_valid(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& window) {
  check(input.shape().size() == 4, "depthwise_conv2d: input must be NCHW");
  check(window.shape().size() == 2, "depthwise_conv2d: window must be 2-d");
  const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t kh = window.dim(0), kw = window.dim(1);
  check(h >= kh && w >= kw, "depthwise_conv2d: input " + std::to_string(h) + "x" + std::to_string(w) +
                                " smaller than window " + std::to_string(kh) + "x" + std::to_string(kw));
  const int64_t oh = h - kh + 1, ow = w - kw + 1;
  Tensor<T> out({n_n, n_c, oh, ow});
  const T* in = input.data().data();
  const T* wp = window.data().data();
  T* op = out.data().data();
  for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
    const T* ibase = in + nc * h * w;
    T* obase = op + nc * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        T acc = T(0);
        for (int64_t ky = 0; ky < kh; ++ky) {
          const T* irow = ibase + (oy + ky) * w + ox;
          const T* wrow = wp + ky * kw;
          for (int64_t kx = 0; kx < kw; ++kx) acc += irow[kx] * wrow[kx];
        }
        obase[oy * ow + ox] = acc;
      }
  }
  if (wants_grad(g, input)) {
    out.set_requires_grad(true);
    g->record([input, window, out]() mutable {
      const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t kh = window.dim(0), kw = window.dim(1);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      const auto& go = out.grad();
      auto& gi = input.grad();
      const T* wp = window.data().data();
      for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
        T* ibase = gi.data() + nc * h * w;
        const T* gbase = go.data() + nc * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            const T gv = gbase[oy * ow + ox];
            if (gv == T(0)) continue;
            for (int64_t ky = 0; ky < kh; ++ky) {
              T* irow = ibase + (oy + ky) * w + ox;
              const T* wrow = wp + ky * kw;
              for (int64_t kx = 0; kx < kw; ++kx) irow[kx] += gv * wrow[kx];
            }
          }
      }
    });
  }
  return out;
}

// 2x2 mean pooling with stride 2; trailing odd row/column is dropped.
template <typename T>
Tensor<T> avg_pool2(Graph<T>* g, const Tensor<T>& input) {
  check(input.shape().size() == 4, "avg_pool2: input must be NCHW");
  const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  check(h >= 2 && w >= 2, "avg_pool2: input too small");
  const int64_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n_n, n_c, oh, ow});
  const T* in = input.data().data();
  T* op = out.data().data();
  for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
    const T* ibase = in + nc * h * w;
    T* obase = op + nc * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        const T* p = ibase + (2 * oy) * w + 2 * ox;
        obase[oy * ow + ox] = (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
      }
  }
  if (wants_grad(g, input)) {
    out.set_requires_grad(true);
    g->record([input, out]() mutable {
      const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      const auto& go = out.grad();
      auto& gi = input.grad();
      for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
        T* ibase = gi.data() + nc * h * w;
        const T* gbase = go.data() + nc * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            const T gv = gbase[oy * ow + ox] * T(0.25);
            T* p = ibase + (2 * oy) * w + 2 * ox;
            p[0] += gv;
            p[1] += gv;
            p[w] += gv;
            p[w + 1] += gv;
          }
      }
    });
  }
  return out;
}

// Replicates the last row/column so H,W grow by pad_h/pad_w.
template <typename T>
Tensor<T> replicate_pad(Graph<T>* g, const Tensor<T>& input, int64_t pad_h, int64_t pad_w) {
  check(input.shape().size() == 4, "replicate_pad: input must be NCHW");
  check(pad_h >= 0 && pad_w >= 0, "replicate_pad: negative pad");
  if (pad_h == 0 && pad_w == 0) return input;
  const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t oh = h + pad_h, ow = w + pad_w;
  Tensor<T> out({n_n, n_c, oh, ow});
  const T* in = input.data().data();
  T* op = out.data().data();
  for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
    const T* ibase = in + nc * h * w;
    T* obase = op + nc * oh * ow;
    for (int64_t y = 0; y < oh; ++y) {
      const T* irow = ibase + std::min(y, h - 1) * w;
      T* orow = obase + y * ow;
      for (int64_t x = 0; x < ow; ++x) orow[x] = irow[std::min(x, w - 1)];
    }
  }
  if (wants_grad(g, input)) {
    out.set_requires_grad(true);
    g->record([input, out]() mutable {
      const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      const auto& go = out.grad();
      auto& gi = input.grad();
      for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
        T* ibase = gi.data() + nc * h * w;
        const T* gbase = go.data() + nc * oh * ow;
        for (int64_t y = 0; y < oh; ++y) {
          T* irow = ibase + std::min(y, h - 1) * w;
          const T* grow = gbase + y * ow;
          for (int64_t x = 0; x < ow; ++x) irow[std::min(x, w - 1)] += grow[x];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> crop(Graph<T>* g, const Tensor<T>& input, int64_t y0, int64_t x0, int64_t h, int64_t w) {
  check(input.shape().size() == 4, "crop: input must be NCHW");
  const int64_t n_n = input.dim(0), n_c = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  check(y0 >= 0 && x0 >= 0 && y0 + h <= ih && x0 + w <= iw,
        "crop: region out of bounds for input " + shape_str(input.shape()));
  if (y0 == 0 && x0 == 0 && h == ih && w == iw) return input;
  Tensor<T> out({n_n, n_c, h, w});
  const T* in = input.data().data();
  T* op = out.data().data();
  for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
    const T* ibase = in + nc * ih * iw;
    T* obase = op + nc * h * w;
    for (int64_t y = 0; y < h; ++y)
      std::copy(ibase + (y0 + y) * iw + x0, ibase + (y0 + y) * iw + x0 + w, obase + y * w);
  }
  if (wants_grad(g, input)) {
    out.set_requires_grad(true);
    g->record([input, out, y0, x0]() mutable {
      const int64_t n_n = input.dim(0), n_c = input.dim(1), ih = input.dim(2), iw = input.dim(3);
      const int64_t h = out.dim(2), w = out.dim(3);
      const auto& go = out.grad();
      auto& gi = input.grad();
      for (int64_t nc = 0; nc < n_n * n_c; ++nc) {
        T* ibase = gi.data() + nc * ih * iw;
        const T* gbase = go.data() + nc * h * w;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) ibase[(y0 + y) * iw + x0 + x] += gbase[y * w + x];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generalized divisive normalization
// ---------------------------------------------------------------------------

// y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), channels coupled per pixel.
// The inverse flag multiplies by the norm instead of dividing.
template <typename T>
Tensor<T> gdn(Graph<T>* g, const Tensor<T>& input, const Tensor<T>& beta, const Tensor<T>& gamma,
              bool inverse) {
  check(input.shape().size() == 4, "gdn: input must be NCHW");
  const int64_t n_n = input.dim(0), n_c = input.dim(1), h = input.dim(2), w = input.dim(3);
  check(beta.numel() == n_c, "gdn: beta must have one entry per channel");
  check(gamma.shape().size() == 2 && gamma.dim(0) == n_c && gamma.dim(1) == n_c,
        "gdn: gamma must be [C,C]");
  for (T b : beta.data())
    check(b > T(0), "gdn: beta must be strictly positive");
  for (T v : gamma.data())
    check(v >= T(0), "gdn: gamma must be non-negative");

  const int64_t sp = h * w;
  Tensor<T> out(input.shape());
  // rnorm holds z^{-1/2} per (n, c, pixel); saved for the backward pass.
  auto rnorm = std::make_shared<std::vector<T>>(static_cast<size_t>(n_n * n_c * sp));
  {
    const T* in = input.data().data();
    const T* bp = beta.data().data();
    const T* gp = gamma.data().data();
    T* op = out.data().data();
    T* rp = rnorm->data();
    std::vector<T> sq(static_cast<size_t>(n_c));
    for (int64_t n = 0; n < n_n; ++n) {
      const T* nbase = in + n * n_c * sp;
      for (int64_t p = 0; p < sp; ++p) {
        for (int64_t c = 0; c < n_c; ++c) {
          const T v = nbase[c * sp + p];
          sq[static_cast<size_t>(c)] = v * v;
        }
        for (int64_t i = 0; i < n_c; ++i) {
          T z = bp[i];
          const T* grow = gp + i * n_c;
          for (int64_t j = 0; j < n_c; ++j) z += grow[j] * sq[static_cast<size_t>(j)];
          const T r = T(1) / std::sqrt(z);
          const int64_t idx = (n * n_c + i) * sp + p;
          rp[idx] = r;
          op[idx] = inverse ? in[idx] / r : in[idx] * r;
        }
      }
    }
  }

  if (wants_grad(g, input, beta, gamma)) {
    out.set_requires_grad(true);
    g->record([input, beta, gamma, out, rnorm, inverse]() mutable {
      const int64_t n_n = input.dim(0), n_c = input.dim(1), sp = input.dim(2) * input.dim(3);
      const auto& go = out.grad();
      const T* in = input.data().data();
      const T* gp = gamma.data().data();
      const T* rp = rnorm->data();
      T* gi = input.requires_grad() ? input.grad().data() : nullptr;
      T* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
      T* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
      std::vector<T> xv(static_cast<size_t>(n_c)), dv(static_cast<size_t>(n_c)),
          rv(static_cast<size_t>(n_c)), zfac(static_cast<size_t>(n_c));
      for (int64_t n = 0; n < n_n; ++n) {
        for (int64_t p = 0; p < sp; ++p) {
          for (int64_t c = 0; c < n_c; ++c) {
            const int64_t idx = (n * n_c + c) * sp + p;
            xv[static_cast<size_t>(c)] = in[idx];
            dv[static_cast<size_t>(c)] = go[idx];
            rv[static_cast<size_t>(c)] = rp[idx];
          }
          // zfac_i = dL/dz_i: derivative through the shared norm term.
          for (int64_t i = 0; i < n_c; ++i) {
            const T r = rv[static_cast<size_t>(i)];
            const T x = xv[static_cast<size_t>(i)];
            const T d = dv[static_cast<size_t>(i)];
            zfac[static_cast<size_t>(i)] =
                inverse ? d * x * T(0.5) * r : -d * x * T(0.5) * r * r * r;
          }
          for (int64_t i = 0; i < n_c; ++i) {
            if (gb) gb[i] += zfac[static_cast<size_t>(i)];
            if (gg) {
              T* grow = gg + i * n_c;
              const T zf = zfac[static_cast<size_t>(i)];
              for (int64_t j = 0; j < n_c; ++j)
                grow[j] += zf * xv[static_cast<size_t>(j)] * xv[static_cast<size_t>(j)];
            }
          }
          if (gi) {
            for (int64_t k = 0; k < n_c; ++k) {
              const T rk = rv[static_cast<size_t>(k)];
              T acc = dv[static_cast<size_t>(k)] * (inverse ? T(1) / rk : rk);
              const T xk = xv[static_cast<size_t>(k)];
              for (int64_t i = 0; i < n_c; ++i)
                acc += zfac[static_cast<size_t>(i)] * T(2) * gp[i * n_c + k] * xk;
              gi[(n * n_c + k) * sp + p] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discretized logistic likelihood
// ---------------------------------------------------------------------------

// P(v) = sigmoid((v + 0.5 - mu_c) / s_c) - sigmoid((v - 0.5 - mu_c) / s_c)
// for values [N,C,h,w] with per-channel mu and scale. Unfloored; callers
// apply clamp_min for the rate path. Differentiable in all three arguments.
template <typename T>
Tensor<T> discretized_logistic_likelihood(Graph<T>* g, const Tensor<T>& values,
                                          const Tensor<T>& mu, const Tensor<T>& scale) {
  check(values.shape().size() == 4, "likelihood: values must be NCHW");
  const int64_t n_n = values.dim(0), n_c = values.dim(1), sp = values.dim(2) * values.dim(3);
  check(mu.numel() == n_c && scale.numel() == n_c,
        "likelihood: mu/scale must have one entry per channel");
  for (T s : scale.data())
    check(s > T(0), "likelihood: scale must be strictly positive");

  Tensor<T> out(values.shape());
  auto sa = std::make_shared<std::vector<T>>(values.data().size());
  auto sb = std::make_shared<std::vector<T>>(values.data().size());
  {
    const T* vp = values.data().data();
    const T* mp = mu.data().data();
    const T* spar = scale.data().data();
    T* op = out.data().data();
    for (int64_t n = 0; n < n_n; ++n)
      for (int64_t c = 0; c < n_c; ++c) {
        const T m = mp[c], s = spar[c];
        const int64_t base = (n * n_c + c) * sp;
        for (int64_t p = 0; p < sp; ++p) {
          const T v = vp[base + p];
          const T a = (v + T(0.5) - m) / s;
          const T b = (v - T(0.5) - m) / s;
          const T pa = detail::stable_sigmoid(a);
          const T pb = detail::stable_sigmoid(b);
          (*sa)[static_cast<size_t>(base + p)] = pa;
          (*sb)[static_cast<size_t>(base + p)] = pb;
          op[base + p] = pa - pb;
        }
      }
  }

  if (wants_grad(g, values, mu, scale)) {
    out.set_requires_grad(true);
    g->record([values, mu, scale, out, sa, sb]() mutable {
      const int64_t n_n = values.dim(0), n_c = values.dim(1), sp = values.dim(2) * values.dim(3);
      const auto& go = out.grad();
      const T* vp = values.data().data();
      const T* mp = mu.data().data();
      const T* spar = scale.data().data();
      T* gv = values.requires_grad() ? values.grad().data() : nullptr;
      T* gm = mu.requires_grad() ? mu.grad().data() : nullptr;
      T* gs = scale.requires_grad() ? scale.grad().data() : nullptr;
      for (int64_t n = 0; n < n_n; ++n)
        for (int64_t c = 0; c < n_c; ++c) {
          const T m = mp[c], s = spar[c];
          const int64_t base = (n * n_c + c) * sp;
          T acc_m = T(0), acc_s = T(0);
          for (int64_t p = 0; p < sp; ++p) {
            const int64_t idx = base + p;
            const T d = go[idx];
            if (d == T(0)) continue;
            const T v = vp[idx];
            const T a = (v + T(0.5) - m) / s;
            const T b = (v - T(0.5) - m) / s;
            const T ua = (*sa)[static_cast<size_t>(idx)] * (T(1) - (*sa)[static_cast<size_t>(idx)]);
            const T ub = (*sb)[static_cast<size_t>(idx)] * (T(1) - (*sb)[static_cast<size_t>(idx)]);
            const T dpdv = (ua - ub) / s;
            if (gv) gv[idx] += d * dpdv;
            acc_m -= d * dpdv;
            acc_s -= d * (ua * a - ub * b) / s;
          }
          if (gm) gm[c] += acc_m;
          if (gs) gs[c] += acc_s;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projection helpers (outside the differentiation graph)
// ---------------------------------------------------------------------------

template <typename T>
void clamp01_inplace(Tensor<T>& t) {
  for (T& v : t.data()) v = std::min(std::max(v, T(0)), T(1));
}

template <typename T>
Tensor<T> clamp01(const Tensor<T>& t) {
  Tensor<T> out = t.clone();
  clamp01_inplace(out);
  return out;
}

}  // namespace snic
