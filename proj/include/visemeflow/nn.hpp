// Copyright 2026 The VisemeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Layer primitives with hand-written backward passes: convolution (and its
// transpose), max pooling, dense, activations, the LSTM cell, losses, and the
// finite-difference gradient checker used to verify all of them.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "visemeflow/tensor.hpp"

namespace visemeflow {

template <Scalar T>
using ParamSet = std::map<std::string, Tensor<T>>;

/// Uniform on the open interval (-L, L), L = sqrt(6 / (fan_in + fan_out)).
template <Scalar T>
Tensor<T> xavier_init(std::size_t fan_in, std::size_t fan_out, Shape shape,
                      std::uint64_t seed) {
  if (fan_in == 0 || fan_out == 0) throw ConfigError("xavier_init: zero fan");
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    const double u = (static_cast<double>(rng.bits() >> 11) + 0.5) * 0x1.0p-53;
    v = static_cast<T>(limit * (2.0 * u - 1.0));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Activations

template <Scalar T>
T sigmoid(T v) {
  // Split on sign so exp never overflows.
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <Scalar T>
Tensor<T> relu(const Tensor<T>& x) {
  return map(x, [](T v) { return v > T(0) ? v : T(0); });
}

/// Gradient of relu given its output (or input; the sign test is the same).
template <Scalar T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& out) {
  return zip_map(grad_out, out, [](T g, T y) { return y > T(0) ? g : T(0); });
}

template <Scalar T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map(x, [](T v) { return sigmoid(v); });
}

template <Scalar T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& out) {
  return zip_map(grad_out, out, [](T g, T y) { return g * y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding), NCHW.

struct ConvGeometry {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::size_t o = 0, kh = 0, kw = 0;
  std::size_t stride = 1, pad = 0;
  std::size_t oh = 0, ow = 0;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_pixels() const { return oh * ow; }
};

inline std::size_t conv_out_dim(std::size_t in, std::size_t k,
                                std::size_t stride, std::size_t pad,
                                const char* axis) {
  if (stride == 0) throw ShapeError("conv stride must be >= 1");
  if (k > in + 2 * pad) {
    throw ShapeError(std::string("kernel larger than padded input along ") +
                     axis);
  }
  if ((in + 2 * pad - k) % stride != 0) {
    throw ShapeError(std::string("non-integral conv output size along ") +
                     axis + ": (" + std::to_string(in) + "+2*" +
                     std::to_string(pad) + "-" + std::to_string(k) + ")/" +
                     std::to_string(stride));
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

template <Scalar T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t oh, std::size_t ow, T* cols) {
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                         static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * ow;
          if (y < 0 || y >= ih) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = x + (ch * h + static_cast<std::size_t>(y)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (xx < 0 || xx >= iw) ? T(0) : src[xx];
          }
        }
      }
    }
  }
}

// Adds column contributions back into an image buffer (adjoint of im2col).
template <Scalar T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t oh, std::size_t ow, T* x) {
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                         static_cast<std::ptrdiff_t>(pad);
          if (y < 0 || y >= ih) continue;
          T* dst = x + (ch * h + static_cast<std::size_t>(y)) * w;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            if (xx >= 0 && xx < iw) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <Scalar T>
struct Conv2dCache {
  ConvGeometry geom;
  Tensor<T> weight;
  std::vector<T> cols;  // N blocks of [C*kh*kw, oh*ow]
};

template <Scalar T>
struct Conv2dGrads {
  Tensor<T> x, w, b;
};

template <Scalar T>
ConvGeometry conv2d_geometry(const Tensor<T>& x, const Tensor<T>& w,
                             const Tensor<T>& b, std::size_t stride,
                             std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
    throw ShapeError("conv2d expects x [N,C,H,W], w [O,C,kh,kw], b [O]; got " +
                     x.shape().str() + ", " + w.shape().str() + ", " +
                     b.shape().str());
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + x.shape().str() +
                     " vs kernel " + w.shape().str());
  }
  if (b.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d bias " + b.shape().str() + " does not match " +
                     w.shape().str());
  }
  ConvGeometry g;
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.oh = conv_out_dim(g.h, g.kh, stride, pad, "height");
  g.ow = conv_out_dim(g.w, g.kw, stride, pad, "width");
  return g;
}

namespace detail {

template <Scalar T>
Tensor<T> conv2d_apply(const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& b, const ConvGeometry& g,
                       std::vector<T>* keep_cols) {
  Tensor<T> y(Shape{g.n, g.o, g.oh, g.ow});
  const std::size_t patch = g.patch();
  const std::size_t pix = g.out_pixels();
  if (keep_cols) keep_cols->assign(g.n * patch * pix, T(0));
  auto one = [&](std::size_t n, T* cols) {
    im2col(x.ptr() + n * g.c * g.h * g.w, g.c, g.h, g.w, g.kh, g.kw, g.stride,
           g.pad, g.oh, g.ow, cols);
    T* yn = y.ptr() + n * g.o * pix;
    for (std::size_t o = 0; o < g.o; ++o) {
      std::fill(yn + o * pix, yn + (o + 1) * pix, b[o]);
    }
    gemm(false, false, g.o, pix, patch, w.ptr(), cols, yn, true);
  };
  if (keep_cols) {
    for (std::size_t n = 0; n < g.n; ++n) {
      one(n, keep_cols->data() + n * patch * pix);
    }
  } else {
    parallel_for(g.n, [&](std::size_t n) {
      std::vector<T> cols(patch * pix);
      one(n, cols.data());
    });
  }
  return y;
}

}  // namespace detail

template <Scalar T>
std::pair<Tensor<T>, Conv2dCache<T>> conv2d_forward(const Tensor<T>& x,
                                                    const Tensor<T>& w,
                                                    const Tensor<T>& b,
                                                    std::size_t stride,
                                                    std::size_t pad) {
  Conv2dCache<T> cache;
  cache.geom = conv2d_geometry(x, w, b, stride, pad);
  cache.weight = w;
  auto y = detail::conv2d_apply(x, w, b, cache.geom, &cache.cols);
  return {std::move(y), std::move(cache)};
}

/// Forward pass without a cache, for inference.
template <Scalar T>
Tensor<T> conv2d_infer(const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& b, std::size_t stride,
                       std::size_t pad) {
  const auto g = conv2d_geometry(x, w, b, stride, pad);
  return detail::conv2d_apply<T>(x, w, b, g, nullptr);
}

template <Scalar T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out,
                               const Conv2dCache<T>& cache) {
  const auto& g = cache.geom;
  if (grad_out.shape() != Shape{g.n, g.o, g.oh, g.ow}) {
    throw ShapeError("conv2d_backward: grad_out " + grad_out.shape().str() +
                     " does not match cached output shape " +
                     Shape{g.n, g.o, g.oh, g.ow}.str());
  }
  const std::size_t patch = g.patch();
  const std::size_t pix = g.out_pixels();
  if (cache.cols.size() != g.n * patch * pix) {
    throw ShapeError("conv2d_backward: cache holds no columns");
  }
  Conv2dGrads<T> out{Tensor<T>(Shape{g.n, g.c, g.h, g.w}),
                     Tensor<T>(cache.weight.shape()), Tensor<T>(Shape{g.o})};
  std::vector<T> dcols(patch * pix);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* gy = grad_out.ptr() + n * g.o * pix;
    const T* cols = cache.cols.data() + n * patch * pix;
    detail::gemm(false, true, g.o, patch, pix, gy, cols, out.w.ptr(), true);
    for (std::size_t o = 0; o < g.o; ++o) {
      T acc = T(0);
      for (std::size_t p = 0; p < pix; ++p) acc += gy[o * pix + p];
      out.b[o] += acc;
    }
    detail::gemm(true, false, patch, pix, g.o, cache.weight.ptr(), gy,
                 dcols.data(), false);
    detail::col2im(dcols.data(), g.c, g.h, g.w, g.kh, g.kw, g.stride, g.pad,
                   g.oh, g.ow, out.x.ptr() + n * g.c * g.h * g.w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transposed convolution: the adjoint of conv2d with respect to its input.
// Weight layout [C_in, C_out, kh, kw]; output side (H-1)*stride - 2*pad + k.

template <Scalar T>
struct ConvTranspose2dCache {
  ConvGeometry geom;  // geometry of the matching forward conv (output -> input)
  Tensor<T> x;
  Tensor<T> weight;
};

template <Scalar T>
ConvGeometry conv_transpose2d_geometry(const Tensor<T>& x, const Tensor<T>& w,
                                       const Tensor<T>& b, std::size_t stride,
                                       std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
    throw ShapeError(
        "conv_transpose2d expects x [N,Ci,H,W], w [Ci,Co,kh,kw], b [Co]");
  }
  if (x.dim(1) != w.dim(0) || b.dim(0) != w.dim(1)) {
    throw ShapeError("conv_transpose2d channel mismatch: input " +
                     x.shape().str() + ", kernel " + w.shape().str() +
                     ", bias " + b.shape().str());
  }
  if (stride == 0) throw ShapeError("conv_transpose2d stride must be >= 1");
  ConvGeometry g;
  // Described as the forward conv it transposes: that conv maps the
  // transposed output [Co, Ho, Wo] to the transposed input [Ci, H, W].
  g.n = x.dim(0);
  g.o = x.dim(1);
  g.oh = x.dim(2);
  g.ow = x.dim(3);
  g.c = w.dim(1);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  const std::size_t full_h = (g.oh - 1) * stride + g.kh;
  const std::size_t full_w = (g.ow - 1) * stride + g.kw;
  if (full_h <= 2 * pad || full_w <= 2 * pad) {
    throw ShapeError("conv_transpose2d padding consumes the whole output");
  }
  g.h = full_h - 2 * pad;
  g.w = full_w - 2 * pad;
  return g;
}

template <Scalar T>
std::pair<Tensor<T>, ConvTranspose2dCache<T>> conv_transpose2d_forward(
    const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
    std::size_t stride, std::size_t pad) {
  ConvTranspose2dCache<T> cache;
  cache.geom = conv_transpose2d_geometry(x, w, b, stride, pad);
  const auto& g = cache.geom;
  const std::size_t patch = g.patch();
  const std::size_t pix = g.out_pixels();
  Tensor<T> y(Shape{g.n, g.c, g.h, g.w});
  std::vector<T> cols(patch * pix);
  for (std::size_t n = 0; n < g.n; ++n) {
    // cols[C_out*kh*kw, H*W] = W^T x_n with W viewed as [C_in, C_out*kh*kw].
    detail::gemm(true, false, patch, pix, g.o, w.ptr(),
                 x.ptr() + n * g.o * pix, cols.data(), false);
    T* yn = y.ptr() + n * g.c * g.h * g.w;
    for (std::size_t c = 0; c < g.c; ++c) {
      std::fill(yn + c * g.h * g.w, yn + (c + 1) * g.h * g.w, b[c]);
    }
    detail::col2im(cols.data(), g.c, g.h, g.w, g.kh, g.kw, g.stride, g.pad,
                   g.oh, g.ow, yn);
  }
  cache.x = x;
  cache.weight = w;
  return {std::move(y), std::move(cache)};
}

template <Scalar T>
Conv2dGrads<T> conv_transpose2d_backward(const Tensor<T>& grad_out,
                                         const ConvTranspose2dCache<T>& cache) {
  const auto& g = cache.geom;
  if (grad_out.shape() != Shape{g.n, g.c, g.h, g.w}) {
    throw ShapeError("conv_transpose2d_backward: grad_out " +
                     grad_out.shape().str() + " does not match cache");
  }
  const std::size_t patch = g.patch();
  const std::size_t pix = g.out_pixels();
  Conv2dGrads<T> out{Tensor<T>(cache.x.shape()),
                     Tensor<T>(cache.weight.shape()), Tensor<T>(Shape{g.c})};
  std::vector<T> cols(patch * pix);
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* gy = grad_out.ptr() + n * g.c * g.h * g.w;
    for (std::size_t c = 0; c < g.c; ++c) {
      T acc = T(0);
      for (std::size_t p = 0; p < g.h * g.w; ++p) acc += gy[c * g.h * g.w + p];
      out.b[c] += acc;
    }
    detail::im2col(gy, g.c, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow,
                   cols.data());
    detail::gemm(false, false, g.o, pix, patch, cache.weight.ptr(),
                 cols.data(), out.x.ptr() + n * g.o * pix, false);
    detail::gemm(false, true, g.o, patch, pix, cache.x.ptr() + n * g.o * pix,
                 cols.data(), out.w.ptr(), true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Max pooling

template <Scalar T>
struct MaxPoolCache {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

inline std::size_t pool_out_dim(std::size_t in, std::size_t k,
                                std::size_t stride, const char* axis) {
  if (k == 0 || stride == 0) throw ShapeError("pool window/stride must be >= 1");
  if (k > in || (in - k) % stride != 0) {
    throw ShapeError(std::string("non-integral pooled size along ") + axis +
                     ": input " + std::to_string(in) + ", window " +
                     std::to_string(k) + ", stride " + std::to_string(stride));
  }
  return (in - k) / stride + 1;
}

template <Scalar T>
std::pair<Tensor<T>, MaxPoolCache<T>> maxpool_forward(const Tensor<T>& x,
                                                      std::size_t window,
                                                      std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("maxpool expects [N,C,H,W], got " + x.shape().str());
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = pool_out_dim(h, window, stride, "height");
  const std::size_t ow = pool_out_dim(w, window, stride, "width");
  Tensor<T> y(Shape{n, c, oh, ow});
  MaxPoolCache<T> cache{x.shape(), std::vector<std::size_t>(y.size())};
  std::size_t out = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++out) {
        std::size_t best = base + (oy * stride) * w + ox * stride;
        T best_v = x[best];
        for (std::size_t ky = 0; ky < window; ++ky) {
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx =
                base + (oy * stride + ky) * w + ox * stride + kx;
            if (x[idx] > best_v) {  // strict: first maximum wins ties
              best_v = x[idx];
              best = idx;
            }
          }
        }
        y[out] = best_v;
        cache.argmax[out] = best;
      }
    }
  }
  return {std::move(y), std::move(cache)};
}

template <Scalar T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out,
                           const MaxPoolCache<T>& cache) {
  if (grad_out.size() != cache.argmax.size()) {
    throw ShapeError("maxpool_backward: grad_out " + grad_out.shape().str() +
                     " does not match cache");
  }
  Tensor<T> gx(cache.input_shape);
  for (std::size_t i = 0; i < cache.argmax.size(); ++i) {
    gx[cache.argmax[i]] += grad_out[i];
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Dense

template <Scalar T>
struct DenseCache {
  Tensor<T> x;
  Tensor<T> weight;
};

template <Scalar T>
struct DenseGrads {
  Tensor<T> x, w, b;
};

template <Scalar T>
void check_dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
      b.dim(0) != w.dim(1)) {
    throw ShapeError("dense shape mismatch: x " + x.shape().str() + ", w " +
                     w.shape().str() + ", b " + b.shape().str());
  }
}

template <Scalar T>
Tensor<T> dense_infer(const Tensor<T>& x, const Tensor<T>& w,
                      const Tensor<T>& b) {
  check_dense(x, w, b);
  const std::size_t n = x.dim(0), d_out = w.dim(1);
  Tensor<T> y(Shape{n, d_out});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(b.ptr(), b.ptr() + d_out, y.ptr() + i * d_out);
  }
  detail::gemm(false, false, n, d_out, w.dim(0), x.ptr(), w.ptr(), y.ptr(),
               true);
  return y;
}

template <Scalar T>
std::pair<Tensor<T>, DenseCache<T>> dense_forward(const Tensor<T>& x,
                                                  const Tensor<T>& w,
                                                  const Tensor<T>& b) {
  auto y = dense_infer(x, w, b);
  return {std::move(y), DenseCache<T>{x, w}};
}

template <Scalar T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out,
                             const DenseCache<T>& cache) {
  const std::size_t n = cache.x.dim(0), d_in = cache.weight.dim(0),
                    d_out = cache.weight.dim(1);
  if (grad_out.shape() != Shape{n, d_out}) {
    throw ShapeError("dense_backward: grad_out " + grad_out.shape().str() +
                     " does not match cache");
  }
  DenseGrads<T> g{Tensor<T>(Shape{n, d_in}), Tensor<T>(Shape{d_in, d_out}),
                  reduce_sum(grad_out, 0)};
  detail::gemm(false, true, n, d_in, d_out, grad_out.ptr(),
               cache.weight.ptr(), g.x.ptr(), false);
  detail::gemm(true, false, d_in, d_out, n, cache.x.ptr(), grad_out.ptr(),
               g.w.ptr(), false);
  return g;
}

// ---------------------------------------------------------------------------
// LSTM. Gate blocks along the 4H axis are ordered input, forget, cell, output.

template <Scalar T>
struct LstmParams {
  Tensor<T> w_x;  // [d, 4H]
  Tensor<T> w_h;  // [H, 4H]
  Tensor<T> b;    // [4H]

  std::size_t input_dim() const { return w_x.dim(0); }
  std::size_t hidden() const { return w_h.dim(0); }
};

template <Scalar T>
struct LstmGrads {
  Tensor<T> w_x, w_h, b;

  static LstmGrads zeros_like(const LstmParams<T>& p) {
    return {Tensor<T>(p.w_x.shape()), Tensor<T>(p.w_h.shape()),
            Tensor<T>(p.b.shape())};
  }
};

template <Scalar T>
struct LstmStepCache {
  Tensor<T> x, h_prev, c_prev;
  Tensor<T> gates;  // activated [N, 4H]
  Tensor<T> c, tanh_c;
};

template <Scalar T>
struct LstmStepResult {
  Tensor<T> h, c;
  LstmStepCache<T> cache;
};

template <Scalar T>
void check_lstm(const LstmParams<T>& p) {
  const std::size_t hidden = p.w_h.rank() == 2 ? p.w_h.dim(0) : 0;
  if (p.w_x.rank() != 2 || p.w_h.rank() != 2 || p.b.rank() != 1 ||
      p.w_h.dim(1) != 4 * hidden || p.w_x.dim(1) != 4 * hidden ||
      p.b.dim(0) != 4 * hidden) {
    throw ShapeError("lstm parameter shapes inconsistent: w_x " +
                     p.w_x.shape().str() + ", w_h " + p.w_h.shape().str() +
                     ", b " + p.b.shape().str());
  }
}

template <Scalar T>
LstmStepResult<T> lstm_step(const Tensor<T>& x, const Tensor<T>& h,
                            const Tensor<T>& c, const LstmParams<T>& p) {
  check_lstm(p);
  const std::size_t hid = p.hidden();
  if (x.rank() != 2 || x.dim(1) != p.input_dim() || h.shape() != c.shape() ||
      h.rank() != 2 || h.dim(0) != x.dim(0) || h.dim(1) != hid) {
    throw ShapeError("lstm_step shape mismatch: x " + x.shape().str() +
                     ", h " + h.shape().str() + ", c " + c.shape().str() +
                     " for d=" + std::to_string(p.input_dim()) +
                     ", H=" + std::to_string(hid));
  }
  const std::size_t n = x.dim(0);
  Tensor<T> z(Shape{n, 4 * hid});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(p.b.ptr(), p.b.ptr() + 4 * hid, z.ptr() + i * 4 * hid);
  }
  detail::gemm(false, false, n, 4 * hid, p.input_dim(), x.ptr(), p.w_x.ptr(),
               z.ptr(), true);
  detail::gemm(false, false, n, 4 * hid, hid, h.ptr(), p.w_h.ptr(), z.ptr(),
               true);
  LstmStepResult<T> r{Tensor<T>(Shape{n, hid}), Tensor<T>(Shape{n, hid}), {}};
  Tensor<T> tanh_c(Shape{n, hid});
  for (std::size_t i = 0; i < n; ++i) {
    T* zi = z.ptr() + i * 4 * hid;
    for (std::size_t j = 0; j < hid; ++j) {
      const T ig = sigmoid(zi[j]);
      const T fg = sigmoid(zi[hid + j]);
      const T gg = std::tanh(zi[2 * hid + j]);
      const T og = sigmoid(zi[3 * hid + j]);
      zi[j] = ig;
      zi[hid + j] = fg;
      zi[2 * hid + j] = gg;
      zi[3 * hid + j] = og;
      const T cn = fg * c[i * hid + j] + ig * gg;
      r.c[i * hid + j] = cn;
      tanh_c[i * hid + j] = std::tanh(cn);
      r.h[i * hid + j] = og * tanh_c[i * hid + j];
    }
  }
  r.cache = LstmStepCache<T>{x, h, c, std::move(z), r.c, std::move(tanh_c)};
  return r;
}

template <Scalar T>
struct LstmStepGrads {
  Tensor<T> x, h_prev, c_prev;
};

/// Backward through one cell given gradients flowing into h' and c'.
/// Parameter gradients are accumulated into `grads`.
template <Scalar T>
LstmStepGrads<T> lstm_step_backward(const Tensor<T>& dh, const Tensor<T>& dc,
                                    const LstmStepCache<T>& cache,
                                    const LstmParams<T>& p,
                                    LstmGrads<T>& grads) {
  const std::size_t n = cache.x.dim(0), hid = p.hidden(), d = p.input_dim();
  if (dh.shape() != Shape{n, hid} || dc.shape() != Shape{n, hid}) {
    throw ShapeError("lstm_step_backward: gradient shapes do not match cache");
  }
  Tensor<T> dz(Shape{n, 4 * hid});
  LstmStepGrads<T> out{Tensor<T>(Shape{n, d}), Tensor<T>(Shape{n, hid}),
                       Tensor<T>(Shape{n, hid})};
  for (std::size_t i = 0; i < n; ++i) {
    const T* gi = cache.gates.ptr() + i * 4 * hid;
    T* dzi = dz.ptr() + i * 4 * hid;
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t k = i * hid + j;
      const T ig = gi[j], fg = gi[hid + j], gg = gi[2 * hid + j],
              og = gi[3 * hid + j];
      const T tc = cache.tanh_c[k];
      const T dct = dc[k] + dh[k] * og * (T(1) - tc * tc);
      dzi[j] = dct * gg * ig * (T(1) - ig);
      dzi[hid + j] = dct * cache.c_prev[k] * fg * (T(1) - fg);
      dzi[2 * hid + j] = dct * ig * (T(1) - gg * gg);
      dzi[3 * hid + j] = dh[k] * tc * og * (T(1) - og);
      out.c_prev[k] = dct * fg;
    }
  }
  detail::gemm(true, false, d, 4 * hid, n, cache.x.ptr(), dz.ptr(),
               grads.w_x.ptr(), true);
  detail::gemm(true, false, hid, 4 * hid, n, cache.h_prev.ptr(), dz.ptr(),
               grads.w_h.ptr(), true);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 4 * hid; ++j) grads.b[j] += dz[i * 4 * hid + j];
  }
  detail::gemm(false, true, n, d, 4 * hid, dz.ptr(), p.w_x.ptr(), out.x.ptr(),
               false);
  detail::gemm(false, true, n, hid, 4 * hid, dz.ptr(), p.w_h.ptr(),
               out.h_prev.ptr(), false);
  return out;
}

template <Scalar T>
struct LstmSequenceCache {
  std::size_t n = 0, steps = 0, d = 0;
  std::vector<LstmStepCache<T>> step;
};

/// Runs the cell over features [N,T,d] from a zero state; returns h_T.
template <Scalar T>
std::pair<Tensor<T>, LstmSequenceCache<T>> lstm_sequence(
    const Tensor<T>& features, const LstmParams<T>& p) {
  check_lstm(p);
  if (features.rank() != 3) {
    throw ShapeError("lstm_sequence expects [N,T,d], got " +
                     features.shape().str());
  }
  const std::size_t n = features.dim(0), steps = features.dim(1),
                    d = features.dim(2), hid = p.hidden();
  if (steps == 0) throw ShapeError("lstm_sequence: empty sequence");
  if (d != p.input_dim()) {
    throw ShapeError("lstm_sequence feature dim " + std::to_string(d) +
                     " does not match parameters (" +
                     std::to_string(p.input_dim()) + ")");
  }
  LstmSequenceCache<T> cache{n, steps, d, {}};
  cache.step.reserve(steps);
  Tensor<T> h(Shape{n, hid}), c(Shape{n, hid});
  Tensor<T> xt(Shape{n, d});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = features.ptr() + (i * steps + t) * d;
      std::copy(src, src + d, xt.ptr() + i * d);
    }
    auto r = lstm_step(xt, h, c, p);
    h = std::move(r.h);
    c = std::move(r.c);
    cache.step.push_back(std::move(r.cache));
  }
  return {std::move(h), std::move(cache)};
}

/// Backpropagation through time from a gradient on h_T. Returns the gradient
/// with respect to the features; parameter gradients accumulate into `grads`.
template <Scalar T>
Tensor<T> lstm_sequence_backward(const Tensor<T>& dh_last,
                                 const LstmSequenceCache<T>& cache,
                                 const LstmParams<T>& p, LstmGrads<T>& grads) {
  const std::size_t n = cache.n, steps = cache.steps, d = cache.d,
                    hid = p.hidden();
  if (cache.step.size() != steps) {
    throw ShapeError("lstm_sequence_backward: cache is incomplete");
  }
  Tensor<T> dfeat(Shape{n, steps, d});
  Tensor<T> dh = dh_last;
  Tensor<T> dc(Shape{n, hid});
  for (std::size_t t = steps; t-- > 0;) {
    auto g = lstm_step_backward(dh, dc, cache.step[t], p, grads);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(g.x.ptr() + i * d, g.x.ptr() + (i + 1) * d,
                dfeat.ptr() + (i * steps + t) * d);
    }
    dh = std::move(g.h_prev);
    dc = std::move(g.c_prev);
  }
  return dfeat;
}

// ---------------------------------------------------------------------------
// Losses

template <Scalar T>
struct LossResult {
  T loss;
  Tensor<T> grad;
};

/// Row-wise softmax with the row max subtracted.
template <Scalar T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [N,K]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      p[i * k + j] = std::exp(row[j] - mx);
      total += p[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= total;
  }
  return p;
}

template <Scalar T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                    std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + logits.shape().str() +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw DataError("label " + std::to_string(labels[i]) +
                      " out of range for " + std::to_string(k) + " classes");
    }
  }
  Tensor<T> grad = softmax(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    double lse = 0.0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
    loss += std::log(lse) + static_cast<double>(mx) -
            static_cast<double>(row[labels[i]]);
    grad[i * k + labels[i]] -= T(1);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  for (auto& g : grad.data()) g *= inv_n;
  return {static_cast<T>(loss / static_cast<double>(n)), std::move(grad)};
}

template <Scalar T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss shape mismatch: " + pred.shape().str() +
                     " vs " + target.shape().str());
  }
  const double count = static_cast<double>(pred.size());
  double acc = 0.0;
  Tensor<T> grad(pred.shape());
  const T two_over = static_cast<T>(2.0 / count);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T diff = pred[i] - target[i];
    acc += static_cast<double>(diff) * static_cast<double>(diff);
    grad[i] = two_over * diff;
  }
  return {static_cast<T>(acc / count), std::move(grad)};
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (f64 only).

struct GradProbe {
  std::string name;
  TensorD* value;     // perturbed in place, restored afterwards
  TensorD analytic;   // d loss / d value
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Central differences over every coordinate of every probe.
inline GradCheckReport grad_check(const std::function<double()>& loss,
                                  std::vector<GradProbe>& probes,
                                  double eps = 1e-5) {
  GradCheckReport report;
  for (auto& probe : probes) {
    if (probe.value->shape() != probe.analytic.shape()) {
      throw ShapeError("grad_check: analytic gradient for " + probe.name +
                       " has the wrong shape");
    }
    for (std::size_t i = 0; i < probe.value->size(); ++i) {
      double& v = (*probe.value)[i];
      const double saved = v;
      v = saved + eps;
      const double up = loss();
      v = saved - eps;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(probe.analytic[i], numeric);
      ++report.coordinates;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_name = probe.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

/// Weighted-sum projection <r, y>, turning a tensor-valued map into a scalar
/// loss whose output gradient is r.
inline double project(const TensorD& y, const TensorD& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
  return acc;
}

inline TensorD random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
  Rng rng(seed);
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace visemeflow
