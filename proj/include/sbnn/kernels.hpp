#pragma once

// Raw numeric kernels shared by the autograd ops and the packed inference
// engine. Both paths call the same routines so eval-mode outputs agree bit
// for bit on the real-valued layers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sbnn/errors.hpp"

namespace sbnn::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (M×N) = op(A) · op(B), row-major. op(A) is M×K, op(B) is K×N.
/// With `accumulate` the product is added to C instead of overwriting it.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate = false) {
  using Map = Eigen::Map<const RowMat<T>>;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat<T>> cm(c, M, N);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b)
    cm.noalias() += Map(a, M, K) * Map(b, K, N);
  else if (trans_a && !trans_b)
    cm.noalias() += Map(a, K, M).transpose() * Map(b, K, N);
  else if (!trans_a && trans_b)
    cm.noalias() += Map(a, M, K) * Map(b, N, K).transpose();
  else
    cm.noalias() += Map(a, K, M).transpose() * Map(b, N, K).transpose();
}

struct ConvGeom {
  std::size_t n, c, h, w;  // input
  std::size_t f, kh, kw;   // filters
  std::size_t stride, pad;
  std::size_t oh, ow;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_hw() const { return oh * ow; }
};

inline ConvGeom conv_geometry(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                              std::size_t f, std::size_t kh, std::size_t kw, std::size_t stride,
                              std::size_t pad) {
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  if (kh > ph || kw > pw || kh == 0 || kw == 0)
    throw DimensionError("conv2d: kernel larger than padded input (zero-sized output)");
  ConvGeom g{n, c, h, w, f, kh, kw, stride, pad, (ph - kh) / stride + 1, (pw - kw) / stride + 1};
  if (g.oh == 0 || g.ow == 0) throw DimensionError("conv2d: zero-sized output");
  return g;
}

namespace detail {
/// Output columns [lo, hi) whose input column ox·stride + kj − pad is in bounds.
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t k, std::size_t pad,
                        std::size_t& lo, std::size_t& hi) {
  lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  // largest ox with ox·stride + k − pad ≤ in − 1
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(in) - 1 + static_cast<std::ptrdiff_t>(pad) -
                             static_cast<std::ptrdiff_t>(k);
  hi = top < 0 ? 0 : std::min(out, static_cast<std::size_t>(top) / stride + 1);
  lo = std::min(lo, hi);
}
}  // namespace detail

/// cols[(c,ki,kj), (n,oy,ox)] ; padding reads as `pad_value`.
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols, T pad_value = T(0)) {
  const std::size_t ncols = g.n * g.out_hw();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ncols;
        std::size_t lo, hi;
        detail::valid_range(g.ow, g.w, g.stride, kj, g.pad, lo, hi);
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* img = x + (n * g.c + c) * g.h * g.w;
          T* dst = row + n * g.out_hw();
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            T* d = dst + oy * g.ow;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(d, d + g.ow, pad_value);
              continue;
            }
            std::fill(d, d + lo, pad_value);
            std::fill(d + hi, d + g.ow, pad_value);
            if (lo == hi) continue;
            const T* src = img + static_cast<std::size_t>(iy) * g.w + (lo * g.stride + kj - g.pad);
            if (g.stride == 1)
              std::copy(src, src + (hi - lo), d + lo);
            else
              for (std::size_t ox = lo; ox < hi; ++ox) d[ox] = src[(ox - lo) * g.stride];
          }
        }
      }
}

/// Adjoint of im2col: scatters-adds columns back into an (already sized) image gradient.
template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* dx) {
  const std::size_t ncols = g.n * g.out_hw();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ncols;
        std::size_t lo, hi;
        detail::valid_range(g.ow, g.w, g.stride, kj, g.pad, lo, hi);
        for (std::size_t n = 0; n < g.n; ++n) {
          T* img = dx + (n * g.c + c) * g.h * g.w;
          const T* src = row + n * g.out_hw();
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            if (lo == hi) continue;
            T* d = img + static_cast<std::size_t>(iy) * g.w + (lo * g.stride + kj - g.pad);
            const T* sr = src + oy * g.ow;
            for (std::size_t ox = lo; ox < hi; ++ox) d[(ox - lo) * g.stride] += sr[ox];
          }
        }
      }
}

/// out (F × N·OH·OW) -> NCHW.
template <typename T>
void fhw_to_nchw(const ConvGeom& g, const T* fm, T* out) {
  const std::size_t hw = g.out_hw();
  for (std::size_t f = 0; f < g.f; ++f)
    for (std::size_t n = 0; n < g.n; ++n)
      std::copy_n(fm + (f * g.n + n) * hw, hw, out + (n * g.f + f) * hw);
}

template <typename T>
void nchw_to_fhw(const ConvGeom& g, const T* in, T* fm) {
  const std::size_t hw = g.out_hw();
  for (std::size_t f = 0; f < g.f; ++f)
    for (std::size_t n = 0; n < g.n; ++n)
      std::copy_n(in + (n * g.f + f) * hw, hw, fm + (f * g.n + n) * hw);
}

/// Cross-correlation forward. Returns NCHW output; `cols_out` (optional) keeps
/// the im2col buffer for the backward pass.
template <typename T>
std::vector<T> conv2d_forward(const ConvGeom& g, const T* x, const T* w,
                              std::vector<T>* cols_out = nullptr, T pad_value = T(0)) {
  std::vector<T> cols(g.patch() * g.n * g.out_hw());
  im2col(g, x, cols.data(), pad_value);
  std::vector<T> fm(g.f * g.n * g.out_hw());
  gemm<T>(false, false, g.f, g.n * g.out_hw(), g.patch(), w, cols.data(), fm.data());
  std::vector<T> out(fm.size());
  fhw_to_nchw(g, fm.data(), out.data());
  if (cols_out) *cols_out = std::move(cols);
  return out;
}

/// Gradients of conv2d given dy (NCHW). Either output pointer may be null.
template <typename T>
void conv2d_backward(const ConvGeom& g, const T* w, const std::vector<T>& cols, const T* dy,
                     T* dx, T* dw) {
  std::vector<T> dfm(g.f * g.n * g.out_hw());
  nchw_to_fhw(g, dy, dfm.data());
  const std::size_t ncols = g.n * g.out_hw();
  if (dw) gemm<T>(false, true, g.f, g.patch(), ncols, dfm.data(), cols.data(), dw, true);
  if (dx) {
    std::vector<T> dcols(g.patch() * ncols);
    gemm<T>(true, false, g.patch(), ncols, g.f, w, dfm.data(), dcols.data());
    col2im(g, dcols.data(), dx);
  }
}

/// Eval-mode batch norm on an (outer, C, inner) view.
template <typename T>
void batchnorm_eval(std::span<const T> x, std::span<T> y, std::size_t outer, std::size_t channels,
                    std::size_t inner, std::span<const T> gamma, std::span<const T> beta,
                    std::span<const T> mean, std::span<const T> var, T eps) {
  for (std::size_t c = 0; c < channels; ++c) {
    const T inv = T(1) / std::sqrt(var[c] + eps);
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) y[base + i] = (x[base + i] - mean[c]) * inv * gamma[c] + beta[c];
    }
  }
}

template <typename T>
void prelu_forward(std::span<const T> x, std::span<T> y, std::size_t outer, std::size_t channels,
                   std::size_t inner, std::span<const T> slope) {
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const T v = x[base + i];
        y[base + i] = v > T(0) ? v : slope[c] * v;
      }
    }
}

/// Non-overlapping k×k average pooling (stride k) on NCHW.
template <typename T>
void avgpool_forward(std::span<const T> x, std::span<T> y, std::size_t nc, std::size_t h,
                     std::size_t w, std::size_t k) {
  const std::size_t oh = h / k, ow = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T s = 0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) s += x[(p * h + oy * k + i) * w + ox * k + j];
        y[(p * oh + oy) * ow + ox] = s * inv;
      }
}

template <typename T>
void global_avgpool_forward(std::span<const T> x, std::span<T> y, std::size_t nc, std::size_t hw) {
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t p = 0; p < nc; ++p) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
    y[p] = s * inv;
  }
}

/// y = x · Wᵀ + b with W stored (out × in).
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, std::size_t n, std::size_t in,
                    std::size_t out) {
  gemm<T>(false, true, n, out, in, x, w, y);
  if (b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) y[i * out + o] += b[o];
}

}  // namespace sbnn::kernels
