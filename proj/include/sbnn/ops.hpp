#pragma once

// Differentiable ops on BasicTensor<T>. Every op here has an analytic backward
// that is checked against central finite differences in the test suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sbnn/kernels.hpp"
#include "sbnn/tensor.hpp"

namespace sbnn {

namespace detail {

struct ChannelView {
  std::size_t outer, channels, inner;
};

template <typename T>
ChannelView channel_view(const BasicTensor<T>& x, const char* op) {
  if (x.rank() < 2) throw DimensionError(std::string(op) + ": expected rank >= 2 (N×C×...)");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  return {x.dim(0), x.dim(1), inner};
}

struct AxisView {
  std::size_t outer, extent, inner;
};

template <typename T>
AxisView axis_view(const BasicTensor<T>& x, int axis, const char* op) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError(std::string(op) + ": axis out of range");
  AxisView v{1, x.dim(static_cast<std::size_t>(axis)), 1};
  for (int i = 0; i < axis; ++i) v.outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = axis + 1; i < r; ++i) v.inner *= x.dim(static_cast<std::size_t>(i));
  return v;
}

template <typename T>
void require_finite(const BasicTensor<T>& x, const char* op) {
  for (T v : x.data())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = n.parent_grad(k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [](Node<T>& n) {
    if (T* g = n.parent_grad(0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (T* g = n.parent_grad(1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& n) {
    const auto& av = n.parents[0]->data;
    const auto& bv = n.parents[1]->data;
    if (T* g = n.parent_grad(0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    if (T* g = n.parent_grad(1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, "scale", [s](Node<T>& n) {
    if (T* g = n.parent_grad(0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * s;
  });
}

/// Elementwise op with a user-supplied backward mask: y = f(x), dx = dy·mask(x).
/// This is the carrier for straight-through estimators.
template <typename T, typename Fwd, typename Mask>
BasicTensor<T> custom_grad(const BasicTensor<T>& x, Fwd forward, Mask backward_mask,
                           const char* op = "custom_grad") {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, op, [backward_mask](Node<T>& n) {
    if (T* g = n.parent_grad(0)) {
      const auto& xv = n.parents[0]->data;
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * backward_mask(xv[i]);
    }
  });
}

// ----------------------------------------------------------------- reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>(Shape{1}, {s}, {a}, "sum", [](Node<T>& n) {
    if (T* g = n.parent_grad(0))
      for (std::size_t i = 0; i < n.parents[0]->data.size(); ++i) g[i] += n.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Sum over one axis; that axis is removed from the shape.
template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, int axis) {
  const auto v = detail::axis_view(x, axis, "sum_axis");
  Shape s;
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  for (int i = 0; i < r; ++i)
    if (i != ax) s.push_back(x.dim(static_cast<std::size_t>(i)));
  if (s.empty()) s = {1};
  std::vector<T> out(v.outer * v.inner, T(0));
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t a = 0; a < v.extent; ++a)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[o * v.inner + i] += x[(o * v.extent + a) * v.inner + i];
  return make_result<T>(std::move(s), std::move(out), {x}, "sum_axis", [v](Node<T>& n) {
    if (T* g = n.parent_grad(0))
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t a = 0; a < v.extent; ++a)
          for (std::size_t i = 0; i < v.inner; ++i)
            g[(o * v.extent + a) * v.inner + i] += n.grad[o * v.inner + i];
  });
}

// ------------------------------------------------------------------- reshaping

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), x.storage(), {x}, "reshape", [](Node<T>& n) {
    if (T* g = n.parent_grad(0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

/// N×... -> N×(rest).
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("flatten: rank 0");
  return reshape(x, Shape{x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected rank 2");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result<T>(Shape{c, r}, std::move(out), {x}, "transpose", [r, c](Node<T>& n) {
    if (T* g = n.parent_grad(0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

/// Concatenate two rank-2 tensors along columns.
template <typename T>
BasicTensor<T> concat_cols(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cc = ca + cb;
  std::vector<T> out(rows * cc);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.data().begin() + i * ca, ca, out.begin() + i * cc);
    std::copy_n(b.data().begin() + i * cb, cb, out.begin() + i * cc + ca);
  }
  return make_result<T>(Shape{rows, cc}, std::move(out), {a, b}, "concat_cols",
                        [rows, ca, cb, cc](Node<T>& n) {
                          if (T* g = n.parent_grad(0))
                            for (std::size_t i = 0; i < rows; ++i)
                              for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += n.grad[i * cc + j];
                          if (T* g = n.parent_grad(1))
                            for (std::size_t i = 0; i < rows; ++i)
                              for (std::size_t j = 0; j < cb; ++j)
                                g[i * cb + j] += n.grad[i * cc + ca + j];
                        });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  kernels::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  return make_result<T>(Shape{m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node<T>& nd) {
    const T* av = nd.parents[0]->data.data();
    const T* bv = nd.parents[1]->data.data();
    if (T* g = nd.parent_grad(0)) kernels::gemm<T>(false, true, m, k, n, nd.grad.data(), bv, g, true);
    if (T* g = nd.parent_grad(1)) kernels::gemm<T>(true, false, k, n, m, av, nd.grad.data(), g, true);
  });
}

/// x (N×in) · Wᵀ + b, W stored (out×in). `bias` may be an empty tensor.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  const bool has_bias = bias.numel() > 0;
  if (has_bias && bias.numel() != out) throw DimensionError("linear: bias length");
  std::vector<T> y(n * out);
  kernels::linear_forward<T>(x.data().data(), w.data().data(), has_bias ? bias.data().data() : nullptr,
                             y.data(), n, in, out);
  auto bw = [n, in, out, has_bias](Node<T>& nd) {
    const T* xv = nd.parents[0]->data.data();
    const T* wv = nd.parents[1]->data.data();
    if (T* g = nd.parent_grad(0)) kernels::gemm<T>(false, false, n, in, out, nd.grad.data(), wv, g, true);
    if (T* g = nd.parent_grad(1)) kernels::gemm<T>(true, false, out, in, n, nd.grad.data(), xv, g, true);
    if (has_bias)
      if (T* g = nd.parent_grad(2))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < out; ++o) g[o] += nd.grad[i * out + o];
  };
  if (has_bias) return make_result<T>(Shape{n, out}, std::move(y), {x, w, bias}, "linear", bw);
  return make_result<T>(Shape{n, out}, std::move(y), {x, w}, "linear", bw);
}

// ---------------------------------------------------------------- convolution

/// Cross-correlation of x (N×C×H×W) with w (F×C×kh×kw). Out-of-bounds taps
/// read `pad_value` (zero by default, −1 for binary activations).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                      std::size_t pad, T pad_value = T(0)) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const auto g = kernels::conv_geometry(x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2),
                                        w.dim(3), stride, pad);
  auto cols = std::make_shared<std::vector<T>>();
  auto out = kernels::conv2d_forward<T>(g, x.data().data(), w.data().data(), cols.get(), pad_value);
  return make_result<T>(Shape{g.n, g.f, g.oh, g.ow}, std::move(out), {x, w}, "conv2d",
                        [g, cols](Node<T>& nd) {
                          kernels::conv2d_backward<T>(g, nd.parents[1]->data.data(), *cols,
                                                      nd.grad.data(), nd.parent_grad(0),
                                                      nd.parent_grad(1));
                        });
}

// ---------------------------------------------------------------- normalization

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
  bool track_running_stats = true;  // training mode only
};

/// Per-channel batch norm over N×C or N×C×H×W. In training mode batch
/// statistics are used for the output and, unless disabled, the running
/// statistics are updated in place (unbiased variance).
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, BatchNormOptions opt = {}) {
  const auto v = detail::channel_view(x, "batch_norm");
  const std::size_t C = v.channels;
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
    throw DimensionError("batch_norm: parameter length does not match channels");
  const T eps = static_cast<T>(opt.eps);
  std::vector<T> y(x.numel());
  if (!opt.training) {
    kernels::batchnorm_eval<T>(x.data(), y, v.outer, C, v.inner, gamma.data(), beta.data(),
                               running_mean.data(), running_var.data(), eps);
    std::vector<T> rm(running_mean.data().begin(), running_mean.data().end());
    std::vector<T> inv(C);
    for (std::size_t c = 0; c < C; ++c) inv[c] = T(1) / std::sqrt(running_var[c] + eps);
    return make_result<T>(
        x.shape(), std::move(y), {x, gamma, beta}, "batch_norm_eval",
        [v, rm = std::move(rm), inv = std::move(inv)](Node<T>& nd) {
          const auto& xv = nd.parents[0]->data;
          const auto& gv = nd.parents[1]->data;
          T* dx = nd.parent_grad(0);
          T* dg = nd.parent_grad(1);
          T* db = nd.parent_grad(2);
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t c = 0; c < v.channels; ++c)
              for (std::size_t i = 0; i < v.inner; ++i) {
                const std::size_t k = (o * v.channels + c) * v.inner + i;
                if (dx) dx[k] += nd.grad[k] * gv[c] * inv[c];
                if (dg) dg[c] += nd.grad[k] * (xv[k] - rm[c]) * inv[c];
                if (db) db[c] += nd.grad[k];
              }
        });
  }
  const std::size_t m = v.outer * v.inner;
  if (m < 2) throw DimensionError("batch_norm: training needs more than one value per channel");
  std::vector<T> mu(C, T(0)), invstd(C), xhat(x.numel());
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) s += x[(o * C + c) * v.inner + i];
    const double mean_c = s / static_cast<double>(m);
    double q = 0;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const double d = x[(o * C + c) * v.inner + i] - mean_c;
        q += d * d;
      }
    const double var = q / static_cast<double>(m);
    mu[c] = static_cast<T>(mean_c);
    invstd[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
    if (opt.track_running_stats) {
      const T mom = static_cast<T>(opt.momentum);
      running_mean[c] = (T(1) - mom) * running_mean[c] + mom * static_cast<T>(mean_c);
      running_var[c] = (T(1) - mom) * running_var[c] +
                       mom * static_cast<T>(var * static_cast<double>(m) / static_cast<double>(m - 1));
    }
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t k = (o * C + c) * v.inner + i;
        xhat[k] = (x[k] - mu[c]) * invstd[c];
        y[k] = xhat[k] * gamma[c] + beta[c];
      }
  }
  return make_result<T>(x.shape(), std::move(y), {x, gamma, beta}, "batch_norm",
                        [v, m, invstd = std::move(invstd), xhat = std::move(xhat)](Node<T>& nd) {
                          const std::size_t C = v.channels;
                          const auto& gv = nd.parents[1]->data;
                          T* dx = nd.parent_grad(0);
                          T* dg = nd.parent_grad(1);
                          T* db = nd.parent_grad(2);
                          for (std::size_t c = 0; c < C; ++c) {
                            T sdy = 0, sdyx = 0;
                            for (std::size_t o = 0; o < v.outer; ++o)
                              for (std::size_t i = 0; i < v.inner; ++i) {
                                const std::size_t k = (o * C + c) * v.inner + i;
                                sdy += nd.grad[k];
                                sdyx += nd.grad[k] * xhat[k];
                              }
                            if (dg) dg[c] += sdyx;
                            if (db) db[c] += sdy;
                            if (dx) {
                              const T mt = static_cast<T>(m);
                              const T k0 = gv[c] * invstd[c] / mt;
                              for (std::size_t o = 0; o < v.outer; ++o)
                                for (std::size_t i = 0; i < v.inner; ++i) {
                                  const std::size_t k = (o * C + c) * v.inner + i;
                                  dx[k] += k0 * (mt * nd.grad[k] - sdy - xhat[k] * sdyx);
                                }
                            }
                          }
                        });
}

/// Per-channel PReLU: y = x for x > 0, slope_c·x otherwise.
template <typename T>
BasicTensor<T> prelu(const BasicTensor<T>& x, const BasicTensor<T>& slope) {
  const auto v = detail::channel_view(x, "prelu");
  if (slope.numel() != v.channels) throw DimensionError("prelu: slope length does not match channels");
  std::vector<T> y(x.numel());
  kernels::prelu_forward<T>(x.data(), y, v.outer, v.channels, v.inner, slope.data());
  return make_result<T>(x.shape(), std::move(y), {x, slope}, "prelu", [v](Node<T>& nd) {
    const auto& xv = nd.parents[0]->data;
    const auto& sv = nd.parents[1]->data;
    T* dx = nd.parent_grad(0);
    T* ds = nd.parent_grad(1);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t c = 0; c < v.channels; ++c)
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t k = (o * v.channels + c) * v.inner + i;
          const bool pos = xv[k] > T(0);
          if (dx) dx[k] += nd.grad[k] * (pos ? T(1) : sv[c]);
          if (ds && !pos) ds[c] += nd.grad[k] * xv[k];
        }
  });
}

// ---------------------------------------------------------------------- pooling

/// Non-overlapping k×k average pooling on N×C×H×W (H, W divisible by k).
template <typename T>
BasicTensor<T> avgpool2d(const BasicTensor<T>& x, std::size_t k) {
  if (x.rank() != 4 || k == 0 || x.dim(2) % k || x.dim(3) % k)
    throw DimensionError("avgpool2d: input " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(k));
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / k, ow = w / k;
  std::vector<T> y(nc * oh * ow);
  kernels::avgpool_forward<T>(x.data(), y, nc, h, w, k);
  return make_result<T>(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(y), {x}, "avgpool2d",
                        [nc, h, w, k, oh, ow](Node<T>& nd) {
                          T* g = nd.parent_grad(0);
                          if (!g) return;
                          const T inv = T(1) / static_cast<T>(k * k);
                          for (std::size_t p = 0; p < nc; ++p)
                            for (std::size_t y = 0; y < oh; ++y)
                              for (std::size_t x = 0; x < ow; ++x) {
                                const T d = nd.grad[(p * oh + y) * ow + x] * inv;
                                for (std::size_t i = 0; i < k; ++i)
                                  for (std::size_t j = 0; j < k; ++j) g[(p * h + y * k + i) * w + x * k + j] += d;
                              }
                        });
}

/// N×C×H×W -> N×C.
template <typename T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avgpool: expected N×C×H×W");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(nc);
  kernels::global_avgpool_forward<T>(x.data(), y, nc, hw);
  return make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(y), {x}, "global_avgpool",
                        [nc, hw](Node<T>& nd) {
                          if (T* g = nd.parent_grad(0)) {
                            const T inv = T(1) / static_cast<T>(hw);
                            for (std::size_t p = 0; p < nc; ++p)
                              for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += nd.grad[p] * inv;
                          }
                        });
}

// ------------------------------------------------------------ softmax family

/// Row-wise l2 normalization of a rank-2 tensor.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, T eps = T(1e-12)) {
  if (x.rank() != 2) throw DimensionError("l2_normalize: expected rank 2");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> y(x.numel()), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] / norms[i];
  }
  auto yk = y;
  return make_result<T>(x.shape(), std::move(y), {x}, "l2_normalize",
                        [n, d, norms = std::move(norms), yk = std::move(yk)](Node<T>& nd) {
                          T* g = nd.parent_grad(0);
                          if (!g) return;
                          for (std::size_t i = 0; i < n; ++i) {
                            T dot = 0;
                            for (std::size_t j = 0; j < d; ++j) dot += yk[i * d + j] * nd.grad[i * d + j];
                            for (std::size_t j = 0; j < d; ++j)
                              g[i * d + j] += (nd.grad[i * d + j] - yk[i * d + j] * dot) / norms[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1) {
  detail::require_finite(x, "softmax");
  const auto v = detail::axis_view(x, axis, "softmax");
  std::vector<T> y(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto at = [&](std::size_t a) { return (o * v.extent + a) * v.inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < v.extent; ++a) mx = std::max(mx, x[at(a)]);
      T s = 0;
      for (std::size_t a = 0; a < v.extent; ++a) s += (y[at(a)] = std::exp(x[at(a)] - mx));
      for (std::size_t a = 0; a < v.extent; ++a) y[at(a)] /= s;
    }
  auto yk = y;
  return make_result<T>(x.shape(), std::move(y), {x}, "softmax", [v, yk = std::move(yk)](Node<T>& nd) {
    T* g = nd.parent_grad(0);
    if (!g) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        auto at = [&](std::size_t a) { return (o * v.extent + a) * v.inner + i; };
        T dot = 0;
        for (std::size_t a = 0; a < v.extent; ++a) dot += nd.grad[at(a)] * yk[at(a)];
        for (std::size_t a = 0; a < v.extent; ++a) g[at(a)] += yk[at(a)] * (nd.grad[at(a)] - dot);
      }
  });
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x, int axis = -1) {
  detail::require_finite(x, "log_softmax");
  const auto v = detail::axis_view(x, axis, "log_softmax");
  std::vector<T> y(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto at = [&](std::size_t a) { return (o * v.extent + a) * v.inner + i; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < v.extent; ++a) mx = std::max(mx, x[at(a)]);
      T s = 0;
      for (std::size_t a = 0; a < v.extent; ++a) s += std::exp(x[at(a)] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t a = 0; a < v.extent; ++a) y[at(a)] = x[at(a)] - lse;
    }
  auto yk = y;
  return make_result<T>(x.shape(), std::move(y), {x}, "log_softmax",
                        [v, yk = std::move(yk)](Node<T>& nd) {
                          T* g = nd.parent_grad(0);
                          if (!g) return;
                          for (std::size_t o = 0; o < v.outer; ++o)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                              auto at = [&](std::size_t a) { return (o * v.extent + a) * v.inner + i; };
                              T s = 0;
                              for (std::size_t a = 0; a < v.extent; ++a) s += nd.grad[at(a)];
                              for (std::size_t a = 0; a < v.extent; ++a)
                                g[at(a)] += nd.grad[at(a)] - std::exp(yk[at(a)]) * s;
                            }
                        });
}

// ---------------------------------------------------------------------- losses

/// Mean negative log-likelihood of log-probabilities (N×C) at integer targets.
template <typename T>
BasicTensor<T> nll_loss(const BasicTensor<T>& logp, std::span<const std::int64_t> targets) {
  if (logp.rank() != 2 || logp.dim(0) != targets.size())
    throw DimensionError("nll_loss: " + shape_str(logp.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  const std::size_t n = logp.dim(0), c = logp.dim(1);
  std::vector<std::size_t> idx(n);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw DimensionError("nll_loss: target out of range");
    idx[i] = i * c + static_cast<std::size_t>(targets[i]);
    s -= logp[idx[i]];
  }
  s /= static_cast<T>(n);
  return make_result<T>(Shape{1}, {s}, {logp}, "nll_loss", [n, idx = std::move(idx)](Node<T>& nd) {
    if (T* g = nd.parent_grad(0))
      for (std::size_t i = 0; i < n; ++i) g[idx[i]] -= nd.grad[0] / static_cast<T>(n);
  });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int64_t> targets) {
  return nll_loss(log_softmax(logits, -1), targets);
}

/// Mean sigmoid binary cross-entropy against {0,1} targets of the same shape.
template <typename T>
BasicTensor<T> sigmoid_bce(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  require_same_shape(logits, targets, "sigmoid_bce");
  const std::size_t m = logits.numel();
  T s = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T x = logits[i];
    s += std::max(x, T(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  s /= static_cast<T>(m);
  auto t = targets.storage();
  return make_result<T>(Shape{1}, {s}, {logits}, "sigmoid_bce", [m, t = std::move(t)](Node<T>& nd) {
    if (T* g = nd.parent_grad(0)) {
      const auto& xv = nd.parents[0]->data;
      for (std::size_t i = 0; i < m; ++i) {
        const T sig = T(1) / (T(1) + std::exp(-xv[i]));
        g[i] += nd.grad[0] * (sig - t[i]) / static_cast<T>(m);
      }
    }
  });
}

}  // namespace sbnn
