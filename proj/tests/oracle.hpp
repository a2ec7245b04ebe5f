#pragma once

// Independent reference implementations shared by the test binaries:
// central finite differences in f64 and direct-loop convolution.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sbnn/sbnn.hpp"

namespace oracle {

using sbnn::Shape;
using sbnn::TensorD;

inline const bool kAllocatorTuned = (sbnn::retain_freed_memory(), true);

inline TensorD randn(const Shape& s, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(sbnn::numel_of(s));
  for (auto& x : v) x = d(rng);
  return TensorD(s, std::move(v), grad);
}

inline TensorD uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi, bool grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(sbnn::numel_of(s));
  for (auto& x : v) x = d(rng);
  return TensorD(s, std::move(v), grad);
}

/// Values bounded away from zero, for ops with a kink at the origin.
inline TensorD away_from_zero(const Shape& s, std::mt19937_64& rng, double lo = 0.1, double hi = 1.5) {
  TensorD t = uniform(s, rng, lo, hi);
  std::bernoulli_distribution neg(0.5);
  for (auto& x : t.data()) x = neg(rng) ? -x : x;
  return t;
}

using Fn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Largest per-input relative error ‖g_analytic − g_fd‖ / (‖g_analytic‖ + ‖g_fd‖)
/// between backprop and central differences. Non-scalar outputs are reduced
/// with a fixed random projection so every output element contributes.
inline double gradcheck(const Fn& f, std::vector<TensorD> inputs, double h = 1e-3, std::uint64_t seed = 99) {
  TensorD out = f(inputs);
  std::mt19937_64 rng(seed);
  const TensorD proj = randn(out.shape(), rng, 1.0, false);
  auto scalar_of = [&](const TensorD& o) {
    double s = 0;
    for (std::size_t i = 0; i < o.numel(); ++i) s += o[i] * proj[i];
    return s;
  };
  sbnn::sum(sbnn::mul(out, proj)).backward();

  double worst = 0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    double num2 = 0, den_a = 0, den_n = 0;
    for (std::size_t i = 0; i < in.numel(); ++i) {
      sbnn::NoGradGuard ng;
      const double x0 = in[i];
      in[i] = x0 + h;
      const double fp = scalar_of(f(inputs));
      in[i] = x0 - h;
      const double fm = scalar_of(f(inputs));
      in[i] = x0;
      const double fd = (fp - fm) / (2 * h);
      num2 += (analytic[i] - fd) * (analytic[i] - fd);
      den_a += analytic[i] * analytic[i];
      den_n += fd * fd;
    }
    const double denom = std::sqrt(den_a) + std::sqrt(den_n);
    worst = std::max(worst, denom > 1e-12 ? std::sqrt(num2) / denom : std::sqrt(num2));
  }
  return worst;
}

/// Direct six-loop cross-correlation. Out-of-bounds taps read `pad_value`.
template <typename T>
std::vector<double> conv_ref(const sbnn::BasicTensor<T>& x, const sbnn::BasicTensor<T>& w, std::size_t stride,
                             std::size_t pad, double pad_value = 0.0) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * f * oh * ow);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double s = 0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xo * stride + j) - static_cast<long>(pad);
                const bool in = iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(wd);
                const double xv = in ? static_cast<double>(x[((b * c + ch) * h + static_cast<std::size_t>(iy)) * wd +
                                                             static_cast<std::size_t>(ix)])
                                     : pad_value;
                s += xv * static_cast<double>(w[((o * c + ch) * kh + i) * kw + j]);
              }
          out[((b * f + o) * oh + y) * ow + xo] = s;
        }
  return out;
}

/// Random ±1 tensor.
template <typename T = float>
sbnn::BasicTensor<T> random_signs(const Shape& s, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.5);
  std::vector<T> v(sbnn::numel_of(s));
  for (auto& x : v) x = b(rng) ? T(1) : T(-1);
  return sbnn::BasicTensor<T>(s, std::move(v));
}

}  // namespace oracle
