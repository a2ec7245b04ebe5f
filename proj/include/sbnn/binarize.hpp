#pragma once

// Sign binarization with straight-through gradients, channel-wise scaled weight
// binarization, and the bit-packed XNOR/popcount inference kernels.

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbnn/ops.hpp"

namespace sbnn {

/// −1 for negative input, +1 otherwise (zero maps to +1).
template <typename T>
constexpr T sign_value(T x) {
  return x < T(0) ? T(-1) : T(1);
}

/// Activation STE pass-through region: closed interval |x| ≤ 1.
template <typename T>
constexpr T activation_ste_mask(T x) {
  return std::abs(x) <= T(1) ? T(1) : T(0);
}

/// Latent-weight STE pass-through region: open interval |w| < 1.
template <typename T>
constexpr T weight_ste_mask(T w) {
  return std::abs(w) < T(1) ? T(1) : T(0);
}

/// Activation binarization. Forward sign, backward upstream·1_{|x|≤1}.
template <typename T>
BasicTensor<T> sign_ste(const BasicTensor<T>& x) {
  return custom_grad(x, [](T v) { return sign_value(v); }, [](T v) { return activation_ste_mask(v); },
                     "sign_ste");
}

/// α_c = mean |W_r| over output channel c (dim 0), accumulated in f64 and
/// rounded once to T.
template <typename T>
std::vector<T> channel_scales(const BasicTensor<T>& w) {
  if (w.rank() < 1 || w.dim(0) == 0 || w.numel() % w.dim(0))
    throw DimensionError("channel_scales: bad weight shape " + shape_str(w.shape()));
  const std::size_t f = w.dim(0), n = w.numel() / f;
  if (n == 0) throw DimensionError("channel_scales: empty channel");
  std::vector<T> alpha(f);
  for (std::size_t c = 0; c < f; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(w[c * n + i]));
    alpha[c] = static_cast<T>(s / static_cast<double>(n));
  }
  return alpha;
}

struct BinarizeWeightsOptions {
  /// Also differentiate through α = ‖W_r‖₁/n (adds sign(W_r)/n · Σ upstream·sign).
  bool scale_grad = true;
};

/// W_b = α_c · sign(W_r) per output channel.
///
/// Backward: upstream·1_{|W_r|<1} on the straight-through path, plus the
/// scale term when `scale_grad` is set.
template <typename T>
BasicTensor<T> binarize_weights(const BasicTensor<T>& w, BinarizeWeightsOptions opt = {}) {
  const auto alpha = channel_scales(w);
  const std::size_t f = w.dim(0), n = w.numel() / f;
  std::vector<T> out(w.numel());
  for (std::size_t c = 0; c < f; ++c)
    for (std::size_t i = 0; i < n; ++i) out[c * n + i] = alpha[c] * sign_value(w[c * n + i]);
  return make_result<T>(w.shape(), std::move(out), {w}, "binarize_weights",
                        [f, n, opt](Node<T>& nd) {
                          T* g = nd.parent_grad(0);
                          if (!g) return;
                          const auto& wv = nd.parents[0]->data;
                          for (std::size_t c = 0; c < f; ++c) {
                            for (std::size_t i = 0; i < n; ++i)
                              g[c * n + i] += nd.grad[c * n + i] * weight_ste_mask(wv[c * n + i]);
                            if (!opt.scale_grad) continue;
                            T dalpha = 0;
                            for (std::size_t i = 0; i < n; ++i)
                              dalpha += nd.grad[c * n + i] * sign_value(wv[c * n + i]);
                            const T k = dalpha / static_cast<T>(n);
                            for (std::size_t i = 0; i < n; ++i) g[c * n + i] += k * sign_value(wv[c * n + i]);
                          }
                        });
}

/// Convolution with two-valued weights W_b = α_f·S_f (as produced by
/// binarize_weights). Forward is computed as α_f · conv(x, S) so that, for ±1
/// inputs, the pre-scale sums are exact integers and match the packed kernel.
/// Backward is the ordinary conv2d backward with respect to (x, W_b). Padding
/// reads −1, the only value a packed activation can hold.
template <typename T>
BasicTensor<T> scaled_sign_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& wb,
                                  std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || wb.rank() != 4 || x.dim(1) != wb.dim(1))
    throw DimensionError("scaled_sign_conv2d: input " + shape_str(x.shape()) + " weight " +
                         shape_str(wb.shape()));
  const auto g = kernels::conv_geometry(x.dim(0), x.dim(1), x.dim(2), x.dim(3), wb.dim(0),
                                        wb.dim(2), wb.dim(3), stride, pad);
  const std::size_t per = g.patch();
  std::vector<T> signs(wb.numel()), alpha(g.f);
  for (std::size_t f = 0; f < g.f; ++f) {
    alpha[f] = std::abs(wb[f * per]);
    for (std::size_t i = 0; i < per; ++i) signs[f * per + i] = sign_value(wb[f * per + i]);
  }
  auto cols = std::make_shared<std::vector<T>>();
  auto out = kernels::conv2d_forward<T>(g, x.data().data(), signs.data(), cols.get(), T(-1));
  const std::size_t hw = g.out_hw();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t f = 0; f < g.f; ++f)
      for (std::size_t i = 0; i < hw; ++i) out[(n * g.f + f) * hw + i] *= alpha[f];
  return make_result<T>(Shape{g.n, g.f, g.oh, g.ow}, std::move(out), {x, wb}, "scaled_sign_conv2d",
                        [g, cols](Node<T>& nd) {
                          kernels::conv2d_backward<T>(g, nd.parents[1]->data.data(), *cols,
                                                      nd.grad.data(), nd.parent_grad(0),
                                                      nd.parent_grad(1));
                        });
}

// ------------------------------------------------------------------ bit packing

/// Bit-packed ±1 tensor. The tensor is viewed as rows of `row_length` values
/// (the innermost dimensions); each row occupies `words_per_row` 64-bit words,
/// LSB-first, bit 1 = +1, bit 0 = −1, with zeroed tail bits.
struct BitTensor {
  Shape shape;
  std::size_t row_length = 0;
  std::size_t words_per_row = 0;
  std::vector<std::uint64_t> words;

  std::size_t rows() const { return words_per_row ? words.size() / words_per_row : 0; }
  std::span<const std::uint64_t> row(std::size_t r) const {
    return std::span<const std::uint64_t>(words).subspan(r * words_per_row, words_per_row);
  }
  std::size_t bytes() const { return words.size() * sizeof(std::uint64_t); }
};

inline std::size_t words_for(std::size_t bits) { return (bits + 63) / 64; }

/// Packs rows of `row_length` consecutive values. Throws ValueError on any
/// value other than ±1.
template <typename T>
BitTensor pack(const BasicTensor<T>& x, std::size_t row_length) {
  if (row_length == 0 || x.numel() % row_length)
    throw DimensionError("pack: row length " + std::to_string(row_length) + " does not divide " +
                         shape_str(x.shape()));
  BitTensor b;
  b.shape = x.shape();
  b.row_length = row_length;
  b.words_per_row = words_for(row_length);
  const std::size_t rows = x.numel() / row_length;
  b.words.assign(rows * b.words_per_row, 0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < row_length; ++i) {
      const T v = x[r * row_length + i];
      if (v == T(1))
        b.words[r * b.words_per_row + i / 64] |= std::uint64_t{1} << (i % 64);
      else if (v != T(-1))
        throw ValueError("pack: value " + std::to_string(static_cast<double>(v)) + " is not ±1");
    }
  return b;
}

/// Packs along the innermost dimension.
template <typename T>
BitTensor pack(const BasicTensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("pack: rank 0");
  return pack(x, x.dim(x.rank() - 1));
}

template <typename T = float>
BasicTensor<T> unpack(const BitTensor& b) {
  std::vector<T> out(b.rows() * b.row_length);
  for (std::size_t r = 0; r < b.rows(); ++r)
    for (std::size_t i = 0; i < b.row_length; ++i)
      out[r * b.row_length + i] = (b.words[r * b.words_per_row + i / 64] >> (i % 64)) & 1u ? T(1) : T(-1);
  return BasicTensor<T>(b.shape, std::move(out));
}

/// Σ a_i·b_i over `n` packed ±1 values: n − 2·popcount(a XOR b), tail masked.
inline std::int64_t xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                             std::size_t n) {
  const std::size_t full = n / 64, tail = n % 64;
  if (a.size() < words_for(n) || b.size() < words_for(n))
    throw DimensionError("xnor_dot: operand shorter than valid length");
  std::int64_t diff = 0;
  for (std::size_t i = 0; i < full; ++i) diff += std::popcount(a[i] ^ b[i]);
  if (tail) {
    const std::uint64_t mask = (std::uint64_t{1} << tail) - 1;
    diff += std::popcount((a[full] ^ b[full]) & mask);
  }
  return static_cast<std::int64_t>(n) - 2 * diff;
}

/// Row-level xnor_dot between two packed tensors.
inline std::int64_t xnor_dot(const BitTensor& a, std::size_t ra, const BitTensor& b, std::size_t rb) {
  if (a.row_length != b.row_length)
    throw DimensionError("xnor_dot: valid lengths differ (" + std::to_string(a.row_length) + " vs " +
                         std::to_string(b.row_length) + ")");
  return xnor_dot(a.row(ra), b.row(rb), a.row_length);
}

namespace detail {
/// ORs `nbits` bits from `src` into `dst` starting at bit `offset`. `dst` tail must be zeroed.
inline void append_bits(std::uint64_t* dst, std::size_t offset, const std::uint64_t* src,
                        std::size_t nbits) {
  const std::size_t shift = offset % 64;
  std::size_t d = offset / 64;
  const std::size_t nwords = words_for(nbits);
  for (std::size_t i = 0; i < nwords; ++i) {
    const std::size_t valid = std::min<std::size_t>(64, nbits - i * 64);
    const std::uint64_t w = valid == 64 ? src[i] : src[i] & ((std::uint64_t{1} << valid) - 1);
    dst[d + i] |= w << shift;
    if (shift && shift + valid > 64) dst[d + i + 1] |= w >> (64 - shift);
  }
}
}  // namespace detail

/// Packed binary convolution.
///
/// `x` holds N×H×W×C activations packed per pixel (row = C bits); `w` holds
/// F×kh×kw×C weights packed per filter (row = kh·kw·C bits). Out-of-bounds taps
/// read as −1. Returns N×F×OH×OW with out = α_f · (integer xnor sum).
template <typename T = float>
BasicTensor<T> binary_conv2d_infer(const BitTensor& x, const BitTensor& w, std::span<const T> alpha,
                                   std::size_t stride, std::size_t pad) {
  if (x.shape.size() != 4 || w.shape.size() != 4)
    throw DimensionError("binary_conv2d_infer: expected NHWC input and FHWC weights");
  const std::size_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3];
  const std::size_t f = w.shape[0], kh = w.shape[1], kw = w.shape[2];
  if (w.shape[3] != c || x.row_length != c || w.row_length != kh * kw * c)
    throw DimensionError("binary_conv2d_infer: packed layouts are inconsistent");
  if (alpha.size() != f) throw DimensionError("binary_conv2d_infer: one scale per filter required");
  const auto g = kernels::conv_geometry(n, c, h, wd, f, kh, kw, stride, pad);
  const std::size_t patch_bits = kh * kw * c;
  std::vector<std::uint64_t> patch(words_for(patch_bits));
  std::vector<T> out(n * f * g.out_hw());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        std::fill(patch.begin(), patch.end(), 0);
        for (std::size_t ki = 0; ki < kh; ++ki)
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(wd))
              continue;  // −1 padding: bits stay zero
            const std::size_t pix = (b * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix);
            detail::append_bits(patch.data(), (ki * kw + kj) * c, x.row(pix).data(), c);
          }
        for (std::size_t ff = 0; ff < f; ++ff) {
          const auto acc = xnor_dot(patch, w.row(ff), patch_bits);
          out[((b * f + ff) * g.oh + oy) * g.ow + ox] = alpha[ff] * static_cast<T>(acc);
        }
      }
  return BasicTensor<T>(Shape{n, f, g.oh, g.ow}, std::move(out));
}

/// N×C×H×W ±1 tensor -> N×H×W×C packed per pixel.
template <typename T>
BitTensor pack_activations_nhwc(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("pack_activations_nhwc: expected N×C×H×W");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> nhwc(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h * w; ++i) nhwc[(b * h * w + i) * c + ch] = x[(b * c + ch) * h * w + i];
  return pack(BasicTensor<T>(Shape{n, h, w, c}, std::move(nhwc)), c);
}

/// F×C×kh×kw weights (any real values; only signs are kept) -> F×kh×kw×C packed per filter.
template <typename T>
BitTensor pack_weights_fhwc(const BasicTensor<T>& w) {
  if (w.rank() != 4) throw DimensionError("pack_weights_fhwc: expected F×C×kh×kw");
  const std::size_t f = w.dim(0), c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  std::vector<T> fhwc(w.numel());
  for (std::size_t a = 0; a < f; ++a)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < kh * kw; ++i)
        fhwc[(a * kh * kw + i) * c + ch] = sign_value(w[(a * c + ch) * kh * kw + i]);
  return pack(BasicTensor<T>(Shape{f, kh, kw, c}, std::move(fhwc)), kh * kw * c);
}

// ------------------------------------------------------------------- diagnostics

/// Fraction of values with |a| ≥ 1 (the region where the activation STE is zero).
template <typename T>
double saturated_fraction(std::span<const T> values) {
  if (values.empty()) return 0.0;
  std::size_t k = 0;
  for (T v : values) k += std::abs(v) >= T(1);
  return static_cast<double>(k) / static_cast<double>(values.size());
}

/// Per-output-channel mean |w|.
template <typename T>
std::vector<double> channel_l1_means(const BasicTensor<T>& w) {
  const std::size_t f = w.dim(0), n = w.numel() / f;
  std::vector<double> m(f);
  for (std::size_t c = 0; c < f; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(w[c * n + i]));
    m[c] = s / static_cast<double>(n);
  }
  return m;
}

}  // namespace sbnn
