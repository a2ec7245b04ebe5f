#pragma once

// Contrastive (InfoNCE with a negatives queue) and guided-distillation losses,
// and the combiner for the three training schemes.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sbnn/ops.hpp"

namespace sbnn {

inline constexpr double kDefaultTemperature = 0.2;

namespace detail {
template <typename T>
void require_unit_rows(const BasicTensor<T>& x, const char* what, double tol = 1e-5) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(x[i * d + j]) * x[i * d + j];
    if (std::abs(std::sqrt(s) - 1.0) > tol)
      throw ValueError(std::string(what) + ": row " + std::to_string(i) + " is not unit-norm");
  }
}

inline void require_tau(double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
}
}  // namespace detail

/// InfoNCE over one positive and K queued negatives, averaged over the batch:
/// −log( e^{s⁺/τ} / (e^{s⁺/τ} + Σ_k e^{s_k/τ}) ), s = dot product of unit vectors.
/// `negatives` (K×d) is treated as a constant.
template <typename T>
BasicTensor<T> info_nce(const BasicTensor<T>& query, const BasicTensor<T>& positive,
                        const BasicTensor<T>& negatives, double tau) {
  detail::require_tau(tau);
  if (query.rank() != 2 || positive.shape() != query.shape())
    throw DimensionError("info_nce: query/positive shapes " + shape_str(query.shape()) + " vs " +
                         shape_str(positive.shape()));
  if (negatives.rank() != 2 || negatives.dim(0) == 0)
    throw ConfigError("info_nce: at least one negative is required");
  if (negatives.dim(1) != query.dim(1)) throw DimensionError("info_nce: negative key dim mismatch");
  detail::require_unit_rows(query, "info_nce query");
  detail::require_unit_rows(positive, "info_nce positive");
  detail::require_unit_rows(negatives, "info_nce negatives");

  const std::size_t n = query.dim(0);
  const BasicTensor<T> neg = negatives.detach();
  auto pos = reshape(sum_axis(mul(query, positive), 1), Shape{n, 1});
  auto negs = linear(query, neg, BasicTensor<T>());
  auto logits = scale(concat_cols(pos, negs), static_cast<T>(1.0 / tau));
  std::vector<std::int64_t> target(n, 0);
  return nll_loss(log_softmax(logits, -1), target);
}

/// Fixed-size FIFO of detached unit-norm keys.
class NegativeQueue {
 public:
  NegativeQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim), buf_(capacity * dim) {
    if (capacity == 0 || dim == 0) throw ConfigError("queue size and key dim must be positive");
  }

  /// Fills the queue with random unit vectors.
  void fill_random(std::mt19937_64& rng) {
    std::normal_distribution<float> d(0.f, 1.f);
    for (std::size_t r = 0; r < capacity_; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < dim_; ++j) s += std::pow(buf_[r * dim_ + j] = d(rng), 2);
      const float inv = static_cast<float>(1.0 / std::sqrt(s));
      for (std::size_t j = 0; j < dim_; ++j) buf_[r * dim_ + j] *= inv;
    }
    size_ = capacity_;
    head_ = 0;
  }

  /// Enqueues rows of `keys`, evicting the oldest when full.
  void push(const Tensor& keys) {
    if (keys.rank() != 2 || keys.dim(1) != dim_)
      throw DimensionError("queue push: key dim " + shape_str(keys.shape()) + " vs " + std::to_string(dim_));
    for (std::size_t r = 0; r < keys.dim(0); ++r) {
      std::copy_n(keys.data().begin() + r * dim_, dim_, buf_.begin() + head_ * dim_);
      head_ = (head_ + 1) % capacity_;
      size_ = std::min(size_ + 1, capacity_);
    }
  }

  /// Current contents, oldest first, as a constant (no-grad) tensor.
  Tensor contents() const {
    std::vector<float> out(size_ * dim_);
    const std::size_t start = (head_ + capacity_ - size_) % capacity_;
    for (std::size_t i = 0; i < size_; ++i)
      std::copy_n(buf_.begin() + ((start + i) % capacity_) * dim_, dim_, out.begin() + i * dim_);
    return Tensor(Shape{size_, dim_}, std::move(out));
  }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t capacity_, dim_;
  std::vector<float> buf_;
  std::size_t head_ = 0, size_ = 0;
};

/// softmax(teacher/τ) without tape history.
template <typename T>
BasicTensor<T> teacher_distribution(const BasicTensor<T>& teacher_logits, double tau) {
  detail::require_tau(tau);
  NoGradGuard ng;
  return softmax(scale(teacher_logits.detach(), static_cast<T>(1.0 / tau)), -1);
}

/// Mean entropy of softmax(teacher/τ) rows.
template <typename T>
T teacher_entropy(const BasicTensor<T>& teacher_logits, double tau) {
  NoGradGuard ng;
  auto logp = log_softmax(scale(teacher_logits.detach(), static_cast<T>(1.0 / tau)), -1);
  T h = 0;
  for (std::size_t i = 0; i < logp.numel(); ++i) h -= std::exp(logp[i]) * logp[i];
  return h / static_cast<T>(teacher_logits.dim(0));
}

namespace detail {
template <typename T>
void require_distill_shapes(const BasicTensor<T>& t, const BasicTensor<T>& s) {
  if (t.rank() != 2 || t.shape() != s.shape() || t.dim(0) == 0)
    throw DimensionError("distillation: teacher " + shape_str(t.shape()) + " vs student " +
                         shape_str(s.shape()));
}

/// Row-wise softmax and log-softmax of x/τ. Both sides of the distillation
/// losses go through this routine, so equal logits give bit-equal
/// distributions.
template <typename T>
void tempered_softmax(std::span<const T> x, std::size_t n, std::size_t c, double tau, std::vector<T>& prob,
                      std::vector<T>& logp) {
  const T inv = static_cast<T>(1.0 / tau);
  prob.resize(n * c);
  logp.resize(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("distillation: non-finite logit");
      mx = std::max(mx, row[j] * inv);
    }
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] * inv - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      logp[i * c + j] = row[j] * inv - lse;
      prob[i * c + j] = std::exp(logp[i * c + j]);
    }
  }
}

/// Shared graph node for CE and KL: the loss value differs by the teacher
/// entropy, the student gradient is (q − p)/(τN) for both.
template <typename T>
BasicTensor<T> distill_loss(const BasicTensor<T>& teacher_logits, const BasicTensor<T>& student_logits, double tau,
                            bool subtract_entropy, const char* op) {
  require_tau(tau);
  require_distill_shapes(teacher_logits, student_logits);
  const std::size_t n = student_logits.dim(0), c = student_logits.dim(1);
  std::vector<T> p, logp, q, logq;
  tempered_softmax<T>(teacher_logits.data(), n, c, tau, p, logp);
  tempered_softmax<T>(student_logits.data(), n, c, tau, q, logq);
  T loss = 0;
  for (std::size_t k = 0; k < n * c; ++k) loss += p[k] * ((subtract_entropy ? logp[k] : T(0)) - logq[k]);
  loss /= static_cast<T>(n);
  const T coef = static_cast<T>(1.0 / (tau * static_cast<double>(n)));
  // Only the student is a graph input: the teacher side is a constant.
  return make_result<T>(Shape{1}, {loss}, {student_logits}, op,
                        [p = std::move(p), q = std::move(q), coef](Node<T>& nd) {
                          if (T* g = nd.parent_grad(0))
                            for (std::size_t k = 0; k < p.size(); ++k) g[k] += nd.grad[0] * coef * (q[k] - p[k]);
                        });
}
}  // namespace detail

/// −(1/N) Σ_i Σ_c softmax(t_i/τ)_c · log softmax(s_i/τ)_c. Teacher side is detached.
template <typename T>
BasicTensor<T> distill_ce(const BasicTensor<T>& teacher_logits, const BasicTensor<T>& student_logits,
                          double tau) {
  return detail::distill_loss(teacher_logits, student_logits, tau, false, "distill_ce");
}

/// (1/N) Σ_i KL(softmax(t_i/τ) ‖ softmax(s_i/τ)) = distill_ce − H(teacher).
template <typename T>
BasicTensor<T> distill_kl(const BasicTensor<T>& teacher_logits, const BasicTensor<T>& student_logits,
                          double tau) {
  return detail::distill_loss(teacher_logits, student_logits, tau, true, "distill_kl");
}

// --------------------------------------------------------------------- schemes

/// ① contrastive only, ② contrastive + distillation, ③ distillation only.
enum class Scheme : std::uint8_t { cl = 1, cl_kd = 2, kd = 3 };

inline Scheme parse_scheme(const std::string& s) {
  if (s == "cl" || s == "1") return Scheme::cl;
  if (s == "cl+kd" || s == "2") return Scheme::cl_kd;
  if (s == "kd" || s == "3") return Scheme::kd;
  throw ConfigError("unknown scheme '" + s + "' (expected cl, cl+kd or kd)");
}

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::cl: return "cl";
    case Scheme::cl_kd: return "cl+kd";
    case Scheme::kd: return "kd";
  }
  return "?";
}

inline bool uses_contrastive(Scheme s) { return s != Scheme::kd; }
inline bool uses_distillation(Scheme s) { return s != Scheme::cl; }

struct ContrastiveInputs {
  Tensor query, positive, negatives;
  double tau = kDefaultTemperature;
};

struct DistillInputs {
  Tensor teacher_logits, student_logits;
  double tau = kDefaultTemperature;
};

struct SchemeLoss {
  Tensor total;
  std::optional<float> contrastive;
  std::optional<float> distill;
};

/// Combines the objectives of a scheme with unit weights. Inputs a scheme
/// does not use are ignored.
inline SchemeLoss scheme_loss(Scheme scheme, const std::optional<ContrastiveInputs>& cl,
                              const std::optional<DistillInputs>& kd) {
  SchemeLoss out;
  std::optional<Tensor> lcl, lkd;
  if (uses_contrastive(scheme)) {
    if (!cl) throw ConfigError(std::string("scheme ") + to_string(scheme) + " needs contrastive inputs");
    if (cl->negatives.numel() == 0 || cl->negatives.dim(0) == 0)
      throw ConfigError("contrastive scheme needs at least one negative (queue size 0)");
    lcl = info_nce(cl->query, cl->positive, cl->negatives, cl->tau);
    out.contrastive = lcl->item();
  }
  if (uses_distillation(scheme)) {
    if (!kd) throw ConfigError(std::string("scheme ") + to_string(scheme) + " needs distillation inputs");
    lkd = distill_kl(kd->teacher_logits, kd->student_logits, kd->tau);
    out.distill = lkd->item();
  }
  if (lcl && lkd)
    out.total = add(*lcl, *lkd);
  else
    out.total = lcl ? *lcl : *lkd;
  return out;
}

}  // namespace sbnn
