#pragma once

// Property suites shared by the unit tests and the acceptance runner. Each
// returns a verdict plus a one-line measurement.

#include <sstream>

#include "gradient_cases.hpp"

namespace props {

using namespace sbnn;

struct Verdict {
  bool ok = true;
  std::string detail;
};

inline Verdict fail(std::string why) { return {false, std::move(why)}; }

template <typename... A>
std::string str(const A&... a) {
  std::ostringstream os;
  os.precision(10);
  (os << ... << a);
  return os.str();
}

// --------------------------------------------------------------- gradients

inline Verdict gradient_oracle(int draws = 3) {
  std::size_t n = 0;
  double worst = 0;
  std::string worst_op;
  for (int d = 0; d < draws; ++d) {
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(d));
    for (auto& c : oracle::gradient_cases(rng)) {
      const double e = oracle::gradcheck(c.fn, c.inputs);
      if (!(e <= worst)) {
        worst = e;
        worst_op = c.name;
      }
      ++n;
    }
  }
  Verdict v{worst < 1e-4 && n >= 50, str(n, " shapes, max rel err ", worst, " (", worst_op, ")")};
  return v;
}

// --------------------------------------------------------------------- STE

/// sign_ste and the straight-through path of binarize_weights pass exactly
/// upstream·mask; the full binarize_weights gradient adds the α term.
inline Verdict ste_contract(int trials = 200) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(-2.5f, 2.5f);
  const float edges[] = {-1.0f, 1.0f, 0.0f, -0.0f, std::nextafter(1.0f, 2.0f), std::nextafter(1.0f, 0.0f)};
  std::size_t checked = 0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t f = 1 + rng() % 4, n = 1 + rng() % 20;
    std::vector<float> xv(f * n), up(f * n);
    for (auto& v : xv) v = (rng() % 5 == 0) ? edges[rng() % 6] : u(rng);
    for (auto& v : up) v = u(rng);
    const Tensor upstream(Shape{f, n}, up);

    Tensor x(Shape{f, n}, xv, true);
    sum(mul(sign_ste(x), upstream)).backward();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const float want = up[i] * (std::abs(xv[i]) <= 1.0f ? 1.0f : 0.0f);
      if (x.grad()[i] != want) return fail(str("sign_ste grad at x=", xv[i], ": ", x.grad()[i], " vs ", want));
      ++checked;
    }

    Tensor w(Shape{f, n}, xv, true);
    sum(mul(binarize_weights(w, {false}), upstream)).backward();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const float want = up[i] * (std::abs(xv[i]) < 1.0f ? 1.0f : 0.0f);
      if (w.grad()[i] != want) return fail(str("binarize_weights STE grad at w=", xv[i], ": ", w.grad()[i], " vs ", want));
      ++checked;
    }

    // Full rule: STE path plus d(α)/dw = sign(w)/n, checked against an f64 oracle.
    Tensor wf(Shape{f, n}, xv, true);
    sum(mul(binarize_weights(wf), upstream)).backward();
    for (std::size_t c = 0; c < f; ++c) {
      double da = 0;
      for (std::size_t i = 0; i < n; ++i) da += static_cast<double>(up[c * n + i]) * sign_value<double>(xv[c * n + i]);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = c * n + i;
        const double want = up[k] * (std::abs(xv[k]) < 1.0f ? 1.0 : 0.0) + da / static_cast<double>(n) * sign_value<double>(xv[k]);
        if (std::abs(wf.grad()[k] - want) > 1e-5 * (1 + std::abs(want)))
          return fail(str("binarize_weights α-path grad ", wf.grad()[k], " vs ", want));
      }
    }
  }
  return {true, str(checked, " gradient entries exact (activation mask |x|<=1, weight mask |w|<1)")};
}

// ------------------------------------------------------------------- XNOR

inline Verdict xnor_equivalence(int instances = 500) {
  std::mt19937_64 rng(11);
  std::size_t non64 = 0;
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = 1 + rng() % 513;
    non64 += n % 64 != 0;
    const Tensor a = oracle::random_signs<float>({1, n}, rng), b = oracle::random_signs<float>({1, n}, rng);
    double ref = 0;
    for (std::size_t i = 0; i < n; ++i) ref += static_cast<double>(a[i]) * b[i];
    const auto got = xnor_dot(pack(a), 0, pack(b), 0);
    if (static_cast<double>(got) != ref) return fail(str("xnor_dot n=", n, ": ", got, " vs ", ref));
  }
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = 1 + rng() % 2, c = 1 + rng() % 70, f = 1 + rng() % 4, k = 1 + 2 * (rng() % 2);
    const std::size_t h = k + rng() % 5, w = k + rng() % 5, stride = 1 + rng() % 2, pad = rng() % 2;
    const Tensor x = oracle::random_signs<float>({n, c, h, w}, rng);
    const Tensor wt = oracle::random_signs<float>({f, c, k, k}, rng);
    std::vector<float> alpha(f);
    for (auto& a : alpha) a = std::uniform_real_distribution<float>(0.01f, 2.0f)(rng);
    const Tensor y = binary_conv2d_infer<float>(pack_activations_nhwc(x), pack_weights_fhwc(wt), alpha, stride, pad);
    const auto ref = oracle::conv_ref(x, wt, stride, pad, -1.0);
    if (y.numel() != ref.size()) return fail("binary_conv2d_infer output size");
    const std::size_t per = ref.size() / (n * f);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const float a = alpha[(i / per) % f];
      if (y[i] != a * static_cast<float>(ref[i]))
        return fail(str("binary_conv2d_infer c=", c, " k=", k, ": ", y[i], " vs ", a, "*", ref[i]));
    }
  }
  return {true, str(2 * instances, " instances exact (", non64, " dot lengths not divisible by 64)")};
}

// ------------------------------------------------------------------ KL≡CE

inline Verdict kl_ce_equivalence(int batches = 100) {
  std::mt19937_64 rng(13);
  double worst = 0;
  for (int t = 0; t < batches; ++t) {
    const std::size_t n = 1 + rng() % 16, c = 2 + rng() % 64, d = 1 + rng() % 8;
    const double tau = std::uniform_real_distribution<double>(0.05, 2.0)(rng);
    const Tensor teacher = cast<float>(oracle::randn({n, c}, rng, 3.0, false));
    const Tensor x = cast<float>(oracle::randn({n, d}, rng, 1.0, false));
    const Tensor w0 = cast<float>(oracle::randn({c, d}, rng, 1.0, false));
    auto grads = [&](bool kl) {
      Tensor w = w0.clone();
      w.set_requires_grad(true);
      Tensor s = linear(x, w, Tensor());
      (kl ? distill_kl(teacher, s, tau) : distill_ce(teacher, s, tau)).backward();
      return std::vector<float>(w.grad().begin(), w.grad().end());
    };
    const auto gk = grads(true), gc = grads(false);
    for (std::size_t i = 0; i < gk.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(gk[i] - gc[i])));
  }
  return {worst <= 1e-6, str(batches, " batches, max |grad_KL - grad_CE| over student weights = ", worst)};
}

// ---------------------------------------------------------------- InfoNCE

inline Verdict info_nce_closed_forms() {
  std::mt19937_64 rng(17);
  double worst = 0;
  for (std::size_t k : {1u, 7u, 63u}) {
    for (double tau : {0.07, 0.2, 1.0}) {
      // all similarities equal to 1: every key is the query itself
      TensorD q1 = oracle::randn({1, 16}, rng, 1.0, false);
      {
        NoGradGuard ng;
        q1 = l2_normalize(q1).detach();
      }
      std::vector<double> nv;
      for (std::size_t i = 0; i < k; ++i) nv.insert(nv.end(), q1.data().begin(), q1.data().end());
      const double l1 = info_nce(q1, q1, TensorD(Shape{k, 16}, nv), tau).item();
      // all similarities 0: positive and negatives orthogonal to the query
      TensorD e0 = TensorD::zeros({1, 2}), e1 = TensorD::zeros({1, 2});
      e0[0] = 1;
      e1[1] = 1;
      std::vector<double> ov;
      for (std::size_t i = 0; i < k; ++i) ov.insert(ov.end(), {0.0, 1.0});
      const double l0 = info_nce(e0, e1, TensorD(Shape{k, 2}, ov), tau).item();
      const double want = std::log(static_cast<double>(k + 1));
      worst = std::max({worst, std::abs(l1 - want), std::abs(l0 - want)});
    }
  }
  if (worst >= 1e-9) return fail(str("all-equal similarities deviate from ln(K+1) by ", worst));
  // monotone in the positive similarity with negatives fixed
  const TensorD q = TensorD::from({1.0, 0.0}, {1, 2});
  std::vector<double> nv;
  for (int i = 0; i < 7; ++i) {
    const double th = 0.5 + 0.3 * i;
    nv.insert(nv.end(), {std::cos(th), std::sin(th)});
  }
  const TensorD neg(Shape{7, 2}, nv);
  double prev = INFINITY;
  for (int i = 0; i <= 60; ++i) {
    const double th = M_PI * (1.0 - i / 60.0);  // similarity cos(th) rises from -1 to 1
    const double l = info_nce(q, TensorD::from({std::cos(th), std::sin(th)}, {1, 2}), neg, 0.2).item();
    if (!(l < prev)) return fail(str("loss not decreasing at step ", i, ": ", l, " >= ", prev));
    prev = l;
  }
  return {true, str("K in {1,7,63}: max |L - ln(K+1)| = ", worst, "; strictly decreasing over 61 positive similarities")};
}

// --------------------------------------------------------- optimizer/schedule

inline Verdict scheduler_optimizer_values() {
  const double lr = LrSchedule{3e-4, 200}.lr_at(100);
  if (lr != 1.5e-4) return fail(str("lr_at(3e-4,200,100) = ", lr));

  Tensor th = Tensor::zeros({1}, true);
  OptimizerConfig sc;
  sc.kind = OptimizerKind::sgd;
  sc.lr = 0.1;
  sc.momentum = 0.9;
  Optimizer sgd({th}, sc);
  th.zero_grad();
  for (int i = 0; i < 2; ++i) {
    th.grad()[0] = 1.0f;
    sgd.step();
  }
  if (th[0] != -0.29f) return fail(str("SGD two-step theta = ", th[0]));

  BasicTensor<double> p = BasicTensor<double>::zeros({1}, true);
  OptimizerConfig ac;
  ac.kind = OptimizerKind::adam;
  ac.lr = 1e-3;
  BasicOptimizer<double> adam({p}, ac);
  p.zero_grad();
  p.grad()[0] = 0.1;
  adam.step();
  const double rel = std::abs(std::abs(p[0]) - 1e-3) / 1e-3;
  if (rel >= 1e-6) return fail(str("Adam step-1 |dtheta| = ", std::abs(p[0]), " (rel ", rel, ")"));
  return {true, str("lr_at=", lr, " sgd theta=", th[0], " adam |dtheta|=", std::abs(p[0]), " (rel ", rel, ")")};
}

// -------------------------------------------------------------------- OPs

inline Verdict ops_cross_check() {
  const double react = ops_from_counts(4.82e9, 0.12e8), bireal = ops_from_counts(1.68e9, 1.39e8);
  const double e1 = std::abs(react - 0.87e8) / 0.87e8, e2 = std::abs(bireal - 1.63e8) / 1.63e8;
  return {e1 < 0.02 && e2 < 0.02,
          str("ReActNet-row OPs ", react, " (", 100 * e1, "% off), Bi-Real-row OPs ", bireal, " (", 100 * e2, "% off)")};
}

// ------------------------------------------------------------- checkpoints

/// A toy-bin model with every parameter and buffer randomised, so BN, PReLU
/// and α are all non-trivial.
inline SslModel randomised_model(std::uint64_t seed, BinMode mode = BinMode::fully_bin, std::size_t width = 16) {
  ModelSpec s;
  s.width = width;
  s.mode = mode;
  s.seed = seed;
  SslModel m(s);
  std::mt19937_64 rng(seed * 31 + 5);
  std::uniform_real_distribution<float> u(-1.2f, 1.2f), pos(0.5f, 2.0f);
  for (auto& nt : m.parameters()) {
    Tensor t = nt.tensor;
    const bool scale_like = nt.name.ends_with(".gamma") || nt.name.ends_with(".slope");
    for (auto& v : t.data()) v = scale_like ? pos(rng) * 0.5f : u(rng) * (nt.name.ends_with("weight") ? 0.5f : 0.2f);
  }
  for (auto& nt : m.buffers()) {
    Tensor t = nt.tensor;
    const bool var = nt.name.ends_with("running_var");
    for (auto& v : t.data()) v = var ? pos(rng) : u(rng) * 0.3f;
  }
  return m;
}

inline Verdict checkpoint_suite(int fuzz = 1000, int export_inputs = 100) {
  SslModel m = randomised_model(3);
  Normalization norm{{0.5f, 0.4f, 0.3f}, {0.2f, 0.25f, 0.3f}};
  const Checkpoint ck = to_checkpoint(m, Stage::pretrain_step2, Scheme::cl, 7, &norm);
  const auto bytes = serialize(ck);
  const Checkpoint back = deserialize(bytes);
  if (serialize(back) != bytes) return fail("serialize(deserialize(bytes)) differs");
  const std::string path = "sbnn_props_roundtrip.s2bn";
  save_checkpoint(ck, path);
  if (serialize(load_checkpoint(path)) != bytes) return fail("file roundtrip differs");
  std::remove(path.c_str());
  if (state_hash(model_from_checkpoint(back)) != state_hash(m)) return fail("restored model state differs");

  std::mt19937_64 rng(19);
  int caught = 0;
  for (int i = 0; i < fuzz; ++i) {
    auto bad = bytes;
    const std::size_t at = rng() % bad.size();
    bad[at] ^= static_cast<std::uint8_t>(1 + rng() % 255);
    try {
      deserialize(bad);
    } catch (const FormatError&) {
      ++caught;
    }
  }
  if (caught != fuzz) return fail(str("CRC caught ", caught, "/", fuzz, " corruptions"));

  const PackedModel pm(export_binary(ck));
  double worst = 0;
  for (int i = 0; i < export_inputs; ++i) {
    const Tensor x = cast<float>(oracle::randn({1, 3, 32, 32}, rng, 1.0, false));
    NoGradGuard ng;
    const Tensor a = m.forward(x, false), b = pm.forward(x);
    for (std::size_t j = 0; j < a.numel(); ++j) worst = std::max(worst, static_cast<double>(std::abs(a[j] - b[j])));
  }
  if (!(worst <= 1e-4)) return fail(str("export max |logit diff| = ", worst));
  return {true, str(bytes.size(), "-byte roundtrip identical; CRC caught ", caught, "/", fuzz,
                    "; export max |logit diff| over ", export_inputs, " inputs = ", worst)};
}

// ----------------------------------------------------------- inheritance

inline Verdict progressive_inheritance() {
  RunConfig cfg;
  cfg.width = 16;
  SslModel step1 = randomised_model(23, BinMode::bin_act_only, cfg.width);
  const Checkpoint ck1 = deserialize(serialize(to_checkpoint(step1, Stage::pretrain_step1, Scheme::cl, 5)));
  const SslModel step2 = inherit_step2(ck1, cfg);
  if (step2.backbone().mode() != BinMode::fully_bin) return fail("step-2 model is not fully binary");
  std::size_t n = 0;
  for (std::size_t b = 0; b < step1.backbone().blocks().size(); ++b) {
    const Tensor& w1 = step1.backbone().blocks()[b].conv().weight();
    const Tensor& w2 = step2.backbone().blocks()[b].conv().weight();
    for (std::size_t i = 0; i < w1.numel(); ++i) {
      if (sign_value(w1[i]) != sign_value(w2[i]) || w1[i] != w2[i])
        return fail(str("block ", b, " latent ", i, ": ", w1[i], " -> ", w2[i]));
      ++n;
    }
  }
  return {true, str(n, " latent weights inherited bit-exactly; signs identical")};
}

// ------------------------------------------------------------ determinism

inline Verdict pretrain_determinism() {
  const Dataset d = make_synthetic({4, 192, 10, {3, 32, 32}});
  RunConfig base;
  base.epochs = 2;
  base.batch = 64;
  base.width = 16;
  base.queue_size = 256;
  base.seed = 0;

  RunConfig two = base;
  two.plan = Plan::two_step;
  two.step1_epochs = 1;
  two.epochs = 1;

  RunConfig kd = base;
  kd.scheme = Scheme::kd;
  {
    ModelSpec ts;
    ts.arch = ArchId::teacher_real;
    ts.mode = BinMode::real;
    ts.width = 16;
    ts.seed = 77;
    kd.teacher = to_checkpoint(SslModel(ts), Stage::pretrain_step2, Scheme::cl, 0);
  }

  std::string out;
  for (const auto& [name, cfg] : std::vector<std::pair<std::string, RunConfig>>{{"cl one-step", base}, {"cl two-step", two}, {"kd offline", kd}}) {
    const auto a = serialize(pretrain(cfg, d.unlabeled()).checkpoint);
    const auto b = serialize(pretrain(cfg, d.unlabeled()).checkpoint);
    if (a != b) return fail(name + ": checkpoints differ between identical runs");
    out += (out.empty() ? "" : "; ") + name + " ok (" + std::to_string(a.size()) + " B, crc " +
           std::to_string(crc32_of(a.data(), a.size() - 4)) + ")";
  }
  return {true, out};
}

// ------------------------------------------------------------------ bench

inline Verdict bench_and_size(double seconds = 0.3) {
  const auto b = bench_xnor(4096, seconds);
  SslModel m(ModelSpec{});  // toy-bin, width 32, fully binary
  const auto sz = packed_size(export_binary(to_checkpoint(m, Stage::pretrain_step2, Scheme::cl, 0)));
  const bool ok = b.speedup >= 8.0 && sz.packed_bytes * 24 <= sz.real_bytes;
  return {ok, str("xnor ", b.xnor_ns, " ns vs scalar f32 ", b.f32_ns, " ns (", b.speedup, "x; Eigen f32 ", b.f32_simd_ns,
                  " ns); packed ", sz.packed_bytes, " B vs real ", sz.real_bytes, " B (1/",
                  static_cast<double>(sz.real_bytes) / static_cast<double>(sz.packed_bytes), ")")};
}

}  // namespace props
