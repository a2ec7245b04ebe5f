#pragma once

// Training orchestration: self-supervised pre-training under the three
// schemes (online or offline teacher), two-step progressive binarization,
// linear evaluation, fine-tuning, operation counting, packed export,
// saturation diagnostics and the xnor throughput bench.

#include <chrono>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnn/checkpoint.hpp"
#include "sbnn/data.hpp"
#include "sbnn/losses.hpp"
#include "sbnn/optim.hpp"

namespace sbnn {

// ----------------------------------------------------------------- ssl model

struct ModelSpec {
  ArchId arch = ArchId::toy_bin;
  std::size_t width = 32;
  BinMode mode = BinMode::fully_bin;
  std::size_t in_channels = 3;
  std::size_t head_dim = ProjectionHead::kDefaultDim;
  std::uint64_t seed = 0;
  float latent_init = 0.5f;
};

/// Backbone plus l2-normalised projection head.
class SslModel {
 public:
  SslModel() = default;
  explicit SslModel(const ModelSpec& spec) : spec_(spec) {
    BackboneConfig bc;
    bc.arch = spec.arch;
    bc.width = spec.width;
    bc.mode = spec.mode;
    bc.in_channels = spec.in_channels;
    bc.seed = spec.seed;
    bc.latent_init = spec.latent_init;
    backbone_ = Backbone(bc);
    spec_.mode = backbone_.mode();
    std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    head_ = ProjectionHead(backbone_.feature_dim(), spec.head_dim, true, rng);
  }

  Tensor forward(const Tensor& x, bool training) { return head_.forward(backbone_.forward(x, training)); }
  /// Head output before normalisation; the distillation targets live here.
  Tensor forward_raw(const Tensor& x, bool training) { return head_.raw(backbone_.forward(x, training)); }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (auto& nt : backbone_.parameters()) out.push_back({"backbone." + nt.name, nt.tensor});
    std::vector<NamedTensor> h;
    head_.collect("head", h);
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }
  std::vector<NamedTensor> buffers() const {
    std::vector<NamedTensor> out;
    for (auto& nt : backbone_.buffers()) out.push_back({"backbone." + nt.name, nt.tensor});
    return out;
  }
  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    for (auto& nt : parameters()) out.push_back(nt.tensor);
    return out;
  }

  void set_mode(BinMode m) {
    backbone_.set_mode(m);
    spec_.mode = m;
  }

  const ModelSpec& spec() const { return spec_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  const ProjectionHead& head() const { return head_; }

 private:
  ModelSpec spec_;
  Backbone backbone_;
  ProjectionHead head_;
};

inline StateDict state_of(const SslModel& m) {
  StateDict s;
  append_state(s, "", m.parameters());
  append_state(s, "", m.buffers());
  return s;
}

inline void load_state(SslModel& m, const StateDict& s) {
  copy_into(m.parameters(), s);
  copy_into(m.buffers(), s);
}

/// Independent copy with identical values.
inline SslModel clone_model(const SslModel& m) {
  SslModel out(m.spec());
  load_state(out, state_of(m));
  return out;
}

inline Checkpoint to_checkpoint(const SslModel& m, Stage stage, Scheme scheme, std::uint32_t epoch,
                                const Normalization* norm = nullptr) {
  Checkpoint ck;
  ck.header.stage = static_cast<std::uint8_t>(stage);
  ck.header.scheme = static_cast<std::uint8_t>(scheme);
  ck.header.arch = static_cast<std::uint8_t>(m.spec().arch);
  ck.header.mode = static_cast<std::uint8_t>(m.spec().mode);
  ck.header.width = static_cast<std::uint32_t>(m.spec().width);
  ck.header.epoch = epoch;
  for (auto& [k, v] : state_of(m)) ck.tensors.emplace(k, v);
  if (norm) {
    ck.tensors.emplace("data.mean", Tensor(Shape{norm->mean.size()}, norm->mean));
    ck.tensors.emplace("data.std", Tensor(Shape{norm->std.size()}, norm->std));
  }
  return ck;
}

inline ModelSpec spec_from_checkpoint(const Checkpoint& ck) {
  if (ck.header.arch > static_cast<std::uint8_t>(ArchId::teacher_real)) throw FormatError("unknown arch id", 12);
  if (ck.header.mode > static_cast<std::uint8_t>(BinMode::fully_bin)) throw FormatError("unknown mode id", 13);
  ModelSpec s;
  s.arch = static_cast<ArchId>(ck.header.arch);
  s.mode = static_cast<BinMode>(ck.header.mode);
  s.width = ck.header.width;
  s.in_channels = ck.tensor("backbone.stem.conv.weight").dim(1);
  s.head_dim = ck.tensor("head.fc2.weight").dim(0);
  return s;
}

inline SslModel model_from_checkpoint(const Checkpoint& ck) {
  SslModel m(spec_from_checkpoint(ck));
  StateDict s(ck.tensors.begin(), ck.tensors.end());
  load_state(m, s);
  return m;
}

inline std::optional<Normalization> normalization_from(const Checkpoint& ck) {
  if (!ck.tensors.count("data.mean") || !ck.tensors.count("data.std")) return std::nullopt;
  Normalization n;
  const auto& m = ck.tensor("data.mean");
  const auto& s = ck.tensor("data.std");
  n.mean.assign(m.data().begin(), m.data().end());
  n.std.assign(s.data().begin(), s.data().end());
  return n;
}

/// FNV-1a over parameter and buffer bytes.
inline std::uint64_t state_hash(const SslModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::vector<NamedTensor>& ts) {
    for (const auto& nt : ts) {
      const auto* p = reinterpret_cast<const unsigned char*>(nt.tensor.data().data());
      for (std::size_t i = 0; i < nt.tensor.numel() * sizeof(float); ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
    }
  };
  feed(m.parameters());
  feed(m.buffers());
  return h;
}

// ----------------------------------------------------------------- run config

enum class TeacherMode : std::uint8_t { online, offline };
enum class Plan : std::uint8_t { one_step, two_step };

inline Plan parse_plan(const std::string& s) {
  if (s == "one-step") return Plan::one_step;
  if (s == "two-step") return Plan::two_step;
  throw ConfigError("unknown binarization plan '" + s + "'");
}
inline const char* to_string(Plan p) { return p == Plan::one_step ? "one-step" : "two-step"; }

struct EpochLog {
  Stage stage;
  int epoch;  // within the stage
  double lr;
  double loss;
  double contrastive;  // mean over steps, 0 when unused
  double distill;
};

struct RunConfig {
  Scheme scheme = Scheme::cl;
  TeacherMode teacher_mode = TeacherMode::offline;
  std::optional<Checkpoint> teacher;  // offline teacher, or online initialisation
  Plan plan = Plan::one_step;
  ArchId arch = ArchId::toy_bin;
  std::size_t width = 32;
  std::size_t head_dim = ProjectionHead::kDefaultDim;
  float latent_init = 0.5f;
  OptimizerConfig optim;          // weight_decay here is ignored, see below
  double weight_decay = kDefaultStep2WeightDecay;  // λ of the final (fully binary) stage
  int epochs = 30;
  int step1_epochs = -1;          // two-step only; < 0 means `epochs`
  std::size_t batch = 128;
  std::uint64_t seed = 0;
  AugVariant aug = AugVariant::lite;
  double tau = kDefaultTemperature;
  std::size_t queue_size = 4096;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Schedule of one training stage.
struct StageSpec {
  Stage stage = Stage::pretrain_step2;
  BinMode mode = BinMode::fully_bin;
  int epochs = 1;
  double weight_decay = 0.0;
  int epoch_offset = 0;  // augmentation epochs already consumed by earlier stages
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  bool used_queue = false;
  std::optional<Checkpoint> step1;  // two-step plan only
};

// ------------------------------------------------------------------ trainer

/// Mean loss terms of one step.
struct StepLosses {
  double total = 0, contrastive = 0, distill = 0;
};

/// Student (and teacher) state plus data stream for one pre-training run.
class Pretrainer {
 public:
  Pretrainer(const RunConfig& cfg, const UnlabeledImages& images, SslModel student)
      : cfg_(cfg), norm_(compute_normalization(images)),
        loader_(images, AugConfig::of(cfg.aug), cfg.batch, cfg.seed, norm_), student_(std::move(student)) {
    if (cfg.tau <= 0) throw ConfigError("temperature must be positive");
    if (uses_distillation(cfg.scheme)) {
      if (cfg.teacher) {
        teacher_ = model_from_checkpoint(*cfg.teacher);
      } else if (cfg.teacher_mode == TeacherMode::online) {
        ModelSpec ts;
        ts.arch = ArchId::teacher_real;
        ts.mode = BinMode::real;
        ts.width = cfg.width;
        ts.in_channels = images.shape.c;
        ts.head_dim = cfg.head_dim;
        ts.seed = cfg.seed + 7919;
        teacher_ = SslModel(ts);
      } else {
        throw ConfigError(std::string("scheme ") + to_string(cfg.scheme) + " needs a teacher checkpoint");
      }
      if (teacher_->spec().head_dim != student_.spec().head_dim)
        throw DimensionError("teacher and student projection dims differ");
      if (cfg.teacher_mode == TeacherMode::offline) teacher_->backbone().set_track_running_stats(false);
    }
    std::mt19937_64 qrng(sample_seed(cfg.seed, 0xfeed, 0));
    if (uses_contrastive(cfg.scheme)) {
      if (cfg.queue_size == 0) throw ConfigError("contrastive schemes need a non-empty negative queue");
      queue_.emplace(cfg.queue_size, cfg.head_dim);
      queue_->fill_random(qrng);
    }
    if (online()) {
      if (cfg.queue_size == 0) throw ConfigError("online teacher training needs a non-empty negative queue");
      teacher_queue_.emplace(cfg.queue_size, cfg.head_dim);
      teacher_queue_->fill_random(qrng);
    }
  }

  bool online() const { return teacher_ && cfg_.teacher_mode == TeacherMode::online; }

  void run_stage(const StageSpec& st, std::vector<EpochLog>& log) {
    if (st.stage == Stage::pretrain_step1 && st.weight_decay != 0.0)
      throw ConfigError("weight decay must be zero in the first progressive-binarization step");
    if (st.epochs <= 0) throw ConfigError("stage needs at least one epoch");
    student_.set_mode(st.mode);
    OptimizerConfig oc = cfg_.optim;
    oc.weight_decay = st.weight_decay;
    Optimizer opt(student_.parameter_tensors(), oc);  // fresh moments every stage
    std::optional<Optimizer> topt;
    if (online()) {
      OptimizerConfig tc = cfg_.optim;
      tc.weight_decay = 0.0;
      topt.emplace(teacher_->parameter_tensors(), tc);
    }
    const LrSchedule sched{cfg_.optim.lr, st.epochs};
    for (int e = 0; e < st.epochs; ++e) {
      const double lr = sched.lr_at(e);
      opt.set_lr(lr);
      if (topt) topt->set_lr(lr);
      double tot = 0, cl = 0, kd = 0;
      const std::size_t nb = loader_.batches_per_epoch();
      for (std::size_t b = 0; b < nb; ++b) {
        const auto batch = loader_.batch(static_cast<std::uint64_t>(st.epoch_offset + e), b);
        const auto l = step(batch, opt, topt ? &*topt : nullptr);
        tot += l.total;
        cl += l.contrastive;
        kd += l.distill;
      }
      const double inv = 1.0 / static_cast<double>(nb);
      EpochLog el{st.stage, e, lr, tot * inv, cl * inv, kd * inv};
      log.push_back(el);
      if (cfg_.on_epoch) cfg_.on_epoch(el);
    }
  }

  /// Loss terms for one batch without updating anything.
  StepLosses probe(const UnlabeledBatch& batch) {
    NoGradGuard ng;
    auto saved = snapshot_buffers();
    const auto l = losses(batch).second;
    restore_buffers(saved);
    return l;
  }

  StepLosses step(const UnlabeledBatch& batch, Optimizer& opt, Optimizer* topt) {
    auto [total, l] = losses(batch);
    opt.zero_grad();
    if (topt) topt->zero_grad();
    total.backward();
    opt.step();
    if (topt) topt->step();
    if (queue_) queue_->push(pending_keys_);
    if (teacher_queue_) teacher_queue_->push(pending_teacher_keys_);
    return l;
  }

  const SslModel& student() const { return student_; }
  SslModel& student() { return student_; }
  const std::optional<SslModel>& teacher() const { return teacher_; }
  const Normalization& normalization() const { return norm_; }
  const PretrainLoader& loader() const { return loader_; }
  bool has_queue() const { return queue_.has_value(); }

 private:
  std::pair<Tensor, StepLosses> losses(const UnlabeledBatch& batch) {
    StepLosses l;
    // Contrastive terms compare l2-normalised embeddings; distillation
    // matches softmax(raw / τ) of the head outputs.
    std::optional<Tensor> teacher_cl;
    Tensor t2;
    if (teacher_) {
      if (online()) {
        const Tensor t1 = l2_normalize(teacher_->forward_raw(batch.x1, true));
        t2 = teacher_->forward_raw(batch.x2, true);
        const Tensor t2n = l2_normalize(t2);
        teacher_cl = info_nce(t1, t2n, teacher_queue_->contents(), cfg_.tau);
        pending_teacher_keys_ = t2n.detach();
      } else {
        NoGradGuard ng;
        t2 = teacher_->forward_raw(batch.x2, true);  // batch statistics, running stats untouched
      }
    }
    const Tensor s2 = student_.forward_raw(batch.x2, true);
    std::optional<ContrastiveInputs> ci;
    std::optional<DistillInputs> di;
    if (uses_contrastive(cfg_.scheme)) {
      const Tensor s1n = l2_normalize(student_.forward_raw(batch.x1, true));
      const Tensor s2n = l2_normalize(s2);
      ci = ContrastiveInputs{s1n, s2n, queue_->contents(), cfg_.tau};
      pending_keys_ = s2n.detach();
    }
    if (uses_distillation(cfg_.scheme)) {
      if (t2.shape() != s2.shape()) throw std::logic_error("teacher and student saw different views");
      di = DistillInputs{t2, s2, cfg_.tau};
    }
    auto sl = scheme_loss(cfg_.scheme, ci, di);
    Tensor total = sl.total;
    if (teacher_cl) total = add(total, *teacher_cl);
    l.contrastive = sl.contrastive.value_or(0.0f);
    l.distill = sl.distill.value_or(0.0f);
    l.total = total.item();
    return {total, l};
  }

  std::vector<std::vector<float>> snapshot_buffers() const {
    std::vector<std::vector<float>> out;
    for (const auto& nt : student_.buffers()) out.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
    if (teacher_)
      for (const auto& nt : teacher_->buffers()) out.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
    return out;
  }
  void restore_buffers(const std::vector<std::vector<float>>& saved) {
    std::size_t i = 0;
    auto put = [&](const std::vector<NamedTensor>& ts) {
      for (const auto& nt : ts) {
        Tensor t = nt.tensor;
        std::copy(saved[i].begin(), saved[i].end(), t.data().begin());
        ++i;
      }
    };
    put(student_.buffers());
    if (teacher_) put(teacher_->buffers());
  }

  RunConfig cfg_;
  Normalization norm_;
  PretrainLoader loader_;
  SslModel student_;
  std::optional<SslModel> teacher_;
  std::optional<NegativeQueue> queue_, teacher_queue_;
  Tensor pending_keys_, pending_teacher_keys_;
};

inline ModelSpec student_spec(const RunConfig& cfg, std::size_t in_channels, BinMode mode) {
  ModelSpec s;
  s.arch = cfg.arch;
  s.width = cfg.width;
  s.mode = mode;
  s.in_channels = in_channels;
  s.head_dim = cfg.head_dim;
  s.seed = cfg.seed;
  s.latent_init = cfg.latent_init;
  return s;
}

/// Fully binary model whose latent weights are taken verbatim from a
/// step-1 (binary-activation, real-weight) checkpoint.
inline SslModel inherit_step2(const Checkpoint& step1, const RunConfig& cfg) {
  if (step1.header.stage != static_cast<std::uint8_t>(Stage::pretrain_step1))
    throw ConfigError("inheritance needs a step-1 checkpoint");
  if (step1.header.arch != static_cast<std::uint8_t>(cfg.arch) || step1.header.width != cfg.width)
    throw ConfigError(std::string("step-1 checkpoint architecture does not match ") + to_string(cfg.arch) +
                      " width " + std::to_string(cfg.width));
  SslModel m = model_from_checkpoint(step1);
  m.set_mode(BinMode::fully_bin);
  return m;
}

/// Self-supervised pre-training (one-step), or both steps of the two-step plan.
inline PretrainResult pretrain(const RunConfig& cfg, const UnlabeledImages& images) {
  if (cfg.plan == Plan::two_step) {
    const int e1 = cfg.step1_epochs < 0 ? cfg.epochs : cfg.step1_epochs;
    PretrainResult r;
    Pretrainer t(cfg, images, SslModel(student_spec(cfg, images.shape.c, BinMode::bin_act_only)));
    r.used_queue = t.has_queue();
    t.run_stage({Stage::pretrain_step1, BinMode::bin_act_only, e1, weight_decay_for_stage(Stage::pretrain_step1), 0},
                r.log);
    r.step1 = to_checkpoint(t.student(), Stage::pretrain_step1, cfg.scheme, static_cast<std::uint32_t>(e1),
                            &t.normalization());
    Pretrainer t2(cfg, images, inherit_step2(*r.step1, cfg));
    t2.run_stage({Stage::pretrain_step2, BinMode::fully_bin, cfg.epochs,
                  weight_decay_for_stage(Stage::pretrain_step2, cfg.weight_decay), e1},
                 r.log);
    r.checkpoint = to_checkpoint(t2.student(), Stage::pretrain_step2, cfg.scheme,
                                 static_cast<std::uint32_t>(e1 + cfg.epochs), &t2.normalization());
    return r;
  }
  const BinMode mode = cfg.arch == ArchId::teacher_real ? BinMode::real : BinMode::fully_bin;
  PretrainResult r;
  Pretrainer t(cfg, images, SslModel(student_spec(cfg, images.shape.c, mode)));
  r.used_queue = t.has_queue();
  t.run_stage({Stage::pretrain_step2, mode, cfg.epochs, weight_decay_for_stage(Stage::pretrain_step2, cfg.weight_decay), 0},
              r.log);
  r.checkpoint = to_checkpoint(t.student(), Stage::pretrain_step2, cfg.scheme,
                               static_cast<std::uint32_t>(cfg.epochs), &t.normalization());
  return r;
}

inline PretrainResult progressive_binarize(RunConfig cfg, const UnlabeledImages& images) {
  if (cfg.plan != Plan::two_step) throw ConfigError("progressive binarization needs the two-step plan");
  return pretrain(cfg, images);
}

// ---------------------------------------------------------------- evaluation

/// Backbone features of every image, eval-mode BN, no tape.
inline Tensor extract_features(SslModel& m, const Dataset& d, const Normalization& norm, std::size_t chunk = 256) {
  NoGradGuard ng;
  std::vector<std::size_t> idx(d.count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t fd = m.backbone().feature_dim();
  std::vector<float> out(d.count * fd);
  for (std::size_t b = 0; b < d.count; b += chunk) {
    const std::size_t e = std::min(d.count, b + chunk);
    const auto lb = labeled_batch(d, idx, b, e, norm);
    const Tensor f = m.backbone().forward(lb.x, false);
    std::copy(f.data().begin(), f.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * fd));
  }
  return Tensor(Shape{d.count, fd}, std::move(out));
}

inline double top1(const Tensor& logits, std::span<const std::int64_t> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    hit += static_cast<std::int64_t>(best) == labels[i];
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

struct LinearEvalConfig {
  std::vector<double> lrs{30, 20, 10, 5, 1, 0.5, 0.1, 0.05};
  int epochs = 60;
  std::size_t batch = 256;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct LinearEvalResult {
  std::vector<double> lrs;
  std::vector<double> accuracy;  // per lr; diverged runs count as 0
  std::vector<bool> diverged;
  double best_accuracy = 0;
  double best_lr = 0;
};

/// Trains one linear classifier per learning rate on frozen features.
inline LinearEvalResult linear_probe(const Tensor& train_x, std::span<const std::int64_t> train_y,
                                     const Tensor& test_x, std::span<const std::int64_t> test_y,
                                     std::size_t classes, const LinearEvalConfig& cfg) {
  if (train_x.dim(0) != train_y.size() || test_x.dim(0) != test_y.size())
    throw DimensionError("linear eval: feature and label counts differ");
  if (cfg.lrs.empty() || cfg.epochs <= 0) throw ConfigError("linear eval needs learning rates and epochs");
  const std::size_t n = train_x.dim(0), d = train_x.dim(1);
  LinearEvalResult r;
  r.lrs = cfg.lrs;
  for (double lr : cfg.lrs) {
    std::mt19937_64 rng(cfg.seed ^ 0x11eaULL);
    Linear clf(d, classes, rng);
    std::vector<NamedTensor> ps;
    clf.collect("clf", ps);
    OptimizerConfig oc;
    oc.kind = OptimizerKind::sgd;
    oc.lr = lr;
    oc.momentum = cfg.momentum;
    oc.weight_decay = weight_decay_for_stage(Stage::linear_eval);
    Optimizer opt({ps[0].tensor, ps[1].tensor}, oc);
    const LrSchedule sched{lr, cfg.epochs};
    bool diverged = false;
    try {
      for (int e = 0; e < cfg.epochs && !diverged; ++e) {
        opt.set_lr(sched.lr_at(e));
        const auto order = epoch_order(n, cfg.seed, static_cast<std::uint64_t>(e));
        for (std::size_t b = 0; b < n; b += cfg.batch) {
          const std::size_t e2 = std::min(n, b + cfg.batch);
          std::vector<float> xb((e2 - b) * d);
          std::vector<std::int64_t> yb;
          for (std::size_t i = b; i < e2; ++i) {
            std::copy_n(train_x.data().begin() + static_cast<std::ptrdiff_t>(order[i] * d), d,
                        xb.begin() + static_cast<std::ptrdiff_t>((i - b) * d));
            yb.push_back(train_y[order[i]]);
          }
          const Tensor loss = cross_entropy(clf.forward(Tensor(Shape{e2 - b, d}, std::move(xb))), yb);
          opt.zero_grad();
          loss.backward();
          opt.step();
        }
      }
    } catch (const NumericError&) {
      diverged = true;
    }
    double acc = 0;
    if (!diverged) {
      NoGradGuard ng;
      const Tensor logits = clf.forward(test_x);
      for (float v : logits.data()) diverged = diverged || !std::isfinite(v);
      if (!diverged) acc = top1(logits, test_y);
    }
    r.accuracy.push_back(acc);
    r.diverged.push_back(diverged);
    if (acc > r.best_accuracy || r.accuracy.size() == 1) {
      r.best_accuracy = acc;
      r.best_lr = lr;
    }
  }
  return r;
}

/// Linear evaluation of a frozen backbone. Throws std::logic_error if the
/// backbone state changed during evaluation.
inline LinearEvalResult linear_eval(SslModel& model, const Dataset& train, const Dataset& test,
                                    const LinearEvalConfig& cfg, std::optional<Normalization> norm = std::nullopt) {
  if (!train.has_labels() || !test.has_labels()) throw ConfigError("linear eval needs labelled data");
  if (!norm) norm = compute_normalization(train);
  const std::uint64_t before = state_hash(model);
  const Tensor ftr = extract_features(model, train, *norm);
  const Tensor fte = extract_features(model, test, *norm);
  const std::size_t classes = std::max(train.num_classes, test.num_classes);
  auto r = linear_probe(ftr, *train.labels, fte, *test.labels, classes, cfg);
  if (state_hash(model) != before) throw std::logic_error("frozen backbone was modified during linear eval");
  return r;
}

inline LinearEvalResult linear_eval(const Checkpoint& ck, const Dataset& train, const Dataset& test,
                                    const LinearEvalConfig& cfg) {
  SslModel m = model_from_checkpoint(ck);
  return linear_eval(m, train, test, cfg, normalization_from(ck));
}

/// lr rows × run columns, in the layout of a learning-rate ablation table.
inline std::string format_lr_grid(const std::vector<std::string>& columns,
                                  const std::vector<LinearEvalResult>& results) {
  if (columns.size() != results.size()) throw ConfigError("lr grid: one column name per result");
  std::ostringstream os;
  os << std::left << std::setw(8) << "lr";
  for (const auto& c : columns) os << std::setw(12) << c;
  os << '\n';
  if (results.empty()) return os.str();
  for (std::size_t i = 0; i < results[0].lrs.size(); ++i) {
    std::ostringstream lr;
    lr << results[0].lrs[i];
    os << std::setw(8) << lr.str();
    for (const auto& r : results) {
      std::ostringstream cell;
      if (r.diverged[i])
        cell << "diverged";
      else
        cell << std::fixed << std::setprecision(2) << 100.0 * r.accuracy[i];
      os << std::setw(12) << cell.str();
    }
    os << '\n';
  }
  return os.str();
}

// ----------------------------------------------------------------- finetune

struct FinetuneConfig {
  bool freeze = false;
  double lr = 0.01;
  double momentum = 0.9;
  int epochs = 10;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
  bool multi_label = false;  // sigmoid cross-entropy, 0.5 threshold
};

/// Multi-hot targets (N×C, entries 0/1) for multi-label fine-tuning.
struct MultiLabelTargets {
  Tensor train, test;
};

/// Sigmoid(logit) > 0.5, i.e. logit > 0.
inline std::vector<std::vector<std::uint8_t>> predict_multi_label(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::vector<std::uint8_t>> out(n, std::vector<std::uint8_t>(c));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i][j] = logits[i * c + j] > 0.0f;
  return out;
}

struct FinetuneResult {
  double accuracy = 0;  // top-1, or per-label accuracy in multi-label mode
};

/// Transfer to a labelled task. freeze=true runs exactly the linear-eval
/// path at a single learning rate; otherwise the whole network is trained
/// with SGD (momentum, λ = 1e-4).
inline FinetuneResult transfer_finetune(const SslModel& init, const Dataset& train, const Dataset& test,
                                        const FinetuneConfig& cfg, const MultiLabelTargets* multi = nullptr,
                                        std::optional<Normalization> norm = std::nullopt) {
  if (!cfg.multi_label && (!train.has_labels() || !test.has_labels()))
    throw ConfigError("fine-tuning needs labelled data");
  if (cfg.multi_label && !multi) throw ConfigError("multi-label fine-tuning needs multi-hot targets");
  if (!norm) norm = compute_normalization(train);
  SslModel model = clone_model(init);
  if (cfg.freeze && !cfg.multi_label) {
    LinearEvalConfig le;
    le.lrs = {cfg.lr};
    le.epochs = cfg.epochs;
    le.batch = cfg.batch;
    le.momentum = cfg.momentum;
    le.seed = cfg.seed;
    return {linear_eval(model, train, test, le, norm).best_accuracy};
  }
  const std::size_t classes = cfg.multi_label ? multi->train.dim(1) : std::max(train.num_classes, test.num_classes);
  std::mt19937_64 rng(cfg.seed ^ 0x11eaULL);
  Linear clf(model.backbone().feature_dim(), classes, rng);
  std::vector<NamedTensor> cps;
  clf.collect("clf", cps);
  std::vector<Tensor> params{cps[0].tensor, cps[1].tensor};
  if (!cfg.freeze)
    for (auto& nt : model.backbone().parameters()) params.push_back(nt.tensor);
  OptimizerConfig oc;
  oc.kind = OptimizerKind::sgd;
  oc.lr = cfg.lr;
  oc.momentum = cfg.momentum;
  oc.weight_decay = cfg.freeze ? weight_decay_for_stage(Stage::linear_eval) : weight_decay_for_stage(Stage::finetune);
  Optimizer opt(params, oc);
  const LrSchedule sched{cfg.lr, cfg.epochs};
  std::vector<std::size_t> idx(train.count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (int e = 0; e < cfg.epochs; ++e) {
    opt.set_lr(sched.lr_at(e));
    const auto order = epoch_order(train.count, cfg.seed, static_cast<std::uint64_t>(e));
    for (std::size_t b = 0; b + 2 <= train.count; b += cfg.batch) {
      const std::size_t end = std::min(train.count, b + cfg.batch);
      if (end - b < 2) break;
      const auto lb = labeled_batch(train, order, b, end, *norm);
      Tensor feats;
      if (cfg.freeze) {
        NoGradGuard ng;
        feats = model.backbone().forward(lb.x, false);
      } else {
        feats = model.backbone().forward(lb.x, true);
      }
      const Tensor logits = clf.forward(feats);
      Tensor loss;
      if (cfg.multi_label) {
        std::vector<float> t((end - b) * classes);
        for (std::size_t i = b; i < end; ++i)
          std::copy_n(multi->train.data().begin() + static_cast<std::ptrdiff_t>(order[i] * classes), classes,
                      t.begin() + static_cast<std::ptrdiff_t>((i - b) * classes));
        loss = sigmoid_bce(logits, Tensor(Shape{end - b, classes}, std::move(t)));
      } else {
        loss = cross_entropy(logits, lb.labels);
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  NoGradGuard ng;
  const Tensor feats = extract_features(model, test, *norm);
  const Tensor logits = clf.forward(feats);
  FinetuneResult r;
  if (cfg.multi_label) {
    const auto pred = predict_multi_label(logits);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      for (std::size_t j = 0; j < classes; ++j)
        hit += pred[i][j] == (multi->test[i * classes + j] > 0.5f);
    r.accuracy = static_cast<double>(hit) / static_cast<double>(pred.size() * classes);
  } else {
    r.accuracy = top1(logits, *test.labels);
  }
  return r;
}

// ---------------------------------------------------------------- op counts

struct OpsReport {
  std::uint64_t bops = 0;   // binary MACs
  std::uint64_t flops = 0;  // real MACs plus BN/PReLU/shortcut elementwise
  double ops = 0;           // bops / 64 + flops
};

inline double ops_from_counts(double bops, double flops) { return bops / 64.0 + flops; }

/// Static count for an input of h×w pixels. Binary-activation convs with
/// real weights are counted as FLOPs; sign and pooling layers are free.
inline OpsReport count_ops(const Backbone& b, std::size_t h, std::size_t w) {
  OpsReport r;
  for (const auto& l : b.describe(h, w)) {
    const std::uint64_t out_elems = l.out_channels * l.out_h * l.out_w;
    switch (l.kind) {
      case LayerKind::bin_conv: {
        const std::uint64_t macs = out_elems * l.in_channels * l.kernel * l.kernel;
        (l.mode == BinMode::fully_bin ? r.bops : r.flops) += macs;
        break;
      }
      case LayerKind::real_conv: r.flops += out_elems * l.in_channels * l.kernel * l.kernel; break;
      case LayerKind::linear: r.flops += l.in_channels * l.out_channels; break;
      case LayerKind::bn:
      case LayerKind::prelu:
      case LayerKind::shortcut_add: r.flops += out_elems; break;
      case LayerKind::sign:
      case LayerKind::pool: break;
    }
  }
  r.ops = ops_from_counts(static_cast<double>(r.bops), static_cast<double>(r.flops));
  return r;
}

inline std::string format_ops(const OpsReport& r) {
  std::ostringstream os;
  os << "BOPS=" << r.bops << " FLOPS=" << r.flops << " OPS=" << std::setprecision(10) << r.ops;
  return os.str();
}

// ------------------------------------------------------------------ export

/// Packed inference form of a fully binary model: bin-conv weights as sign
/// bits with per-filter α, every other layer in f32.
inline Checkpoint export_binary(const Checkpoint& ck) {
  if (ck.header.mode != static_cast<std::uint8_t>(BinMode::fully_bin))
    throw ConfigError("export needs a fully binary checkpoint");
  SslModel m = model_from_checkpoint(ck);
  Checkpoint out;
  out.header = ck.header;
  out.header.stage = static_cast<std::uint8_t>(Stage::exported);
  std::set<std::string> packed;
  for (std::size_t i = 0; i < m.backbone().blocks().size(); ++i) {
    const Conv2d& c = m.backbone().blocks()[i].conv();
    const std::string p = "backbone.blocks." + std::to_string(i) + ".conv.";
    out.bits.emplace(p + "weight", pack_weights_fhwc(c.weight()));
    const auto alpha = channel_scales(c.weight());
    out.tensors.emplace(p + "alpha", Tensor(Shape{alpha.size()}, alpha));
    packed.insert(p + "weight");
  }
  for (const auto& [name, t] : ck.tensors)
    if (!packed.count(name)) out.tensors.emplace(name, t);
  return out;
}

/// Bytes of bin-conv weights in packed form (bits + α) and as f32 latents.
struct PackedSize {
  std::size_t packed_bytes = 0;
  std::size_t real_bytes = 0;
};

inline PackedSize packed_size(const Checkpoint& exported) {
  PackedSize s;
  for (const auto& [name, bt] : exported.bits) {
    s.packed_bytes += bt.bytes();
    const std::string alpha = name.substr(0, name.size() - 6) + "alpha";
    s.packed_bytes += exported.tensor(alpha).numel() * sizeof(float);
    s.real_bytes += numel_of(bt.shape) * sizeof(float);
  }
  return s;
}

/// Inference-only model over an exported checkpoint. Immutable after load.
class PackedModel {
 public:
  explicit PackedModel(Checkpoint ck) : ck_(std::move(ck)) {
    if (ck_.header.stage != static_cast<std::uint8_t>(Stage::exported))
      throw ConfigError("not an exported checkpoint");
    spec_ = spec_from_checkpoint(ck_);
    skeleton_ = Backbone(BackboneConfig{spec_.arch, spec_.width, spec_.mode, spec_.in_channels, 0, 0.5f});
  }

  /// Projection-head output (unit rows) for N×C×H×W normalised input.
  Tensor forward(const Tensor& x) const {
    std::vector<float> h(x.data().begin(), x.data().end());
    Shape s = x.shape();
    h = real_conv(h, s, "backbone.stem.conv.weight", skeleton_.stem().stride(), skeleton_.stem().padding());
    bn(h, s, "backbone.stem.bn");
    prelu(h, s, "backbone.stem.act.slope");
    for (std::size_t i = 0; i < skeleton_.blocks().size(); ++i) {
      const auto& blk = skeleton_.blocks()[i];
      const std::string p = "backbone.blocks." + std::to_string(i);
      const std::size_t stride = blk.conv().stride();
      // sign -> packed conv
      Tensor a(s, h);
      for (auto& v : a.data()) v = sign_value(v);
      const BitTensor xb = pack_activations_nhwc(a);
      const auto& alpha = ck_.tensor(p + ".conv.alpha");
      Tensor y = binary_conv2d_infer<float>(xb, ck_.bits.at(p + ".conv.weight"), alpha.data(), stride,
                                            blk.conv().padding());
      std::vector<float> out(y.data().begin(), y.data().end());
      Shape os = y.shape();
      bn(out, os, p + ".bn");
      switch (blk.shortcut_kind()) {
        case BinaryBlock::Shortcut::none: break;
        case BinaryBlock::Shortcut::identity: add_into(out, h); break;
        case BinaryBlock::Shortcut::pool: add_into(out, pool(h, s, stride)); break;
        case BinaryBlock::Shortcut::pool_project: {
          Shape ps = s;
          std::vector<float> pr = stride > 1 ? pool(h, ps, stride) : h;
          if (stride > 1) ps = {s[0], s[1], s[2] / stride, s[3] / stride};
          pr = real_conv(pr, ps, p + ".proj.weight", 1, 0);
          bn(pr, ps, p + ".proj_bn");
          add_into(out, pr);
          break;
        }
      }
      prelu(out, os, p + ".act.slope");
      h = std::move(out);
      s = os;
    }
    const std::size_t n = s[0], c = s[1];
    std::vector<float> f(n * c);
    kernels::global_avgpool_forward<float>(h, f, n * c, s[2] * s[3]);
    std::vector<float> z = dense(f, n, "head.fc1");
    const std::size_t d1 = ck_.tensor("head.fc1.weight").dim(0);
    kernels::prelu_forward<float>(std::span<const float>(z), z, n, d1, 1, ck_.tensor("head.act.slope").data());
    std::vector<float> o = dense(z, n, "head.fc2");
    const std::size_t d2 = ck_.tensor("head.fc2.weight").dim(0);
    Tensor logits(Shape{n, d2}, std::move(o));
    return l2_normalize(logits);
  }

  const Checkpoint& checkpoint() const { return ck_; }

 private:
  std::vector<float> real_conv(const std::vector<float>& x, Shape& s, const std::string& wname, std::size_t stride,
                               std::size_t pad) const {
    const Tensor& w = ck_.tensor(wname);
    const auto g = kernels::conv_geometry(s[0], s[1], s[2], s[3], w.dim(0), w.dim(2), w.dim(3), stride, pad);
    std::vector<float> cols;
    auto y = kernels::conv2d_forward<float>(g, x.data(), w.data().data(), &cols, 0.0f);
    s = {g.n, g.f, g.oh, g.ow};
    return y;
  }
  void bn(std::vector<float>& x, const Shape& s, const std::string& p) const {
    std::vector<float> y(x.size());
    kernels::batchnorm_eval<float>(x, y, s[0], s[1], s[2] * s[3], ck_.tensor(p + ".gamma").data(),
                                   ck_.tensor(p + ".beta").data(), ck_.tensor(p + ".running_mean").data(),
                                   ck_.tensor(p + ".running_var").data(), static_cast<float>(BatchNorm::kEps));
    x = std::move(y);
  }
  void prelu(std::vector<float>& x, const Shape& s, const std::string& name) const {
    std::vector<float> y(x.size());
    kernels::prelu_forward<float>(x, y, s[0], s[1], s[2] * s[3], ck_.tensor(name).data());
    x = std::move(y);
  }
  static std::vector<float> pool(const std::vector<float>& x, const Shape& s, std::size_t k) {
    std::vector<float> y(s[0] * s[1] * (s[2] / k) * (s[3] / k));
    kernels::avgpool_forward<float>(x, y, s[0] * s[1], s[2], s[3], k);
    return y;
  }
  static void add_into(std::vector<float>& a, const std::vector<float>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  }
  std::vector<float> dense(const std::vector<float>& x, std::size_t n, const std::string& p) const {
    const Tensor& w = ck_.tensor(p + ".weight");
    std::vector<float> y(n * w.dim(0));
    kernels::linear_forward<float>(x.data(), w.data().data(), ck_.tensor(p + ".bias").data().data(), y.data(), n,
                                   w.dim(1), w.dim(0));
    return y;
  }

  Checkpoint ck_;
  ModelSpec spec_;
  Backbone skeleton_;  // geometry only
};

// --------------------------------------------------------------- diagnostics

/// One CSV row per sign layer.
inline void write_saturation_csv(std::ostream& os, const SaturationStats& s) {
  os << "layer,saturated_fraction,weight_l1_mean,weight_l1_min,weight_l1_max\n";
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const auto& w = s.weight_l1_means[i];
    double mean = 0;
    for (double v : w) mean += v;
    mean /= static_cast<double>(w.size());
    os << s.layers[i] << ',' << s.saturated_fraction[i] << ',' << mean << ','
       << *std::min_element(w.begin(), w.end()) << ',' << *std::max_element(w.begin(), w.end()) << '\n';
  }
}

inline SaturationStats diagnose(const Checkpoint& ck, const Tensor& batch) {
  SslModel m = model_from_checkpoint(ck);
  return saturation_report(m.backbone(), batch);
}

// --------------------------------------------------------------------- bench

struct BenchResult {
  std::size_t length = 0;
  double xnor_ns = 0;  // per dot
  double f32_ns = 0;       // scalar loop
  double f32_simd_ns = 0;  // vectorised (Eigen), for reference
  double speedup = 0;      // against the scalar loop
};

namespace detail {
/// Plain scalar loop; strict FP ordering keeps it unvectorised.
inline float scalar_dot(const float* a, const float* b, std::size_t n) {
  float s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}
}  // namespace detail

/// Throughput of packed xnor_dot against an f32 dot of the same length.
inline BenchResult bench_xnor(std::size_t n = 4096, double seconds = 0.3, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> bit(0, 1);
  std::vector<float> a(n), b(n);
  for (auto& v : a) v = bit(rng) ? 1.0f : -1.0f;
  for (auto& v : b) v = bit(rng) ? 1.0f : -1.0f;
  const BitTensor pa = pack(Tensor(Shape{1, n}, a)), pb = pack(Tensor(Shape{1, n}, b));
  using clock = std::chrono::steady_clock;
  auto time_per_call = [&](auto&& fn) {
    volatile double sink = 0;
    std::size_t reps = 16;
    for (;;) {
      const auto t0 = clock::now();
      for (std::size_t i = 0; i < reps; ++i) sink = sink + fn();
      const double el = std::chrono::duration<double>(clock::now() - t0).count();
      if (el >= seconds) return el * 1e9 / static_cast<double>(reps);
      reps *= 2;
    }
  };
  BenchResult r;
  r.length = n;
  const float* pa_f = a.data();
  const float* pb_f = b.data();
  r.f32_ns = time_per_call([&] {
    const float* volatile x = pa_f;  // defeat hoisting across repetitions
    return static_cast<double>(detail::scalar_dot(x, pb_f, n));
  });
  r.f32_simd_ns = time_per_call([&] {
    const float* volatile x = pa_f;
    return static_cast<double>(Eigen::Map<const Eigen::VectorXf>(x, static_cast<Eigen::Index>(n))
                                   .dot(Eigen::Map<const Eigen::VectorXf>(pb_f, static_cast<Eigen::Index>(n))));
  });
  r.xnor_ns = time_per_call([&] {
    const BitTensor* volatile x = &pa;
    return static_cast<double>(xnor_dot(*x, 0, pb, 0));
  });
  r.speedup = r.f32_ns / r.xnor_ns;
  return r;
}

}  // namespace sbnn
