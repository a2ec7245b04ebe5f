#pragma once

// Layers, desk-scale backbones and the projection head.
//
// Block layout for every binary conv: sign -> binconv -> BN -> (+ shortcut) -> PReLU.
// The stem conv and any linear layer are always real-valued.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sbnn/binarize.hpp"
#include "sbnn/ops.hpp"

namespace sbnn {

enum class BinMode : std::uint8_t { real = 0, bin_act_only = 1, fully_bin = 2 };

enum class ArchId : std::uint8_t { toy_bin = 0, bireal_tiny = 1, teacher_real = 2 };

inline const char* to_string(BinMode m) {
  switch (m) {
    case BinMode::real: return "real";
    case BinMode::bin_act_only: return "bin-act-only";
    case BinMode::fully_bin: return "fully-bin";
  }
  return "?";
}

inline const char* to_string(ArchId a) {
  switch (a) {
    case ArchId::toy_bin: return "toy-bin";
    case ArchId::bireal_tiny: return "bireal-tiny";
    case ArchId::teacher_real: return "teacher-real";
  }
  return "?";
}

inline ArchId parse_arch(const std::string& s) {
  if (s == "toy-bin") return ArchId::toy_bin;
  if (s == "bireal-tiny") return ArchId::bireal_tiny;
  if (s == "teacher-real") return ArchId::teacher_real;
  throw ConfigError("unknown architecture id '" + s + "'");
}

inline BinMode parse_mode(const std::string& s) {
  if (s == "real") return BinMode::real;
  if (s == "bin-act-only") return BinMode::bin_act_only;
  if (s == "fully-bin") return BinMode::fully_bin;
  throw ConfigError("unknown binarization mode '" + s + "'");
}

/// Named handle onto a parameter or buffer. The tensor handle shares storage
/// with the owning layer.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using StateDict = std::map<std::string, Tensor>;

enum class LayerKind { real_conv, bin_conv, bn, prelu, sign, pool, linear, shortcut_add };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::real_conv: return "real-conv";
    case LayerKind::bin_conv: return "bin-conv";
    case LayerKind::bn: return "bn";
    case LayerKind::prelu: return "prelu";
    case LayerKind::sign: return "sign";
    case LayerKind::pool: return "pool";
    case LayerKind::linear: return "linear";
    case LayerKind::shortcut_add: return "shortcut-add";
  }
  return "?";
}

/// Static description of one layer at a given input resolution.
struct LayerSpec {
  std::string name;
  LayerKind kind;
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t kernel = 0, stride = 1, padding = 0;
  BinMode mode = BinMode::real;
  std::size_t out_h = 1, out_w = 1;
};

/// Pre-sign activations captured during a forward pass.
struct ForwardTrace {
  std::vector<std::string> sign_layers;
  std::vector<std::vector<float>> pre_sign;
};

namespace init {
inline void uniform(Tensor& t, float bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> d(-bound, bound);
  for (auto& v : t.data()) v = d(rng);
}
}  // namespace init

// --------------------------------------------------------------------- layers

class Conv2d {
 public:
  Conv2d() = default;
  /// `binary`: this conv consumes sign-binarized activations (bin-conv).
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
         bool binary, BinMode mode, std::mt19937_64& rng, float latent_init = 0.5f)
      : weight_(Tensor::zeros({out, in, k, k}, true)), stride_(stride), pad_(pad), binary_(binary),
        mode_(binary ? mode : BinMode::real) {
    if (mode_ == BinMode::real)
      init::uniform(weight_, std::sqrt(1.0f / static_cast<float>(in * k * k)), rng);
    else
      init::uniform(weight_, latent_init, rng);
  }

  Tensor forward(const Tensor& x) const {
    switch (mode_) {
      case BinMode::real: return conv2d(x, weight_, stride_, pad_);
      case BinMode::bin_act_only: return conv2d(x, weight_, stride_, pad_, -1.0f);
      case BinMode::fully_bin: return scaled_sign_conv2d(x, binarize_weights(weight_), stride_, pad_);
    }
    return {};
  }

  /// Weights the forward pass actually multiplies with.
  Tensor effective_weight() const {
    if (mode_ != BinMode::fully_bin) return weight_.detach();
    NoGradGuard ng;
    return binarize_weights(weight_);
  }

  void set_mode(BinMode m) {
    if (binary_) mode_ = m;
  }
  BinMode mode() const { return mode_; }
  bool binary() const { return binary_; }
  std::size_t stride() const { return stride_; }
  std::size_t padding() const { return pad_; }
  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }
  std::size_t kernel() const { return weight_.dim(2); }
  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + ".weight", weight_});
  }

 private:
  Tensor weight_;
  std::size_t stride_ = 1, pad_ = 0;
  bool binary_ = false;
  BinMode mode_ = BinMode::real;
};

class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t c)
      : gamma_(Tensor::full({c}, 1.0f, true)), beta_(Tensor::zeros({c}, true)),
        mean_(Tensor::zeros({c})), var_(Tensor::full({c}, 1.0f)) {}

  Tensor forward(const Tensor& x, bool training) {
    return batch_norm(x, gamma_, beta_, mean_, var_, BatchNormOptions{training, kMomentum, kEps, track_});
  }
  /// When off, training-mode forwards use batch statistics but leave the running ones alone.
  void set_track_running_stats(bool on) { track_ = on; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + ".gamma", gamma_});
    params.push_back({prefix + ".beta", beta_});
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& bufs) const {
    bufs.push_back({prefix + ".running_mean", mean_});
    bufs.push_back({prefix + ".running_var", var_});
  }
  const Tensor& gamma() const { return gamma_; }
  const Tensor& beta() const { return beta_; }
  const Tensor& running_mean() const { return mean_; }
  const Tensor& running_var() const { return var_; }

 private:
  Tensor gamma_, beta_, mean_, var_;
  bool track_ = true;
};

class PReLU {
 public:
  PReLU() = default;
  explicit PReLU(std::size_t c, float init = 0.25f) : slope_(Tensor::full({c}, init, true)) {}
  Tensor forward(const Tensor& x) const { return prelu(x, slope_); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + ".slope", slope_});
  }
  const Tensor& slope() const { return slope_; }

 private:
  Tensor slope_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight_(Tensor::zeros({out, in}, true)), bias_(Tensor::zeros({out}, true)) {
    const float b = 1.0f / std::sqrt(static_cast<float>(in));
    init::uniform(weight_, b, rng);
    init::uniform(bias_, b, rng);
  }
  Tensor forward(const Tensor& x) const { return linear(x, weight_, bias_); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& params) const {
    params.push_back({prefix + ".weight", weight_});
    params.push_back({prefix + ".bias", bias_});
  }
  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_, bias_;
};

// --------------------------------------------------------------------- blocks

/// sign -> conv3×3 -> BN -> + shortcut -> PReLU. The sign is skipped in real mode.
class BinaryBlock {
 public:
  enum class Shortcut : std::uint8_t { none, identity, pool, pool_project };

  BinaryBlock() = default;
  BinaryBlock(std::size_t in, std::size_t out, std::size_t stride, bool shortcut, BinMode mode,
              std::mt19937_64& rng, float latent_init)
      : conv_(in, out, 3, stride, 1, true, mode, rng, latent_init), bn_(out), act_(out) {
    if (!shortcut)
      shortcut_ = Shortcut::none;
    else if (in == out)
      shortcut_ = stride == 1 ? Shortcut::identity : Shortcut::pool;
    else {
      shortcut_ = Shortcut::pool_project;
      proj_ = Conv2d(in, out, 1, 1, 0, false, BinMode::real, rng);
      proj_bn_ = BatchNorm(out);
    }
  }

  Tensor forward(const Tensor& x, bool training, ForwardTrace* trace, const std::string& name) {
    Tensor a = x;
    if (conv_.mode() != BinMode::real) {
      if (trace) {
        trace->sign_layers.push_back(name + ".sign");
        trace->pre_sign.emplace_back(x.data().begin(), x.data().end());
      }
      a = sign_ste(x);
    }
    Tensor y = bn_.forward(conv_.forward(a), training);
    if (has_shortcut()) y = add(y, shortcut(x, training));
    return act_.forward(y);
  }

  Tensor shortcut(const Tensor& x, bool training) {
    switch (shortcut_) {
      case Shortcut::none: break;
      case Shortcut::identity: return x;
      case Shortcut::pool: return avgpool2d(x, conv_.stride());
      case Shortcut::pool_project: {
        Tensor p = conv_.stride() > 1 ? avgpool2d(x, conv_.stride()) : x;
        return proj_bn_.forward(proj_.forward(p), training);
      }
    }
    return x;
  }

  void collect(const std::string& p, std::vector<NamedTensor>& params) const {
    conv_.collect(p + ".conv", params);
    bn_.collect(p + ".bn", params);
    act_.collect(p + ".act", params);
    if (shortcut_ == Shortcut::pool_project) {
      proj_.collect(p + ".proj", params);
      proj_bn_.collect(p + ".proj_bn", params);
    }
  }
  void collect_buffers(const std::string& p, std::vector<NamedTensor>& bufs) const {
    bn_.collect_buffers(p + ".bn", bufs);
    if (shortcut_ == Shortcut::pool_project) proj_bn_.collect_buffers(p + ".proj_bn", bufs);
  }

  void set_track_running_stats(bool on) {
    bn_.set_track_running_stats(on);
    proj_bn_.set_track_running_stats(on);
  }

  /// Disabling removes the shortcut-add (used to probe that shortcuts are live).
  void set_shortcut_enabled(bool on) { enabled_ = on; }
  bool has_shortcut() const { return shortcut_ != Shortcut::none && enabled_; }
  Shortcut shortcut_kind() const { return shortcut_; }

  Conv2d& conv() { return conv_; }
  const Conv2d& conv() const { return conv_; }
  BatchNorm& bn() { return bn_; }
  const BatchNorm& bn() const { return bn_; }
  const PReLU& act() const { return act_; }
  const Conv2d& proj() const { return proj_; }
  const BatchNorm& proj_bn() const { return proj_bn_; }
  BatchNorm& proj_bn() { return proj_bn_; }

 private:
  Conv2d conv_;
  BatchNorm bn_;
  PReLU act_;
  Shortcut shortcut_ = Shortcut::identity;
  Conv2d proj_;
  BatchNorm proj_bn_;
  bool enabled_ = true;
};

// ------------------------------------------------------------------- backbone

struct BackboneConfig {
  ArchId arch = ArchId::toy_bin;
  std::size_t width = 32;
  BinMode mode = BinMode::fully_bin;
  std::size_t in_channels = 3;
  std::uint64_t seed = 0;
  float latent_init = 0.5f;
};

class Backbone {
 public:
  Backbone() = default;

  explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    if (cfg.width < 8) throw ConfigError("backbone width must be at least 8 channels");
    if (cfg.in_channels == 0) throw ConfigError("backbone needs at least one input channel");
    if (cfg_.arch == ArchId::teacher_real) cfg_.mode = BinMode::real;
    std::mt19937_64 rng(cfg.seed);
    const std::size_t w = cfg.width;
    stem_ = Conv2d(cfg.in_channels, w, 3, 2, 1, false, BinMode::real, rng);
    stem_bn_ = BatchNorm(w);
    stem_act_ = PReLU(w);
    struct Plan {
      std::size_t in, out, stride;
    };
    std::vector<Plan> plan;
    if (cfg_.arch == ArchId::bireal_tiny)
      plan = {{w, w, 1}, {w, w, 1}, {w, 2 * w, 2}, {2 * w, 2 * w, 1}, {2 * w, 4 * w, 2}, {4 * w, 4 * w, 1}};
    else
      plan = {{w, w, 1}, {w, w, 2}, {w, w, 1}, {w, w, 2}};
    for (const auto& p : plan)
      blocks_.emplace_back(p.in, p.out, p.stride, true, cfg_.mode, rng, cfg.latent_init);
    feature_dim_ = plan.back().out;
  }

  /// N×C×H×W -> N×feature_dim. `training` selects batch-statistics BN.
  Tensor forward(const Tensor& x, bool training, ForwardTrace* trace = nullptr) {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
      throw DimensionError("backbone: expected N×" + std::to_string(cfg_.in_channels) +
                           "×H×W input, got " + shape_str(x.shape()));
    Tensor h = stem_act_.forward(stem_bn_.forward(stem_.forward(x), training));
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      h = blocks_[i].forward(h, training, trace, "blocks." + std::to_string(i));
    return global_avgpool(h);
  }

  /// Switches every bin-conv to `m`; latent weights are untouched.
  void set_mode(BinMode m) {
    if (cfg_.arch == ArchId::teacher_real && m != BinMode::real)
      throw ConfigError("teacher-real backbones are always real-valued");
    cfg_.mode = m;
    for (auto& b : blocks_) b.conv().set_mode(m);
  }

  void set_track_running_stats(bool on) {
    stem_bn_.set_track_running_stats(on);
    for (auto& b : blocks_) b.set_track_running_stats(on);
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> p;
    stem_.collect("stem.conv", p);
    stem_bn_.collect("stem.bn", p);
    stem_act_.collect("stem.act", p);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("blocks." + std::to_string(i), p);
    return p;
  }
  std::vector<NamedTensor> buffers() const {
    std::vector<NamedTensor> b;
    stem_bn_.collect_buffers("stem.bn", b);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect_buffers("blocks." + std::to_string(i), b);
    return b;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Layer-by-layer description at input resolution h×w.
  std::vector<LayerSpec> describe(std::size_t h, std::size_t w) const {
    std::vector<LayerSpec> out;
    auto conv_out = [](std::size_t s, const Conv2d& c) {
      return (s + 2 * c.padding() - c.kernel()) / c.stride() + 1;
    };
    h = conv_out(h, stem_);
    w = conv_out(w, stem_);
    const std::size_t sc = stem_.out_channels();
    out.push_back({"stem.conv", LayerKind::real_conv, cfg_.in_channels, sc, 3, stem_.stride(), 1, BinMode::real, h, w});
    out.push_back({"stem.bn", LayerKind::bn, sc, sc, 0, 1, 0, BinMode::real, h, w});
    out.push_back({"stem.act", LayerKind::prelu, sc, sc, 0, 1, 0, BinMode::real, h, w});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const auto& c = b.conv();
      const std::string p = "blocks." + std::to_string(i);
      const std::size_t in_h = h, in_w = w;
      if (c.mode() != BinMode::real)
        out.push_back({p + ".sign", LayerKind::sign, c.in_channels(), c.in_channels(), 0, 1, 0, c.mode(), in_h, in_w});
      h = conv_out(h, c);
      w = conv_out(w, c);
      out.push_back({p + ".conv", c.mode() == BinMode::real ? LayerKind::real_conv : LayerKind::bin_conv,
                     c.in_channels(), c.out_channels(), c.kernel(), c.stride(), c.padding(), c.mode(), h, w});
      out.push_back({p + ".bn", LayerKind::bn, c.out_channels(), c.out_channels(), 0, 1, 0, BinMode::real, h, w});
      switch (b.shortcut_kind()) {
        case BinaryBlock::Shortcut::none:
        case BinaryBlock::Shortcut::identity: break;
        case BinaryBlock::Shortcut::pool:
          out.push_back({p + ".pool", LayerKind::pool, c.in_channels(), c.in_channels(), c.stride(), c.stride(), 0, BinMode::real, h, w});
          break;
        case BinaryBlock::Shortcut::pool_project:
          if (c.stride() > 1)
            out.push_back({p + ".pool", LayerKind::pool, c.in_channels(), c.in_channels(), c.stride(), c.stride(), 0, BinMode::real, h, w});
          out.push_back({p + ".proj", LayerKind::real_conv, c.in_channels(), c.out_channels(), 1, 1, 0, BinMode::real, h, w});
          out.push_back({p + ".proj_bn", LayerKind::bn, c.out_channels(), c.out_channels(), 0, 1, 0, BinMode::real, h, w});
          break;
      }
      if (b.shortcut_kind() != BinaryBlock::Shortcut::none)
        out.push_back({p + ".add", LayerKind::shortcut_add, c.out_channels(), c.out_channels(), 0, 1, 0, BinMode::real, h, w});
      out.push_back({p + ".act", LayerKind::prelu, c.out_channels(), c.out_channels(), 0, 1, 0, BinMode::real, h, w});
    }
    out.push_back({"gap", LayerKind::pool, feature_dim_, feature_dim_, h, h, 0, BinMode::real, 1, 1});
    return out;
  }

  const BackboneConfig& config() const { return cfg_; }
  ArchId arch() const { return cfg_.arch; }
  BinMode mode() const { return cfg_.mode; }
  std::size_t width() const { return cfg_.width; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::vector<BinaryBlock>& blocks() { return blocks_; }
  const std::vector<BinaryBlock>& blocks() const { return blocks_; }
  const Conv2d& stem() const { return stem_; }
  const BatchNorm& stem_bn() const { return stem_bn_; }
  BatchNorm& stem_bn() { return stem_bn_; }
  const PReLU& stem_act() const { return stem_act_; }

 private:
  BackboneConfig cfg_;
  Conv2d stem_;
  BatchNorm stem_bn_;
  PReLU stem_act_;
  std::vector<BinaryBlock> blocks_;
  std::size_t feature_dim_ = 0;
};

/// Deterministic construction; `width` ≥ 8.
inline Backbone build_backbone(ArchId arch, std::size_t width, BinMode mode, std::size_t in_channels = 3,
                               std::uint64_t seed = 0) {
  BackboneConfig cfg;
  cfg.arch = arch;
  cfg.width = width;
  cfg.mode = mode;
  cfg.in_channels = in_channels;
  cfg.seed = seed;
  return Backbone(cfg);
}

inline Backbone build_backbone(const std::string& arch, std::size_t width, BinMode mode,
                               std::size_t in_channels = 3, std::uint64_t seed = 0) {
  return build_backbone(parse_arch(arch), width, mode, in_channels, seed);
}

// ------------------------------------------------------------------------ head

/// linear -> PReLU -> linear, with optional row-wise l2 normalization.
class ProjectionHead {
 public:
  static constexpr std::size_t kDefaultDim = 64;

  ProjectionHead() = default;
  ProjectionHead(std::size_t in, std::size_t out, bool normalize, std::mt19937_64& rng)
      : fc1_(in, in, rng), act_(in), fc2_(in, out, rng), normalize_(normalize) {}

  Tensor forward(const Tensor& features) const {
    Tensor z = raw(features);
    return normalize_ ? l2_normalize(z) : z;
  }
  /// Output before the l2 normalisation.
  Tensor raw(const Tensor& features) const { return fc2_.forward(act_.forward(fc1_.forward(features))); }
  bool normalized() const { return normalize_; }
  std::size_t out_dim() const { return fc2_.out_features(); }

  void collect(const std::string& p, std::vector<NamedTensor>& params) const {
    fc1_.collect(p + ".fc1", params);
    act_.collect(p + ".act", params);
    fc2_.collect(p + ".fc2", params);
  }
  const Linear& fc1() const { return fc1_; }
  const PReLU& act() const { return act_; }
  const Linear& fc2() const { return fc2_; }

 private:
  Linear fc1_;
  PReLU act_;
  Linear fc2_;
  bool normalize_ = true;
};

// -------------------------------------------------------------- state handling

inline void copy_into(const std::vector<NamedTensor>& dst, const StateDict& src, bool strict = true) {
  for (const auto& nt : dst) {
    auto it = src.find(nt.name);
    if (it == src.end()) {
      if (strict) throw ConfigError("missing tensor '" + nt.name + "' in state");
      continue;
    }
    if (it->second.shape() != nt.tensor.shape())
      throw DimensionError("tensor '" + nt.name + "' has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(nt.tensor.shape()));
    Tensor t = nt.tensor;
    std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
  }
}

inline void append_state(StateDict& out, const std::string& prefix, const std::vector<NamedTensor>& ts) {
  for (const auto& nt : ts) out[prefix + nt.name] = nt.tensor.detach();
}

// ----------------------------------------------------------------- diagnostics

struct SaturationStats {
  std::vector<std::string> layers;           // one per sign layer
  std::vector<double> saturated_fraction;    // |a| ≥ 1, in [0, 1]
  std::vector<std::vector<double>> weight_l1_means;  // per bin-conv output channel
};

/// Saturation of the pre-sign activations of every sign layer, plus per-channel
/// latent-weight l1 means of the conv each sign feeds. Runs in eval mode.
inline SaturationStats saturation_report(Backbone& model, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(0) == 0) throw ConfigError("saturation_report: empty batch");
  if (model.mode() == BinMode::real) throw ConfigError("saturation_report: model has no sign layers");
  ForwardTrace trace;
  {
    NoGradGuard ng;
    model.forward(batch, false, &trace);
  }
  SaturationStats s;
  s.layers = trace.sign_layers;
  for (const auto& v : trace.pre_sign) s.saturated_fraction.push_back(saturated_fraction<float>(v));
  for (const auto& b : model.blocks()) s.weight_l1_means.push_back(channel_l1_means(b.conv().weight()));
  return s;
}

}  // namespace sbnn
