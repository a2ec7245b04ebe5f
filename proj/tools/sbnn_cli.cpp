// sbnn: command-line front end for pre-training, evaluation, export and
// inspection of self-supervised binary networks.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "sbnn/sbnn.hpp"

using namespace sbnn;

namespace {

struct DataOpts {
  std::string dataset = "synth";
  std::string data;
  std::string test_data;
  std::size_t synth_count = 2000;
  std::size_t synth_test_count = 1000;
  std::uint64_t synth_seed = 1;

  void add(CLI::App* app) {
    app->add_option("--dataset", dataset, "idx | cifar | synth")->check(CLI::IsMember({"idx", "cifar", "synth"}));
    app->add_option("--data", data, "training images (IDX file, CIFAR .bin file or directory)");
    app->add_option("--test-data", test_data, "evaluation images (defaults: CIFAR test_batch in --data)");
    app->add_option("--synth-count", synth_count, "synthetic training images");
    app->add_option("--synth-test-count", synth_test_count, "synthetic evaluation images");
    app->add_option("--synth-seed", synth_seed, "synthetic dataset seed");
  }

  Dataset train() const {
    switch (parse_format(dataset)) {
      case DataFormat::synthetic: return make_synthetic({synth_seed, synth_count, 10, {3, 32, 32}});
      case DataFormat::cifar_bin:
        return std::filesystem::is_directory(data) ? load_cifar(data, "data_batch") : load_cifar(data);
      case DataFormat::idx: return load_idx(data);
    }
    throw ConfigError("unsupported dataset");
  }

  Dataset test() const {
    switch (parse_format(dataset)) {
      case DataFormat::synthetic: return make_synthetic({synth_seed + 1000, synth_test_count, 10, {3, 32, 32}});
      case DataFormat::cifar_bin:
        if (!test_data.empty()) return load_cifar(test_data);
        return load_cifar(data, "test_batch");
      case DataFormat::idx:
        if (test_data.empty()) throw ConfigError("--test-data is required for IDX evaluation");
        return load_idx(test_data);
    }
    throw ConfigError("unsupported dataset");
  }
};

std::vector<double> parse_lrs(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  if (out.empty()) throw ConfigError("empty learning-rate list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"Self-supervised binary neural network toolkit"};
  app.require_subcommand(1);

  // ---- pretrain
  auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training");
  std::string scheme = "cl", plan = "one-step", teacher, teacher_mode = "offline", optimizer = "adam";
  std::string arch = "toy-bin", aug = "lite", out = "model.s2bn";
  double lr = -1, wd = kDefaultStep2WeightDecay, tau = kDefaultTemperature;
  std::size_t queue = 4096, batch = 128, width = 32;
  int epochs = 30, step1_epochs = -1;
  std::uint64_t seed = 0;
  DataOpts pdata;
  pre->add_option("--scheme", scheme, "cl | cl+kd | kd")->check(CLI::IsMember({"cl", "cl+kd", "kd"}));
  pre->add_option("--plan", plan, "one-step | two-step")->check(CLI::IsMember({"one-step", "two-step"}));
  pre->add_option("--teacher", teacher, "teacher checkpoint (offline teacher, or online initialisation)");
  pre->add_option("--teacher-mode", teacher_mode, "online | offline")->check(CLI::IsMember({"online", "offline"}));
  pre->add_option("--optimizer", optimizer, "sgd | adam")->check(CLI::IsMember({"sgd", "adam"}));
  pre->add_option("--lr", lr, "initial learning rate (default 3e-4 Adam, 3e-2 SGD)");
  pre->add_option("--wd", wd, "weight decay of the fully binary stage (step 1 always uses 0)");
  pre->add_option("--tau", tau, "temperature");
  pre->add_option("--queue-size", queue, "negative queue length");
  pre->add_option("--epochs", epochs, "epochs (per step for the two-step plan)");
  pre->add_option("--step1-epochs", step1_epochs, "epochs of step 1 (default: --epochs)");
  pre->add_option("--batch", batch, "batch size");
  pre->add_option("--seed", seed, "seed");
  pre->add_option("--arch", arch, "toy-bin | bireal-tiny | teacher-real")
      ->check(CLI::IsMember({"toy-bin", "bireal-tiny", "teacher-real"}));
  pre->add_option("--width", width, "base channel width");
  pre->add_option("--aug", aug, "lite | vanilla")->check(CLI::IsMember({"lite", "vanilla"}));
  pre->add_option("--out", out, "output checkpoint");
  pdata.add(pre);

  // ---- linear-eval
  auto* lin = app.add_subcommand("linear-eval", "linear classifier on a frozen backbone");
  std::string ckpt, lrs = "30,20,10,5,1,0.5,0.1,0.05";
  int lin_epochs = 60;
  std::uint64_t lin_seed = 0;
  DataOpts ldata;
  lin->add_option("checkpoint", ckpt, "backbone checkpoint")->required();
  lin->add_option("--lrs", lrs, "comma-separated learning-rate grid");
  lin->add_option("--epochs", lin_epochs, "classifier epochs");
  lin->add_option("--seed", lin_seed, "seed");
  ldata.add(lin);

  // ---- finetune
  auto* fin = app.add_subcommand("finetune", "transfer by fine-tuning");
  std::string fck;
  bool freeze = false, scratch = false, multi_label = false;
  FinetuneConfig fcfg;
  std::string farch = "toy-bin";
  std::size_t fwidth = 32;
  DataOpts fdata;
  fin->add_option("checkpoint", fck, "pre-trained checkpoint");
  fin->add_flag("--scratch", scratch, "start from random initialisation instead of a checkpoint");
  fin->add_option("--arch", farch, "architecture for --scratch");
  fin->add_option("--width", fwidth, "width for --scratch");
  fin->add_flag("--freeze", freeze, "train only the classifier");
  fin->add_flag("--multi-label", multi_label, "sigmoid cross-entropy on one-hot targets");
  fin->add_option("--lr", fcfg.lr, "learning rate");
  fin->add_option("--epochs", fcfg.epochs, "epochs");
  fin->add_option("--batch", fcfg.batch, "batch size");
  fin->add_option("--seed", fcfg.seed, "seed");
  fdata.add(fin);

  // ---- export-bin
  auto* exp = app.add_subcommand("export-bin", "pack a fully binary checkpoint for inference");
  std::string eck, eout = "model.packed.s2bn";
  exp->add_option("checkpoint", eck, "fully binary checkpoint")->required();
  exp->add_option("--out", eout, "output file");

  // ---- count-ops
  auto* ops = app.add_subcommand("count-ops", "BOPs / FLOPs / OPs of a backbone");
  std::string ock, oarch = "toy-bin", omode = "fully-bin";
  std::size_t owidth = 32, osize = 32, ochan = 3;
  ops->add_option("checkpoint", ock, "checkpoint (otherwise --arch/--width/--mode)");
  ops->add_option("--arch", oarch, "architecture");
  ops->add_option("--width", owidth, "width");
  ops->add_option("--mode", omode, "real | bin-act-only | fully-bin");
  ops->add_option("--input-size", osize, "input height and width");
  ops->add_option("--channels", ochan, "input channels");

  // ---- diagnose
  auto* dia = app.add_subcommand("diagnose", "activation saturation and latent-weight report (CSV)");
  std::string dck, dout;
  std::size_t dbatch = 256;
  DataOpts ddata;
  dia->add_option("checkpoint", dck, "checkpoint")->required();
  dia->add_option("--batch", dbatch, "images to analyse");
  dia->add_option("--out", dout, "CSV path (default stdout)");
  ddata.add(dia);

  // ---- bench
  auto* ben = app.add_subcommand("bench", "packed xnor dot vs f32 dot throughput");
  std::size_t blen = 4096;
  double bsec = 0.5;
  ben->add_option("--length", blen, "vector length");
  ben->add_option("--seconds", bsec, "minimum timing window per kernel");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) {
      RunConfig cfg;
      cfg.scheme = parse_scheme(scheme);
      cfg.plan = parse_plan(plan);
      cfg.teacher_mode = teacher_mode == "online" ? TeacherMode::online : TeacherMode::offline;
      if (!teacher.empty()) cfg.teacher = load_checkpoint(teacher);
      cfg.optim.kind = parse_optimizer(optimizer);
      cfg.optim.lr = lr > 0 ? lr : (cfg.optim.kind == OptimizerKind::adam ? 3e-4 : 3e-2);
      cfg.weight_decay = wd;
      cfg.tau = tau;
      cfg.queue_size = queue;
      cfg.epochs = epochs;
      cfg.step1_epochs = step1_epochs;
      cfg.batch = batch;
      cfg.seed = seed;
      cfg.arch = parse_arch(arch);
      cfg.width = width;
      cfg.aug = parse_aug(aug);
      cfg.on_epoch = [](const EpochLog& e) {
        std::cerr << to_string(e.stage) << " epoch " << e.epoch << " lr " << e.lr << " loss " << e.loss;
        if (e.contrastive) std::cerr << " cl " << e.contrastive;
        if (e.distill) std::cerr << " kl " << e.distill;
        std::cerr << '\n';
      };
      const Dataset d = pdata.train();
      const auto r = pretrain(cfg, d.unlabeled());
      save_checkpoint(r.checkpoint, out);
      std::cout << "wrote " << out << '\n';
    } else if (*lin) {
      LinearEvalConfig le;
      le.lrs = parse_lrs(lrs);
      le.epochs = lin_epochs;
      le.seed = lin_seed;
      const auto r = linear_eval(load_checkpoint(ckpt), ldata.train(), ldata.test(), le);
      std::cout << format_lr_grid({"top1"}, {r});
      std::cout << "best_lr=" << r.best_lr << " top1=" << 100.0 * r.best_accuracy << '\n';
    } else if (*fin) {
      const Dataset tr = fdata.train(), te = fdata.test();
      SslModel init;
      std::optional<Normalization> norm;
      if (scratch) {
        ModelSpec s;
        s.arch = parse_arch(farch);
        s.width = fwidth;
        s.in_channels = tr.shape.c;
        s.seed = fcfg.seed;
        init = SslModel(s);
      } else {
        if (fck.empty()) throw ConfigError("finetune needs a checkpoint or --scratch");
        const Checkpoint ck = load_checkpoint(fck);
        init = model_from_checkpoint(ck);
        norm = normalization_from(ck);
      }
      fcfg.freeze = freeze;
      fcfg.multi_label = multi_label;
      std::optional<MultiLabelTargets> ml;
      if (multi_label) {
        auto onehot = [](const Dataset& d) {
          Tensor t = Tensor::zeros({d.count, d.num_classes});
          for (std::size_t i = 0; i < d.count; ++i) t[i * d.num_classes + static_cast<std::size_t>(d.label(i))] = 1;
          return t;
        };
        ml = MultiLabelTargets{onehot(tr), onehot(te)};
      }
      const auto r = transfer_finetune(init, tr, te, fcfg, ml ? &*ml : nullptr, norm);
      std::cout << "accuracy=" << 100.0 * r.accuracy << '\n';
    } else if (*exp) {
      const Checkpoint packed = export_binary(load_checkpoint(eck));
      save_checkpoint(packed, eout);
      const auto sz = packed_size(packed);
      std::cout << "wrote " << eout << " (bin-conv weights " << sz.packed_bytes << " bytes packed, " << sz.real_bytes
                << " bytes as f32)\n";
    } else if (*ops) {
      Backbone b;
      if (!ock.empty()) {
        const Checkpoint ck = load_checkpoint(ock);
        const auto s = spec_from_checkpoint(ck);
        b = build_backbone(s.arch, s.width, s.mode, s.in_channels);
        ochan = s.in_channels;
      } else {
        b = build_backbone(parse_arch(oarch), owidth, parse_mode(omode), ochan);
      }
      std::cout << format_ops(count_ops(b, osize, osize)) << '\n';
    } else if (*dia) {
      const Checkpoint ck = load_checkpoint(dck);
      const Dataset d = ddata.train();
      const auto norm = normalization_from(ck).value_or(compute_normalization(d));
      std::vector<std::size_t> idx(std::min(dbatch, d.count));
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      const auto lb = labeled_batch(d, idx, 0, idx.size(), norm);
      const auto stats = diagnose(ck, lb.x);
      if (dout.empty()) {
        write_saturation_csv(std::cout, stats);
      } else {
        std::ofstream f(dout);
        write_saturation_csv(f, stats);
      }
    } else if (*ben) {
      const auto r = bench_xnor(blen, bsec);
      std::cout << "length=" << r.length << " xnor_ns=" << r.xnor_ns << " f32_ns=" << r.f32_ns
                << " f32_simd_ns=" << r.f32_simd_ns << " speedup=" << r.speedup << '\n';
    }
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
