// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Criteria 1-10 and 15 are exact property suites; 11-14 are desk-scale
// ordering experiments on procedural 10-class data.

#include <CLI11.hpp>

#include <chrono>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "properties.hpp"

using namespace sbnn;

namespace {

using clock_type = std::chrono::steady_clock;

double since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  [" << id << "] " << name << ": " << detail << std::endl;
  failures += !ok;
}

void run_property(int id, const std::string& name, const std::function<props::Verdict()>& f) {
  const auto t0 = clock_type::now();
  props::Verdict v;
  try {
    v = f();
  } catch (const std::exception& e) {
    v = {false, std::string("threw: ") + e.what()};
  }
  report(id, name, v.ok, v.detail + props::str(" (", std::fixed, std::setprecision(1), since(t0), " s)"));
}

// ------------------------------------------------------------ desk runs

struct DeskSetup {
  std::size_t train_count = 2500;
  std::size_t test_count = 1000;
  int epochs = 30;
  int seeds = 3;
};

// Everything not listed here is the library default (toy-bin width 32,
// Adam lr 3e-4 with linear decay, batch 128, τ 0.2, lite augmentation).
RunConfig base_config(const DeskSetup& d, std::uint64_t seed) {
  RunConfig c;
  c.epochs = d.epochs;
  c.seed = seed;
  c.queue_size = 1024;
  return c;
}

class Desk {
 public:
  explicit Desk(DeskSetup s)
      : setup_(s),
        train_(make_synthetic({1001, s.train_count, 10, {3, 32, 32}})),
        test_(make_synthetic({2002, s.test_count, 10, {3, 32, 32}})) {}

  /// Mean best-of-grid linear-eval top-1 of `variant` over the seeds.
  double mean(const std::string& variant) {
    const auto& v = accuracies(variant);
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }

  const std::vector<double>& accuracies(const std::string& variant) {
    auto it = acc_.find(variant);
    if (it != acc_.end()) return it->second;
    std::vector<double> out;
    for (int s = 0; s < setup_.seeds; ++s) out.push_back(run(variant, static_cast<std::uint64_t>(s)));
    return acc_[variant] = out;
  }

  std::string summary(const std::vector<std::string>& variants) {
    std::ostringstream os;
    for (std::size_t i = 0; i < variants.size(); ++i) {
      const auto& v = accuracies(variants[i]);
      os << (i ? ", " : "") << variants[i] << " " << pct(mean(variants[i])) << " [";
      for (std::size_t j = 0; j < v.size(); ++j) os << (j ? " " : "") << pct(v[j]);
      os << "]";
    }
    return os.str();
  }

  static std::string pct(double a) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * a;
    return os.str();
  }

 private:
  RunConfig config(const std::string& variant, std::uint64_t seed) {
    RunConfig c = base_config(setup_, seed);
    if (variant == "cl") return c;
    if (variant == "cl+kd" || variant == "kd") {
      c.scheme = parse_scheme(variant);
      c.teacher = teacher();
      return c;
    }
    if (variant == "cl/sgd") {
      c.optim.kind = OptimizerKind::sgd;
      c.optim.lr = 3e-2;
      c.optim.momentum = 0.9;
      return c;
    }
    if (variant == "cl/two-step") {
      c.plan = Plan::two_step;
      return c;
    }
    if (variant == "cl/vanilla") {
      c.aug = AugVariant::vanilla;
      return c;
    }
    throw std::logic_error("unknown desk variant " + variant);
  }

  double run(const std::string& variant, std::uint64_t seed) {
    const auto t0 = clock_type::now();
    const auto r = pretrain(config(variant, seed), train_.unlabeled());
    LinearEvalConfig le;
    le.seed = seed;
    const auto ev = linear_eval(r.checkpoint, train_, test_, le);
    std::cerr << "  " << variant << " seed " << seed << ": final loss " << props::str(r.log.back().loss)
              << ", top-1 " << pct(ev.best_accuracy) << " (lr " << props::str(ev.best_lr) << ") in "
              << props::str(std::fixed, std::setprecision(0), since(t0)) << " s" << std::endl;
    return ev.best_accuracy;
  }

  // Real-valued twin pre-trained with the contrastive scheme, shared by all
  // distillation runs.
  const Checkpoint& teacher() {
    if (!teacher_) {
      const auto t0 = clock_type::now();
      RunConfig c = base_config(setup_, 1000);
      c.arch = ArchId::teacher_real;
      const auto r = pretrain(c, train_.unlabeled());
      LinearEvalConfig le;
      const auto ev = linear_eval(r.checkpoint, train_, test_, le);
      std::cerr << "  teacher: final loss " << props::str(r.log.back().loss) << ", top-1 " << pct(ev.best_accuracy)
                << " in " << props::str(std::fixed, std::setprecision(0), since(t0)) << " s" << std::endl;
      teacher_ = r.checkpoint;
    }
    return *teacher_;
  }

  DeskSetup setup_;
  Dataset train_, test_;
  std::optional<Checkpoint> teacher_;
  std::map<std::string, std::vector<double>> acc_;
};

void run_desk(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& f) {
  const auto t0 = clock_type::now();
  std::pair<bool, std::string> r;
  try {
    r = f();
  } catch (const std::exception& e) {
    r = {false, std::string("threw: ") + e.what()};
  }
  report(id, name, r.first, r.second + props::str(" (", std::fixed, std::setprecision(0), since(t0), " s)"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("acceptance criteria");
  std::vector<int> only;
  DeskSetup desk_setup;
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--seeds", desk_setup.seeds, "seeds per desk experiment")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  const std::set<int> sel(only.begin(), only.end());
  auto want = [&](int id) { return sel.empty() || sel.count(id); };
  if (desk_setup.seeds != 3) std::cout << "note: desk experiments use " << desk_setup.seeds << " seeds, not 3\n";

  const auto t0 = clock_type::now();
  if (want(1)) run_property(1, "gradient oracle", [] { return props::gradient_oracle(); });
  if (want(2)) run_property(2, "STE contract", [] { return props::ste_contract(); });
  if (want(3)) run_property(3, "XNOR equivalence", [] { return props::xnor_equivalence(); });
  if (want(4)) run_property(4, "KL/CE gradient equivalence", [] { return props::kl_ce_equivalence(); });
  if (want(5)) run_property(5, "InfoNCE closed forms", [] { return props::info_nce_closed_forms(); });
  if (want(6)) run_property(6, "scheduler/optimizer values", [] { return props::scheduler_optimizer_values(); });
  if (want(7)) run_property(7, "OPs cross-check", [] { return props::ops_cross_check(); });
  if (want(8)) run_property(8, "checkpoint roundtrip/CRC/export", [] { return props::checkpoint_suite(); });
  if (want(9)) run_property(9, "progressive inheritance", [] { return props::progressive_inheritance(); });
  if (want(10)) run_property(10, "pretrain determinism", [] { return props::pretrain_determinism(); });

  Desk desk(desk_setup);
  if (want(11))
    run_desk(11, "scheme ordering", [&] {
      const double cl = desk.mean("cl"), both = desk.mean("cl+kd"), kd = desk.mean("kd");
      const bool ok = kd >= cl + 0.02 && both >= cl;
      return std::pair{ok, "need kd >= cl + 2 and cl+kd >= cl; " + desk.summary({"cl", "cl+kd", "kd"})};
    });
  if (want(12))
    run_desk(12, "optimizer ordering", [&] {
      const bool ok = desk.mean("cl") >= desk.mean("cl/sgd");
      return std::pair{ok, "need adam >= sgd; " + desk.summary({"cl", "cl/sgd"})};
    });
  if (want(13))
    run_desk(13, "two-step vs one-step", [&] {
      const bool ok = desk.mean("cl/two-step") >= desk.mean("cl");
      return std::pair{ok, "need two-step >= one-step; " + desk.summary({"cl", "cl/two-step"})};
    });
  if (want(14))
    run_desk(14, "lite vs vanilla augmentation", [&] {
      const bool ok = desk.mean("cl") >= desk.mean("cl/vanilla") - 0.005;
      return std::pair{ok, "need lite >= vanilla - 0.5; " + desk.summary({"cl", "cl/vanilla"})};
    });

  if (want(15)) run_property(15, "xnor bench and packed size", [] { return props::bench_and_size(); });

  std::cout << (failures ? "FAILED " : "ALL PASSED ") << failures << " failing criteria, " << std::fixed
            << std::setprecision(0) << since(t0) << " s total" << std::endl;
  return failures ? 1 : 0;
}
