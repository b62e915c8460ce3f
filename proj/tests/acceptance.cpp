// Acceptance gate: one PASS/FAIL line per criterion. Runs the committed
// synthetic configuration end to end; expect roughly 20 minutes on one core.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>

#include "acceptance.hpp"
#include "deacl/deacl.hpp"

using namespace deacl;
namespace fs = std::filesystem;
using acceptance::Verdict;

namespace {

// Probe RA (%) that AFF must reach; pinned from the committed baseline run,
// where random-init AFF plateaus between 20 and 33 within the epoch budget.
constexpr double kAffProbeThreshold = 40;

constexpr int kSeeds = 5;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ForwardFn linear_forward(const Tensor& w) {
  return [w](const Tensor& x) {
    const auto B = x.dim(0);
    return matmul(reshape(x, {B, x.numel() / B}), reshape(w, {w.numel(), 1}));
  };
}

Tensor uniform(Shape shape, std::mt19937_64& gen, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(gen));
  return Tensor(std::move(shape), std::move(v));
}

Verdict attack_soundness() {
  std::mt19937_64 gen(11);
  std::uniform_int_distribution<int> pick(0, 1 << 20);
  std::size_t bound_violations = 0, zero_eps_mismatch = 0, step_mismatch = 0, zero_eps_trials = 0, step_trials = 0;
  double worst_excess = -1;
  EncoderConfig ec;
  ec.height = ec.width = 6;
  ec.widths = {3, 4};
  ec.rep_dim = 4;
  Rng init(5);
  Encoder enc(ec, init);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = 1 + pick(gen) % 4, C = trial % 2 ? 1 : 2, H = 6;
    const bool encoder_model = trial % 10 == 0;
    const Shape shape{B, encoder_model ? 1 : C, H, H};
    const bool zero_eps = trial % 7 == 0;
    const bool one_step = !zero_eps && !encoder_model && trial % 5 == 1;
    AttackConfig cfg;
    cfg.epsilon = zero_eps ? 0 : std::uniform_real_distribution<double>(1e-3, 0.3)(gen);
    cfg.alpha = std::uniform_real_distribution<double>(0, 0.2)(gen);
    cfg.steps = pick(gen) % 7;
    cfg.restarts = 1 + pick(gen) % 3;
    cfg.random_start = pick(gen) % 2;
    cfg.objective = Objective::Output;
    Tensor x = uniform(shape, gen, 0, 1);
    const Tensor w = uniform({shape_numel(shape) / B}, gen, -1, 1);
    AttackContext ctx;
    ForwardFn forward = linear_forward(w);
    if (encoder_model) {
      cfg.objective = Objective::CosineToTarget;
      ctx.targets = uniform({B, 4}, gen, -1, 1);
      forward = [&enc](const Tensor& t) { return enc.forward(t, NormMode::TrainFrozenStats); };
    }
    if (one_step) {
      x = uniform(shape, gen, 0.3, 0.7);
      cfg.steps = 1;
      cfg.restarts = 1;
      cfg.random_start = false;
      cfg.epsilon = std::uniform_real_distribution<double>(0.05, 0.2)(gen);
      cfg.alpha = std::uniform_real_distribution<double>(0.001, cfg.epsilon)(gen);
    }
    Rng rng(trial);
    const auto res = pgd(forward, x, ctx, cfg, rng);
    const auto xv = x.values(), av = res.x_adv.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double excess = std::abs(double(av[i]) - double(xv[i])) - cfg.epsilon;
      worst_excess = std::max(worst_excess, excess);
      if (excess > 1e-6 || av[i] < 0 || av[i] > 1) ++bound_violations;
    }
    if (zero_eps) {
      ++zero_eps_trials;
      if (!std::equal(xv.begin(), xv.end(), av.begin())) ++zero_eps_mismatch;
    }
    if (one_step) {
      ++step_trials;
      const auto per = xv.size() / B;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double wi = w.values()[i % per];
        const double expect = wi > 0 ? cfg.alpha : wi < 0 ? -cfg.alpha : 0;
        if (std::abs((double(av[i]) - double(xv[i])) - expect) > 1e-6) {
          ++step_mismatch;
          break;
        }
      }
    }
  }
  return {bound_violations == 0 && zero_eps_mismatch == 0 && step_mismatch == 0,
          format("1000 trials: %zu bound violations (max excess %.1e), eps=0 bitwise %zu/%zu, one-step alpha*sign(w) "
                 "%zu/%zu",
                 bound_violations, worst_excess, zero_eps_trials - zero_eps_mismatch, zero_eps_trials,
                 step_trials - step_mismatch, step_trials)};
}

// Stage-2 variants compared in the directional ablations.
struct Variant {
  std::string name, axis, value;
};

const std::vector<Variant>& variants() {
  static const std::vector<Variant> v{{"baseline", "", ""},
                                      {"wd=1e-6", "weight_decay", "1e-6"},
                                      {"AE strong", "augmentation", "strong/weak"},
                                      {"projector on", "projector", "on"},
                                      {"collapse on", "collapse_prevention", "on"},
                                      {"student random", "student_init", "random"}};
  return v;
}

struct VariantRun {
  double sa = 0, ra = 0, seconds = 0;
  std::optional<std::size_t> converge_epoch;
};

struct SeedRun {
  double teacher_sa = 0, teacher_ra = 0;
  std::map<std::string, VariantRun> variants;
  double attack_share = 0;
  std::size_t attack_steps = 0;
  bool hashes_ok = true;
  std::string hash_note;
  std::vector<double> aff_deacl, aff_random;
};

/// First epoch (1-based) at which the clean term has covered 90% of its
/// final value, measured from the uninformative reference loss 0.
std::optional<std::size_t> epochs_to_converge(const std::vector<Stage2LogRow>& log) {
  if (log.empty()) return std::nullopt;
  const double target = 0.9 * log.back().loss_clean_term;
  for (std::size_t e = 0; e < log.size(); ++e)
    if (log[e].loss_clean_term <= target) return e + 1;
  return std::nullopt;
}

SeedRun run_seed(const RunConfig& base, int seed) {
  RunConfig cfg = base;
  cfg.seed = seed;
  cfg.resolve();
  const Datasets data = load_datasets(cfg);
  SeedRun out;
  const Stage1Result s1 = train_stage1(data.train, cfg.encoder, cfg.stage1);
  const Encoder& teacher = s1.encoder;
  const auto teacher_hash = teacher.params().hash();
  auto check_slf = [&](const SlfResult& r, const char* what) {
    if (r.encoder_hash_before != r.encoder_hash_after) {
      out.hashes_ok = false;
      out.hash_note += std::string(" SLF changed ") + what;
    }
  };
  {
    const auto r = slf(teacher, data.train, data.test, cfg.eval.slf, cfg.eval.attack);
    check_slf(r, "teacher");
    out.teacher_sa = r.metrics.sa;
    out.teacher_ra = r.metrics.ra;
  }
  std::optional<Encoder> student;
  for (const auto& v : variants()) {
    Stage2Config s2 = cfg.stage2;
    if (!v.axis.empty()) apply_ablation(s2, v.axis, v.value);
    Stopwatch watch;
    Stage2Result res = train_stage2(data.train, teacher, s2);
    const auto m = slf(res.student, data.train, data.test, cfg.eval.slf, cfg.eval.attack);
    check_slf(m, v.name.c_str());
    if (res.teacher_hash_before != teacher_hash || res.teacher_hash_after != teacher_hash ||
        teacher.params().hash() != teacher_hash) {
      out.hashes_ok = false;
      out.hash_note += " teacher changed in " + v.name;
    }
    out.variants[v.name] = {m.metrics.sa, m.metrics.ra, watch.seconds(), epochs_to_converge(res.log)};
    if (v.axis.empty()) {
      const double attack = res.phases.get("stage2.attack"), update = res.phases.get("stage2.update");
      out.attack_share = attack / (attack + update);
      out.attack_steps = s2.attack.steps;
      student.emplace(std::move(res.student));
    }
  }
  // AFF warm start: DeACL student versus a randomly initialized encoder.
  Rng rng(SeedStreams(cfg.seed).stream_seed("random-encoder"));
  const Encoder random_encoder(cfg.encoder, rng);
  out.aff_deacl = aff(*student, data.train, data.test, cfg.eval.aff, cfg.eval.attack).probe_ra;
  out.aff_random = aff(random_encoder, data.train, data.test, cfg.eval.aff, cfg.eval.attack).probe_ra;
  return out;
}

Verdict frozen_contracts(const RunConfig& base, const std::vector<SeedRun>& runs) {
  bool ok = true;
  std::string note;
  for (const auto& r : runs)
    if (!r.hashes_ok) ok = false, note += r.hash_note;
  // Precomputed pseudo-targets: the bank fingerprint must not move across epochs.
  RunConfig cfg = base;
  cfg.stage2.epochs = 3;
  cfg.stage2.target_mode = TargetMode::Precomputed;
  cfg.stage2.bank_augmentation = AugKind::Weak;
  cfg.resolve();
  const Datasets data = load_datasets(cfg);
  Rng rng(1);
  const Encoder teacher(cfg.encoder, rng);
  const auto res = train_stage2(data.train, teacher, cfg.stage2);
  const auto expected = make_pseudo_targets(teacher, data.train, AugKind::Weak, SeedStreams(cfg.stage2.seed)).hash();
  std::size_t bank_ok = 0;
  for (auto h : res.bank_hashes) bank_ok += h == expected;
  ok = ok && bank_ok == res.bank_hashes.size() && !res.bank_hashes.empty();
  return {ok, format("teacher hash constant over %zu stage-2 runs, encoder hash constant over %zu SLF runs, bank hash "
                     "constant %zu/%zu epochs%s",
                     runs.size() * variants().size(), runs.size() * (variants().size() + 1), bank_ok,
                     res.bank_hashes.size(), note.c_str())};
}

Verdict determinism(const RunConfig& base) {
  RunConfig cfg = base;
  cfg.stage1.epochs = 20;
  cfg.stage2.epochs = 20;
  cfg.resolve();
  const fs::path root = fs::temp_directory_path() / "deacl_acceptance" / "determinism";
  fs::remove_all(root);
  Stopwatch watch;
  run_full(cfg, root / "a");
  run_full(cfg, root / "b");
  const double secs = watch.seconds();
  const auto a = read_text(root / "a" / "metrics.csv"), b = read_text(root / "b" / "metrics.csv");
  return {a == b && secs < 600,
          format("two 20+20 epoch runs, metrics.csv %s (%zu bytes), %.0f s total", a == b ? "byte-identical" : "DIFFER",
                 a.size(), secs)};
}

Verdict efficacy(const std::vector<SeedRun>& runs) {
  std::vector<double> gain, drop, t_ra, s_ra, t_sa, s_sa;
  for (const auto& r : runs) {
    const auto& s = r.variants.at("baseline");
    gain.push_back(s.ra - r.teacher_ra);
    drop.push_back(r.teacher_sa - s.sa);
    t_ra.push_back(r.teacher_ra);
    s_ra.push_back(s.ra);
    t_sa.push_back(r.teacher_sa);
    s_sa.push_back(s.sa);
  }
  const double g = median(gain), d = median(drop);
  return {g >= 20 && d <= 15,
          format("median RA gain %.1f (>= 20), median SA drop %.1f (<= 15); stage-1 SA/RA %.1f/%.1f, DeACL SA/RA %.1f/%.1f",
                 g, d, median(t_sa), median(t_ra), median(s_sa), median(s_ra))};
}

Verdict ablations(const std::vector<SeedRun>& runs) {
  auto med = [&](const std::string& name) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.variants.at(name).ra);
    return median(v);
  };
  auto conv = [&](const std::string& name) {
    std::vector<double> v;
    for (const auto& r : runs) {
      const auto e = r.variants.at(name).converge_epoch;
      v.push_back(e ? double(*e) : 1e9);
    }
    return median(v);
  };
  double slowest = 0;
  for (const auto& r : runs)
    for (const auto& [name, v] : r.variants) slowest = std::max(slowest, v.seconds);
  const double base = med("baseline");
  struct Check {
    std::string text;
    bool ok;
  };
  const std::vector<Check> checks{
      {format("wd 5e-4 %.1f >= 1e-6 %.1f", base, med("wd=1e-6")), base >= med("wd=1e-6")},
      {format("weak/weak %.1f > strong-AE %.1f", base, med("AE strong")), base > med("AE strong")},
      {format("projector off %.1f >= on %.1f", base, med("projector on")), base >= med("projector on")},
      {format("collapse off %.1f >= on %.1f", base, med("collapse on")), base >= med("collapse on")},
      {format("90%% convergence epoch teacher-init %.0f < random-init %.0f", conv("baseline"), conv("student random")),
       conv("baseline") < conv("student random")},
      {format("slowest run %.0f s < 300 s", slowest), slowest < 300},
  };
  bool ok = true;
  std::string text;
  for (const auto& c : checks) {
    ok = ok && c.ok;
    text += (text.empty() ? "" : "; ") + c.text + (c.ok ? "" : " [FAIL]");
  }
  return {ok, text};
}

Verdict sweep_sanity() {
  // Two-class linear model on 1x4x4 images with a checkerboard direction p:
  // logit_1 - logit_0 = 2 <p, x - 0.5>. Samples sit at varying margins along p.
  Dataset test(1, 4, 4, 2, "linear");
  std::vector<Real> w(32), b(2, 0), img(16);
  for (std::size_t i = 0; i < 16; ++i) {
    const Real p = (i / 4 + i % 4) % 2 == 0 ? 1 : -1;
    w[2 * i] = -p;
    w[2 * i + 1] = p;
  }
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> margin(0.0, 0.08);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (std::size_t s = 0; s < 400; ++s) {
    const int label = static_cast<int>(s % 2);
    const double m = margin(gen) * (label ? 1 : -1);
    for (std::size_t i = 0; i < 16; ++i) {
      const double p = (i / 4 + i % 4) % 2 == 0 ? 1 : -1;
      img[i] = static_cast<Real>(std::clamp(0.5 + m * p + noise(gen), 0.0, 1.0));
    }
    test.push_back(img, label, s);
  }
  const Tensor W({16, 2}, w), bias({2}, b);
  const LogitsFn model = [&](const Tensor& x) {
    return add_bias(matmul(reshape(add(x, Tensor::full(x.shape(), Real(-0.5))), {x.dim(0), 16}), W), bias);
  };
  const std::vector<std::size_t> steps{1, 5, 10, 20};
  const std::vector<double> eps{0, 1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255};
  const auto rows = sweep(model, test, steps, eps, AttackConfig{}, 0);
  const double sa = measure(model, test, AttackConfig{0, 0, 0, 1, false, Objective::CrossEntropy}, 0).sa;
  bool monotone = true, zero_is_sa = true;
  for (std::size_t s = 0; s < steps.size(); ++s)
    for (std::size_t e = 0; e < eps.size(); ++e) {
      const auto& r = rows[s * eps.size() + e];
      if (e == 0 && r.ra != sa) zero_is_sa = false;
      if (e > 0 && r.ra > rows[s * eps.size() + e - 1].ra) monotone = false;
    }
  const fs::path dir = fs::temp_directory_path() / "deacl_acceptance";
  fs::create_directories(dir);
  write_text(dir / "sweep.csv", sweep_csv(rows, 0));
  const auto csv = read_text(dir / "sweep.csv");
  const auto lines = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
  const bool emitted = lines == rows.size() + 2;
  return {monotone && zero_is_sa && emitted,
          format("%zux%zu grid: RA non-increasing in eps %s, eps=0 column == SA (%.2f) %s, CSV %s (%zu rows); RA at "
                 "16/255 with 20 steps %.2f",
                 steps.size(), eps.size(), monotone ? "yes" : "NO", sa, zero_is_sa ? "yes" : "NO",
                 emitted ? "written" : "MISSING", rows.size(), rows.back().ra)};
}

Verdict aff_warm_start(const std::vector<SeedRun>& runs) {
  std::vector<double> d, r;
  std::string curves;
  for (const auto& run : runs) {
    const auto ed = epochs_to_reach(run.aff_deacl, kAffProbeThreshold);
    const auto er = epochs_to_reach(run.aff_random, kAffProbeThreshold);
    // Never reaching the threshold counts as one epoch past the budget.
    d.push_back(ed ? double(*ed) : double(run.aff_deacl.size() + 1));
    r.push_back(er ? double(*er) : double(run.aff_random.size() + 1));
    curves += format(" %.0f/%.0f", d.back(), r.back());
  }
  const double md = median(d), mr = median(r);
  return {md < mr, format("epochs to probe RA >= %.1f: DeACL-init median %.0f < random-init median %.0f (per seed%s)",
                          kAffProbeThreshold, md, mr, curves.c_str())};
}

Verdict timing_share(const std::vector<SeedRun>& runs) {
  std::vector<double> share;
  for (const auto& r : runs) share.push_back(r.attack_share);
  const double steps = static_cast<double>(runs.front().attack_steps);
  const double expected = steps / (steps + 1), got = median(share);
  const double rel = std::abs(got - expected) / expected;
  return {rel <= 0.2, format("median attack share of step time %.3f vs %zu/(%zu+1) = %.3f, relative gap %.1f%% (<= 20%%)",
                             got, runs.front().attack_steps, runs.front().attack_steps, expected, 100 * rel)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(DEACL_ACCEPTANCE_CONFIG);
  const RunConfig base = load_run_config(config);
  std::map<int, Verdict> verdicts;
  auto report = [&](int id, Verdict v) {
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
    verdicts[id] = std::move(v);
  };
  report(1, acceptance::gradient_correctness());
  report(2, attack_soundness());
  report(3, acceptance::loss_oracles());
  report(5, determinism(base));
  report(8, sweep_sanity());

  std::vector<SeedRun> runs;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Stopwatch watch;
    runs.push_back(run_seed(base, seed));
    std::cout << "  seed " << seed << " done in " << static_cast<int>(watch.seconds()) << " s" << std::endl;
  }
  report(4, frozen_contracts(base, runs));
  report(6, efficacy(runs));
  report(7, ablations(runs));
  report(9, aff_warm_start(runs));
  report(10, timing_share(runs));

  std::size_t passed = 0;
  for (const auto& [id, v] : verdicts) passed += v.pass;
  std::cout << passed << "/" << verdicts.size() << " criteria passed" << std::endl;
  return passed == verdicts.size() ? 0 : 1;
}
