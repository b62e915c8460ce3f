#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "deacl/deacl.hpp"

namespace fs = std::filesystem;
using namespace deacl;

namespace {

struct Common {
  std::string config;
  std::string out;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output directory (overrides config and DEACL_OUT)");
  cmd->add_flag("--dry-run", c.dry_run, "Validate and print the resolved configuration only");
}

RunConfig resolve_config(const Common& c) {
  if (c.config.empty()) {
    RunConfig cfg;
    cfg.resolve();
    return cfg;
  }
  return load_run_config(c.config);
}

fs::path out_dir(const Common& c, const RunConfig& cfg) { return c.out.empty() ? output_dir(cfg) : fs::path(c.out); }

void print_dry_run(const RunConfig& cfg, const std::vector<std::string>& phases) {
  std::cout << nlohmann::json(cfg).dump(2) << "\n";
  std::cout << "config_hash: " << hex64(cfg.hash()) << "\n";
  for (const auto& p : phases) std::cout << "timing " << p << " 0.000\n";
}

template <typename T>
std::vector<T> split_list(const std::string& text, T (*parse)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse(item));
  return out;
}

std::string keep(const std::string& s) { return s; }
std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); }
std::uint64_t to_u64(const std::string& s) { return std::stoull(s); }
double to_fraction(const std::string& s) { return parse_fraction(nlohmann::json(s)); }

void print_metrics(const MetricsRecord& r) { std::cout << kMetricsHeader << "\n" << metrics_row(r) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage decoupled adversarial contrastive learning"};
  app.require_subcommand(1);

  Common pre, dis, run, lin, adv, swp, abl, emb;
  std::string teacher_path, ckpt_path, emb_split = "test", emb_file, axis, values, seeds = "0,1,2,3,4";
  std::string sweep_steps, sweep_eps, report_out;
  std::size_t probe_slice = 0;
  bool with_aff = false, force = false;
  std::vector<std::string> report_runs;

  auto* c_pre = app.add_subcommand("pretrain", "Stage 1: contrastive pretraining of the teacher");
  add_common(c_pre, pre);

  auto* c_dis = app.add_subcommand("distill", "Stage 2: adversarial training against teacher pseudo-targets");
  add_common(c_dis, dis);
  c_dis->add_option("--teacher", teacher_path, "Teacher checkpoint (default <out>/teacher.ckpt)");
  c_dis->add_option("--probe", probe_slice, "Per-epoch robustness probe on this many samples (0 = off)");

  auto* c_run = app.add_subcommand("run", "Full pipeline: pretrain, distill, SLF on teacher and student");
  add_common(c_run, run);
  c_run->add_flag("--aff", with_aff, "Also run adversarial full finetuning on the student");

  auto* c_slf = app.add_subcommand("slf", "Linear finetuning on a frozen encoder");
  add_common(c_slf, lin);
  c_slf->add_option("--checkpoint", ckpt_path, "Encoder checkpoint")->required()->check(CLI::ExistingFile);

  auto* c_aff = app.add_subcommand("aff", "Adversarial full finetuning");
  add_common(c_aff, adv);
  c_aff->add_option("--checkpoint", ckpt_path, "Initial encoder checkpoint")->required()->check(CLI::ExistingFile);

  auto* c_swp = app.add_subcommand("sweep", "Robust accuracy over PGD steps x epsilon");
  add_common(c_swp, swp);
  c_swp->add_option("--checkpoint", ckpt_path, "Encoder checkpoint")->required()->check(CLI::ExistingFile);
  c_swp->add_option("--steps", sweep_steps, "Comma-separated step counts");
  c_swp->add_option("--eps", sweep_eps, "Comma-separated epsilons (\"8/255\" accepted)");

  auto* c_abl = app.add_subcommand("ablate", "Stage-2 configuration grid");
  add_common(c_abl, abl);
  c_abl->add_option("--axis", axis, "Axis to vary")->required()->check(CLI::IsMember(ablation_axes()));
  c_abl->add_option("--values", values, "Comma-separated grid values (default: the axis' standard grid)");
  c_abl->add_option("--seeds", seeds, "Comma-separated master seeds");

  auto* c_emb = app.add_subcommand("export-emb", "Write sample_index,label,representation rows");
  add_common(c_emb, emb);
  c_emb->add_option("--checkpoint", ckpt_path, "Encoder checkpoint")->required()->check(CLI::ExistingFile);
  c_emb->add_option("--split", emb_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  c_emb->add_option("--file", emb_file, "Output CSV (default <out>/embeddings_<split>.csv)");

  auto* c_rep = app.add_subcommand("report", "Aggregate metrics.csv of several runs");
  c_rep->add_option("runs", report_runs, "Run directories")->required();
  c_rep->add_flag("--force", force, "Aggregate even when config hashes differ");
  c_rep->add_option("--out", report_out, "Write the report here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_pre) {
      const auto cfg = resolve_config(pre);
      if (pre.dry_run) {
        print_dry_run(cfg, {"stage1.total"});
        return 0;
      }
      const auto out = out_dir(pre, cfg);
      write_text(out / "config.json", nlohmann::json(cfg).dump(2) + "\n");
      const auto res = run_pretrain(cfg, load_datasets(cfg), out);
      const double final_loss = res.log.empty() ? NAN : res.log.back().mean_loss;
      std::cout << "teacher: " << (out / "teacher.ckpt").string() << " final loss " << fmt(final_loss) << " ("
                << fmt(res.seconds, 1) << " s)\n";
    } else if (*c_dis) {
      const auto cfg = resolve_config(dis);
      if (dis.dry_run) {
        print_dry_run(cfg, {"stage2.attack", "stage2.update", "stage2.targets", "stage2.augment"});
        return 0;
      }
      const auto out = out_dir(dis, cfg);
      const fs::path tp = teacher_path.empty() ? out / "teacher.ckpt" : fs::path(teacher_path);
      if (!fs::exists(tp)) throw IoError("missing teacher checkpoint " + tp.string());
      const Encoder teacher = load_encoder(tp);
      const auto data = load_datasets(cfg);
      const auto res = run_distill(cfg, data, teacher, out, probe_slice);
      write_text(out / "timing_stage2.csv", timing_csv(res.phases, cfg.hash()));
      std::cout << "student: " << (out / "student.ckpt").string() << " (" << fmt(res.seconds, 1) << " s, attack "
                << fmt(res.phases.get("stage2.attack"), 1) << " s, update " << fmt(res.phases.get("stage2.update"), 1)
                << " s)\n";
    } else if (*c_run) {
      const auto cfg = resolve_config(run);
      if (run.dry_run) {
        print_dry_run(cfg, {"stage1.total", "stage2.total"});
        return 0;
      }
      const auto out = out_dir(run, cfg);
      const auto res = run_full(cfg, out, with_aff);
      std::cout << metrics_csv(res.metrics, res.config_hash);
    } else if (*c_slf) {
      const auto cfg = resolve_config(lin);
      if (lin.dry_run) {
        print_dry_run(cfg, {"finetune"});
        return 0;
      }
      const auto data = load_datasets(cfg);
      print_metrics(run_slf(cfg, load_encoder(ckpt_path), data, fs::path(ckpt_path).stem().string()));
    } else if (*c_aff) {
      const auto cfg = resolve_config(adv);
      if (adv.dry_run) {
        print_dry_run(cfg, {"finetune"});
        return 0;
      }
      const auto data = load_datasets(cfg);
      std::vector<double> curve;
      print_metrics(run_aff(cfg, load_encoder(ckpt_path), data, fs::path(ckpt_path).stem().string(), &curve));
      for (std::size_t e = 0; e < curve.size(); ++e) std::cout << "probe_RA epoch " << e << " " << fmt(curve[e], 4) << "\n";
    } else if (*c_swp) {
      auto cfg = resolve_config(swp);
      if (!sweep_steps.empty()) cfg.eval.sweep_steps = split_list<std::size_t>(sweep_steps, to_size);
      if (!sweep_eps.empty()) cfg.eval.sweep_eps = split_list<double>(sweep_eps, to_fraction);
      if (swp.dry_run) {
        print_dry_run(cfg, {});
        return 0;
      }
      const auto out = out_dir(swp, cfg);
      const auto data = load_datasets(cfg);
      const Encoder enc = load_encoder(ckpt_path);
      const auto fit = slf(enc, data.train, data.test, cfg.eval.slf, AttackConfig{0, 0, 0, 1, false, Objective::CrossEntropy});
      const auto rows = sweep(classifier_model(enc, fit.classifier), data.test, cfg.eval.sweep_steps, cfg.eval.sweep_eps,
                              cfg.eval.attack, cfg.eval.slf.seed);
      const auto csv = sweep_csv(rows, cfg.hash());
      write_text(out / "sweep.csv", csv);
      std::cout << csv;
    } else if (*c_abl) {
      const auto cfg = resolve_config(abl);
      const auto grid = values.empty() ? default_ablation_values(axis) : split_list<std::string>(values, keep);
      const auto seed_list = split_list<std::uint64_t>(seeds, to_u64);
      for (const auto& v : grid) {
        Stage2Config s2 = cfg.stage2;
        apply_ablation(s2, axis, v);
      }
      std::cout << "axis " << axis << ":";
      for (const auto& v : grid) std::cout << " " << v;
      std::cout << "\nseeds:";
      for (auto s : seed_list) std::cout << " " << s;
      std::cout << "\n";
      if (abl.dry_run) return 0;
      const auto res = run_ablation(cfg, axis, grid, seed_list, out_dir(abl, cfg));
      for (const auto& v : grid) std::cout << v << " median_RA " << fmt(res.median_ra(v), 4) << "\n";
    } else if (*c_emb) {
      const auto cfg = resolve_config(emb);
      if (emb.dry_run) {
        print_dry_run(cfg, {});
        return 0;
      }
      const auto data = load_datasets(cfg);
      const auto out = out_dir(emb, cfg);
      const fs::path file = emb_file.empty() ? out / ("embeddings_" + emb_split + ".csv") : fs::path(emb_file);
      if (file.has_parent_path()) fs::create_directories(file.parent_path());
      export_embeddings(load_encoder(ckpt_path), emb_split == "train" ? data.train : data.test, file, cfg.hash());
      std::cout << "wrote " << file.string() << "\n";
    } else if (*c_rep) {
      std::vector<fs::path> runs(report_runs.begin(), report_runs.end());
      const auto text = report(runs, force);
      if (report_out.empty())
        std::cout << text;
      else
        write_text(report_out, text);
    }
  } catch (const std::exception& e) {
    std::cerr << "deacl: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
