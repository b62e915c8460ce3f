#pragma once

// Orchestration: datasets, the two training stages, evaluation protocols,
// ablation grids and report aggregation. Every artifact carries the config hash.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

struct Datasets {
  Dataset train, test;
};

inline Datasets load_datasets(const RunConfig& cfg) {
  if (cfg.dataset.source == "synthetic") {
    SyntheticSpec train = cfg.dataset.synthetic, test = cfg.dataset.synthetic;
    train.split = "train";
    test.split = "test";
    test.n_per_class = cfg.dataset.test_per_class;
    return {gen_synthetic(train), gen_synthetic(test)};
  }
  const auto& d = cfg.dataset;
  auto load = [&](const std::string& path) {
    Dataset ds = load_cifar_binary(path, d.channels, d.height, d.width, d.classes);
    if (d.limit && ds.size() > d.limit) {
      std::vector<std::size_t> keep(d.limit);
      std::iota(keep.begin(), keep.end(), std::size_t{0});
      ds = ds.subset(keep);
    }
    return ds;
  };
  return {load(d.train_path), load(d.test_path)};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string hash_line(std::uint64_t h) { return "# config_hash: " + hex64(h) + "\n"; }

inline std::string stage1_log_csv(const std::vector<Stage1LogRow>& log, std::uint64_t config_hash) {
  std::string out = hash_line(config_hash) + "epoch,mean_loss,lr,wall_seconds\n";
  for (const auto& r : log)
    out += std::to_string(r.epoch) + "," + fmt(r.mean_loss, 6) + "," + fmt(r.lr, 6) + "," + fmt(r.wall_seconds, 3) + "\n";
  return out;
}

inline std::string stage2_log_csv(const std::vector<Stage2LogRow>& log, std::uint64_t config_hash) {
  std::string out = hash_line(config_hash) + "epoch,loss_clean_term,loss_adv_term,probe_RA,wall_seconds\n";
  for (const auto& r : log)
    out += std::to_string(r.epoch) + "," + fmt(r.loss_clean_term, 6) + "," + fmt(r.loss_adv_term, 6) + "," +
           fmt(r.probe_ra, 4) + "," + fmt(r.wall_seconds, 3) + "\n";
  return out;
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& rows, std::uint64_t config_hash) {
  std::string out = hash_line(config_hash) + kMetricsHeader + "\n";
  for (const auto& r : rows) out += metrics_row(r) + "\n";
  return out;
}

inline std::string timing_csv(const PhaseTimes& phases, std::uint64_t config_hash) {
  std::string out = hash_line(config_hash) + "phase,seconds\n";
  for (const auto& [k, v] : phases.all()) out += k + "," + fmt(v, 4) + "\n";
  return out;
}

inline nlohmann::json artifact_metadata(const RunConfig& cfg, std::string_view stage) {
  return {{"config_hash", hex64(cfg.hash())}, {"run_id", cfg.run_id}, {"stage", stage}};
}

/// Encoder stored in a checkpoint produced by this configuration.
inline Encoder load_encoder(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = std::nullopt) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (expected_hash && ckpt.metadata.value("config_hash", std::string()) != hex64(*expected_hash))
    throw ConfigError("checkpoint " + path.string() + " was produced by a different configuration");
  return encoder_from_checkpoint(ckpt);
}

// ---------------------------------------------------------------------------
// Stages

inline Stage1Result run_pretrain(const RunConfig& cfg, const Datasets& data, const std::filesystem::path& out) {
  Stage1Result res = train_stage1(data.train, cfg.encoder, cfg.stage1);
  std::filesystem::create_directories(out);
  save_checkpoint(make_checkpoint(res.encoder, &res.projector, artifact_metadata(cfg, "stage1")), out / "teacher.ckpt");
  write_text(out / "stage1_log.csv", stage1_log_csv(res.log, cfg.hash()));
  return res;
}

/// Cheap per-epoch robustness probe: linear probe on a train slice, PGD on a test slice.
inline ProbeFn make_stage2_probe(const RunConfig& cfg, const Datasets& data, std::size_t slice) {
  if (slice == 0) return {};
  return [&cfg, &data, slice](const Encoder& student, std::size_t) {
    std::vector<std::size_t> tr(std::min(slice, data.train.size())), te(std::min(slice, data.test.size()));
    std::iota(tr.begin(), tr.end(), std::size_t{0});
    std::iota(te.begin(), te.end(), std::size_t{0});
    const Dataset train = data.train.subset(tr), test = data.test.subset(te);
    ProbeConfig pc = cfg.eval.slf;
    const LinearClassifier clf = train_linear_probe(encode_dataset(student, train), labels_of(train, tr), train.classes(), pc);
    return measure(classifier_model(student, clf), test, cfg.eval.aff.probe_attack, pc.seed).ra;
  };
}

inline Stage2Result run_distill(const RunConfig& cfg, const Datasets& data, const Encoder& teacher,
                                const std::filesystem::path& out, std::size_t probe_slice = 0) {
  Stage2Result res = train_stage2(data.train, teacher, cfg.stage2, make_stage2_probe(cfg, data, probe_slice));
  std::filesystem::create_directories(out);
  auto meta = artifact_metadata(cfg, "stage2");
  meta["teacher_hash"] = hex64(res.teacher_hash_before);
  save_checkpoint(make_checkpoint(res.student, res.projector ? &*res.projector : nullptr, meta), out / "student.ckpt");
  write_text(out / "stage2_log.csv", stage2_log_csv(res.log, cfg.hash()));
  return res;
}

inline MetricsRecord run_slf(const RunConfig& cfg, const Encoder& encoder, const Datasets& data, std::string_view label) {
  std::optional<AttackConfig> aa;
  if (cfg.eval.aa_proxy) aa = AttackConfig::aa_proxy(cfg.eval.attack.epsilon, cfg.eval.attack.alpha);
  MetricsRecord rec = slf(encoder, data.train, data.test, cfg.eval.slf, cfg.eval.attack, aa).metrics;
  rec.run_id = cfg.run_id + "/" + std::string(label);
  return rec;
}

inline MetricsRecord run_aff(const RunConfig& cfg, const Encoder& encoder, const Datasets& data, std::string_view label,
                             std::vector<double>* probe_curve = nullptr) {
  AffResult res = aff(encoder, data.train, data.test, cfg.eval.aff, cfg.eval.attack);
  if (probe_curve) *probe_curve = res.probe_ra;
  res.metrics.run_id = cfg.run_id + "/" + std::string(label);
  return res.metrics;
}

struct PipelineResult {
  std::vector<MetricsRecord> metrics;
  PhaseTimes phases;
  std::uint64_t config_hash = 0;
};

/// Stage 1, stage 2, then SLF on both the teacher and the student.
inline PipelineResult run_full(const RunConfig& cfg, const std::filesystem::path& out, bool with_aff = false) {
  PipelineResult pr;
  pr.config_hash = cfg.hash();
  std::filesystem::create_directories(out);
  write_text(out / "config.json", nlohmann::json(cfg).dump(2) + "\n");
  const Datasets data = load_datasets(cfg);

  Stopwatch w1;
  Stage1Result s1 = run_pretrain(cfg, data, out);
  const double t1 = w1.seconds();
  pr.phases.add("stage1.total", t1);

  Stopwatch w2;
  Stage2Result s2 = run_distill(cfg, data, s1.encoder, out);
  const double t2 = w2.seconds();
  pr.phases.add("stage2.total", t2);
  pr.phases.merge(s2.phases);

  auto stamp = [&](MetricsRecord r, double ft) {
    r.stage1_seconds = cfg.record_timing ? t1 : 0;
    r.stage2_seconds = cfg.record_timing ? t2 : 0;
    r.finetune_seconds = cfg.record_timing ? ft : 0;
    return r;
  };
  {
    Stopwatch w;
    auto r = run_slf(cfg, s1.encoder, data, "stage1");
    pr.phases.add("slf.stage1", w.seconds());
    pr.metrics.push_back(stamp(r, w.seconds()));
  }
  {
    Stopwatch w;
    auto r = run_slf(cfg, s2.student, data, "deacl");
    pr.phases.add("slf.deacl", w.seconds());
    pr.metrics.push_back(stamp(r, w.seconds()));
  }
  if (with_aff) {
    Stopwatch w;
    auto r = run_aff(cfg, s2.student, data, "deacl");
    pr.phases.add("aff.deacl", w.seconds());
    pr.metrics.push_back(stamp(r, w.seconds()));
  }
  write_text(out / "metrics.csv", metrics_csv(pr.metrics, pr.config_hash));
  write_text(out / "timing.csv", timing_csv(pr.phases, pr.config_hash));
  return pr;
}

// ---------------------------------------------------------------------------
// Ablations

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"weight_decay", "lambda",      "augmentation", "projector",
                                             "collapse_prevention", "student_init", "distance", "loss_form",
                                             "target_mode"};
  return axes;
}

/// Grid used when no values are given on the command line.
inline std::vector<std::string> default_ablation_values(const std::string& axis) {
  if (axis == "weight_decay") return {"1e-6", "1e-5", "1e-4", "5e-4", "1e-3", "5e-3"};
  if (axis == "lambda") return {"0", "0.5", "1", "2", "4"};
  if (axis == "augmentation") return {"weak/weak", "strong/strong", "weak/strong", "strong/weak"};
  if (axis == "projector" || axis == "collapse_prevention") return {"off", "on"};
  if (axis == "student_init") return {"teacher", "random"};
  if (axis == "distance") return {"cosine", "kl"};
  if (axis == "loss_form") return {"trades-like", "direct"};
  if (axis == "target_mode") return {"on-the-fly", "precomputed"};
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

namespace detail {

inline bool parse_switch(const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("expected on/off, got '" + v + "'");
}

inline double parse_number(const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

}  // namespace detail

/// Applies one grid value to the stage-2 configuration. Augmentation values
/// are written "AE/CE" (adversarial-example policy / clean-example policy).
inline void apply_ablation(Stage2Config& s2, const std::string& axis, const std::string& value) {
  if (axis == "weight_decay") {
    s2.weight_decay = detail::parse_number(value);
    if (s2.weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  } else if (axis == "lambda") {
    s2.lambda = detail::parse_number(value);
  } else if (axis == "augmentation") {
    const auto slash = value.find('/');
    if (slash == std::string::npos) throw ConfigError("augmentation values look like 'weak/strong' (AE/CE)");
    s2.adv_augmentation.kind = aug_kind_from_string(value.substr(0, slash));
    s2.clean_augmentation.kind = aug_kind_from_string(value.substr(slash + 1));
  } else if (axis == "projector") {
    s2.projector.enabled = detail::parse_switch(value);
  } else if (axis == "collapse_prevention") {
    s2.collapse_prevention = detail::parse_switch(value);
  } else if (axis == "student_init") {
    s2.student_init = detail::enum_from_string(value, {StudentInit::Teacher, StudentInit::Random}, "student_init");
  } else if (axis == "distance") {
    s2.distance = detail::enum_from_string(value, {Distance::Cosine, Distance::Kl}, "distance");
  } else if (axis == "loss_form") {
    s2.loss_form = detail::enum_from_string(value, {LossForm::TradesLike, LossForm::Direct}, "loss_form");
  } else if (axis == "target_mode") {
    s2.target_mode = detail::enum_from_string(value, {TargetMode::OnTheFly, TargetMode::Precomputed}, "target_mode");
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  s2.validate();
}

struct AblationCell {
  std::string value;
  std::uint64_t seed = 0;
  double sa = 0, ra = 0;
  std::vector<double> clean_curve;  // per-epoch mean clean term
};

struct AblationResult {
  std::string axis;
  std::vector<AblationCell> cells;

  /// Median RA over seeds for one grid value.
  double median_ra(const std::string& value) const {
    std::vector<double> v;
    for (const auto& c : cells)
      if (c.value == value) v.push_back(c.ra);
    if (v.empty()) throw Error("ablation: no cells for value " + value);
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  }
};

/// For each master seed: one teacher, then one student + SLF per grid value.
inline AblationResult run_ablation(const RunConfig& base, const std::string& axis, const std::vector<std::string>& values,
                                   const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out) {
  for (const auto& v : values) {
    Stage2Config probe = base.stage2;
    apply_ablation(probe, axis, v);
  }
  AblationResult res{axis, {}};
  for (auto seed : seeds) {
    RunConfig cfg = base;
    cfg.seed = seed;
    cfg.resolve();
    const Datasets data = load_datasets(cfg);
    const Stage1Result s1 = train_stage1(data.train, cfg.encoder, cfg.stage1);
    for (const auto& v : values) {
      RunConfig cell = cfg;
      apply_ablation(cell.stage2, axis, v);
      const Stage2Result s2 = train_stage2(data.train, s1.encoder, cell.stage2);
      const auto m = slf(s2.student, data.train, data.test, cell.eval.slf, cell.eval.attack).metrics;
      AblationCell c{v, seed, m.sa, m.ra, {}};
      for (const auto& row : s2.log) c.clean_curve.push_back(row.loss_clean_term);
      res.cells.push_back(std::move(c));
    }
  }
  if (!out.empty()) {
    std::string csv = hash_line(base.hash()) + "axis,value,seed,SA,RA\n";
    for (const auto& c : res.cells)
      csv += axis + "," + c.value + "," + std::to_string(c.seed) + "," + fmt(c.sa, 4) + "," + fmt(c.ra, 4) + "\n";
    write_text(out / ("ablation_" + axis + ".csv"), csv);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsFile {
  std::string config_hash;
  std::vector<std::string> rows;
};

inline MetricsFile parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  MetricsFile f;
  if (!std::getline(is, line) || !line.starts_with("# config_hash: ")) throw IoError("metrics: missing config hash line");
  f.config_hash = line.substr(15);
  if (!std::getline(is, line) || line != kMetricsHeader) throw IoError("metrics: unexpected header");
  while (std::getline(is, line))
    if (!line.empty()) f.rows.push_back(line);
  return f;
}

/// Concatenates metrics.csv of several run directories, each row prefixed by
/// its config hash. Mismatched hashes are refused unless forced.
inline std::string report(const std::vector<std::filesystem::path>& runs, bool force) {
  if (runs.empty()) throw ConfigError("report: no runs given");
  std::vector<MetricsFile> files;
  for (const auto& r : runs) files.push_back(parse_metrics_csv(read_text(r / "metrics.csv")));
  for (const auto& f : files)
    if (f.config_hash != files.front().config_hash && !force)
      throw ConfigError("report: runs have different config hashes (" + files.front().config_hash + " vs " +
                        f.config_hash + "); pass --force to aggregate anyway");
  std::string out = std::string("config_hash,") + kMetricsHeader + "\n";
  for (const auto& f : files)
    for (const auto& row : f.rows) out += f.config_hash + "," + row + "\n";
  return out;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
