#pragma once

// Linear probing (frozen encoder), adversarial full finetuning, SA/RA
// measurement, PGD sweeps and embedding export.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attack.hpp"
#include "data.hpp"
#include "models.hpp"
#include "optim.hpp"
#include "timing.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

/// Fixed-format number for CSV output; "NA" for absent values.
inline std::string fmt(double v, int precision = 6) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}
inline std::string fmt(const std::optional<double>& v, int precision = 6) { return v ? fmt(*v, precision) : "NA"; }

// ---------------------------------------------------------------------------
// Measurement

/// logits for a [B,C,H,W] batch; must not update model state.
using LogitsFn = std::function<Tensor(const Tensor&)>;

struct Measurement {
  double sa = 0;
  double ra = 0;
  std::vector<std::uint8_t> clean_correct;
  std::vector<std::uint8_t> robust_correct;
};

inline double accuracy_from_bitmap(const std::vector<std::uint8_t>& bits) {
  if (bits.empty()) return 0;
  const auto hits = std::accumulate(bits.begin(), bits.end(), std::size_t{0});
  return 100.0 * static_cast<double>(hits) / static_cast<double>(bits.size());
}

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const auto B = logits.dim(0), K = logits.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto row = logits.values().subspan(i * K, K);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline std::vector<std::size_t> labels_of(const Dataset& ds, std::span<const std::size_t> positions) {
  std::vector<std::size_t> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(static_cast<std::size_t>(ds.label(p)));
  return out;
}

/// SA on clean inputs and RA under PGD with `attack` (cross-entropy objective
/// unless the config says otherwise). A sample is robust when its adversarial
/// version is classified correctly.
inline Measurement measure(const LogitsFn& model, const Dataset& test, const AttackConfig& attack, std::uint64_t seed,
                           std::size_t batch_size = 128) {
  attack.validate();
  Measurement m;
  m.clean_correct.resize(test.size());
  m.robust_correct.resize(test.size());
  const SeedStreams streams(seed);
  std::vector<std::size_t> positions;
  for (std::size_t s = 0, b = 0; s < test.size(); s += batch_size, ++b) {
    positions.resize(std::min(test.size(), s + batch_size) - s);
    std::iota(positions.begin(), positions.end(), s);
    const Tensor x = stack_images(test, positions);
    const auto y = labels_of(test, positions);
    std::vector<std::size_t> clean_pred;
    {
      NoGradGuard no_grad;
      clean_pred = argmax_rows(model(x));
    }
    AttackContext ctx;
    ctx.labels = y;
    Rng rng = streams.substream("eval/attack", {b});
    const Tensor x_adv = pgd(model, x, ctx, attack, rng).x_adv;
    const auto xv = x.values(), av = x_adv.values();
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (std::abs(av[i] - xv[i]) > attack.epsilon + 1e-6) throw Error("measure: perturbation exceeds epsilon");
    std::vector<std::size_t> adv_pred;
    {
      NoGradGuard no_grad;
      adv_pred = argmax_rows(model(x_adv));
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
      m.clean_correct[s + i] = clean_pred[i] == y[i];
      m.robust_correct[s + i] = adv_pred[i] == y[i];
    }
  }
  m.sa = accuracy_from_bitmap(m.clean_correct);
  m.ra = accuracy_from_bitmap(m.robust_correct);
  return m;
}

/// Encoder (eval mode) followed by a linear classifier.
inline LogitsFn classifier_model(const Encoder& encoder, const LinearClassifier& classifier) {
  return [&encoder, &classifier](const Tensor& x) { return classifier.forward(encoder.infer(x)); };
}

// ---------------------------------------------------------------------------
// Metrics records

struct MetricsRecord {
  std::string run_id;
  std::string protocol;  // SLF | AFF
  double sa = 0;
  double ra = 0;
  std::optional<double> aa_proxy;
  AttackConfig attack{};
  std::uint64_t seed = 0;
  double stage1_seconds = 0;
  double stage2_seconds = 0;
  double finetune_seconds = 0;
};

inline const char* kMetricsHeader =
    "run_id,protocol,SA,RA,AA_proxy,eps,steps,restarts,seed,stage1_seconds,stage2_seconds,finetune_seconds";

inline std::string metrics_row(const MetricsRecord& r) {
  return r.run_id + "," + r.protocol + "," + fmt(r.sa, 4) + "," + fmt(r.ra, 4) + "," + fmt(r.aa_proxy, 4) + "," +
         fmt(r.attack.epsilon, 6) + "," + std::to_string(r.attack.steps) + "," + std::to_string(r.attack.restarts) +
         "," + std::to_string(r.seed) + "," + fmt(r.stage1_seconds, 3) + "," + fmt(r.stage2_seconds, 3) + "," +
         fmt(r.finetune_seconds, 3);
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 64;
  double lr = 1.0;
  double momentum = 0.9;
  double weight_decay = 0;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
       {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
}

/// Trains a linear classifier by cross-entropy on fixed features [N,d].
inline LinearClassifier train_linear_probe(const Tensor& features, const std::vector<std::size_t>& labels,
                                           std::size_t classes, const ProbeConfig& cfg) {
  if (features.rank() != 2 || labels.size() != features.dim(0))
    throw ShapeError("probe: label count does not match feature rows");
  const SeedStreams streams(cfg.seed);
  Rng init = streams.stream("probe/init");
  LinearClassifier clf(features.dim(1), classes, init);
  Sgd opt(cfg.momentum, cfg.weight_decay);
  const auto N = features.dim(0), d = features.dim(1);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs, 0);
    for (const auto& batch : epoch_batches(N, std::min(cfg.batch_size, N), epoch, streams, false, "probe/data_order")) {
      std::vector<Real> rows;
      std::vector<std::size_t> y;
      rows.reserve(batch.size() * d);
      for (auto p : batch) {
        const auto r = features.values().subspan(p * d, d);
        rows.insert(rows.end(), r.begin(), r.end());
        y.push_back(labels[p]);
      }
      const Tensor loss = cross_entropy(clf.forward(Tensor({batch.size(), d}, std::move(rows))), y);
      clf.params().zero_grad();
      backward(loss);
      opt.step(clf.params(), lr);
    }
  }
  clf.params().zero_grad();
  return clf;
}

inline double probe_accuracy(const LinearClassifier& clf, const Tensor& features, const std::vector<std::size_t>& labels) {
  NoGradGuard no_grad;
  const auto pred = argmax_rows(clf.forward(features));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return pred.empty() ? 0.0 : 100.0 * double(hits) / double(pred.size());
}

/// Eval-mode representations for the whole dataset, [N,d].
inline Tensor encode_dataset(const Encoder& encoder, const Dataset& ds, std::size_t batch_size = 128) {
  NoGradGuard no_grad;
  std::vector<Real> out;
  out.reserve(ds.size() * encoder.config().rep_dim);
  std::vector<std::size_t> positions;
  for (std::size_t s = 0; s < ds.size(); s += batch_size) {
    positions.resize(std::min(ds.size(), s + batch_size) - s);
    std::iota(positions.begin(), positions.end(), s);
    const Tensor z = encoder.infer(stack_images(ds, positions));
    out.insert(out.end(), z.values().begin(), z.values().end());
  }
  return Tensor({ds.size(), encoder.config().rep_dim}, std::move(out));
}

struct SlfResult {
  LinearClassifier classifier;
  Measurement measurement;
  MetricsRecord metrics;
  double train_accuracy = 0;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
};

/// Standard linear finetuning: encoder frozen, classifier trained on clean features.
inline SlfResult slf(const Encoder& encoder, const Dataset& train, const Dataset& test, const ProbeConfig& cfg,
                     const AttackConfig& eval_attack, std::optional<AttackConfig> aa_proxy = std::nullopt) {
  if (train.empty() || test.empty()) throw Error("slf: empty dataset");
  if (train.classes() != test.classes()) throw Error("slf: train/test class count mismatch");
  Stopwatch watch;
  const auto before = encoder.params().hash();
  const Tensor features = encode_dataset(encoder, train);
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto labels = labels_of(train, all);
  LinearClassifier clf = train_linear_probe(features, labels, train.classes(), cfg);
  const double train_acc = probe_accuracy(clf, features, labels);
  Measurement m = measure(classifier_model(encoder, clf), test, eval_attack, cfg.seed);
  MetricsRecord rec;
  rec.protocol = "SLF";
  rec.sa = m.sa;
  rec.ra = m.ra;
  rec.attack = eval_attack;
  rec.seed = cfg.seed;
  if (aa_proxy) rec.aa_proxy = measure(classifier_model(encoder, clf), test, *aa_proxy, cfg.seed).ra;
  rec.finetune_seconds = watch.seconds();
  const auto after = encoder.params().hash();
  if (after != before) throw Error("slf: encoder parameters changed");
  return {std::move(clf), std::move(m), rec, train_acc, before, after};
}

// ---------------------------------------------------------------------------
// Adversarial full finetuning

struct AffConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  AttackConfig attack{8.0 / 255.0, 2.0 / 255.0, 5, 1, true, Objective::CrossEntropy};
  AugmentationPolicy augmentation = AugmentationPolicy::of(AugKind::Weak, "aff/augment");
  AttackConfig probe_attack{8.0 / 255.0, 2.0 / 255.0, 5, 1, false, Objective::CrossEntropy};
  std::size_t probe_size = 128;  // held-out slice of the test set; 0 disables the probe
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const AffConfig& c) {
  j = {{"epochs", c.epochs},       {"batch_size", c.batch_size},     {"lr", c.lr},
       {"momentum", c.momentum},   {"weight_decay", c.weight_decay}, {"attack", c.attack},
       {"augmentation", c.augmentation}, {"probe_attack", c.probe_attack}, {"probe_size", c.probe_size},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AffConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("attack")) j.at("attack").get_to(c.attack);
  if (j.contains("augmentation")) j.at("augmentation").get_to(c.augmentation);
  if (j.contains("probe_attack")) j.at("probe_attack").get_to(c.probe_attack);
  c.probe_size = j.value("probe_size", c.probe_size);
  c.seed = j.value("seed", c.seed);
}

struct AffResult {
  Encoder encoder;
  LinearClassifier classifier;
  Measurement measurement;
  MetricsRecord metrics;
  std::vector<double> probe_ra;  // after each epoch
};

/// First epoch (1-based count) whose probe RA reaches the threshold, or nullopt.
inline std::optional<std::size_t> epochs_to_reach(const std::vector<double>& curve, double threshold) {
  for (std::size_t i = 0; i < curve.size(); ++i)
    if (curve[i] >= threshold) return i + 1;
  return std::nullopt;
}

/// Adversarial full finetuning: PGD(cross-entropy) examples, both encoder and
/// classifier updated.
inline AffResult aff(const Encoder& init, const Dataset& train, const Dataset& test, const AffConfig& cfg,
                     const AttackConfig& eval_attack) {
  if (train.empty() || test.empty()) throw Error("aff: empty dataset");
  if (train.classes() != test.classes()) throw Error("aff: train/test class count mismatch");
  cfg.attack.validate();
  Stopwatch watch;
  const SeedStreams streams(cfg.seed);
  Rng rng_init = streams.stream("aff/init");
  AffResult res{Encoder(init), LinearClassifier(init.config().rep_dim, train.classes(), rng_init), {}, {}, {}};
  Sgd enc_opt(cfg.momentum, cfg.weight_decay), clf_opt(cfg.momentum, cfg.weight_decay);

  std::vector<std::size_t> probe_pos(std::min(cfg.probe_size, test.size()));
  std::iota(probe_pos.begin(), probe_pos.end(), std::size_t{0});
  const Dataset probe_set = test.subset(probe_pos);

  auto train_logits = [&](const Tensor& x, NormMode mode) {
    return res.classifier.forward(res.encoder.forward(x, mode));
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs, 0);
    const auto batches =
        epoch_batches(train.size(), std::min(cfg.batch_size, train.size()), epoch, streams, false, "aff/data_order");
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const Tensor x = augment_batch(cfg.augmentation, train, batch, epoch, 0, streams);
      AttackContext ctx;
      ctx.labels = labels_of(train, batch);
      Rng rng = streams.substream("aff/attack", {epoch, b});
      const Tensor x_adv =
          pgd([&](const Tensor& v) { return train_logits(v, NormMode::TrainFrozenStats); }, x, ctx, cfg.attack, rng)
              .x_adv;
      const Tensor loss = cross_entropy(train_logits(x_adv, NormMode::Train), ctx.labels);
      res.encoder.params().zero_grad();
      res.classifier.params().zero_grad();
      backward(loss);
      enc_opt.step(res.encoder.params(), lr);
      clf_opt.step(res.classifier.params(), lr);
    }
    if (!probe_set.empty())
      res.probe_ra.push_back(
          measure(classifier_model(res.encoder, res.classifier), probe_set, cfg.probe_attack, cfg.seed).ra);
  }
  res.encoder.params().zero_grad();
  res.classifier.params().zero_grad();
  res.measurement = measure(classifier_model(res.encoder, res.classifier), test, eval_attack, cfg.seed);
  res.metrics.protocol = "AFF";
  res.metrics.sa = res.measurement.sa;
  res.metrics.ra = res.measurement.ra;
  res.metrics.attack = eval_attack;
  res.metrics.seed = cfg.seed;
  res.metrics.finetune_seconds = watch.seconds();
  return res;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
  std::size_t steps = 0;
  double eps = 0;
  double ra = 0;
};

/// Step size used for a sweep cell: 2.5 * eps / steps, the usual choice that
/// lets the iterate reach the ball boundary.
inline double sweep_alpha(std::size_t steps, double eps) {
  return steps == 0 ? eps : 2.5 * eps / static_cast<double>(steps);
}

inline std::vector<SweepRow> sweep(const LogitsFn& model, const Dataset& test, const std::vector<std::size_t>& steps,
                                   const std::vector<double>& epsilons, const AttackConfig& base, std::uint64_t seed) {
  std::vector<SweepRow> rows;
  for (auto s : steps)
    for (auto e : epsilons) {
      AttackConfig cfg = base;
      cfg.steps = s;
      cfg.epsilon = e;
      cfg.alpha = sweep_alpha(s, e);
      cfg.objective = Objective::CrossEntropy;
      rows.push_back({s, e, measure(model, test, cfg, seed).ra});
    }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows, std::uint64_t config_hash) {
  std::string out = "# config_hash: " + hex64(config_hash) + "\nsteps,eps,RA\n";
  for (const auto& r : rows) out += std::to_string(r.steps) + "," + fmt(r.eps, 6) + "," + fmt(r.ra, 4) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Embedding export

/// CSV rows: sample_index, label, z_0 .. z_{d-1}.
inline std::string embeddings_csv(const Encoder& encoder, const Dataset& ds, std::uint64_t config_hash) {
  const Tensor z = encode_dataset(encoder, ds);
  const auto d = z.dim(1);
  std::string out = "# config_hash: " + hex64(config_hash) + "\nsample_index,label";
  for (std::size_t k = 0; k < d; ++k) out += ",z" + std::to_string(k);
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += std::to_string(ds.sample_index(i)) + "," + std::to_string(ds.label(i));
    for (std::size_t k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(z.values()[i * d + k]));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline void export_embeddings(const Encoder& encoder, const Dataset& ds, const std::filesystem::path& path,
                              std::uint64_t config_hash = 0) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("export: cannot open " + path.string());
  os << embeddings_csv(encoder, ds, config_hash);
  if (!os) throw IoError("export: write failed for " + path.string());
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
