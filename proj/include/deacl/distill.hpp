#pragma once

// Stage 2: pseudo-supervised adversarial training of the student against a
// frozen teacher.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "attack.hpp"
#include "data.hpp"
#include "losses.hpp"
#include "models.hpp"
#include "optim.hpp"
#include "pretrain.hpp"
#include "timing.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

enum class StudentInit { Teacher, Random };
enum class Distance { Cosine, Kl };
enum class LossForm { TradesLike, Direct };
enum class TargetMode { OnTheFly, Precomputed };

inline std::string to_string(StudentInit v) { return v == StudentInit::Teacher ? "teacher" : "random"; }
inline std::string to_string(Distance v) { return v == Distance::Cosine ? "cosine" : "kl"; }
inline std::string to_string(LossForm v) { return v == LossForm::TradesLike ? "trades-like" : "direct"; }
inline std::string to_string(TargetMode v) { return v == TargetMode::OnTheFly ? "on-the-fly" : "precomputed"; }

namespace detail {

template <typename E>
E enum_from_string(std::string_view s, std::initializer_list<E> values, const char* what) {
  for (E v : values)
    if (to_string(v) == s) return v;
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

}  // namespace detail

struct Stage2Config {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 0.2;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::size_t warmup_epochs = 0;
  double lambda = 2.0;
  AttackConfig attack{};
  AugmentationPolicy clean_augmentation = AugmentationPolicy::of(AugKind::Weak, "stage2/augment_clean");
  AugmentationPolicy adv_augmentation = AugmentationPolicy::of(AugKind::Weak, "stage2/augment_adv");
  ProjectorConfig projector{false, 0, 0};
  bool collapse_prevention = false;
  double collapse_weight = 1.0;
  double collapse_tau = 0.5;
  StudentInit student_init = StudentInit::Teacher;
  Distance distance = Distance::Cosine;
  LossForm loss_form = LossForm::TradesLike;
  TargetMode target_mode = TargetMode::OnTheFly;
  AugKind bank_augmentation = AugKind::None;  // precomputed mode only
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda >= 0)) throw ConfigError("stage2: lambda must be >= 0");
    if (batch_size < 1) throw ConfigError("stage2: batch size must be >= 1");
    if (bank_augmentation == AugKind::Strong) throw ConfigError("stage2: bank augmentation must be none or weak");
    attack.validate();
  }
};

inline void to_json(nlohmann::json& j, const Stage2Config& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"momentum", c.momentum},
       {"warmup_epochs", c.warmup_epochs},
       {"lambda", c.lambda},
       {"attack", c.attack},
       {"clean_augmentation", c.clean_augmentation},
       {"adv_augmentation", c.adv_augmentation},
       {"projector", c.projector},
       {"collapse_prevention", c.collapse_prevention},
       {"collapse_weight", c.collapse_weight},
       {"collapse_tau", c.collapse_tau},
       {"student_init", to_string(c.student_init)},
       {"distance", to_string(c.distance)},
       {"loss_form", to_string(c.loss_form)},
       {"target_mode", to_string(c.target_mode)},
       {"bank_augmentation", to_string(c.bank_augmentation)},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, Stage2Config& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.momentum = j.value("momentum", c.momentum);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.lambda = j.value("lambda", c.lambda);
  if (j.contains("attack")) j.at("attack").get_to(c.attack);
  if (j.contains("clean_augmentation")) j.at("clean_augmentation").get_to(c.clean_augmentation);
  if (j.contains("adv_augmentation")) j.at("adv_augmentation").get_to(c.adv_augmentation);
  if (j.contains("projector")) j.at("projector").get_to(c.projector);
  c.collapse_prevention = j.value("collapse_prevention", c.collapse_prevention);
  c.collapse_weight = j.value("collapse_weight", c.collapse_weight);
  c.collapse_tau = j.value("collapse_tau", c.collapse_tau);
  if (j.contains("student_init"))
    c.student_init = detail::enum_from_string(j.at("student_init").get<std::string>(),
                                              {StudentInit::Teacher, StudentInit::Random}, "student_init");
  if (j.contains("distance"))
    c.distance = detail::enum_from_string(j.at("distance").get<std::string>(), {Distance::Cosine, Distance::Kl}, "distance");
  if (j.contains("loss_form"))
    c.loss_form = detail::enum_from_string(j.at("loss_form").get<std::string>(),
                                           {LossForm::TradesLike, LossForm::Direct}, "loss_form");
  if (j.contains("target_mode"))
    c.target_mode = detail::enum_from_string(j.at("target_mode").get<std::string>(),
                                             {TargetMode::OnTheFly, TargetMode::Precomputed}, "target_mode");
  if (j.contains("bank_augmentation")) c.bank_augmentation = aug_kind_from_string(j.at("bank_augmentation").get<std::string>());
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Pseudo-targets

/// Teacher representation per sample index. Read-only once built.
class PseudoTargetBank {
 public:
  PseudoTargetBank(std::size_t dim, std::uint64_t teacher_hash) : dim_(dim), teacher_hash_(teacher_hash) {}

  void insert(std::size_t sample_index, std::span<const Real> z) {
    if (z.size() != dim_) throw ShapeError("bank: vector length mismatch");
    double sq = 0;
    for (Real v : z) {
      if (!std::isfinite(v)) throw NumericError("bank: non-finite target");
      sq += double(v) * v;
    }
    if (sq == 0) throw NumericError("bank: zero-norm target for sample " + std::to_string(sample_index));
    if (!row_.emplace(sample_index, order_.size()).second) throw Error("bank: duplicate sample index");
    order_.push_back(sample_index);
    values_.insert(values_.end(), z.begin(), z.end());
  }

  std::span<const Real> at(std::size_t sample_index) const {
    auto it = row_.find(sample_index);
    if (it == row_.end()) throw Error("bank: sample index " + std::to_string(sample_index) + " missing");
    return {values_.data() + it->second * dim_, dim_};
  }

  /// Targets for a batch of dataset positions, [B,d].
  Tensor gather(const Dataset& ds, std::span<const std::size_t> positions) const {
    std::vector<Real> out;
    out.reserve(positions.size() * dim_);
    for (auto p : positions) {
      const auto z = at(ds.sample_index(p));
      out.insert(out.end(), z.begin(), z.end());
    }
    return Tensor({positions.size(), dim_}, std::move(out));
  }

  bool covers(const Dataset& ds) const {
    for (auto idx : ds.sample_indices())
      if (!row_.count(idx)) return false;
    return true;
  }

  std::size_t size() const { return order_.size(); }
  std::size_t dim() const { return dim_; }
  std::uint64_t teacher_hash() const { return teacher_hash_; }

  std::uint64_t hash() const {
    Hasher h;
    h.u64(dim_);
    h.u64(teacher_hash_);
    for (auto idx : order_) h.u64(idx);
    h.values(std::span<const Real>(values_));
    return h.digest();
  }

 private:
  std::size_t dim_;
  std::uint64_t teacher_hash_;
  std::unordered_map<std::size_t, std::size_t> row_;
  std::vector<std::size_t> order_;
  std::vector<Real> values_;
};

/// One teacher vector per sample (eval mode). With weak augmentation each
/// sample gets a single fixed draw.
inline PseudoTargetBank make_pseudo_targets(const Encoder& teacher, const Dataset& ds, AugKind augmentation,
                                            const SeedStreams& streams, std::size_t batch_size = 128) {
  if (augmentation == AugKind::Strong) throw ConfigError("bank: augmentation must be none or weak");
  const auto before = teacher.params().hash();
  PseudoTargetBank bank(teacher.config().rep_dim, before);
  const auto policy = AugmentationPolicy::of(augmentation, "stage2/bank");
  NoGradGuard no_grad;
  std::vector<std::size_t> positions;
  for (std::size_t s = 0; s < ds.size(); s += batch_size) {
    positions.resize(std::min(ds.size(), s + batch_size) - s);
    std::iota(positions.begin(), positions.end(), s);
    const Tensor z = teacher.infer(augment_batch(policy, ds, positions, 0, 0, streams));
    const auto d = z.dim(1);
    for (std::size_t i = 0; i < positions.size(); ++i)
      bank.insert(ds.sample_index(positions[i]), z.values().subspan(i * d, d));
  }
  if (teacher.params().hash() != before) throw Error("bank: teacher changed while building targets");
  return bank;
}

// ---------------------------------------------------------------------------
// Training

struct Stage2LogRow {
  std::size_t epoch = 0;
  double loss_clean_term = 0;
  double loss_adv_term = 0;
  std::optional<double> probe_ra;
  double wall_seconds = 0;
};

struct Stage2Result {
  Encoder student;
  std::optional<Projector> projector;
  std::vector<Stage2LogRow> log;
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
  std::vector<std::uint64_t> bank_hashes;  // one per epoch, precomputed mode only
  PhaseTimes phases;
  double seconds = 0;
  std::size_t steps = 0;
};

/// Evaluated once per epoch with labels lifted; returns robust accuracy in %.
using ProbeFn = std::function<double(const Encoder& student, std::size_t epoch)>;

inline Stage2Result train_stage2(const Dataset& data, const Encoder& teacher, const Stage2Config& cfg,
                                 const ProbeFn& probe = {}) {
  cfg.validate();
  if (data.empty()) throw Error("stage2: empty dataset");
  LabelGuard no_labels;
  Stopwatch total;
  const SeedStreams streams(cfg.seed);
  const auto teacher_hash = teacher.params().hash();

  Rng init = streams.stream("stage2/init");
  Stage2Result res{cfg.student_init == StudentInit::Teacher ? Encoder(teacher) : Encoder(teacher.config(), init),
                   std::nullopt, {}, teacher_hash, teacher_hash, {}, {}, 0, 0};
  const auto d = teacher.config().rep_dim;
  if (cfg.projector.enabled) {
    ProjectorConfig pc = cfg.projector;
    pc.out = d;  // student features are compared against teacher representations
    res.projector.emplace(d, pc, init);
  }

  std::optional<PseudoTargetBank> bank;
  if (cfg.target_mode == TargetMode::Precomputed) {
    ScopedPhase phase(res.phases, "stage2.targets");
    bank.emplace(make_pseudo_targets(teacher, data, cfg.bank_augmentation, streams));
  }
  const auto bank_hash = bank ? bank->hash() : 0;

  Sgd enc_opt(cfg.momentum, cfg.weight_decay), proj_opt(cfg.momentum, cfg.weight_decay);
  const bool shared_view = cfg.clean_augmentation.kind == cfg.adv_augmentation.kind;
  const Real lambda = static_cast<Real>(cfg.lambda);

  auto features = [&](const Tensor& x, NormMode mode) {
    Tensor h = res.student.forward(x, mode);
    return res.projector ? res.projector->forward(h) : h;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Stopwatch watch;
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs);
    double clean_sum = 0, adv_sum = 0;
    std::size_t steps = 0;
    const auto batches = epoch_batches(data.size(), std::min(cfg.batch_size, data.size()), epoch, streams, false,
                                       "stage2/data_order");
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      Tensor x_clean, x_adv_src, targets;
      {
        ScopedPhase phase(res.phases, "stage2.augment");
        x_clean = augment_batch(cfg.clean_augmentation, data, batch, epoch, 0, streams);
        x_adv_src = shared_view ? x_clean : augment_batch(cfg.adv_augmentation, data, batch, epoch, 1, streams);
      }
      {
        ScopedPhase phase(res.phases, "stage2.targets");
        if (bank) {
          targets = bank->gather(data, batch);
        } else {
          NoGradGuard no_grad;
          targets = teacher.infer(x_clean);
        }
      }
      Tensor x_adv;
      {
        ScopedPhase phase(res.phases, "stage2.attack");
        AttackContext ctx;
        ctx.targets = targets;
        if (cfg.attack.objective == Objective::CosineToClean) {
          NoGradGuard no_grad;
          ctx.clean = features(x_clean, NormMode::TrainFrozenStats);
        }
        Rng rng = streams.substream("stage2/attack", {epoch, b});
        x_adv = pgd([&](const Tensor& x) { return features(x, NormMode::TrainFrozenStats); }, x_adv_src, ctx,
                    cfg.attack, rng)
                    .x_adv;
      }
      {
        ScopedPhase phase(res.phases, "stage2.update");
        Tensor loss, clean_term, adv_term;
        try {
          const Tensor f_adv = features(x_adv, NormMode::Train);
          if (cfg.loss_form == LossForm::Direct) {
            adv_term = deacl_loss_direct(f_adv, targets);
            clean_term = Tensor::scalar(0);
            loss = adv_term;
          } else {
            const Tensor f_clean = features(x_clean, NormMode::Train);
            if (cfg.distance == Distance::Cosine) {
              const auto terms = deacl_loss_terms(f_clean, f_adv, targets, lambda);
              clean_term = terms.clean_term;
              adv_term = terms.adv_term;
            } else {
              clean_term = kl_distance_loss(f_clean, targets);
              adv_term = scale(kl_distance_loss(f_adv, f_clean), lambda);
            }
            loss = add(clean_term, adv_term);
            if (cfg.collapse_prevention)
              loss = add(loss, scale(infonce_negative_part(f_clean, static_cast<Real>(cfg.collapse_tau)),
                                     static_cast<Real>(cfg.collapse_weight)));
          }
          res.student.params().zero_grad();
          if (res.projector) res.projector->params().zero_grad();
          backward(loss);
        } catch (const NumericError& e) {
          throw DivergenceError("stage2: divergence at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(b) + ": " + e.what());
        }
        enc_opt.step(res.student.params(), lr);
        if (res.projector) proj_opt.step(res.projector->params(), lr);
        clean_sum += clean_term.item();
        adv_sum += adv_term.item();
      }
      ++steps;
    }
    res.steps += steps;

    if (teacher.params().hash() != teacher_hash) throw Error("stage2: teacher parameters changed");
    if (bank) {
      res.bank_hashes.push_back(bank->hash());
      if (res.bank_hashes.back() != bank_hash) throw Error("stage2: pseudo-target bank changed");
    }
    Stage2LogRow row{epoch, clean_sum / double(steps), adv_sum / double(steps), std::nullopt, 0};
    if (!std::isfinite(row.loss_clean_term) || !std::isfinite(row.loss_adv_term))
      throw DivergenceError("stage2: non-finite epoch loss at epoch " + std::to_string(epoch));
    row.wall_seconds = watch.seconds();
    if (probe) {
      LabelGuard::Lift lift;
      ScopedPhase phase(res.phases, "stage2.probe");
      row.probe_ra = probe(res.student, epoch);
    }
    res.log.push_back(row);
  }
  res.student.params().zero_grad();
  if (res.projector) res.projector->params().zero_grad();
  res.teacher_hash_after = teacher.params().hash();
  res.seconds = total.seconds();
  return res;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
