#pragma once

// Stage 1: non-robust contrastive pretraining of the teacher encoder.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "losses.hpp"
#include "models.hpp"
#include "optim.hpp"
#include "timing.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct Stage1Config {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double tau = 0.5;
  double lr = 0.1;
  double weight_decay = 1e-5;
  double momentum = 0.9;
  std::size_t warmup_epochs = 10;
  AugmentationPolicy augmentation = AugmentationPolicy::of(AugKind::Strong, "stage1/augment");
  ProjectorConfig projector{};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("stage1: temperature must be > 0");
    if (batch_size < 2) throw ConfigError("stage1: batch size must be >= 2");
    if (!projector.enabled) throw ConfigError("stage1: the projector head must be enabled");
  }
};

inline void to_json(nlohmann::json& j, const Stage1Config& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"tau", c.tau},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"momentum", c.momentum},
       {"warmup_epochs", c.warmup_epochs},
       {"augmentation", c.augmentation},
       {"projector", c.projector},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, Stage1Config& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.tau = j.value("tau", c.tau);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.momentum = j.value("momentum", c.momentum);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  if (j.contains("augmentation")) j.at("augmentation").get_to(c.augmentation);
  if (j.contains("projector")) j.at("projector").get_to(c.projector);
  c.seed = j.value("seed", c.seed);
}

struct Stage1LogRow {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double lr = 0;
  double wall_seconds = 0;
};

struct Stage1Result {
  Encoder encoder;
  Projector projector;
  std::vector<Stage1LogRow> log;
  double seconds = 0;
};

namespace detail {

// Two views stacked along the batch so normalization sees both at once.
inline Tensor stack_batches(const Tensor& a, const Tensor& b) {
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<Real> v(a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace detail

/// Trains encoder + projector with symmetrized InfoNCE on two augmented views.
/// Labels are never read (the body runs under a LabelGuard).
inline Stage1Result train_stage1(const Dataset& data, const EncoderConfig& encoder_cfg, const Stage1Config& cfg) {
  cfg.validate();
  if (data.empty()) throw Error("stage1: empty dataset");
  LabelGuard no_labels;
  Stopwatch total;
  const SeedStreams streams(cfg.seed);
  Rng init = streams.stream("stage1/init");
  Stage1Result res{Encoder(encoder_cfg, init), Projector(encoder_cfg.rep_dim, cfg.projector, init), {}, 0};
  Sgd enc_opt(cfg.momentum, cfg.weight_decay), proj_opt(cfg.momentum, cfg.weight_decay);
  const auto B = std::min(cfg.batch_size, data.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Stopwatch watch;
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs);
    double loss_sum = 0;
    std::size_t steps = 0;
    for (const auto& batch : epoch_batches(data.size(), B, epoch, streams, true, "stage1/data_order")) {
      if (batch.size() < 2) continue;
      const auto [va, vb] = make_views(cfg.augmentation, data, batch, epoch, streams);
      Tensor loss;
      try {
        const Tensor z = res.projector.forward(res.encoder.forward(detail::stack_batches(va, vb), NormMode::Train));
        const auto n = batch.size();
        loss = info_nce(slice_rows(z, 0, n), slice_rows(z, n, 2 * n), static_cast<Real>(cfg.tau));
        res.encoder.params().zero_grad();
        res.projector.params().zero_grad();
        backward(loss);
      } catch (const NumericError& e) {
        throw DivergenceError("stage1: divergence at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(steps) + ": " + e.what());
      }
      enc_opt.step(res.encoder.params(), lr);
      proj_opt.step(res.projector.params(), lr);
      loss_sum += loss.item();
      ++steps;
    }
    const double mean_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    if (!std::isfinite(mean_loss)) throw DivergenceError("stage1: non-finite epoch loss at epoch " + std::to_string(epoch));
    res.log.push_back({epoch, mean_loss, lr, watch.seconds()});
  }
  res.encoder.params().zero_grad();
  res.projector.params().zero_grad();
  res.seconds = total.seconds();
  return res;
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
