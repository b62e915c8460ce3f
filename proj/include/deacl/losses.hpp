#pragma once

// Contrastive, distillation and divergence losses used by both training stages.
//
// Cosine terms are written as negative cosine similarity so that every
// objective here is minimized.

#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

/// InfoNCE for one anchor: -log(e^{a.p/t} / (e^{a.p/t} + sum_k e^{a.n_k/t})),
/// with all vectors l2-normalized. `negatives` is [N,p] and may have N = 0.
inline Tensor info_nce_anchor(const Tensor& anchor, const Tensor& positive, const Tensor& negatives, Real tau) {
  if (!(tau > 0)) throw Error("info_nce: temperature must be positive");
  const auto p = anchor.numel();
  if (positive.numel() != p) throw ShapeError("info_nce_anchor: anchor/positive length mismatch");
  Tensor candidates = normalize_rows(reshape(positive, {1, p}));
  if (negatives.defined() && negatives.numel() > 0) {
    if (negatives.rank() != 2 || negatives.dim(1) != p) throw ShapeError("info_nce_anchor: negatives must be [N,p]");
    candidates = concat_rows(candidates, normalize_rows(negatives));
  }
  const Tensor logits = scale(matmul(normalize_rows(reshape(anchor, {1, p})), transpose(candidates)), Real(1) / tau);
  const std::size_t first[] = {0};
  return scale(sum(gather_rows(log_softmax(logits), first)), Real(-1));
}

/// Symmetrized batch InfoNCE over two views za[B,p], zb[B,p]. Each of the 2B
/// rows is an anchor; its positive is the other view of the same sample and
/// the remaining 2B-2 rows are negatives. Returns the mean over anchors.
inline Tensor info_nce(const Tensor& za, const Tensor& zb, Real tau) {
  if (!(tau > 0)) throw Error("info_nce: temperature must be positive");
  detail::require_same_shape("info_nce", za, zb);
  detail::require_rank("info_nce", za, 2);
  const auto B = za.dim(0);
  if (B == 0) throw ShapeError("info_nce: empty batch");
  const Tensor z = concat_rows(normalize_rows(za), normalize_rows(zb));
  const Tensor sim = scale(matmul(z, transpose(z)), Real(1) / tau);
  const auto n = 2 * B;
  std::vector<std::uint8_t> self(n * n, 0);
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    self[i * n + i] = 1;
    pos[i] = (i + B) % n;
  }
  return scale(mean(gather_rows(log_softmax(sim, self), pos)), Real(-1));
}

/// Mean over rows of log sum_{k != i} exp(h_i.h_k / tau) for l2-normalized
/// rows: the negative (repulsion) half of InfoNCE over a single batch.
/// A batch of one has no negatives and contributes 0.
inline Tensor infonce_negative_part(const Tensor& h, Real tau) {
  if (!(tau > 0)) throw Error("infonce_negative_part: temperature must be positive");
  detail::require_rank("infonce_negative_part", h, 2);
  const auto B = h.dim(0);
  const Tensor z = normalize_rows(h);
  const Tensor sim = scale(matmul(z, transpose(z)), Real(1) / tau);
  std::vector<std::uint8_t> self(B * B, 0);
  for (std::size_t i = 0; i < B; ++i) self[i * B + i] = 1;
  return mean(logsumexp_rows(sim, self));
}

struct DeaclLoss {
  Tensor total;       // clean_term + adv_term
  Tensor clean_term;  // -mean cos(f(x), z1)
  Tensor adv_term;    // -lambda * mean cos(f(x_adv), f(x))
};

/// Stage-2 objective: mean over the batch of
///   -cos(f(x), z1) - lambda * cos(f(x_adv), f(x)).
/// Its minimum is -(1 + lambda), attained when f(x) ~ z1 and f(x_adv) ~ f(x).
inline DeaclLoss deacl_loss_terms(const Tensor& clean, const Tensor& adv, const Tensor& targets, Real lambda) {
  detail::require_same_shape("deacl_loss", clean, targets);
  detail::require_same_shape("deacl_loss", clean, adv);
  if (lambda < 0) throw Error("deacl_loss: lambda must be >= 0");
  DeaclLoss out;
  out.clean_term = scale(mean(cosine_rows(clean, targets)), Real(-1));
  out.adv_term = scale(mean(cosine_rows(adv, clean)), -lambda);
  out.total = add(out.clean_term, out.adv_term);
  return out;
}

inline Tensor deacl_loss(const Tensor& clean, const Tensor& adv, const Tensor& targets, Real lambda) {
  return deacl_loss_terms(clean, adv, targets, lambda).total;
}

/// Alternative objective that pulls adversarial features straight to the targets.
inline Tensor deacl_loss_direct(const Tensor& adv, const Tensor& targets) {
  return scale(mean(cosine_rows(adv, targets)), Real(-1));
}

/// Mean over rows of KL(softmax(reference/T) || softmax(student/T)).
inline Tensor kl_distance_loss(const Tensor& student, const Tensor& reference, Real temperature = 1) {
  detail::require_same_shape("kl_distance_loss", student, reference);
  if (!(temperature > 0)) throw Error("kl_distance_loss: temperature must be positive");
  const Tensor ref_log = log_softmax(scale(reference, Real(1) / temperature));
  const Tensor stu_log = log_softmax(scale(student, Real(1) / temperature));
  const Tensor ref_p = softmax(scale(reference, Real(1) / temperature));
  return mean(sum_rows(mul(ref_p, sub(ref_log, stu_log))));
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl
