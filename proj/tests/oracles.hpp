#pragma once

// Scalar reference implementations used as test oracles. Plain double loops,
// no dependence on the library's ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm(a) * norm(b)); }

/// Symmetrized in-batch contrastive loss, summed directly from its definition.
inline double info_nce(const Mat& za, const Mat& zb, double tau) {
  const std::size_t B = za.size();
  Mat all = za;
  all.insert(all.end(), zb.begin(), zb.end());
  double total = 0;
  for (std::size_t i = 0; i < 2 * B; ++i) {
    const std::size_t pos = (i + B) % (2 * B);
    const double num = std::exp(cosine(all[i], all[pos]) / tau);
    double den = num;
    for (std::size_t k = 0; k < 2 * B; ++k)
      if (k != i && k != pos) den += std::exp(cosine(all[i], all[k]) / tau);
    total += -std::log(num / den);
  }
  return total / static_cast<double>(2 * B);
}

inline double deacl(const Mat& clean, const Mat& adv, const Mat& target, double lambda) {
  double s = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) s += -cosine(clean[i], target[i]) - lambda * cosine(adv[i], clean[i]);
  return s / static_cast<double>(clean.size());
}

inline double deacl_direct(const Mat& adv, const Mat& target) {
  double s = 0;
  for (std::size_t i = 0; i < adv.size(); ++i) s += -cosine(adv[i], target[i]);
  return s / static_cast<double>(adv.size());
}

inline Vec softmax(const Vec& x) {
  const double m = *std::max_element(x.begin(), x.end());
  Vec e(x.size());
  double z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (e[i] = std::exp(x[i] - m));
  for (auto& v : e) v /= z;
  return e;
}

/// Mean over rows of KL(softmax(ref) || softmax(student)).
inline double kl(const Mat& student, const Mat& ref) {
  double s = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const Vec p = softmax(ref[i]), q = softmax(student[i]);
    for (std::size_t k = 0; k < p.size(); ++k) s += p[k] * std::log(p[k] / q[k]);
  }
  return s / static_cast<double>(ref.size());
}

/// Mean over rows of log sum_{k != i} exp(cos(h_i, h_k) / tau).
inline double negative_part(const Mat& h, double tau) {
  if (h.size() < 2) return 0;
  double s = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    double z = 0;
    for (std::size_t k = 0; k < h.size(); ++k)
      if (k != i) z += std::exp(cosine(h[i], h[k]) / tau);
    s += std::log(z);
  }
  return s / static_cast<double>(h.size());
}

inline double cross_entropy(const Vec& logits, std::size_t label) { return -std::log(softmax(logits)[label]); }

}  // namespace oracle
