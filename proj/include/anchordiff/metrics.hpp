#pragma once

// Embedding-space evaluation metrics: Frechet distance between Gaussian
// fits, retrieval precision, diversity, motion-text distance, and
// per-prompt multimodality. Everything runs in double precision over
// plain feature rows; the matrix square root uses a cyclic Jacobi
// eigensolver, which is plenty at embedding widths of 64 or less.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {

using FeatureSet = std::vector<std::vector<double>>;

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("euclidean: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

template <typename S>
FeatureSet features_from_tensor(const Tensor<S>& t) {
  if (t.ndim() != 2) throw std::invalid_argument("features_from_tensor: want a (rows, dim) tensor");
  const auto rows = static_cast<std::size_t>(t.dim(0));
  const auto cols = static_cast<std::size_t>(t.dim(1));
  FeatureSet out(rows, std::vector<double>(cols));
  const std::vector<S>& src = t.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i][j] = static_cast<double>(src[i * cols + j]);
  return out;
}

// ---- Gaussian fits and Frechet distance ----

struct GaussianFit {
  std::vector<double> mean;  // d
  std::vector<double> cov;   // d*d row-major, symmetric
  std::size_t count = 0;

  std::size_t dim() const { return mean.size(); }
};

namespace detail {

inline void metrics_check_finite(const FeatureSet& feats, const char* who) {
  for (const auto& row : feats)
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite feature");
}

// Cyclic Jacobi rotations on a symmetric matrix; diag converges to the
// eigenvalues and the accumulated rotations to orthonormal eigenvector
// columns, so a = vectors * diag(values) * vectors^T.
inline void jacobi_eigen(std::vector<double> a, std::size_t d,
                         std::vector<double>& values, std::vector<double>& vectors) {
  values.assign(d, 0.0);
  vectors.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) vectors[i * d + i] = 1.0;
  if (d == 0) return;

  double frob2 = 0.0;
  for (double v : a) frob2 += v * v;
  const double stop = 1e-28 * (frob2 + 1e-300);

  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    if (off <= stop) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k * d + p];
          const double akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p * d + k];
          const double aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = vectors[k * d + p];
          const double vkq = vectors[k * d + q];
          vectors[k * d + p] = c * vkp - s * vkq;
          vectors[k * d + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  for (std::size_t i = 0; i < d; ++i) values[i] = a[i * d + i];
}

// Symmetric square root with negative eigenvalues clipped to zero.
inline std::vector<double> sym_sqrt(const std::vector<double>& m, std::size_t d) {
  std::vector<double> values;
  std::vector<double> vectors;
  jacobi_eigen(m, d, values, vectors);
  std::vector<double> out(d * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double r = std::sqrt(std::max(values[k], 0.0));
    if (r == 0.0) continue;
    for (std::size_t i = 0; i < d; ++i) {
      const double vik = r * vectors[i * d + k];
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += vik * vectors[j * d + k];
    }
  }
  return out;
}

inline std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b,
                                   std::size_t d) {
  std::vector<double> out(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double aik = a[i * d + k];
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += aik * b[k * d + j];
    }
  return out;
}

}  // namespace detail

inline GaussianFit gaussian_fit(const FeatureSet& feats) {
  if (feats.empty()) throw std::invalid_argument("gaussian_fit: empty feature set");
  const std::size_t n = feats.size();
  const std::size_t d = feats[0].size();
  if (d == 0) throw std::invalid_argument("gaussian_fit: zero-dimensional features");
  for (const auto& row : feats)
    if (row.size() != d) throw std::invalid_argument("gaussian_fit: ragged feature rows");
  detail::metrics_check_finite(feats, "gaussian_fit");

  GaussianFit fit;
  fit.count = n;
  fit.mean.assign(d, 0.0);
  for (const auto& row : feats)
    for (std::size_t j = 0; j < d; ++j) fit.mean[j] += row[j];
  for (double& m : fit.mean) m /= static_cast<double>(n);

  fit.cov.assign(d * d, 0.0);
  if (n >= 2) {
    for (const auto& row : feats)
      for (std::size_t i = 0; i < d; ++i) {
        const double di = row[i] - fit.mean[i];
        for (std::size_t j = i; j < d; ++j) fit.cov[i * d + j] += di * (row[j] - fit.mean[j]);
      }
    const double denom = static_cast<double>(n - 1);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) {
        const double v = fit.cov[i * d + j] / denom;
        fit.cov[i * d + j] = v;
        fit.cov[j * d + i] = v;
      }
  }
  if (n < d + 1) {
    // too few samples for a full-rank estimate: add a small ridge
    for (std::size_t i = 0; i < d; ++i) fit.cov[i * d + i] += 1e-6;
  }
  return fit;
}

inline double fid_from_moments(const GaussianFit& a, const GaussianFit& b) {
  if (a.dim() == 0 || a.dim() != b.dim())
    throw std::invalid_argument("fid: moment dimension mismatch");
  const std::size_t d = a.dim();

  double mean_term = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = a.mean[i] - b.mean[i];
    mean_term += diff * diff;
  }

  // tr((Sa Sb)^{1/2}) via the symmetric product Sa^{1/2} Sb Sa^{1/2},
  // which shares its eigenvalues with Sa Sb but stays symmetric.
  const std::vector<double> ra = detail::sym_sqrt(a.cov, d);
  std::vector<double> m = detail::mat_mul(detail::mat_mul(ra, b.cov, d), ra, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double v = 0.5 * (m[i * d + j] + m[j * d + i]);
      m[i * d + j] = v;
      m[j * d + i] = v;
    }
  std::vector<double> values;
  std::vector<double> vectors;
  detail::jacobi_eigen(m, d, values, vectors);
  double cross = 0.0;
  for (double lam : values) cross += std::sqrt(std::max(lam, 0.0));

  double trace_term = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace_term += a.cov[i * d + i] + b.cov[i * d + i];
  return mean_term + trace_term - 2.0 * cross;
}

inline double fid(const FeatureSet& real_features, const FeatureSet& gen_features) {
  return fid_from_moments(gaussian_fit(real_features), gaussian_fit(gen_features));
}

// ---- retrieval precision ----

struct RPrecision {
  double top1 = 0.0;
  double top2 = 0.0;
  double top3 = 0.0;
  std::size_t motions = 0;
};

// Each motion is ranked against a pool of its own caption plus
// pool_size-1 mismatched captions drawn without replacement. Distance
// ties favor the true caption; they only occur on degenerate inputs.
inline RPrecision r_precision(const FeatureSet& motion_features,
                              const FeatureSet& caption_features,
                              std::size_t pool_size, Rng& rng) {
  if (motion_features.empty() || motion_features.size() != caption_features.size())
    throw std::invalid_argument("r_precision: motions and captions must pair up");
  if (pool_size < 1) throw std::invalid_argument("r_precision: pool must hold the true caption");
  if (pool_size > caption_features.size())
    throw std::invalid_argument("r_precision: pool exceeds caption count");
  detail::metrics_check_finite(motion_features, "r_precision");
  detail::metrics_check_finite(caption_features, "r_precision");

  const std::size_t n = motion_features.size();
  RPrecision out;
  out.motions = n;
  std::vector<std::size_t> others;
  others.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    others.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    for (std::size_t k = 0; k + 1 < pool_size; ++k) {
      const auto pick =
          k + static_cast<std::size_t>(
                  rng.uniform_int(0, static_cast<std::int64_t>(others.size() - 1 - k)));
      std::swap(others[k], others[pick]);
    }
    const double d_true = euclidean(motion_features[i], caption_features[i]);
    std::size_t closer = 0;
    for (std::size_t k = 0; k + 1 < pool_size; ++k)
      if (euclidean(motion_features[i], caption_features[others[k]]) < d_true) ++closer;
    if (closer < 1) out.top1 += 1.0;
    if (closer < 2) out.top2 += 1.0;
    if (closer < 3) out.top3 += 1.0;
  }
  out.top1 /= static_cast<double>(n);
  out.top2 /= static_cast<double>(n);
  out.top3 /= static_cast<double>(n);
  return out;
}

// ---- diversity, motion-text distance, multimodality ----

inline double diversity(const FeatureSet& features, std::size_t pairs, Rng& rng) {
  if (features.size() < 2) throw std::invalid_argument("diversity: need at least two features");
  if (pairs == 0) throw std::invalid_argument("diversity: need at least one pair");
  detail::metrics_check_finite(features, "diversity");
  const std::size_t n = features.size();
  double total = 0.0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 1)));
    auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 2)));
    if (j >= i) ++j;  // the two endpoints of a pair are always distinct
    total += euclidean(features[i], features[j]);
  }
  return total / static_cast<double>(pairs);
}

inline double mm_dist(const FeatureSet& motion_features, const FeatureSet& caption_features) {
  if (motion_features.empty() || motion_features.size() != caption_features.size())
    throw std::invalid_argument("mm_dist: motions and captions must pair up");
  detail::metrics_check_finite(motion_features, "mm_dist");
  detail::metrics_check_finite(caption_features, "mm_dist");
  double total = 0.0;
  for (std::size_t i = 0; i < motion_features.size(); ++i)
    total += euclidean(motion_features[i], caption_features[i]);
  return total / static_cast<double>(motion_features.size());
}

inline constexpr std::size_t kMultimodalitySamples = 20;

// Twenty generations per prompt, paired by generation order as
// (0,1),(2,3),...,(18,19); the score is the mean pair distance averaged
// over prompts.
inline double multimodality(const std::vector<FeatureSet>& per_prompt) {
  if (per_prompt.empty()) throw std::invalid_argument("multimodality: no prompts");
  double prompt_total = 0.0;
  for (const FeatureSet& group : per_prompt) {
    if (group.size() != kMultimodalitySamples)
      throw std::invalid_argument("multimodality: each prompt needs exactly 20 samples");
    detail::metrics_check_finite(group, "multimodality");
    double pair_total = 0.0;
    for (std::size_t p = 0; p + 1 < group.size(); p += 2)
      pair_total += euclidean(group[p], group[p + 1]);
    prompt_total += pair_total / static_cast<double>(kMultimodalitySamples / 2);
  }
  return prompt_total / static_cast<double>(per_prompt.size());
}

}  // namespace anchordiff
