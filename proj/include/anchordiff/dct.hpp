#pragma once

// Orthonormal DCT-II analysis. Always computed in double: coefficients feed
// both float training targets and 1e-9-tolerance numerical tests.
//
//   c[k] = A(k) * sum_n x[n] cos(pi (2n+1) k / (2N)),
//   A(0) = sqrt(1/N), A(k>0) = sqrt(2/N)
//
// The matrix is orthogonal, so the inverse transform is its transpose and
// Parseval holds exactly up to rounding.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace anchordiff {

// Row-major (N x N); row k is the k-th analysis vector.
inline std::vector<double> dct_matrix(int n) {
  if (n < 1) throw std::invalid_argument("dct_matrix: n must be >= 1");
  std::vector<double> m(static_cast<std::size_t>(n) * n);
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < n; ++k) {
    const double a = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
    for (int i = 0; i < n; ++i) {
      m[static_cast<std::size_t>(k) * n + i] = a * std::cos(pi * (2 * i + 1) * k / (2.0 * n));
    }
  }
  return m;
}

inline std::vector<double> dct2_forward(const std::vector<double>& x) {
  const int n = static_cast<int>(x.size());
  auto m = dct_matrix(n);
  std::vector<double> c(x.size(), 0.0);
  for (int k = 0; k < n; ++k) {
    double acc = 0.0;
    const double* row = m.data() + static_cast<std::size_t>(k) * n;
    for (int i = 0; i < n; ++i) acc += row[i] * x[i];
    c[k] = acc;
  }
  return c;
}

inline std::vector<double> dct2_inverse(const std::vector<double>& c) {
  const int n = static_cast<int>(c.size());
  auto m = dct_matrix(n);
  std::vector<double> x(c.size(), 0.0);
  for (int k = 0; k < n; ++k) {
    const double* row = m.data() + static_cast<std::size_t>(k) * n;
    const double ck = c[k];
    for (int i = 0; i < n; ++i) x[i] += row[i] * ck;
  }
  return x;
}

// Truncated column-wise analysis of a (frames x dims) feature matrix.
struct Spectrum {
  int k = 0;
  int dims = 0;
  int source_frames = 0;
  std::vector<double> coef;  // row-major (k x dims), row = frequency index
};

// Keeps the first k coefficients of each column. Signals shorter than k
// frames are zero-padded to k before analysis; longer signals are analyzed
// at full length and the tail coefficients dropped.
inline Spectrum dct_truncate(const double* data, int frames, int dims, int k) {
  if (frames < 1 || dims < 1) throw std::invalid_argument("dct_truncate: empty input");
  if (k < 1) throw std::invalid_argument("dct_truncate: k must be >= 1");
  const int len = std::max(frames, k);
  auto m = dct_matrix(len);
  Spectrum s;
  s.k = k;
  s.dims = dims;
  s.source_frames = frames;
  s.coef.assign(static_cast<std::size_t>(k) * dims, 0.0);
  for (int f = 0; f < k; ++f) {
    const double* row = m.data() + static_cast<std::size_t>(f) * len;
    double* out = s.coef.data() + static_cast<std::size_t>(f) * dims;
    // zero padding beyond `frames` contributes nothing to the sum
    for (int t = 0; t < frames; ++t) {
      const double w = row[t];
      const double* frame = data + static_cast<std::size_t>(t) * dims;
      for (int d = 0; d < dims; ++d) out[d] += w * frame[d];
    }
  }
  return s;
}

// Non-owning view of one clip's feature matrix.
struct FrameMatrixView {
  const double* data;
  int frames;
  int dims;
};

// Per-frequency energy profile over a set of clips. Each clip is analyzed
// at its own length; energies accumulate by frequency index, so the profile
// length is the longest clip. cum_ratio reaches 1 by Parseval.
struct EnergySummary {
  std::vector<double> mean_abs;   // mean |coefficient| per frequency index
  std::vector<double> cum_ratio;  // cumulative energy fraction per index

  // Fraction of total energy in the first k indices.
  double retained(int k) const {
    if (k < 1) return 0.0;
    const int last = std::min<int>(k, static_cast<int>(cum_ratio.size()));
    return cum_ratio[static_cast<std::size_t>(last) - 1];
  }
};

inline EnergySummary energy_spectrum(const std::vector<FrameMatrixView>& clips) {
  if (clips.empty()) throw std::invalid_argument("energy_spectrum: no clips");
  int longest = 0;
  for (const auto& c : clips) longest = std::max(longest, c.frames);
  std::vector<double> energy(static_cast<std::size_t>(longest), 0.0);
  std::vector<double> abs_sum(static_cast<std::size_t>(longest), 0.0);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(longest), 0);
  std::vector<double> column;
  for (const auto& clip : clips) {
    auto m = dct_matrix(clip.frames);
    column.resize(static_cast<std::size_t>(clip.frames));
    for (int d = 0; d < clip.dims; ++d) {
      for (int t = 0; t < clip.frames; ++t) {
        column[static_cast<std::size_t>(t)] = clip.data[static_cast<std::size_t>(t) * clip.dims + d];
      }
      for (int f = 0; f < clip.frames; ++f) {
        const double* row = m.data() + static_cast<std::size_t>(f) * clip.frames;
        double acc = 0.0;
        for (int t = 0; t < clip.frames; ++t) acc += row[t] * column[static_cast<std::size_t>(t)];
        energy[static_cast<std::size_t>(f)] += acc * acc;
        abs_sum[static_cast<std::size_t>(f)] += std::abs(acc);
        ++counts[static_cast<std::size_t>(f)];
      }
    }
  }
  double total = 0.0;
  for (double e : energy) total += e;
  EnergySummary out;
  out.mean_abs.resize(energy.size());
  out.cum_ratio.resize(energy.size());
  double running = 0.0;
  for (std::size_t f = 0; f < energy.size(); ++f) {
    out.mean_abs[f] = counts[f] ? abs_sum[f] / static_cast<double>(counts[f]) : 0.0;
    running += energy[f];
    out.cum_ratio[f] = total > 0.0 ? running / total : 0.0;
  }
  return out;
}

}  // namespace anchordiff
