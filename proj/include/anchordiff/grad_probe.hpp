#pragma once

// Observation-only gradient probe. After a backward pass it walks the param
// store, aggregates gradient L2 norms per UNet block, tags each block with a
// timestep bucket, and flags blocks whose norm falls under 1% of the mean
// block norm for that observation. Rows serialize to CSV for offline
// aggregation.

#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchordiff/module.hpp"

namespace anchordiff {

struct ProbeRow {
  int step = 0;
  int t_bucket = 0;  // inclusive upper edge of the timestep bucket
  std::string layer;
  ProbePath path = ProbePath::none;
  int block = 0;
  double grad_l2 = 0.0;
  std::int64_t param_count = 0;
  bool vanishing = false;
};

class GradProbe {
 public:
  explicit GradProbe(std::vector<int> bucket_edges = {0, 250, 500, 750, 1000},
                     double vanish_ratio = 0.01)
      : edges_(std::move(bucket_edges)), vanish_ratio_(vanish_ratio) {
    if (edges_.size() < 2) throw std::invalid_argument("probe: need at least one bucket");
    for (std::size_t i = 1; i < edges_.size(); ++i) {
      if (edges_[i] <= edges_[i - 1]) {
        throw std::invalid_argument("probe: bucket edges must increase");
      }
    }
  }

  // Upper edge of the bucket containing t; t past the last edge clamps.
  int bucket_of(int t) const {
    for (std::size_t i = 1; i < edges_.size(); ++i) {
      if (t <= edges_[i]) return edges_[i];
    }
    return edges_.back();
  }

  // Reads gradients only; never touches values or graph state.
  template <typename S>
  std::vector<ProbeRow> observe(int step, int t, const ParamStore<S>& store) const {
    std::vector<ProbeRow> rows;
    for (const auto& e : store.entries()) {
      if (e.path == ProbePath::none) continue;
      ProbeRow* row = nullptr;
      for (auto& r : rows) {
        if (r.layer == e.layer && r.path == e.path && r.block == e.block) {
          row = &r;
          break;
        }
      }
      if (row == nullptr) {
        rows.push_back({step, bucket_of(t), e.layer, e.path, e.block, 0.0, 0, false});
        row = &rows.back();
      }
      const auto& g = e.tensor.node()->grad;
      double sumsq = 0.0;
      for (S v : g) sumsq += static_cast<double>(v) * static_cast<double>(v);
      row->grad_l2 += sumsq;  // accumulate squares, take the root below
      row->param_count += e.tensor.numel();
    }
    double mean = 0.0;
    for (auto& r : rows) {
      r.grad_l2 = std::sqrt(r.grad_l2);
      mean += r.grad_l2;
    }
    if (!rows.empty()) mean /= static_cast<double>(rows.size());
    for (auto& r : rows) r.vanishing = r.grad_l2 < vanish_ratio_ * mean;
    return rows;
  }

 private:
  std::vector<int> edges_;
  double vanish_ratio_;
};

// ---- CSV ----

inline const char* probe_csv_header() {
  return "step,t_bucket,layer,path,block,grad_l2,param_count,vanishing";
}

inline std::string probe_row_csv(const ProbeRow& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.t_bucket << ',' << r.layer << ',' << probe_path_name(r.path)
     << ',' << r.block << ',' << r.grad_l2 << ',' << r.param_count << ','
     << (r.vanishing ? 1 : 0);
  return os.str();
}

inline ProbePath probe_path_from_name(const std::string& s) {
  if (s == "none") return ProbePath::none;
  if (s == "down") return ProbePath::down;
  if (s == "mid") return ProbePath::mid;
  if (s == "up") return ProbePath::up;
  throw std::invalid_argument("probe: unknown path '" + s + "'");
}

inline std::vector<ProbeRow> parse_probe_csv(std::istream& in) {
  std::vector<ProbeRow> rows;
  std::string line;
  if (!std::getline(in, line)) return rows;
  if (line != probe_csv_header()) {
    throw std::invalid_argument("probe: unexpected CSV header '" + line + "'");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 8) throw std::invalid_argument("probe: malformed CSV row '" + line + "'");
    ProbeRow r;
    r.step = std::stoi(f[0]);
    r.t_bucket = std::stoi(f[1]);
    r.layer = f[2];
    r.path = probe_path_from_name(f[3]);
    r.block = std::stoi(f[4]);
    r.grad_l2 = std::stod(f[5]);
    r.param_count = std::stoll(f[6]);
    r.vanishing = f[7] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- aggregation ----

struct ProbeSummary {
  int t_bucket = 0;
  std::string layer;
  ProbePath path = ProbePath::none;
  int block = 0;
  int observations = 0;
  double mean_grad_l2 = 0.0;
  double vanishing_fraction = 0.0;
};

inline std::vector<ProbeSummary> summarize_probe(const std::vector<ProbeRow>& rows) {
  std::vector<ProbeSummary> out;
  for (const ProbeRow& r : rows) {
    ProbeSummary* s = nullptr;
    for (auto& cand : out) {
      if (cand.t_bucket == r.t_bucket && cand.layer == r.layer && cand.path == r.path &&
          cand.block == r.block) {
        s = &cand;
        break;
      }
    }
    if (s == nullptr) {
      out.push_back({r.t_bucket, r.layer, r.path, r.block, 0, 0.0, 0.0});
      s = &out.back();
    }
    ++s->observations;
    s->mean_grad_l2 += r.grad_l2;
    if (r.vanishing) s->vanishing_fraction += 1.0;
  }
  for (auto& s : out) {
    s.mean_grad_l2 /= static_cast<double>(s.observations);
    s.vanishing_fraction /= static_cast<double>(s.observations);
  }
  return out;
}

// Signal retention on the encoder side. Each block's norms are averaged over
// every observation first; the weakest proper down block (the block-0 input
// projection does not count) is then compared against the mean block. Higher
// means the deep down blocks keep receiving gradient.
inline double down_path_health(const std::vector<ProbeRow>& rows) {
  struct Acc {
    double sum = 0.0;
    int n = 0;
    ProbePath path = ProbePath::none;
    int block = 0;
  };
  std::map<std::string, Acc> blocks;
  for (const ProbeRow& r : rows) {
    Acc& a = blocks[r.layer];
    a.sum += r.grad_l2;
    ++a.n;
    a.path = r.path;
    a.block = r.block;
  }
  double mean_of_means = 0.0;
  double min_down = -1.0;
  for (const auto& [name, a] : blocks) {
    const double mean = a.sum / static_cast<double>(a.n);
    mean_of_means += mean;
    if (a.path == ProbePath::down && a.block >= 1) {
      if (min_down < 0.0 || mean < min_down) min_down = mean;
    }
  }
  if (min_down < 0.0) throw std::invalid_argument("probe: no down-block observations");
  mean_of_means /= static_cast<double>(blocks.size());
  return mean_of_means > 0.0 ? min_down / mean_of_means : 0.0;
}

}  // namespace anchordiff
