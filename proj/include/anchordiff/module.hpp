#pragma once

// Parameter registry, initializers, small reusable layers, Adam, numerical
// gradient checking, and the LMP1 checkpoint format. Parameters register in
// construction order; that order is the serialization order, so checkpoints
// round-trip without a name lookup pass.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint and blob formats assume a little-endian host");

namespace anchordiff {

using json = nlohmann::json;

// Location of a parameter group inside the denoiser, for gradient probes.
enum class ProbePath { none, down, mid, up };

inline const char* probe_path_name(ProbePath p) {
  switch (p) {
    case ProbePath::down: return "down";
    case ProbePath::mid: return "mid";
    case ProbePath::up: return "up";
    default: return "none";
  }
}

template <typename S>
struct ParamEntry {
  std::string name;
  Tensor<S> tensor;
  std::string layer;  // probe grouping label ("down1", "mid", ...)
  ProbePath path = ProbePath::none;
  int block = 0;
  bool trainable = true;
  double lr_scale = 1.0;
};

template <typename S>
class ParamStore {
 public:
  // Grouping context applied to subsequently added parameters.
  void begin_group(std::string layer, ProbePath path = ProbePath::none, int block = 0) {
    layer_ = std::move(layer);
    path_ = path;
    block_ = block;
  }

  Tensor<S> add(const std::string& name, Shape shape, std::vector<S> data) {
    if (index_.count(name)) {
      throw std::invalid_argument("param store: duplicate name '" + name + "'");
    }
    Tensor<S> t = Tensor<S>::param(std::move(shape), std::move(data));
    index_[name] = entries_.size();
    entries_.push_back({name, t, layer_, path_, block_, true, 1.0});
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  ParamEntry<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("param store: no parameter '" + name + "'");
    }
    return entries_[it->second];
  }

  std::vector<ParamEntry<S>>& entries() { return entries_; }
  const std::vector<ParamEntry<S>>& entries() const { return entries_; }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Freeze or unfreeze every parameter whose name starts with prefix.
  // Frozen parameters stop requiring gradients, so forward passes through
  // them build no graph at all.
  int set_trainable(const std::string& prefix, bool trainable) {
    int hit = 0;
    for (auto& e : entries_) {
      if (e.name.rfind(prefix, 0) == 0) {
        e.trainable = trainable;
        e.tensor.node()->requires_grad = trainable;
        if (trainable) e.tensor.node()->ensure_grad();
        ++hit;
      }
    }
    return hit;
  }

  int set_lr_scale(const std::string& prefix, double scale) {
    int hit = 0;
    for (auto& e : entries_) {
      if (e.name.rfind(prefix, 0) == 0) {
        e.lr_scale = scale;
        ++hit;
      }
    }
    return hit;
  }

 private:
  std::vector<ParamEntry<S>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::string layer_;
  ProbePath path_ = ProbePath::none;
  int block_ = 0;
};

// ---- initializers ----

// Kaiming-uniform: U(+-sqrt(6 / fan_in)).
template <typename S>
std::vector<S> kaiming_uniform(std::int64_t n, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<S> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = static_cast<S>(rng.uniform(-bound, bound));
  return out;
}

// ---- layers ----

template <typename S>
struct Linear {
  Tensor<S> w;  // (in, out): applied as x * w
  Tensor<S> b;

  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& prefix, int in, int out, Rng& rng,
         bool bias = true, bool zero_init = false) {
    std::vector<S> wd = zero_init
        ? std::vector<S>(static_cast<std::size_t>(in) * out, S(0))
        : kaiming_uniform<S>(static_cast<std::int64_t>(in) * out, in, rng);
    w = store.add(prefix + ".w", {in, out}, std::move(wd));
    if (bias) {
      b = store.add(prefix + ".b", {out}, std::vector<S>(static_cast<std::size_t>(out), S(0)));
    }
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return affine(x, w, b); }
};

template <typename S>
struct LayerNormParams {
  Tensor<S> g, b;

  LayerNormParams() = default;
  LayerNormParams(ParamStore<S>& store, const std::string& prefix, int dim) {
    g = store.add(prefix + ".g", {dim}, std::vector<S>(static_cast<std::size_t>(dim), S(1)));
    b = store.add(prefix + ".b", {dim}, std::vector<S>(static_cast<std::size_t>(dim), S(0)));
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layernorm(x, g, b); }
};

template <typename S>
struct Conv1dParams {
  Tensor<S> w;  // (out, in, kernel)
  Tensor<S> b;
  int stride = 1, pad = 0;

  Conv1dParams() = default;
  Conv1dParams(ParamStore<S>& store, const std::string& prefix, int in, int out,
               int kernel, int stride_, int pad_, Rng& rng, bool zero_init = false)
      : stride(stride_), pad(pad_) {
    const int fan_in = in * kernel;
    const std::int64_t n = static_cast<std::int64_t>(out) * in * kernel;
    std::vector<S> wd = zero_init ? std::vector<S>(static_cast<std::size_t>(n), S(0))
                                  : kaiming_uniform<S>(n, fan_in, rng);
    w = store.add(prefix + ".w", {out, in, kernel}, std::move(wd));
    b = store.add(prefix + ".b", {out}, std::vector<S>(static_cast<std::size_t>(out), S(0)));
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv1d(x, w, b, stride, pad); }
};

// Additive mask value for disallowed attention positions. exp(-1e30 - max)
// underflows to exactly zero in both float and double, so padded entries
// carry strictly no weight.
inline constexpr double kAttnMask = -1e30;

template <typename S>
struct MultiheadAttention {
  Linear<S> wq, wk, wv, wo;
  int heads = 1, d_attn = 0;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore<S>& store, const std::string& prefix, int d_query,
                     int d_kv, int d_attn_, int heads_, Rng& rng)
      : heads(heads_), d_attn(d_attn_) {
    if (d_attn % heads != 0) {
      throw std::invalid_argument("attention: d_attn must be divisible by heads");
    }
    wq = Linear<S>(store, prefix + ".wq", d_query, d_attn, rng);
    // no key bias: a uniform shift of every key cancels inside softmax
    wk = Linear<S>(store, prefix + ".wk", d_kv, d_attn, rng, /*bias=*/false);
    wv = Linear<S>(store, prefix + ".wv", d_kv, d_attn, rng);
    wo = Linear<S>(store, prefix + ".wo", d_attn, d_query, rng);
  }

  // q: (B, Tq, d_query), kv: (B, Tk, d_kv), mask: (B, 1, 1, Tk) additive
  // logits or undefined. Returns (B, Tq, d_query).
  Tensor<S> operator()(const Tensor<S>& q_in, const Tensor<S>& kv,
                       const Tensor<S>& mask) const {
    const int B = q_in.dim(0), Tq = q_in.dim(1), Tk = kv.dim(1);
    const int dh = d_attn / heads;
    auto split = [&](Tensor<S> t, int T) {
      return permute(reshape(t, {B, T, heads, dh}), {0, 2, 1, 3});
    };
    Tensor<S> q = split(wq(q_in), Tq);
    Tensor<S> k = split(wk(kv), Tk);
    Tensor<S> v = split(wv(kv), Tk);
    Tensor<S> scores = mul_scalar(matmul(q, transpose_last_two(k)),
                                  S(1.0 / std::sqrt(static_cast<double>(dh))));
    if (mask.defined()) scores = add(scores, mask);
    Tensor<S> ctx = matmul(softmax_lastdim(scores), v);
    return wo(reshape(permute(ctx, {0, 2, 1, 3}), {B, Tq, d_attn}));
  }
};

// Sinusoidal position/timestep embedding: frequencies 10000^(-2i/d), laid
// out as [sin half | cos half].
template <typename S>
std::vector<S> sinusoidal_embedding(double pos, int d) {
  if (d % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: d must be even");
  const int half = d / 2;
  std::vector<S> out(static_cast<std::size_t>(d));
  for (int i = 0; i < half; ++i) {
    const double f = std::pow(10000.0, -2.0 * i / d);
    out[i] = static_cast<S>(std::sin(pos * f));
    out[half + i] = static_cast<S>(std::cos(pos * f));
  }
  return out;
}

// ---- Adam ----

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  // One update over every trainable parameter. A non-finite gradient aborts
  // the step and names the offending parameter.
  void step(ParamStore<S>& store) {
    ++t_;
    const S c1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const S c2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S eps = static_cast<S>(cfg_.eps);
    for (auto& e : store.entries()) {
      if (!e.trainable) continue;
      auto& slot = slots_[e.name];
      auto& val = e.tensor.data();
      auto& grad = e.tensor.grad();
      if (slot.m.size() != val.size()) {
        slot.m.assign(val.size(), S(0));
        slot.v.assign(val.size(), S(0));
      }
      const S lr = static_cast<S>(cfg_.lr * e.lr_scale);
      for (std::size_t i = 0; i < val.size(); ++i) {
        const S g = grad[i];
        if (!std::isfinite(static_cast<double>(g))) {
          throw std::runtime_error("adam: non-finite gradient in parameter '" +
                                   e.name + "'");
        }
        slot.m[i] = b1 * slot.m[i] + (S(1) - b1) * g;
        slot.v[i] = b2 * slot.v[i] + (S(1) - b2) * g * g;
        const S mhat = slot.m[i] / c1;
        const S vhat = slot.v[i] / c2;
        val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  struct Slot {
    std::vector<S> m, v;
  };

  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Slot> slots_;
};

// ---- numerical gradient check ----

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t checked = 0;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// Central finite differences against reverse-mode gradients. loss_fn must
// rebuild its graph on every call and return a scalar. Checks every scalar
// coordinate, or a seeded subsample of max_entries when there are more.
//
// The error is relative to max(|analytic|, |numeric|, denom_floor), so
// coordinates whose gradient sits below the floor are held to the absolute
// tolerance tol * denom_floor instead. That keeps finite-difference
// truncation noise on near-zero gradients from masquerading as a failure
// while still catching sign or scale bugs on any coordinate that matters.
template <typename S, typename LossFn>
GradCheckResult grad_check(ParamStore<S>& store, LossFn loss_fn, double eps,
                           std::int64_t max_entries, Rng& rng,
                           double denom_floor = 1e-3) {
  store.zero_grads();
  Tensor<S> loss = loss_fn();
  loss.backward();

  std::vector<std::size_t> live;  // entry indices with gradients
  std::vector<std::vector<S>> analytic;
  std::int64_t total = 0;
  auto& entries = store.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    live.push_back(i);
    analytic.push_back(entries[i].tensor.grad());
    total += entries[i].tensor.numel();
  }

  std::vector<std::int64_t> coords;
  if (total <= max_entries) {
    coords.resize(static_cast<std::size_t>(total));
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    std::unordered_set<std::int64_t> picked;
    while (static_cast<std::int64_t>(picked.size()) < max_entries) {
      picked.insert(rng.uniform_int(0, total - 1));
    }
    coords.assign(picked.begin(), picked.end());
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  std::size_t e = 0;
  std::int64_t base = 0;
  for (std::int64_t c : coords) {
    while (c >= base + entries[live[e]].tensor.numel()) {
      base += entries[live[e]].tensor.numel();
      ++e;
    }
    auto& entry = entries[live[e]];
    const std::size_t off = static_cast<std::size_t>(c - base);
    auto& val = entry.tensor.data();
    const S orig = val[off];
    val[off] = orig + static_cast<S>(eps);
    const double lp = static_cast<double>(loss_fn().item());
    val[off] = orig - static_cast<S>(eps);
    const double lm = static_cast<double>(loss_fn().item());
    val[off] = orig;
    const double numeric = (lp - lm) / (2.0 * eps);
    const double exact = static_cast<double>(analytic[e][off]);
    const double denom = std::max({std::abs(exact), std::abs(numeric), denom_floor});
    const double rel = std::abs(exact - numeric) / denom;
    ++result.checked;
    if (rel > result.max_rel_err) {
      result.max_rel_err = rel;
      result.worst_param = entry.name + "[" + std::to_string(off) + "]";
    }
  }
  return result;
}

// ---- LMP1 checkpoints ----
//
// A checkpoint is a directory holding meta.json (format tag, parameter
// names/shapes in order, caller metadata) and params.bin (the concatenated
// float32 little-endian values in registration order).

template <typename S>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<S>& store,
                     const json& extra_meta = json::object()) {
  std::filesystem::create_directories(dir);
  json meta = extra_meta;
  meta["format"] = "LMP1";
  meta["scalar"] = "float32";
  json params = json::array();
  for (const auto& e : store.entries()) {
    params.push_back({{"name", e.name}, {"shape", e.tensor.shape()}});
  }
  meta["params"] = params;

  std::ofstream mf(dir / "meta.json");
  if (!mf) throw std::runtime_error("checkpoint: cannot write " + (dir / "meta.json").string());
  mf << meta.dump(2) << "\n";

  std::ofstream bf(dir / "params.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot write " + (dir / "params.bin").string());
  for (const auto& e : store.entries()) {
    for (S v : e.tensor.data()) {
      float f = static_cast<float>(v);
      bf.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
}

// Loads into an already-constructed store; names and shapes must match the
// registry exactly. Returns the checkpoint metadata.
template <typename S>
json load_checkpoint(const std::filesystem::path& dir, ParamStore<S>& store) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw std::runtime_error("checkpoint: cannot open " + (dir / "meta.json").string());
  json meta = json::parse(mf);
  if (meta.value("format", "") != "LMP1") {
    throw std::runtime_error("checkpoint: bad format tag in " + (dir / "meta.json").string());
  }
  const auto& params = meta.at("params");
  auto& entries = store.entries();
  if (params.size() != entries.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch (" +
                             std::to_string(params.size()) + " in file, " +
                             std::to_string(entries.size()) + " expected)");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string name = params[i].at("name");
    const Shape shape = params[i].at("shape").get<Shape>();
    if (name != entries[i].name || shape != entries[i].tensor.shape()) {
      throw std::runtime_error("checkpoint: parameter " + std::to_string(i) +
                               " mismatch: file has '" + name + "' " + shape_str(shape) +
                               ", store has '" + entries[i].name + "' " +
                               shape_str(entries[i].tensor.shape()));
    }
  }
  std::ifstream bf(dir / "params.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot open " + (dir / "params.bin").string());
  for (auto& e : entries) {
    auto& val = e.tensor.data();
    for (auto& v : val) {
      float f;
      bf.read(reinterpret_cast<char*>(&f), sizeof(float));
      if (!bf) throw std::runtime_error("checkpoint: params.bin truncated");
      v = static_cast<S>(f);
    }
  }
  char extra;
  if (bf.read(&extra, 1)) {
    throw std::runtime_error("checkpoint: params.bin has trailing bytes");
  }
  return meta;
}

// Hash of the serialized float32 parameter stream; used to fingerprint
// checkpoints in reports and reproducibility checks.
template <typename S>
std::string params_hash_hex(const ParamStore<S>& store, const std::string& prefix = "") {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& e : store.entries()) {
    if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
    for (S v : e.tensor.data()) {
      float f = static_cast<float>(v);
      h = fnv1a64_bytes(&f, sizeof(float), h);
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace anchordiff
