#pragma once

// Gaussian diffusion over normalized motion windows: the linear noise
// schedule, the closed-form forward process, classifier-free guidance, the
// training loop with optional anchor losses, a fixed validation probe, and
// the ancestral sampler (full or strided).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchordiff/anchors.hpp"
#include "anchordiff/corpus.hpp"
#include "anchordiff/denoiser.hpp"
#include "anchordiff/moclip.hpp"
#include "anchordiff/module.hpp"
#include "anchordiff/motion.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {

// ---- schedule ----

struct Schedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] for t in 1..T
  std::vector<double> alpha_bar;  // alpha_bar[t] for t in 0..T, alpha_bar[0] = 1
};

inline Schedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  }
  Schedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[static_cast<std::size_t>(t) - 1] = b;
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - b);
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, const Tensor<S>& eps, const Schedule& sch,
                          int t) {
  if (t < 1 || t > sch.T) throw std::invalid_argument("forward_diffuse: t out of range");
  const double ab = sch.alpha_bar[static_cast<std::size_t>(t)];
  return add(mul_scalar(x0, static_cast<S>(std::sqrt(ab))),
             mul_scalar(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

// uncond + omega * (cond - uncond)
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& uncond, const Tensor<S>& cond, double omega) {
  return add(uncond, mul_scalar(sub(cond, uncond), static_cast<S>(omega)));
}

// ---- prediction target ----

enum class PredictTarget { eps, x0 };

inline const char* predict_target_name(PredictTarget p) {
  return p == PredictTarget::eps ? "eps" : "x0";
}

inline PredictTarget predict_target_from_name(const std::string& s) {
  if (s == "eps") return PredictTarget::eps;
  if (s == "x0") return PredictTarget::x0;
  throw std::invalid_argument("unknown prediction target '" + s + "'");
}

// ---- trainer ----

struct TrainerOptions {
  DenoiserConfig denoiser;

  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  PredictTarget predict = PredictTarget::eps;

  bool dal = true;  // anchor losses on or off
  double lambda_fre = 0.1;
  double lambda_tem = 0.5;
  int k = 64;
  WeightingStrategy strategy = WeightingStrategy::dynamic_cosine;
  std::int64_t n_decay = 0;  // 0: decay over the planned step count

  int steps = 2000;
  int batch = 16;
  int window = 64;
  double lr = 2e-4;
  double cond_drop = 0.1;
  int anchor_hidden = 128;
  std::uint64_t seed = 1;
};

struct TrainStepRecord {
  int step = 0;  // 1-based
  int t = 0;
  double l_ddpm = 0.0;
  double l_fre = 0.0;
  double l_tem = 0.0;
  double zeta = 0.0;
  double total = 0.0;
  bool cond_dropped = false;
  double wall_ms = 0.0;
};

template <typename S>
class DiffusionTrainer {
 public:
  // Called after backward and before the optimizer step, with gradients live.
  using ProbeHook = std::function<void(const TrainStepRecord&, const ParamStore<S>&)>;

  DiffusionTrainer(const Corpus& corpus, const MoClip<S>& encoder, TrainerOptions opt)
      : corpus_(corpus),
        encoder_(encoder),
        opt_(std::move(opt)),
        schedule_(make_schedule(opt_.T, opt_.beta_start, opt_.beta_end)),
        train_rng_(Rng::stream(opt_.seed, "train")) {
    if (opt_.batch < 1 || opt_.window < 1) {
      throw std::invalid_argument("trainer: batch and window must be positive");
    }
    opt_.denoiser.in_dims = corpus_.layout.dims();
    if (opt_.denoiser.d_c != encoder_.config().d_model) {
      throw std::invalid_argument("trainer: denoiser d_c must match encoder d_model");
    }
    if (opt_.n_decay == 0) opt_.n_decay = opt_.steps;

    for (std::size_t idx : corpus_.split_indices(Split::train)) {
      if (corpus_.clips[idx].frames >= opt_.window) {
        eligible_.push_back(static_cast<int>(idx));
      }
    }
    if (eligible_.empty()) {
      throw std::invalid_argument("trainer: no training clip reaches the window length");
    }
    if (static_cast<int>(eligible_.size()) < opt_.batch) {
      throw std::invalid_argument("trainer: batch larger than the eligible clip pool");
    }

    Rng net_rng = Rng::stream(opt_.seed, "denoiser");
    net_ = std::make_unique<Denoiser<S>>(store_, opt_.denoiser, net_rng);
    if (opt_.dal) {
      AnchorConfig ac;
      ac.tap_channels = opt_.denoiser.tap_channels();
      ac.tap_frames = opt_.denoiser.tap_frames(opt_.window);
      ac.d_m = opt_.denoiser.in_dims;
      ac.k = opt_.k;
      ac.d_a = encoder_.config().d_out;
      ac.d_emb = opt_.denoiser.d_emb;
      ac.hidden = opt_.anchor_hidden;
      Rng anchor_rng = Rng::stream(opt_.seed, "anchors");
      heads_ = std::make_unique<AnchorHeads<S>>(store_, ac, anchor_rng);
      if (opt_.strategy == WeightingStrategy::learnable_global) {
        weights_ = AnchorWeights<S>(store_, opt_.lambda_fre, opt_.lambda_tem);
      }
    } else if (opt_.strategy == WeightingStrategy::learnable_global) {
      throw std::invalid_argument("trainer: learnable weighting needs anchors enabled");
    }

    AdamConfig ac;
    ac.lr = opt_.lr;
    adam_ = std::make_unique<Adam<S>>(ac);

    init_validation_fixtures();
  }

  const TrainerOptions& options() const { return opt_; }
  const Schedule& schedule() const { return schedule_; }
  ParamStore<S>& store() { return store_; }
  const ParamStore<S>& store() const { return store_; }
  const Denoiser<S>& denoiser() const { return *net_; }
  int steps_done() const { return step_; }

  TrainStepRecord step(const ProbeHook& hook = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainStepRecord rec;
    rec.step = ++step_;

    // fixed draw order: batch indices, window starts, shared t, cond drop, noise
    std::vector<int> batch_idx = draw_batch_indices();
    std::vector<int> starts(batch_idx.size());
    for (std::size_t i = 0; i < batch_idx.size(); ++i) {
      const int frames = corpus_.clips[static_cast<std::size_t>(batch_idx[i])].frames;
      starts[i] = static_cast<int>(train_rng_.uniform_int(0, frames - opt_.window));
    }
    rec.t = static_cast<int>(train_rng_.uniform_int(1, schedule_.T));
    rec.cond_dropped = train_rng_.bernoulli(opt_.cond_drop);
    Tensor<S> eps = randn<S>({opt_.batch, opt_.window, opt_.denoiser.in_dims}, train_rng_);

    // clean windows, normalized
    std::vector<MotionClip> windows = cut_windows(batch_idx, starts);
    Tensor<S> x0 = windows_tensor(windows);
    Tensor<S> x_t = forward_diffuse(x0, eps, schedule_, rec.t);

    // conditioning (frozen encoder, so constants)
    Tensor<S> text, text_mask;
    if (rec.cond_dropped) {
      text = net_->null_text(opt_.batch);
    } else {
      NoGradGuard ng;
      TokenBatch<S> tokens = tokens_for(batch_idx);
      text = encoder_.text_token_features(tokens);
      text_mask = tokens.attn_mask;
    }

    typename Denoiser<S>::Output out = net_->forward(x_t, rec.t, text, text_mask);
    const Tensor<S>& target = opt_.predict == PredictTarget::eps ? eps : x0;
    Tensor<S> l_ddpm = mean_all(square(sub(out.eps, target)));

    rec.zeta = zeta_schedule(rec.step - 1, opt_.n_decay);
    Tensor<S> total = l_ddpm;
    if (anchors_active(rec.zeta)) {
      Tensor<S> temb = Tensor<S>::constant(
          {1, opt_.denoiser.d_emb},
          sinusoidal_embedding<S>(static_cast<double>(rec.t), opt_.denoiser.d_emb));
      typename AnchorHeads<S>::Output z = heads_->forward(out.tap, temb);
      Tensor<S> tgt_f = dct_targets(x0, opt_.k);
      Tensor<S> tgt_t = motion_embedding_targets(windows);
      Tensor<S> lf = loss_fre(z.z_fre, tgt_f);
      Tensor<S> lt = loss_tem(z.z_tem, tgt_t);
      rec.l_fre = static_cast<double>(lf.item());
      rec.l_tem = static_cast<double>(lt.item());
      total = combined_loss(l_ddpm, lf, lt, opt_.strategy, rec.zeta, opt_.lambda_fre,
                            opt_.lambda_tem, weights_.w_fre.defined() ? &weights_ : nullptr);
    }
    rec.l_ddpm = static_cast<double>(l_ddpm.item());
    rec.total = static_cast<double>(total.item());

    store_.zero_grads();
    total.backward();
    if (hook) hook(rec, store_);
    adam_->step(store_);

    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  std::vector<TrainStepRecord> run(int n, const ProbeHook& hook = nullptr) {
    std::vector<TrainStepRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(step(hook));
    return out;
  }

  // Plain-diffusion loss on a batch fixed at construction time. Consumes no
  // training randomness, so calling it never perturbs the trajectory.
  double validation_ddpm() const {
    NoGradGuard ng;
    double total = 0.0;
    for (const ValItem& v : val_items_) {
      Tensor<S> x_t = forward_diffuse(v.x0, v.eps, schedule_, v.t);
      typename Denoiser<S>::Output out = net_->forward(x_t, v.t, v.text, v.text_mask);
      const Tensor<S>& target = opt_.predict == PredictTarget::eps ? v.eps : v.x0;
      total += static_cast<double>(mean_all(square(sub(out.eps, target))).item());
    }
    return total / static_cast<double>(val_items_.size());
  }

  int validation_size() const { return static_cast<int>(val_items_.size()); }

 private:
  bool anchors_active(double zeta) const {
    if (!opt_.dal) return false;
    if (opt_.strategy == WeightingStrategy::learnable_global) return true;
    const double scale = opt_.strategy == WeightingStrategy::static_fixed ? 1.0 : zeta;
    return scale * opt_.lambda_fre != 0.0 || scale * opt_.lambda_tem != 0.0;
  }

  std::vector<int> draw_batch_indices() {
    std::vector<int> pool = eligible_;
    // partial Fisher-Yates: exactly `batch` draws, all distinct
    for (int i = 0; i < opt_.batch; ++i) {
      const std::size_t j = static_cast<std::size_t>(
          train_rng_.uniform_int(i, static_cast<std::int64_t>(pool.size()) - 1));
      std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    pool.resize(static_cast<std::size_t>(opt_.batch));
    return pool;
  }

  MotionClip cut_window(int clip_idx, int start) const {
    const MotionClip& src = corpus_.clips[static_cast<std::size_t>(clip_idx)];
    MotionClip w;
    w.id = src.id;
    w.fps = src.fps;
    w.frames = opt_.window;
    w.dims = src.dims;
    w.data.assign(src.data.begin() + static_cast<std::size_t>(start) * src.dims,
                  src.data.begin() + static_cast<std::size_t>(start + w.frames) * src.dims);
    corpus_.stats.apply(w);
    return w;
  }

  std::vector<MotionClip> cut_windows(const std::vector<int>& idx,
                                      const std::vector<int>& starts) const {
    std::vector<MotionClip> out;
    out.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.push_back(cut_window(idx[i], starts[i]));
    }
    return out;
  }

  Tensor<S> windows_tensor(const std::vector<MotionClip>& windows) const {
    const int dims = opt_.denoiser.in_dims;
    std::vector<S> data(static_cast<std::size_t>(windows.size()) * opt_.window * dims);
    std::size_t pos = 0;
    for (const MotionClip& w : windows) {
      for (double v : w.data) data[pos++] = static_cast<S>(v);
    }
    return Tensor<S>::constant({static_cast<int>(windows.size()), opt_.window, dims},
                               std::move(data));
  }

  TokenBatch<S> tokens_for(const std::vector<int>& idx) const {
    std::vector<std::vector<int>> captions;
    captions.reserve(idx.size());
    for (int i : idx) {
      captions.push_back(corpus_.records[static_cast<std::size_t>(i)].caption);
    }
    return TokenBatch<S>::from_captions(captions);
  }

  Tensor<S> motion_embedding_targets(const std::vector<MotionClip>& windows) const {
    NoGradGuard ng;
    std::vector<const MotionClip*> ptrs;
    ptrs.reserve(windows.size());
    for (const MotionClip& w : windows) ptrs.push_back(&w);
    return encoder_.encode_motion(MotionBatch<S>::from_clips(ptrs));
  }

  struct ValItem {
    int t = 0;
    Tensor<S> x0, eps, text, text_mask;
  };

  void init_validation_fixtures() {
    Rng rng = Rng::stream(opt_.seed, "val");
    std::vector<int> pool;
    for (std::size_t idx : corpus_.split_indices(Split::val)) {
      if (corpus_.clips[idx].frames >= opt_.window) pool.push_back(static_cast<int>(idx));
    }
    if (pool.empty()) {
      // fall back to held-out test clips so validation always exists
      for (std::size_t idx : corpus_.split_indices(Split::test)) {
        if (corpus_.clips[idx].frames >= opt_.window) pool.push_back(static_cast<int>(idx));
      }
    }
    if (pool.empty()) throw std::invalid_argument("trainer: no clip long enough for validation");
    const int n = std::min<int>(16, static_cast<int>(pool.size()));
    NoGradGuard ng;
    for (int i = 0; i < n; ++i) {
      const int idx = pool[static_cast<std::size_t>(i)];
      const MotionClip& src = corpus_.clips[static_cast<std::size_t>(idx)];
      ValItem item;
      const int start = static_cast<int>(rng.uniform_int(0, src.frames - opt_.window));
      item.t = static_cast<int>(rng.uniform_int(1, schedule_.T));
      MotionClip w = cut_window(idx, start);
      item.x0 = windows_tensor({w});
      item.eps = randn<S>({1, opt_.window, opt_.denoiser.in_dims}, rng);
      TokenBatch<S> tokens = tokens_for({idx});
      item.text = encoder_.text_token_features(tokens);
      item.text_mask = tokens.attn_mask;
      val_items_.push_back(std::move(item));
    }
  }

  const Corpus& corpus_;
  const MoClip<S>& encoder_;
  TrainerOptions opt_;
  Schedule schedule_;
  Rng train_rng_;
  ParamStore<S> store_;
  std::unique_ptr<Denoiser<S>> net_;
  std::unique_ptr<AnchorHeads<S>> heads_;
  AnchorWeights<S> weights_;
  std::unique_ptr<Adam<S>> adam_;
  std::vector<int> eligible_;
  std::vector<ValItem> val_items_;
  int step_ = 0;
};

// ---- sampler ----

struct SampleOptions {
  int frames = 64;
  int steps = 50;  // denoising steps; clamped to the schedule length
  double omega = 2.5;
  PredictTarget predict = PredictTarget::eps;
  std::uint64_t seed = 7;
};

// Evenly spaced, strictly decreasing timesteps from T down to 1.
inline std::vector<int> sample_timesteps(int T, int steps) {
  if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
  steps = std::min(steps, T);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const int t = static_cast<int>(std::lround(T - frac * (T - 1)));
    if (out.empty() || t < out.back()) out.push_back(t);
  }
  return out;
}

// Ancestral sampling with classifier-free guidance. Returns a denormalized
// clip in corpus units.
template <typename S>
MotionClip sample_motion(const Denoiser<S>& net, const MoClip<S>& encoder,
                         const Schedule& sch, const NormStats& stats,
                         const std::string& caption, int fps, const SampleOptions& opt) {
  NoGradGuard ng;
  const int dims = net.config().in_dims;
  Rng rng = Rng::stream(opt.seed, "sample");

  TokenBatch<S> tokens = TokenBatch<S>::from_captions({tokenize_caption(caption)});
  Tensor<S> text = encoder.text_token_features(tokens);

  Tensor<S> x = randn<S>({1, opt.frames, dims}, rng);
  const std::vector<int> ts = sample_timesteps(sch.T, opt.steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t_cur = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const double ab_cur = sch.alpha_bar[static_cast<std::size_t>(t_cur)];
    const double ab_prev = sch.alpha_bar[static_cast<std::size_t>(t_prev)];

    Tensor<S> cond = net.forward(x, t_cur, text, tokens.attn_mask).eps;
    Tensor<S> uncond = net.forward(x, t_cur, net.null_text(1), Tensor<S>()).eps;
    Tensor<S> guided = cfg_combine(uncond, cond, opt.omega);

    // x0 estimate, then the posterior for the (t_prev, t_cur) gap
    const double a_hat = ab_cur / ab_prev;
    const double b_hat = 1.0 - a_hat;
    const double c0 = std::sqrt(ab_prev) * b_hat / (1.0 - ab_cur);
    const double cx = std::sqrt(a_hat) * (1.0 - ab_prev) / (1.0 - ab_cur);
    const double sigma = t_prev > 0
        ? std::sqrt(b_hat * (1.0 - ab_prev) / (1.0 - ab_cur))
        : 0.0;

    std::vector<S>& xv = x.data();
    const std::vector<S>& gv = guided.data();
    for (std::size_t j = 0; j < xv.size(); ++j) {
      const double xt = static_cast<double>(xv[j]);
      const double g = static_cast<double>(gv[j]);
      const double x0_hat = opt.predict == PredictTarget::eps
          ? (xt - std::sqrt(1.0 - ab_cur) * g) / std::sqrt(ab_cur)
          : g;
      double next = c0 * x0_hat + cx * xt;
      if (sigma > 0.0) next += sigma * rng.normal();
      xv[j] = static_cast<S>(next);
    }
  }

  MotionClip clip;
  clip.id = "sample";
  clip.fps = fps;
  clip.frames = opt.frames;
  clip.dims = dims;
  clip.data.resize(static_cast<std::size_t>(opt.frames) * dims);
  for (std::size_t j = 0; j < clip.data.size(); ++j) {
    clip.data[j] = static_cast<double>(x.data()[j]);
  }
  stats.invert(clip);
  return clip;
}

}  // namespace anchordiff
