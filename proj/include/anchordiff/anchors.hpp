#pragma once

// Anchor heads and auxiliary losses. Two lightweight heads read one tapped
// UNet activation: a frequency head regressing truncated-DCT coefficients of
// the clean window, and a temporal head regressing its frozen motion
// embedding. Both are FiLM-modulated by the timestep embedding, and their
// losses fold into the diffusion objective under a selectable weighting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchordiff/dct.hpp"
#include "anchordiff/module.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {

// Cosine decay from 1 at step 0 to 0 at step n_decay, clamped beyond.
inline double zeta_schedule(std::int64_t n, std::int64_t n_decay) {
  if (n_decay < 1) throw std::invalid_argument("zeta_schedule: n_decay must be >= 1");
  if (n < 0) throw std::invalid_argument("zeta_schedule: negative step");
  const double r = std::min(static_cast<double>(n) / static_cast<double>(n_decay), 1.0);
  return 0.5 * (1.0 + std::cos(M_PI * r));
}

enum class WeightingStrategy { dynamic_cosine, static_fixed, learnable_global };

inline const char* weighting_strategy_name(WeightingStrategy w) {
  switch (w) {
    case WeightingStrategy::dynamic_cosine: return "dynamic_cosine";
    case WeightingStrategy::static_fixed: return "static_fixed";
    case WeightingStrategy::learnable_global: return "learnable_global";
  }
  return "?";
}

inline WeightingStrategy weighting_strategy_from_name(const std::string& s) {
  if (s == "dynamic_cosine") return WeightingStrategy::dynamic_cosine;
  if (s == "static_fixed") return WeightingStrategy::static_fixed;
  if (s == "learnable_global") return WeightingStrategy::learnable_global;
  throw std::invalid_argument("unknown weighting strategy '" + s + "'");
}

// ---- FiLM ----

// p: (B, d, F); gen: (*, 2d) laid out [gamma | beta]. Rows of p are scaled by
// 1 + gamma and shifted by beta, then the last two axes swap so frequency
// leads: result (B, F, d).
template <typename S>
Tensor<S> film_freq(const Tensor<S>& p, const Tensor<S>& gen) {
  const int d = p.dim(1);
  tensor_check(gen.dim(gen.ndim() - 1) == 2 * d, "film_freq",
               "generator width must be twice the channel count");
  Tensor<S> gamma = reshape(slice(gen, gen.ndim() - 1, 0, d), {1, d, 1});
  Tensor<S> beta = reshape(slice(gen, gen.ndim() - 1, d, d), {1, d, 1});
  return transpose_last_two(add(mul(p, add_scalar(gamma, S(1))), beta));
}

// q: (B, d); gen: (*, 2d) laid out [gamma | beta].
template <typename S>
Tensor<S> film_vec(const Tensor<S>& q, const Tensor<S>& gen) {
  const int d = q.dim(1);
  tensor_check(gen.dim(gen.ndim() - 1) == 2 * d, "film_vec",
               "generator width must be twice the channel count");
  Tensor<S> gamma = reshape(slice(gen, gen.ndim() - 1, 0, d), {1, d});
  Tensor<S> beta = reshape(slice(gen, gen.ndim() - 1, d, d), {1, d});
  return add(mul(q, add_scalar(gamma, S(1))), beta);
}

// ---- heads ----

struct AnchorConfig {
  int tap_channels = 64;
  int tap_frames = 8;  // fixed by the training window and tap depth
  int d_m = 56;        // motion feature width
  int k = 64;          // retained frequencies
  int d_a = 64;        // temporal anchor width (motion embedding size)
  int d_emb = 64;      // timestep embedding width
  int hidden = 128;

  void validate() const {
    if (tap_channels < 1 || tap_frames < 1 || d_m < 1 || k < 1 || d_a < 1 || hidden < 1) {
      throw std::invalid_argument("anchor config: all sizes must be positive");
    }
    if (d_emb % 2 != 0) throw std::invalid_argument("anchor config: d_emb must be even");
  }
};

template <typename S>
class AnchorHeads {
 public:
  struct Output {
    Tensor<S> z_fre;  // (B, k, d_m)
    Tensor<S> z_tem;  // (B, d_a)
  };

  AnchorHeads() = default;

  AnchorHeads(ParamStore<S>& store, const AnchorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    store.begin_group("anchor");
    const int flat = cfg_.tap_channels * cfg_.tap_frames;
    p1_ = Linear<S>(store, "anchor.fre.p1", flat, cfg_.hidden, rng);
    p2_ = Linear<S>(store, "anchor.fre.p2", cfg_.hidden, cfg_.d_m * cfg_.k, rng);
    film_f1_ = Linear<S>(store, "anchor.fre.film1", cfg_.d_emb, cfg_.hidden, rng);
    film_f2_ = Linear<S>(store, "anchor.fre.film2", cfg_.hidden, 2 * cfg_.d_m, rng,
                         /*bias=*/true, /*zero_init=*/true);
    q1_ = Linear<S>(store, "anchor.tem.q1", cfg_.tap_channels, cfg_.hidden, rng);
    q2_ = Linear<S>(store, "anchor.tem.q2", cfg_.hidden, cfg_.d_a, rng);
    film_t1_ = Linear<S>(store, "anchor.tem.film1", cfg_.d_emb, cfg_.hidden, rng);
    film_t2_ = Linear<S>(store, "anchor.tem.film2", cfg_.hidden, 2 * cfg_.d_a, rng,
                         /*bias=*/true, /*zero_init=*/true);
    store.begin_group("");
  }

  const AnchorConfig& config() const { return cfg_; }

  // tap: (B, tap_channels, tap_frames); temb: (1, d_emb)
  Output forward(const Tensor<S>& tap, const Tensor<S>& temb) const {
    tensor_check(tap.ndim() == 3 && tap.dim(1) == cfg_.tap_channels &&
                     tap.dim(2) == cfg_.tap_frames,
                 "anchor heads", "tap shape mismatch");
    const int b = tap.dim(0);
    Tensor<S> flat = reshape(tap, {b, cfg_.tap_channels * cfg_.tap_frames});
    Tensor<S> p = reshape(p2_(silu(p1_(flat))), {b, cfg_.d_m, cfg_.k});
    Tensor<S> fg = film_f2_(silu(film_f1_(temb)));
    Output out;
    out.z_fre = film_freq(p, fg);

    Tensor<S> pooled = reshape(mean_axis(tap, 2), {b, cfg_.tap_channels});  // (B, C)
    Tensor<S> q = q2_(silu(q1_(pooled)));
    Tensor<S> tg = film_t2_(silu(film_t1_(temb)));
    out.z_tem = film_vec(q, tg);
    return out;
  }

 private:
  AnchorConfig cfg_;
  Linear<S> p1_, p2_, film_f1_, film_f2_;
  Linear<S> q1_, q2_, film_t1_, film_t2_;
};

// ---- targets ----

// Truncated-DCT coefficients of each clean window: x0 (B, N, d) -> (B, k, d).
// Built from values only, so the result is a constant.
template <typename S>
Tensor<S> dct_targets(const Tensor<S>& x0, int k) {
  tensor_check(x0.ndim() == 3, "dct_targets", "x0 must be (B, N, d)");
  const int b = x0.dim(0), n = x0.dim(1), d = x0.dim(2);
  const std::size_t per = static_cast<std::size_t>(n) * d;
  std::vector<double> clip(per);
  std::vector<S> out(static_cast<std::size_t>(b) * k * d);
  for (int i = 0; i < b; ++i) {
    const S* src = x0.data().data() + static_cast<std::size_t>(i) * per;
    for (std::size_t j = 0; j < per; ++j) clip[j] = static_cast<double>(src[j]);
    Spectrum sp = dct_truncate(clip.data(), n, d, k);
    S* dst = out.data() + static_cast<std::size_t>(i) * k * d;
    for (std::size_t j = 0; j < sp.coef.size(); ++j) dst[j] = static_cast<S>(sp.coef[j]);
  }
  return Tensor<S>::constant({b, k, d}, std::move(out));
}

// ---- losses ----

// Mean squared error over every coefficient.
template <typename S>
Tensor<S> loss_fre(const Tensor<S>& z, const Tensor<S>& target) {
  tensor_check(z.shape() == target.shape(), "loss_fre", "shape mismatch");
  return mean_all(square(sub(z, target)));
}

// Mean over the batch of 1 - cos(z_b, t_b). A zero-norm row on either side
// contributes the constant 1 and no gradient.
template <typename S>
Tensor<S> loss_tem(const Tensor<S>& z, const Tensor<S>& target) {
  tensor_check(z.ndim() == 2 && z.shape() == target.shape(), "loss_tem",
               "z and target must both be (B, d)");
  const int b = z.dim(0), d = z.dim(1);
  auto row_sumsq = [d](const Tensor<S>& t, int row) {
    double s = 0.0;
    const S* p = t.data().data() + static_cast<std::size_t>(row) * d;
    for (int j = 0; j < d; ++j) s += static_cast<double>(p[j]) * static_cast<double>(p[j]);
    return s;
  };
  Tensor<S> acc = Tensor<S>::zeros({1});
  for (int i = 0; i < b; ++i) {
    if (row_sumsq(z, i) == 0.0 || row_sumsq(target, i) == 0.0) {
      acc = add_scalar(acc, S(1));
      continue;
    }
    Tensor<S> zb = reshape(slice(z, 0, i, 1), {d});
    Tensor<S> tb = reshape(slice(target, 0, i, 1), {d});
    Tensor<S> cos = div(sum_all(mul(zb, tb)),
                        mul(sqrt(sum_all(square(zb))), sqrt(sum_all(square(tb)))));
    acc = add(acc, sub(Tensor<S>::constant({1}, {S(1)}), cos));
  }
  return mul_scalar(acc, static_cast<S>(1.0 / b));
}

// ---- combined objective ----

template <typename S>
struct AnchorWeights {
  Tensor<S> w_fre, w_tem;  // pre-softplus

  AnchorWeights() = default;
  AnchorWeights(ParamStore<S>& store, double lambda_fre, double lambda_tem) {
    if (lambda_fre <= 0.0 || lambda_tem <= 0.0) {
      throw std::invalid_argument("learnable weights need positive initial lambdas");
    }
    auto inv_softplus = [](double y) { return std::log(std::exp(y) - 1.0); };
    store.begin_group("anchor");
    w_fre = store.add("anchor.weight.fre", {1}, {static_cast<S>(inv_softplus(lambda_fre))});
    w_tem = store.add("anchor.weight.tem", {1}, {static_cast<S>(inv_softplus(lambda_tem))});
    store.begin_group("");
  }
};

// l_ddpm + (decay or learned weights) * auxiliary losses. `zeta` is ignored
// by the static strategy and replaced by softplus weights by the learnable
// one.
template <typename S>
Tensor<S> combined_loss(const Tensor<S>& l_ddpm, const Tensor<S>& l_fre,
                        const Tensor<S>& l_tem, WeightingStrategy strategy, double zeta,
                        double lambda_fre, double lambda_tem,
                        const AnchorWeights<S>* weights = nullptr) {
  switch (strategy) {
    case WeightingStrategy::dynamic_cosine:
    case WeightingStrategy::static_fixed: {
      const double scale = strategy == WeightingStrategy::static_fixed ? 1.0 : zeta;
      Tensor<S> aux = add(mul_scalar(l_fre, static_cast<S>(lambda_fre)),
                          mul_scalar(l_tem, static_cast<S>(lambda_tem)));
      return add(l_ddpm, mul_scalar(aux, static_cast<S>(scale)));
    }
    case WeightingStrategy::learnable_global: {
      if (weights == nullptr || !weights->w_fre.defined()) {
        throw std::invalid_argument("learnable_global strategy needs anchor weights");
      }
      Tensor<S> aux = add(mul(softplus(weights->w_fre), l_fre),
                          mul(softplus(weights->w_tem), l_tem));
      return add(l_ddpm, aux);
    }
  }
  throw std::logic_error("combined_loss: unreachable");
}

}  // namespace anchordiff
