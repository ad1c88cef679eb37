#pragma once

// Conditional 1-d UNet over motion frames. Channels follow per-level
// multipliers down a stride-2 path, mirror back up with skip concatenation,
// and each level carries a residual conv block plus cross-attention onto
// text tokens. A configurable tap exposes one intermediate activation map
// for the anchor heads.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchordiff/module.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {

enum class TapSite { down1, down2, down3, bottleneck };

inline const char* tap_site_name(TapSite t) {
  switch (t) {
    case TapSite::down1: return "down1";
    case TapSite::down2: return "down2";
    case TapSite::down3: return "down3";
    case TapSite::bottleneck: return "bottleneck";
  }
  return "?";
}

inline TapSite tap_site_from_name(const std::string& s) {
  if (s == "down1") return TapSite::down1;
  if (s == "down2") return TapSite::down2;
  if (s == "down3") return TapSite::down3;
  if (s == "bottleneck") return TapSite::bottleneck;
  throw std::invalid_argument("denoiser: unknown tap site '" + s + "'");
}

struct DenoiserConfig {
  int in_dims = 56;
  int base_channels = 32;
  std::vector<int> mults = {1, 2, 2};
  int heads = 2;
  int d_emb = 64;  // timestep embedding width
  int d_c = 64;    // text token width
  TapSite tap = TapSite::down3;

  int depth() const { return static_cast<int>(mults.size()); }
  int width(int level) const { return base_channels * mults[static_cast<std::size_t>(level)]; }

  // number of stride-2 stages above the tap
  int tap_depth() const {
    switch (tap) {
      case TapSite::down1: return 1;
      case TapSite::down2: return 2;
      case TapSite::down3: return 3;
      case TapSite::bottleneck: return depth();
    }
    return depth();
  }

  // channel count of the tap activation
  int tap_channels() const {
    const int d = tap_depth();
    return width(std::min(d, depth() - 1));
  }

  // frames at the tap for an N-frame input: ceil(N / 2^tap_depth)
  int tap_frames(int n) const {
    int t = n;
    for (int i = 0; i < tap_depth(); ++i) t = (t + 1) / 2;
    return t;
  }

  void validate() const {
    if (depth() < 1) throw std::invalid_argument("denoiser: empty multipliers");
    if (tap_depth() > depth()) throw std::invalid_argument("denoiser: tap below network depth");
    if (d_emb % 2 != 0) throw std::invalid_argument("denoiser: d_emb must be even");
    for (int i = 0; i < depth(); ++i) {
      if (width(i) % heads != 0) {
        throw std::invalid_argument("denoiser: width not divisible by heads");
      }
    }
  }
};

namespace detail {

// Layer norm across channels of a (B, C, T) map.
template <typename S>
Tensor<S> ln_channels(const LayerNormParams<S>& ln, const Tensor<S>& x) {
  return permute(ln(permute(x, {0, 2, 1})), {0, 2, 1});
}

template <typename S>
struct ResBlock {
  LayerNormParams<S> ln1, ln2;
  Conv1dParams<S> conv1, conv2;
  Linear<S> temb;

  ResBlock() = default;
  ResBlock(ParamStore<S>& store, const std::string& prefix, int channels, int t_hidden,
           Rng& rng) {
    ln1 = LayerNormParams<S>(store, prefix + ".ln1", channels);
    conv1 = Conv1dParams<S>(store, prefix + ".conv1", channels, channels, 3, 1, 1, rng);
    temb = Linear<S>(store, prefix + ".temb", t_hidden, channels, rng);
    ln2 = LayerNormParams<S>(store, prefix + ".ln2", channels);
    conv2 = Conv1dParams<S>(store, prefix + ".conv2", channels, channels, 3, 1, 1, rng);
  }

  // x: (B, C, T); t_feat: (1, t_hidden)
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& t_feat) const {
    Tensor<S> h = conv1(silu(ln_channels(ln1, x)));
    Tensor<S> bias = reshape(temb(t_feat), {1, h.dim(1), 1});
    h = add(h, bias);
    h = conv2(silu(ln_channels(ln2, h)));
    return add(x, h);
  }
};

template <typename S>
struct CrossBlock {
  LayerNormParams<S> ln;
  MultiheadAttention<S> attn;

  CrossBlock() = default;
  CrossBlock(ParamStore<S>& store, const std::string& prefix, int channels, int d_c,
             int heads, Rng& rng) {
    ln = LayerNormParams<S>(store, prefix + ".ln", channels);
    attn = MultiheadAttention<S>(store, prefix + ".attn", channels, d_c, channels, heads, rng);
  }

  // x: (B, C, T) attending onto text tokens (B, L, d_c)
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& text,
                       const Tensor<S>& text_mask) const {
    Tensor<S> xt = permute(x, {0, 2, 1});
    xt = add(xt, attn(ln(xt), text, text_mask));
    return permute(xt, {0, 2, 1});
  }
};

template <typename S>
Tensor<S> pad_time_to_even(const Tensor<S>& x) {
  return (x.dim(2) % 2 == 0) ? x : pad_axis(x, 2, 0, 1);
}

}  // namespace detail

template <typename S>
class Denoiser {
 public:
  struct Output {
    Tensor<S> eps;  // (B, N, in_dims): noise prediction (or x0, per trainer)
    Tensor<S> tap;  // (B, tap_channels, ceil(N / 2^tap_depth))
  };

  Denoiser(ParamStore<S>& store, const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int D = cfg_.depth();
    const int th = t_hidden();

    store.begin_group("time");
    time_l1_ = Linear<S>(store, "denoiser.time.l1", cfg_.d_emb, th, rng);
    store.begin_group("cond");
    null_text_ = store.add("denoiser.null_text", {1, cfg_.d_c},
                           kaiming_uniform<S>(cfg_.d_c, cfg_.d_c, rng));

    store.begin_group("in", ProbePath::down, 0);
    in_conv_ = Conv1dParams<S>(store, "denoiser.in", cfg_.in_dims, cfg_.width(0), 3, 1, 1, rng);

    for (int i = 0; i < D; ++i) {
      const std::string name = "down" + std::to_string(i + 1);
      store.begin_group(name, ProbePath::down, i + 1);
      const std::string prefix = "denoiser." + name;
      down_res_.emplace_back(store, prefix + ".res", cfg_.width(i), th, rng);
      down_cross_.emplace_back(store, prefix + ".cross", cfg_.width(i), cfg_.d_c, cfg_.heads, rng);
      const int out_w = cfg_.width(std::min(i + 1, D - 1));
      down_conv_.emplace_back(store, prefix + ".down", cfg_.width(i), out_w, 3, 2, 1, rng);
    }

    store.begin_group("mid", ProbePath::mid, 0);
    const int wm = cfg_.width(D - 1);
    mid_res1_ = detail::ResBlock<S>(store, "denoiser.mid.res1", wm, th, rng);
    mid_cross_ = detail::CrossBlock<S>(store, "denoiser.mid.cross", wm, cfg_.d_c, cfg_.heads, rng);
    mid_res2_ = detail::ResBlock<S>(store, "denoiser.mid.res2", wm, th, rng);

    for (int i = D - 1; i >= 0; --i) {
      const std::string name = "up" + std::to_string(i + 1);
      store.begin_group(name, ProbePath::up, i + 1);
      const std::string prefix = "denoiser." + name;
      const int in_w = (i == D - 1) ? wm : cfg_.width(i + 1);
      up_conv_.emplace_back(store, prefix + ".up", in_w, cfg_.width(i), 3, 1, 1, rng);
      fuse_conv_.emplace_back(store, prefix + ".fuse", 2 * cfg_.width(i), cfg_.width(i), 1, 1, 0, rng);
      up_res_.emplace_back(store, prefix + ".res", cfg_.width(i), th, rng);
      up_cross_.emplace_back(store, prefix + ".cross", cfg_.width(i), cfg_.d_c, cfg_.heads, rng);
    }

    store.begin_group("out", ProbePath::up, 0);
    // zero-init: predictions start at zero so the first losses sit at the
    // target's scale instead of an init-dependent transient
    out_conv_ = Conv1dParams<S>(store, "denoiser.out", cfg_.width(0), cfg_.in_dims, 3, 1, 1, rng,
                                /*zero_init=*/true);
    store.begin_group("");
  }

  const DenoiserConfig& config() const { return cfg_; }

  // Learned embedding used in place of text tokens on unconditional passes.
  Tensor<S> null_text(int batch) const {
    return add(Tensor<S>::zeros({batch, 1, cfg_.d_c}), null_text_);
  }

  // x: (B, N, in_dims); text: (B, L, d_c); text_mask: (B,1,1,L) or undefined.
  Output forward(const Tensor<S>& x, int t, const Tensor<S>& text,
                 const Tensor<S>& text_mask) const {
    if (x.ndim() != 3 || x.dim(2) != cfg_.in_dims) {
      throw std::invalid_argument("denoiser: x must be (B, N, " +
                                  std::to_string(cfg_.in_dims) + ")");
    }
    const int D = cfg_.depth();
    Tensor<S> temb = Tensor<S>::constant(
        {1, cfg_.d_emb}, sinusoidal_embedding<S>(static_cast<double>(t), cfg_.d_emb));
    Tensor<S> t_feat = silu(time_l1_(temb));

    Tensor<S> h = in_conv_(permute(x, {0, 2, 1}));
    Tensor<S> tap;
    std::vector<Tensor<S>> skips;
    for (int i = 0; i < D; ++i) {
      h = down_res_[static_cast<std::size_t>(i)](h, t_feat);
      h = down_cross_[static_cast<std::size_t>(i)](h, text, text_mask);
      skips.push_back(h);
      h = down_conv_[static_cast<std::size_t>(i)](detail::pad_time_to_even(h));
      if (static_cast<int>(cfg_.tap) == i && cfg_.tap != TapSite::bottleneck) tap = h;
    }
    h = mid_res1_(h, t_feat);
    h = mid_cross_(h, text, text_mask);
    h = mid_res2_(h, t_feat);
    if (cfg_.tap == TapSite::bottleneck) tap = h;

    for (int i = D - 1; i >= 0; --i) {
      const std::size_t u = static_cast<std::size_t>(D - 1 - i);
      const Tensor<S>& skip = skips[static_cast<std::size_t>(i)];
      h = up_conv_[u](upsample2(h));
      if (h.dim(2) != skip.dim(2)) h = slice(h, 2, 0, skip.dim(2));
      h = fuse_conv_[u](concat<S>({h, skip}, 1));
      h = up_res_[u](h, t_feat);
      h = up_cross_[u](h, text, text_mask);
    }
    Output out;
    out.eps = permute(out_conv_(h), {0, 2, 1});
    out.tap = tap;
    return out;
  }

 private:
  int t_hidden() const { return 2 * cfg_.d_emb; }

  DenoiserConfig cfg_;
  Linear<S> time_l1_;
  Tensor<S> null_text_;
  Conv1dParams<S> in_conv_, out_conv_;
  std::vector<detail::ResBlock<S>> down_res_, up_res_;
  std::vector<detail::CrossBlock<S>> down_cross_, up_cross_;
  std::vector<Conv1dParams<S>> down_conv_, up_conv_, fuse_conv_;
  detail::ResBlock<S> mid_res1_, mid_res2_;
  detail::CrossBlock<S> mid_cross_;
};

}  // namespace anchordiff
