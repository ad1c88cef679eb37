#include "anchordiff/denoiser.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <string>
#include <vector>

#include "anchordiff/module.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {
namespace {

DenoiserConfig tiny_config(TapSite tap = TapSite::down3) {
  DenoiserConfig cfg;
  cfg.in_dims = 6;
  cfg.base_channels = 4;
  cfg.mults = {1, 2, 2};
  cfg.heads = 2;
  cfg.d_emb = 8;
  cfg.d_c = 8;
  cfg.tap = tap;
  return cfg;
}

Tensor<double> make_motion(int b, int n, int dims, Rng& rng) {
  return randn<double>({b, n, dims}, rng);
}

// ---- tap geometry ----

TEST(DenoiserShapes, TapFollowsHalvingRuleAtEverySite) {
  for (TapSite site : {TapSite::down1, TapSite::down2, TapSite::down3, TapSite::bottleneck}) {
    DenoiserConfig cfg = tiny_config(site);
    ParamStore<double> store;
    Rng init = Rng::stream(7, "denoiser");
    Denoiser<double> net(store, cfg, init);
    Rng data = Rng::stream(8, "data");
    for (int n : {32, 57, 64, 96}) {
      Tensor<double> x = make_motion(1, n, cfg.in_dims, data);
      Tensor<double> text = randn<double>({1, 3, cfg.d_c}, data);
      auto out = net.forward(x, 17, text, Tensor<double>());
      ASSERT_EQ(out.tap.ndim(), 3);
      EXPECT_EQ(out.tap.dim(0), 1);
      EXPECT_EQ(out.tap.dim(1), cfg.tap_channels());
      EXPECT_EQ(out.tap.dim(2), cfg.tap_frames(n))
          << "site=" << tap_site_name(site) << " n=" << n;
    }
  }
}

TEST(DenoiserShapes, TapFramesIsCeilDivision) {
  DenoiserConfig cfg = tiny_config(TapSite::down3);
  EXPECT_EQ(cfg.tap_frames(32), 4);
  EXPECT_EQ(cfg.tap_frames(57), 8);  // 57 -> 29 -> 15 -> 8
  EXPECT_EQ(cfg.tap_frames(64), 8);
  EXPECT_EQ(cfg.tap_frames(96), 12);
  cfg.tap = TapSite::down1;
  EXPECT_EQ(cfg.tap_frames(57), 29);
  cfg.tap = TapSite::down2;
  EXPECT_EQ(cfg.tap_frames(57), 15);
}

TEST(DenoiserShapes, OutputMatchesInputFramesForOddLengths) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng init = Rng::stream(3, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(4, "data");
  for (int n : {9, 57, 64}) {
    Tensor<double> x = make_motion(2, n, cfg.in_dims, data);
    Tensor<double> text = randn<double>({2, 4, cfg.d_c}, data);
    auto out = net.forward(x, 100, text, Tensor<double>());
    EXPECT_EQ(out.eps.dim(0), 2);
    EXPECT_EQ(out.eps.dim(1), n);
    EXPECT_EQ(out.eps.dim(2), cfg.in_dims);
  }
}

TEST(DenoiserShapes, TapSiteNamesRoundTrip) {
  for (TapSite site : {TapSite::down1, TapSite::down2, TapSite::down3, TapSite::bottleneck}) {
    EXPECT_EQ(tap_site_from_name(tap_site_name(site)), site);
  }
  EXPECT_THROW(tap_site_from_name("down4"), std::invalid_argument);
}

TEST(DenoiserShapes, ValidatesConfig) {
  DenoiserConfig cfg = tiny_config();
  cfg.heads = 3;  // width 4 not divisible
  ParamStore<double> store;
  Rng init = Rng::stream(1, "denoiser");
  EXPECT_THROW(Denoiser<double>(store, cfg, init), std::invalid_argument);
}

// ---- determinism ----

TEST(DenoiserInit, SameSeedGivesIdenticalParams) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<float> a, b, c;
  Rng ra = Rng::stream(11, "denoiser");
  Rng rb = Rng::stream(11, "denoiser");
  Rng rc = Rng::stream(12, "denoiser");
  Denoiser<float> na(a, cfg, ra);
  Denoiser<float> nb(b, cfg, rb);
  Denoiser<float> nc(c, cfg, rc);
  EXPECT_EQ(params_hash_hex(a), params_hash_hex(b));
  EXPECT_NE(params_hash_hex(a), params_hash_hex(c));
}

TEST(DenoiserInit, ForwardIsBitIdenticalAcrossCalls) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng init = Rng::stream(21, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(22, "data");
  Tensor<double> x = make_motion(1, 19, cfg.in_dims, data);
  Tensor<double> text = randn<double>({1, 2, cfg.d_c}, data);
  NoGradGuard ng;
  auto a = net.forward(x, 55, text, Tensor<double>());
  auto b = net.forward(x, 55, text, Tensor<double>());
  ASSERT_EQ(a.eps.numel(), b.eps.numel());
  EXPECT_EQ(std::memcmp(a.eps.data().data(), b.eps.data().data(),
                        sizeof(double) * static_cast<std::size_t>(a.eps.numel())),
            0);
}

// ---- conditioning ----

TEST(DenoiserCond, TextConditioningChangesPrediction) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng init = Rng::stream(31, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(32, "data");
  Tensor<double> x = make_motion(1, 16, cfg.in_dims, data);
  Tensor<double> text = randn<double>({1, 3, cfg.d_c}, data);
  // the output conv starts at zero, so give it weight for signal to reach eps
  for (double& v : store.at("denoiser.out.w").tensor.data()) v = 0.1 * data.normal();
  NoGradGuard ng;
  auto cond = net.forward(x, 10, text, Tensor<double>());
  auto uncond = net.forward(x, 10, net.null_text(1), Tensor<double>());
  double max_diff = 0.0;
  for (std::int64_t i = 0; i < cond.eps.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(cond.eps.data()[static_cast<std::size_t>(i)] -
                                           uncond.eps.data()[static_cast<std::size_t>(i)]));
  }
  EXPECT_GT(max_diff, 1e-8);
}

TEST(DenoiserCond, TimestepChangesPrediction) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng init = Rng::stream(33, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(34, "data");
  Tensor<double> x = make_motion(1, 16, cfg.in_dims, data);
  Tensor<double> text = randn<double>({1, 2, cfg.d_c}, data);
  for (double& v : store.at("denoiser.out.w").tensor.data()) v = 0.1 * data.normal();
  NoGradGuard ng;
  auto a = net.forward(x, 1, text, Tensor<double>());
  auto b = net.forward(x, 900, text, Tensor<double>());
  double max_diff = 0.0;
  for (std::int64_t i = 0; i < a.eps.numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(a.eps.data()[static_cast<std::size_t>(i)] -
                                           b.eps.data()[static_cast<std::size_t>(i)]));
  }
  EXPECT_GT(max_diff, 1e-8);
}

TEST(DenoiserCond, NullTextRowsAreSharedAndTrainable) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng init = Rng::stream(35, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Tensor<double> nt = net.null_text(3);
  ASSERT_EQ(nt.dim(0), 3);
  ASSERT_EQ(nt.dim(1), 1);
  ASSERT_EQ(nt.dim(2), cfg.d_c);
  const auto& d = nt.data();
  const std::size_t row = static_cast<std::size_t>(cfg.d_c);
  EXPECT_EQ(std::memcmp(d.data(), d.data() + row, sizeof(double) * row), 0);
  EXPECT_EQ(std::memcmp(d.data(), d.data() + 2 * row, sizeof(double) * row), 0);

  store.zero_grads();
  Tensor<double> loss = mean_all(nt);
  loss.backward();
  const Tensor<double>& param = store.at("denoiser.null_text").tensor;
  double g = 0.0;
  for (double v : param.grad()) g += std::abs(v);
  EXPECT_GT(g, 0.0);
}

TEST(DenoiserCond, MaskedTextPaddingIsInvisible) {
  DenoiserConfig cfg = tiny_config();
  ParamStore<double> store;
  Rng init = Rng::stream(36, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(37, "data");
  Tensor<double> x = make_motion(1, 12, cfg.in_dims, data);
  Tensor<double> text2 = randn<double>({1, 2, cfg.d_c}, data);

  std::vector<double> padded(3 * static_cast<std::size_t>(cfg.d_c), 123.0);
  std::copy(text2.data().begin(), text2.data().end(), padded.begin());
  Tensor<double> text3 = Tensor<double>::constant({1, 3, cfg.d_c}, padded);
  Tensor<double> mask2 = Tensor<double>::constant({1, 1, 1, 2}, {0.0, 0.0});
  Tensor<double> mask3 = Tensor<double>::constant({1, 1, 1, 3}, {0.0, 0.0, kAttnMask});

  NoGradGuard ng;
  auto a = net.forward(x, 40, text2, mask2);
  auto b = net.forward(x, 40, text3, mask3);
  EXPECT_EQ(std::memcmp(a.eps.data().data(), b.eps.data().data(),
                        sizeof(double) * static_cast<std::size_t>(a.eps.numel())),
            0);
}

// ---- gradients ----

// A loss on the tap alone must reach every parameter upstream of it: the
// input conv, every down block, and the time trunk.
TEST(DenoiserGrad, TapLossReachesAllUpstreamParams) {
  DenoiserConfig cfg = tiny_config(TapSite::down3);
  ParamStore<double> store;
  Rng init = Rng::stream(41, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(42, "data");
  Tensor<double> x = make_motion(2, 17, cfg.in_dims, data);
  Tensor<double> text = randn<double>({2, 3, cfg.d_c}, data);

  store.zero_grads();
  auto out = net.forward(x, 250, text, Tensor<double>());
  mean_all(square(out.tap)).backward();

  int upstream = 0;
  for (const auto& e : store.entries()) {
    const bool in_tap_path = e.layer == "in" || e.layer == "time" ||
                             e.layer.rfind("down", 0) == 0;
    double g = 0.0;
    for (double v : e.tensor.grad()) g += std::abs(v);
    if (in_tap_path) {
      ++upstream;
      EXPECT_GT(g, 0.0) << e.name;
    } else {
      EXPECT_EQ(g, 0.0) << e.name << " should not receive gradient from the tap";
    }
  }
  EXPECT_GT(upstream, 20);
}

TEST(DenoiserGrad, FullPredictionLossPassesGradCheck) {
  DenoiserConfig cfg = tiny_config(TapSite::down2);
  cfg.mults = {1, 2};
  ParamStore<double> store;
  Rng init = Rng::stream(51, "denoiser");
  Denoiser<double> net(store, cfg, init);
  Rng data = Rng::stream(52, "data");
  Tensor<double> x = make_motion(1, 9, cfg.in_dims, data);
  Tensor<double> text = randn<double>({1, 2, cfg.d_c}, data);
  Tensor<double> target = make_motion(1, 9, cfg.in_dims, data);

  auto loss_fn = [&]() {
    auto out = net.forward(x, 123, text, Tensor<double>());
    return add(mean_all(square(sub(out.eps, target))), mean_all(square(out.tap)));
  };
  Rng pick = Rng::stream(53, "gradcheck");
  // eps 1e-3 keeps finite-difference cancellation noise below the tolerance
  // on this deep graph.
  auto res = grad_check(store, loss_fn, 1e-3, 300, pick);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst_param;
}

}  // namespace
}  // namespace anchordiff
