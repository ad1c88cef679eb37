// Acceptance gate. One test per shipping criterion, in order; each prints a
// [PASS]/[FAIL] line with the measured quantity so the run log doubles as a
// scorecard. Fixtures are synthetic and sized for a single desktop core;
// every tolerance is pinned next to the check it guards.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "anchordiff/anchors.hpp"
#include "anchordiff/corpus.hpp"
#include "anchordiff/dct.hpp"
#include "anchordiff/denoiser.hpp"
#include "anchordiff/diffusion.hpp"
#include "anchordiff/grad_probe.hpp"
#include "anchordiff/metrics.hpp"
#include "anchordiff/moclip.hpp"
#include "anchordiff/module.hpp"
#include "anchordiff/motion.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- reporting ----

class Criterion {
 public:
  Criterion(int number, std::string title) : number_(number), title_(std::move(title)) {}
  Criterion(const Criterion&) = delete;
  Criterion& operator=(const Criterion&) = delete;

  void detail(std::string d) { detail_ = std::move(d); }

  ~Criterion() {
    const bool ok = !::testing::Test::HasFailure();
    std::printf("[%s] criterion %02d: %s%s%s\n", ok ? "PASS" : "FAIL", number_, title_.c_str(),
                detail_.empty() ? "" : " | ", detail_.c_str());
    std::fflush(stdout);
  }

 private:
  int number_;
  std::string title_;
  std::string detail_;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---- shared fixtures ----

// 96-clip corpus plus a briefly trained text/motion encoder, used by the
// matched-seed A/B criteria below. Built once per process.
struct DeskFixture {
  Corpus corpus;
  ParamStore<float> enc_store;
  std::unique_ptr<MoClip<float>> encoder;
};

const DeskFixture& desk_fixture() {
  static const DeskFixture* f = [] {
    auto* d = new DeskFixture;
    CorpusConfig cc;
    cc.clip_count = 96;
    cc.min_frames = 48;
    cc.max_frames = 80;
    cc.seed = 1;
    d->corpus = build_corpus(cc);
    MoClipConfig mc;
    mc.motion_dims = d->corpus.layout.dims();
    mc.d_model = 32;
    mc.d_out = 24;
    mc.layers = 1;
    mc.heads = 2;
    Rng init = Rng::stream(1, "moclip");
    d->encoder = std::make_unique<MoClip<float>>(d->enc_store, mc, init);
    MoClipTrainConfig tc;
    tc.stage1_steps = 200;
    tc.stage2_steps = 50;
    tc.batch = 8;
    tc.window = 32;
    tc.seed = 1;
    train_moclip(d->enc_store, *d->encoder, d->corpus, tc);
    return d;
  }();
  return *f;
}

TrainerOptions desk_options(bool dal, std::uint64_t seed, int steps, double lr) {
  TrainerOptions o;
  o.denoiser.base_channels = 16;
  o.denoiser.mults = {1, 2};
  o.denoiser.heads = 2;
  o.denoiser.d_emb = 32;
  o.denoiser.d_c = 32;
  o.denoiser.tap = TapSite::down2;
  o.dal = dal;
  o.k = 8;
  o.anchor_hidden = 64;
  o.steps = steps;
  o.batch = 8;
  o.window = 32;
  o.lr = lr;
  o.seed = seed;
  return o;
}

// micro corpus and untrained encoder for the mechanism checks
struct MicroFixture {
  Corpus corpus;
  ParamStore<float> enc_store;
  std::unique_ptr<MoClip<float>> encoder;
};

MicroFixture make_micro_fixture(std::uint64_t seed) {
  MicroFixture f;
  CorpusConfig cc;
  cc.clip_count = 24;
  cc.min_frames = 40;
  cc.max_frames = 64;
  cc.seed = seed;
  f.corpus = build_corpus(cc);
  MoClipConfig mc;
  mc.motion_dims = f.corpus.layout.dims();
  mc.d_model = 16;
  mc.d_out = 12;
  mc.layers = 1;
  mc.heads = 2;
  Rng init = Rng::stream(seed, "moclip");
  f.encoder = std::make_unique<MoClip<float>>(f.enc_store, mc, init);
  return f;
}

TrainerOptions micro_options(bool dal, std::uint64_t seed, int steps) {
  TrainerOptions o;
  o.denoiser.base_channels = 4;
  o.denoiser.mults = {1, 2};
  o.denoiser.heads = 2;
  o.denoiser.d_emb = 16;
  o.denoiser.d_c = 16;
  o.denoiser.tap = TapSite::down2;
  o.T = 40;
  o.dal = dal;
  o.k = 8;
  o.anchor_hidden = 16;
  o.steps = steps;
  o.batch = 2;
  o.window = 16;
  o.seed = seed;
  return o;
}

// ---- criterion 1: gradient correctness ----

TEST(Acceptance, GradientChecksPassOnEveryLoss) {
  Criterion crit(1, "finite-difference checks pass on every loss");
  constexpr double kTol = 1e-4;
  constexpr double kEps = 1e-3;
  Rng pick = Rng::stream(11, "gradcheck");
  double worst = 0.0;
  std::string worst_param;
  auto track = [&](const char* what, const GradCheckResult& r) {
    EXPECT_LT(r.max_rel_err, kTol) << what << ": " << r.worst_param;
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_param = std::string(what) + "/" + r.worst_param;
    }
  };

  // denoising mse through the full UNet
  {
    DenoiserConfig dc;
    dc.in_dims = 6;
    dc.base_channels = 4;
    dc.mults = {1, 2};
    dc.heads = 2;
    dc.d_emb = 8;
    dc.d_c = 12;
    dc.tap = TapSite::down2;
    ParamStore<double> store;
    Rng init = Rng::stream(11, "denoiser");
    Denoiser<double> net(store, dc, init);
    Rng data = Rng::stream(11, "data");
    // the output conv starts at zero; give it weight so the whole net is live
    for (double& v : store.at("denoiser.out.w").tensor.data()) v = 0.1 * data.normal();
    Tensor<double> x = randn<double>({2, 8, 6}, data);
    Tensor<double> eps_t = randn<double>({2, 8, 6}, data);
    Tensor<double> text = randn<double>({2, 3, 12}, data);
    auto loss = [&] {
      auto out = net.forward(x, 7, text, Tensor<double>());
      return mean_all(square(sub(out.eps, eps_t)));
    };
    track("denoising", grad_check(store, loss, kEps, 300, pick));
  }

  // frequency and temporal anchor losses through the anchor heads
  {
    AnchorConfig ac;
    ac.tap_channels = 8;
    ac.tap_frames = 4;
    ac.d_m = 6;
    ac.k = 5;
    ac.d_a = 7;
    ac.d_emb = 8;
    ac.hidden = 16;
    ParamStore<double> store;
    Rng init = Rng::stream(12, "anchors");
    AnchorHeads<double> heads(store, ac, init);
    Rng data = Rng::stream(12, "data");
    for (double& v : store.at("anchor.fre.film2.w").tensor.data()) v = 0.1 * data.normal();
    for (double& v : store.at("anchor.tem.film2.w").tensor.data()) v = 0.1 * data.normal();
    Tensor<double> tap = randn<double>({2, 8, 4}, data);
    Tensor<double> temb =
        Tensor<double>::constant({1, 8}, sinusoidal_embedding<double>(7.0, 8));
    Tensor<double> x0 = randn<double>({2, 12, 6}, data);
    Tensor<double> tgt_f = dct_targets(x0, ac.k);
    Tensor<double> tgt_t = randn<double>({2, 7}, data);
    auto fre = [&] { return loss_fre(heads.forward(tap, temb).z_fre, tgt_f); };
    auto tem = [&] { return loss_tem(heads.forward(tap, temb).z_tem, tgt_t); };
    track("frequency-anchor", grad_check(store, fre, kEps, 300, pick));
    track("temporal-anchor", grad_check(store, tem, kEps, 300, pick));
  }

  // contrastive alignment through the text/motion encoder
  {
    MoClipConfig mc;
    mc.motion_dims = 6;
    mc.d_model = 8;
    mc.d_out = 6;
    mc.layers = 1;
    mc.heads = 2;
    ParamStore<double> store;
    Rng init = Rng::stream(13, "moclip");
    MoClip<double> model(store, mc, init);
    Rng data = Rng::stream(13, "data");
    MotionClip a, b;
    a.frames = 10;
    b.frames = 12;
    a.dims = b.dims = 6;
    a.data.resize(60);
    b.data.resize(72);
    for (double& v : a.data) v = data.normal();
    for (double& v : b.data) v = data.normal();
    auto mb = MotionBatch<double>::from_clips({&a, &b});
    auto tb = TokenBatch<double>::from_captions(
        {tokenize_caption("a person walks slowly"), tokenize_caption("a person spins")});
    auto loss = [&] {
      return contrastive_loss(model.encode_motion(mb), model.encode_text(tb), model.tau());
    };
    track("contrastive", grad_check(store, loss, kEps, 300, pick));
  }

  // the combined objective across denoiser and anchor heads in one graph
  {
    DenoiserConfig dc;
    dc.in_dims = 6;
    dc.base_channels = 4;
    dc.mults = {1, 2};
    dc.heads = 2;
    dc.d_emb = 8;
    dc.d_c = 12;
    dc.tap = TapSite::down2;
    ParamStore<double> store;
    Rng net_rng = Rng::stream(14, "denoiser");
    Denoiser<double> net(store, dc, net_rng);
    AnchorConfig ac;
    ac.tap_channels = dc.tap_channels();
    ac.tap_frames = dc.tap_frames(8);
    ac.d_m = 6;
    ac.k = 5;
    ac.d_a = 7;
    ac.d_emb = 8;
    ac.hidden = 16;
    Rng anchor_rng = Rng::stream(14, "anchors");
    AnchorHeads<double> heads(store, ac, anchor_rng);
    Rng data = Rng::stream(14, "data");
    for (double& v : store.at("denoiser.out.w").tensor.data()) v = 0.1 * data.normal();
    for (double& v : store.at("anchor.fre.film2.w").tensor.data()) v = 0.1 * data.normal();
    for (double& v : store.at("anchor.tem.film2.w").tensor.data()) v = 0.1 * data.normal();
    Tensor<double> x0 = randn<double>({2, 8, 6}, data);
    Tensor<double> eps_t = randn<double>({2, 8, 6}, data);
    Tensor<double> text = randn<double>({2, 3, 12}, data);
    Tensor<double> temb =
        Tensor<double>::constant({1, 8}, sinusoidal_embedding<double>(7.0, 8));
    Schedule sch = make_schedule(40, 1e-4, 0.02);
    Tensor<double> x_t = forward_diffuse(x0, eps_t, sch, 7);
    Tensor<double> tgt_f = dct_targets(x0, ac.k);
    Tensor<double> tgt_t = randn<double>({2, 7}, data);
    auto loss = [&] {
      auto out = net.forward(x_t, 7, text, Tensor<double>());
      Tensor<double> l_ddpm = mean_all(square(sub(out.eps, eps_t)));
      auto z = heads.forward(out.tap, temb);
      return combined_loss(l_ddpm, loss_fre(z.z_fre, tgt_f), loss_tem(z.z_tem, tgt_t),
                           WeightingStrategy::dynamic_cosine, 0.5, 0.1, 0.5);
    };
    track("combined", grad_check(store, loss, kEps, 400, pick));
  }

  crit.detail("max rel err " + fmt(worst) + " at " + worst_param);
}

// ---- criterion 2: the truncated-DCT basis ----

TEST(Acceptance, DctBasisIsOrthonormalWithFlatNoiseSpectrum) {
  Criterion crit(2, "DCT basis orthonormal, round-trip exact, white-noise energy flat");
  constexpr double kExact = 1e-9;
  constexpr double kRatioTol = 0.03;
  double worst_ortho = 0.0, worst_round = 0.0, worst_parseval = 0.0;
  Rng rng = Rng::stream(2, "dct");
  for (int n = 1; n <= 256; ++n) {
    const std::vector<double> m = dct_matrix(n);
    for (int i = 0; i < n; ++i) {
      for (int j = i; j < n; ++j) {
        double s = 0.0;
        for (int k = 0; k < n; ++k) s += m[static_cast<std::size_t>(k) * n + i] *
                                         m[static_cast<std::size_t>(k) * n + j];
        worst_ortho = std::max(worst_ortho, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    }
    std::vector<double> x(static_cast<std::size_t>(n));
    for (double& v : x) v = rng.normal();
    const std::vector<double> c = dct2_forward(x);
    const std::vector<double> back = dct2_inverse(c);
    double ex = 0.0, ec = 0.0;
    for (int i = 0; i < n; ++i) {
      worst_round = std::max(worst_round, std::abs(back[static_cast<std::size_t>(i)] -
                                                   x[static_cast<std::size_t>(i)]));
      ex += x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
      ec += c[static_cast<std::size_t>(i)] * c[static_cast<std::size_t>(i)];
    }
    worst_parseval = std::max(worst_parseval, std::abs(ex - ec));
  }
  EXPECT_LT(worst_ortho, kExact);
  EXPECT_LT(worst_round, kExact);
  EXPECT_LT(worst_parseval, kExact);

  // white noise spreads energy evenly, so the first N/3 coefficients hold 1/3
  const int frames = 96, dims = 4, keep = frames / 3;
  double ratio_sum = 0.0;
  for (int clip = 0; clip < 200; ++clip) {
    double head = 0.0, total = 0.0;
    for (int d = 0; d < dims; ++d) {
      std::vector<double> col(static_cast<std::size_t>(frames));
      for (double& v : col) v = rng.normal();
      const std::vector<double> c = dct2_forward(col);
      for (int i = 0; i < frames; ++i) {
        const double e = c[static_cast<std::size_t>(i)] * c[static_cast<std::size_t>(i)];
        total += e;
        if (i < keep) head += e;
      }
    }
    ratio_sum += head / total;
  }
  const double ratio = ratio_sum / 200.0;
  EXPECT_NEAR(ratio, 1.0 / 3.0, kRatioTol);
  crit.detail("max basis deviation " + fmt(std::max({worst_ortho, worst_round, worst_parseval})) +
              ", noise ratio " + fmt(ratio));
}

// ---- criterion 3: schedule and modulation identities ----

TEST(Acceptance, ScheduleAndModulationIdentitiesHold) {
  Criterion crit(3, "decay, noise-schedule, FiLM, guidance, and mixing identities");

  EXPECT_EQ(zeta_schedule(0, 1000), 1.0);
  EXPECT_EQ(zeta_schedule(1000, 1000), 0.0);
  EXPECT_EQ(zeta_schedule(1500, 1000), 0.0);
  for (int n = 0; n < 1000; ++n) EXPECT_LE(zeta_schedule(n + 1, 1000), zeta_schedule(n, 1000));

  const Schedule sch = make_schedule(2, 0.5, 0.5);
  ASSERT_EQ(sch.alpha_bar.size(), 3u);
  EXPECT_EQ(sch.alpha_bar[0], 1.0);
  EXPECT_EQ(sch.alpha_bar[1], 0.5);
  EXPECT_EQ(sch.alpha_bar[2], 0.25);

  // freshly built modulation heads emit exactly zero, so FiLM is the identity
  AnchorConfig ac;
  ac.tap_channels = 8;
  ac.tap_frames = 4;
  ac.d_m = 6;
  ac.k = 5;
  ac.d_a = 7;
  ac.d_emb = 8;
  ac.hidden = 16;
  ParamStore<double> store;
  Rng init = Rng::stream(3, "anchors");
  AnchorHeads<double> heads(store, ac, init);
  for (const char* name : {"anchor.fre.film2.w", "anchor.fre.film2.b", "anchor.tem.film2.w",
                           "anchor.tem.film2.b"}) {
    for (double v : store.at(name).tensor.data()) EXPECT_EQ(v, 0.0) << name;
  }
  Rng data = Rng::stream(3, "data");
  Tensor<double> p = randn<double>({2, 6, 5}, data);
  Tensor<double> zero_f = Tensor<double>::zeros({1, 12});
  Tensor<double> pf = film_freq(p, zero_f);
  ASSERT_EQ(pf.data().size(), p.data().size());
  EXPECT_EQ(std::memcmp(pf.data().data(), p.data().data(), p.data().size() * sizeof(double)), 0);
  Tensor<double> q = randn<double>({2, 7}, data);
  Tensor<double> zero_t = Tensor<double>::zeros({1, 14});
  Tensor<double> qf = film_vec(q, zero_t);
  ASSERT_EQ(qf.data().size(), q.data().size());
  EXPECT_EQ(std::memcmp(qf.data().data(), q.data().data(), q.data().size() * sizeof(double)), 0);

  Tensor<double> uncond = Tensor<double>::constant({1}, {1.0});
  Tensor<double> cond = Tensor<double>::constant({1}, {3.0});
  EXPECT_EQ(cfg_combine(uncond, cond, 2.5).item(), 6.0);

  Tensor<double> l_ddpm = Tensor<double>::constant({1}, {0.2});
  Tensor<double> l_fre = Tensor<double>::constant({1}, {0.3});
  Tensor<double> l_tem = Tensor<double>::constant({1}, {0.4});
  const double mixed =
      combined_loss(l_ddpm, l_fre, l_tem, WeightingStrategy::dynamic_cosine, 0.5, 0.1, 0.5)
          .item();
  EXPECT_NEAR(mixed, 0.315, 1e-12);
  crit.detail("mixed objective " + fmt(mixed));
}

// ---- criterion 4: anchors at zero weight match anchors-off bitwise ----

TEST(Acceptance, ZeroAnchorWeightTrainingMatchesAnchorsOffBitwise) {
  Criterion crit(4, "zero-weight anchors train bit-identically to anchors off");
  MicroFixture f = make_micro_fixture(21);

  struct Trace {
    std::vector<double> l_ddpm, total;
    std::vector<int> t;
    std::vector<char> dropped;
    std::string denoiser_hash;
  };
  auto run_case = [&](bool dal) {
    TrainerOptions o = micro_options(dal, 9, 100);
    o.lambda_fre = 0.0;
    o.lambda_tem = 0.0;
    DiffusionTrainer<float> tr(f.corpus, *f.encoder, o);
    Trace tr_out;
    for (const TrainStepRecord& r : tr.run(100)) {
      tr_out.l_ddpm.push_back(r.l_ddpm);
      tr_out.total.push_back(r.total);
      tr_out.t.push_back(r.t);
      tr_out.dropped.push_back(r.cond_dropped ? 1 : 0);
    }
    tr_out.denoiser_hash = params_hash_hex(tr.store(), "denoiser.");
    return tr_out;
  };
  const Trace with_heads = run_case(true);
  const Trace without = run_case(false);
  ASSERT_EQ(with_heads.l_ddpm.size(), without.l_ddpm.size());
  EXPECT_EQ(std::memcmp(with_heads.l_ddpm.data(), without.l_ddpm.data(),
                        without.l_ddpm.size() * sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(with_heads.total.data(), without.total.data(),
                        without.total.size() * sizeof(double)), 0);
  EXPECT_EQ(with_heads.t, without.t);
  EXPECT_EQ(with_heads.dropped, without.dropped);
  EXPECT_EQ(with_heads.denoiser_hash, without.denoiser_hash);
  crit.detail("100 steps, denoiser hash " + without.denoiser_hash.substr(0, 12));
}

// ---- criterion 5: forward-process statistics ----

TEST(Acceptance, ForwardProcessStatisticsMatchTheSchedule) {
  Criterion crit(5, "noising statistics match sqrt(abar) x0 and 1 - abar");
  constexpr double kTol = 0.01;
  const Schedule sch = make_schedule(2, 0.5, 0.5);  // abar_2 = 0.25
  const int n = 100000;
  const double x0_value = 0.8;
  Tensor<double> x0 = Tensor<double>::constant({1, 1000, 100},
                                               std::vector<double>(static_cast<std::size_t>(n),
                                                                   x0_value));
  Rng rng = Rng::stream(5, "noise");
  Tensor<double> eps = randn<double>({1, 1000, 100}, rng);
  Tensor<double> x_t = forward_diffuse(x0, eps, sch, 2);
  double mean = 0.0;
  for (double v : x_t.data()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x_t.data()) var += (v - mean) * (v - mean);
  var /= n;
  EXPECT_NEAR(mean, 0.5 * x0_value, kTol);
  EXPECT_NEAR(var, 0.75, kTol);
  crit.detail("mean " + fmt(mean) + " vs 0.4, var " + fmt(var) + " vs 0.75");
}

// ---- criterion 6: metric oracles ----

TEST(Acceptance, EvaluationMetricsMatchTheirOracles) {
  Criterion crit(6, "metric implementations agree with closed forms and brute force");
  Rng rng = Rng::stream(6, "metrics");
  auto random_features = [&](std::size_t n, std::size_t d) {
    FeatureSet f(n, std::vector<double>(d));
    for (auto& row : f)
      for (double& v : row) v = rng.normal();
    return f;
  };

  // identical sets score zero
  const FeatureSet x = random_features(40, 6);
  EXPECT_LE(fid(x, x), 1e-8);

  // a pure mean shift scores its squared distance
  GaussianFit a, b;
  a.mean = {0.0, 0.0, 0.0};
  b.mean = {1.0, 2.0, 2.0};
  a.cov.assign(9, 0.0);
  b.cov.assign(9, 0.0);
  for (int i = 0; i < 3; ++i) a.cov[static_cast<std::size_t>(i) * 4] = 1.0;
  for (int i = 0; i < 3; ++i) b.cov[static_cast<std::size_t>(i) * 4] = 1.0;
  a.count = b.count = 100;
  EXPECT_NEAR(fid_from_moments(a, b), 9.0, 1e-6);

  // one-dimensional variance gap: (2 - 1)^2 = 1
  GaussianFit c, d;
  c.mean = {0.0};
  d.mean = {0.0};
  c.cov = {4.0};
  d.cov = {1.0};
  c.count = d.count = 100;
  EXPECT_NEAR(fid_from_moments(c, d), 1.0, 1e-6);

  // retrieval over unrelated features sits at chance
  const std::size_t pool = 32, motions = 2000;
  const FeatureSet m = random_features(motions, 8);
  const FeatureSet t = random_features(motions, 8);
  Rng pool_rng = Rng::stream(6, "pool");
  const RPrecision rp = r_precision(m, t, pool, pool_rng);
  const double chance = 1.0 / static_cast<double>(pool);
  const double sigma = std::sqrt(chance * (1.0 - chance) / static_cast<double>(motions));
  EXPECT_NEAR(rp.top1, chance, 3.0 * sigma);

  // two features leave a single pair, so sampling is exact
  const FeatureSet pair = {{0.0, 0.0}, {3.0, 4.0}};
  Rng div_rng = Rng::stream(6, "div");
  EXPECT_DOUBLE_EQ(diversity(pair, 7, div_rng), 5.0);

  // on thirty features the sampled estimate tracks the all-pairs mean
  const FeatureSet spread = random_features(30, 6);
  double brute = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < spread.size(); ++i)
    for (std::size_t j = i + 1; j < spread.size(); ++j) {
      brute += euclidean(spread[i], spread[j]);
      ++count;
    }
  brute /= static_cast<double>(count);
  const double sampled = diversity(spread, 20000, div_rng);
  EXPECT_NEAR(sampled, brute, 0.02 * brute);

  // fixed (0,1)(2,3)... pairing reproduced by hand
  std::vector<FeatureSet> prompts(2);
  for (FeatureSet& g : prompts) g = random_features(kMultimodalitySamples, 3);
  double hand = 0.0;
  for (const FeatureSet& g : prompts) {
    double s = 0.0;
    for (std::size_t p = 0; p + 1 < g.size(); p += 2) s += euclidean(g[p], g[p + 1]);
    hand += s / (kMultimodalitySamples / 2.0);
  }
  hand /= static_cast<double>(prompts.size());
  EXPECT_NEAR(multimodality(prompts), hand, 1e-12);

  crit.detail("retrieval baseline " + fmt(rp.top1) + " vs " + fmt(chance) + ", diversity gap " +
              fmt(std::abs(sampled - brute)));
}

// ---- criterion 7: the encoder learns retrieval at desk scale ----

TEST(Acceptance, TwoStageEncoderBeatsChanceRetrievalFivefold) {
  Criterion crit(7, "two-stage encoder training reaches 5x chance on 32-way retrieval");
  constexpr double kTop1Floor = 0.16;
  CorpusConfig cc;
  cc.clip_count = 256;
  cc.seed = 405;
  const Corpus corpus = build_corpus(cc);
  const auto val_ids = corpus.split_indices(Split::val);
  ASSERT_GE(val_ids.size(), 32u);

  std::vector<double> top1;
  for (std::uint64_t seed : {1, 2, 3}) {
    MoClipConfig mc;
    mc.motion_dims = corpus.layout.dims();
    ParamStore<float> store;
    Rng init = Rng::stream(seed, "moclip");
    MoClip<float> model(store, mc, init);
    MoClipTrainConfig tc;
    tc.stage1_steps = 400;
    tc.stage2_steps = 200;
    tc.seed = seed;
    train_moclip(store, model, corpus, tc);
    const auto motion = embed_clips(model, corpus, val_ids);
    const auto text = embed_captions(model, corpus, val_ids);
    Rng pool_rng = Rng::stream(seed, "pool");
    top1.push_back(r_precision(motion, text, 32, pool_rng).top1);
  }
  const double med = median(top1);
  EXPECT_GE(med, kTop1Floor);

  // stage one trains with the text tower frozen, bit for bit
  {
    MoClipConfig mc;
    mc.motion_dims = corpus.layout.dims();
    ParamStore<float> store;
    Rng init = Rng::stream(1, "moclip");
    MoClip<float> model(store, mc, init);
    const std::string before = params_hash_hex(store, "moclip.text.");
    MoClipTrainConfig tc;
    tc.stage1_steps = 30;
    tc.stage2_steps = 0;
    tc.seed = 1;
    train_moclip(store, model, corpus, tc);
    EXPECT_EQ(params_hash_hex(store, "moclip.text."), before);
  }
  crit.detail("median top-1 " + fmt(med) + " over seeds {" + fmt(top1[0]) + ", " + fmt(top1[1]) +
              ", " + fmt(top1[2]) + "}, floor " + fmt(kTop1Floor));
}

// ---- criterion 8: anchors lift the weakest down-block gradient ----

TEST(Acceptance, AnchorsLiftTheWeakestDownBlockGradientShare) {
  Criterion crit(8, "anchored training raises the weakest down-block gradient share");
  constexpr int kSteps = 500;
  const DeskFixture& f = desk_fixture();

  struct Outcome {
    double health = 0.0;
    std::vector<double> l_ddpm;
    std::string hash;
  };
  auto run_case = [&](bool dal, std::uint64_t seed, bool probed) {
    TrainerOptions o = desk_options(dal, seed, kSteps, 2e-4);
    DiffusionTrainer<float> tr(f.corpus, *f.encoder, o);
    GradProbe probe;
    std::vector<ProbeRow> rows;
    DiffusionTrainer<float>::ProbeHook hook = nullptr;
    if (probed) {
      hook = [&](const TrainStepRecord& rec, const ParamStore<float>& store) {
        auto r = probe.observe(rec.step, rec.t, store);
        rows.insert(rows.end(), r.begin(), r.end());
      };
    }
    Outcome out;
    for (const TrainStepRecord& r : tr.run(kSteps, hook)) out.l_ddpm.push_back(r.l_ddpm);
    out.hash = params_hash_hex(tr.store());
    if (probed) out.health = down_path_health(rows);
    return out;
  };

  std::vector<double> on, off;
  Outcome off_seed1_probed;
  for (std::uint64_t seed : {1, 2, 3}) {
    Outcome o_off = run_case(false, seed, true);
    Outcome o_on = run_case(true, seed, true);
    if (seed == 1) off_seed1_probed = o_off;
    off.push_back(o_off.health);
    on.push_back(o_on.health);
  }
  EXPECT_GT(median(on), median(off));

  // watching gradients must not steer them: the bare run matches bitwise
  const Outcome bare = run_case(false, 1, false);
  EXPECT_EQ(bare.hash, off_seed1_probed.hash);
  ASSERT_EQ(bare.l_ddpm.size(), off_seed1_probed.l_ddpm.size());
  EXPECT_EQ(std::memcmp(bare.l_ddpm.data(), off_seed1_probed.l_ddpm.data(),
                        bare.l_ddpm.size() * sizeof(double)), 0);

  crit.detail("median health on " + fmt(median(on)) + " vs off " + fmt(median(off)));
}

// ---- criterion 9: anchors and time to the validation threshold ----

TEST(Acceptance, AnchorsReachTheValidationThresholdSooner) {
  Criterion crit(9, "anchored training reaches the validation threshold in <= 0.9x steps");
  constexpr double kThreshold = 0.80;  // validation denoising mse
  constexpr int kMaxSteps = 2000;
  constexpr int kCheckEvery = 100;
  const DeskFixture& f = desk_fixture();

  auto steps_to_threshold = [&](bool dal, std::uint64_t seed) {
    TrainerOptions o = desk_options(dal, seed, kMaxSteps, 1e-3);
    DiffusionTrainer<float> tr(f.corpus, *f.encoder, o);
    for (int done = kCheckEvery; done <= kMaxSteps; done += kCheckEvery) {
      tr.run(kCheckEvery);
      if (tr.validation_ddpm() <= kThreshold) return done;
    }
    return std::numeric_limits<int>::max();
  };

  std::vector<double> ratios;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const int off = steps_to_threshold(false, seed);
    const int on = steps_to_threshold(true, seed);
    const bool finite = off != std::numeric_limits<int>::max() &&
                        on != std::numeric_limits<int>::max();
    ratios.push_back(finite ? static_cast<double>(on) / static_cast<double>(off)
                            : std::numeric_limits<double>::infinity());
    per_seed += (per_seed.empty() ? "" : ", ") + std::to_string(on) + "/" + std::to_string(off);
  }
  const double med = median(ratios);
  EXPECT_LE(med, 0.9);
  crit.detail("median on/off step ratio " + fmt(med) + " (" + per_seed + ")");
}

// ---- criterion 10: conditioning-drop rate ----

TEST(Acceptance, ConditioningDropRateMatchesTheConfiguredProbability) {
  Criterion crit(10, "conditioning drop fraction lies in [0.09, 0.11] at p = 0.1");
  constexpr int kSteps = 10000;
  MicroFixture f = make_micro_fixture(10);
  TrainerOptions o = micro_options(false, 77, kSteps);
  DiffusionTrainer<float> tr(f.corpus, *f.encoder, o);
  int dropped = 0;
  for (int s = 0; s < kSteps; ++s) dropped += tr.step().cond_dropped ? 1 : 0;
  const double fraction = static_cast<double>(dropped) / kSteps;
  EXPECT_GE(fraction, 0.09);
  EXPECT_LE(fraction, 0.11);
  crit.detail("fraction " + fmt(fraction) + " over " + std::to_string(kSteps) + " steps");
}

// ---- criterion 11: byte-identical re-runs through the command line ----

const fs::path& acceptance_scratch() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("anchordiff-accept-" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p / "runs");
    return p;
  }();
  return root;
}

int run_cli(const std::string& args) {
  const std::string cmd = "ANCHORDIFF_RUNS_DIR=" + (acceptance_scratch() / "runs").string() +
                          " " ANCHORDIFF_BIN " " + args + " > " +
                          (acceptance_scratch() / "out.txt").string() + " 2> " +
                          (acceptance_scratch() / "err.txt").string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// drops the final column (wall-clock ms) from every CSV line
std::string drop_last_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string out, line;
  while (std::getline(in, line)) {
    out.append(line, 0, line.rfind(','));
    out.push_back('\n');
  }
  return out;
}

TEST(Acceptance, RerunFromTheRunDirectoryConfigIsByteIdentical) {
  Criterion crit(11, "re-running from a run directory's config reproduces every artifact");
  const std::string micro =
      "--clip-count 24 --min-frames 40 --max-frames 64 --seed 5 "
      "--moclip-d-model 16 --moclip-d-out 12 --moclip-layers 1 --moclip-heads 2 "
      "--moclip-stage1-steps 8 --moclip-stage2-steps 4 --moclip-batch 4 "
      "--base-channels 4 --channel-mults 1,2 --heads 2 --d-emb 16 --tap down2 "
      "--T 40 --steps 40 --batch 2 --window 24 --k 8 --anchor-hidden 16 --sample-frames 24";
  const fs::path runs = acceptance_scratch() / "runs";
  ASSERT_EQ(run_cli("gen-data --run data " + micro), 0);
  const std::string corpus = (runs / "data" / "corpus").string();
  ASSERT_EQ(run_cli("moclip-train --run enc --corpus " + corpus + " " + micro), 0);
  const std::string enc = (runs / "enc" / "moclip.lmp1").string();

  const std::string shared = " --corpus " + corpus + " --moclip " + enc;
  ASSERT_EQ(run_cli("train --run t1 --probe" + shared + " " + micro), 0);
  const std::string config = " --config " + (runs / "t1" / "config.json").string();
  ASSERT_EQ(run_cli("train --run t2 --probe" + shared + config), 0);

  EXPECT_EQ(drop_last_column(read_file(runs / "t1" / "train.csv")),
            drop_last_column(read_file(runs / "t2" / "train.csv")));
  EXPECT_EQ(read_file(runs / "t1" / "gradprobe.csv"), read_file(runs / "t2" / "gradprobe.csv"));
  EXPECT_EQ(read_file(runs / "t1" / "train.lmp1"), read_file(runs / "t2" / "train.lmp1"));
  EXPECT_EQ(read_file(runs / "t1" / "config.json"), read_file(runs / "t2" / "config.json"));
  EXPECT_EQ(read_file(runs / "t1" / "meta.json"), read_file(runs / "t2" / "meta.json"));

  const std::string ckpt = " --checkpoint " + (runs / "t1" / "train.lmp1").string();
  const std::string caption = " --caption \"a person walks\" --sample-steps 8";
  ASSERT_EQ(run_cli("sample --run s1" + shared + ckpt + config + caption), 0);
  ASSERT_EQ(run_cli("sample --run s2" + shared + ckpt + config + caption), 0);
  auto clip_of = [&](const char* name) {
    for (const auto& e : fs::directory_iterator(runs / name / "samples"))
      if (e.path().extension() == ".lmb1") return read_file(e.path());
    return std::string();
  };
  const std::string s1 = clip_of("s1");
  ASSERT_FALSE(s1.empty());
  EXPECT_EQ(s1, clip_of("s2"));

  const std::string eval_flags = " --gen-clips 4 --pool 4 --pairs 6 --mm-prompts 0 --repeats 2";
  ASSERT_EQ(run_cli("eval --run e1" + shared + ckpt + config + eval_flags), 0);
  ASSERT_EQ(run_cli("eval --run e2" + shared + ckpt + config + eval_flags), 0);
  const std::string report = read_file(runs / "e1" / "eval.json");
  EXPECT_FALSE(report.empty());
  EXPECT_EQ(report, read_file(runs / "e2" / "eval.json"));

  crit.detail("train, sample, and eval artifacts identical across re-runs");
}

}  // namespace
}  // namespace anchordiff
