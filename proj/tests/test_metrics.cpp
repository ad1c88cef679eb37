#include "anchordiff/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "anchordiff/rng.hpp"

namespace anchordiff {
namespace {

FeatureSet random_features(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
  FeatureSet out(n, std::vector<double>(d));
  for (auto& row : out)
    for (double& v : row) v = scale * rng.normal();
  return out;
}

// ---- gaussian fits ----

TEST(GaussianFitSuite, MatchesHandComputedMoments) {
  FeatureSet feats = {{1.0, 2.0}, {3.0, 4.0}, {5.0, 9.0}};
  GaussianFit fit = gaussian_fit(feats);
  EXPECT_EQ(fit.count, 3u);
  ASSERT_EQ(fit.dim(), 2u);
  EXPECT_NEAR(fit.mean[0], 3.0, 1e-12);
  EXPECT_NEAR(fit.mean[1], 5.0, 1e-12);
  // unbiased covariance of the three points, no ridge at n = d + 1
  EXPECT_NEAR(fit.cov[0], 4.0, 1e-12);
  EXPECT_NEAR(fit.cov[1], 7.0, 1e-12);
  EXPECT_NEAR(fit.cov[2], 7.0, 1e-12);
  EXPECT_NEAR(fit.cov[3], 13.0, 1e-12);
}

TEST(GaussianFitSuite, AppliesRidgeWhenSamplesAreScarce) {
  FeatureSet feats = {{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};  // n = 2 < d + 1
  GaussianFit fit = gaussian_fit(feats);
  EXPECT_NEAR(fit.cov[0], 0.5 + 1e-6, 1e-15);
  EXPECT_NEAR(fit.cov[1], 0.5, 1e-15);
}

TEST(GaussianFitSuite, RejectsBadInput) {
  EXPECT_THROW(gaussian_fit({}), std::invalid_argument);
  EXPECT_THROW(gaussian_fit({{1.0}, {1.0, 2.0}}), std::invalid_argument);
  EXPECT_THROW(gaussian_fit({{std::nan("")}}), std::invalid_argument);
}

// ---- eigensolver ----

TEST(EigenSuite, DiagonalizesKnownMatrix) {
  std::vector<double> a = {2.0, 1.0, 1.0, 2.0};
  std::vector<double> values;
  std::vector<double> vectors;
  detail::jacobi_eigen(a, 2, values, vectors);
  std::sort(values.begin(), values.end());
  EXPECT_NEAR(values[0], 1.0, 1e-12);
  EXPECT_NEAR(values[1], 3.0, 1e-12);
}

TEST(EigenSuite, ReconstructsRandomSymmetricMatrix) {
  Rng rng = Rng::stream(9, "eigen");
  const std::size_t d = 12;
  std::vector<double> a(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      const double v = rng.normal();
      a[i * d + j] = v;
      a[j * d + i] = v;
    }
  std::vector<double> values;
  std::vector<double> vectors;
  detail::jacobi_eigen(a, d, values, vectors);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double rec = 0.0;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        rec += vectors[i * d + k] * values[k] * vectors[j * d + k];
        dot += vectors[k * d + i] * vectors[k * d + j];
      }
      EXPECT_NEAR(rec, a[i * d + j], 1e-10);
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-11);
    }
}

TEST(EigenSuite, SymmetricSqrtSquaresBack) {
  Rng rng = Rng::stream(10, "sqrt");
  const std::size_t d = 8;
  std::vector<double> b(d * d);
  for (double& v : b) v = rng.normal();
  std::vector<double> m(d * d, 0.0);  // B^T B is symmetric PSD
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) m[i * d + j] += b[k * d + i] * b[k * d + j];
  const auto r = detail::sym_sqrt(m, d);
  const auto rr = detail::mat_mul(r, r, d);
  for (std::size_t i = 0; i < d * d; ++i) EXPECT_NEAR(rr[i], m[i], 1e-9);
}

// ---- frechet distance ----

TEST(FidSuite, IdenticalSetsScoreZero) {
  Rng rng = Rng::stream(3, "fid");
  FeatureSet x = random_features(80, 6, rng);
  EXPECT_NEAR(fid(x, x), 0.0, 1e-8);
}

TEST(FidSuite, MeanShiftWithSharedCovarianceIsSquaredDistance) {
  GaussianFit a;
  GaussianFit b;
  a.mean = {0.0, 0.0, 0.0};
  b.mean = {1.0, 2.0, 2.0};
  a.cov.assign(9, 0.0);
  b.cov.assign(9, 0.0);
  for (int i = 0; i < 3; ++i) {
    a.cov[i * 3 + i] = 1.0;
    b.cov[i * 3 + i] = 1.0;
  }
  a.count = b.count = 100;
  EXPECT_NEAR(fid_from_moments(a, b), 9.0, 1e-9);
}

TEST(FidSuite, OneDimensionalVarianceGapHasClosedForm) {
  GaussianFit a;
  GaussianFit b;
  a.mean = {0.0};
  b.mean = {0.0};
  a.cov = {1.0};
  b.cov = {4.0};
  a.count = b.count = 1000;
  // (sigma1 - sigma2)^2 through the trace term: 1 + 4 - 2 * 2
  EXPECT_NEAR(fid_from_moments(a, b), 1.0, 1e-6);
}

TEST(FidSuite, SymmetricAndBoundedBelow) {
  Rng rng = Rng::stream(4, "fid-sym");
  FeatureSet x = random_features(60, 5, rng);
  FeatureSet y = random_features(60, 5, rng, 1.7);
  const double xy = fid(x, y);
  const double yx = fid(y, x);
  EXPECT_NEAR(xy, yx, 1e-8);
  EXPECT_GE(xy, -1e-8);
  EXPECT_GE(fid(x, x), -1e-8);
}

TEST(FidSuite, RejectsNonFiniteFeatures) {
  FeatureSet x = {{0.0}, {1.0}};
  FeatureSet bad = {{0.0}, {std::numeric_limits<double>::infinity()}};
  EXPECT_THROW(fid(x, bad), std::invalid_argument);
  GaussianFit a = gaussian_fit(x);
  GaussianFit c;
  c.mean = {0.0, 0.0};
  c.cov.assign(4, 0.0);
  EXPECT_THROW(fid_from_moments(a, c), std::invalid_argument);
}

// ---- retrieval precision ----

TEST(RPrecisionSuite, PerfectAlignmentScoresTopOne) {
  Rng init = Rng::stream(5, "rp-init");
  FeatureSet caps = random_features(40, 4, init);
  Rng rng = Rng::stream(5, "rp");
  RPrecision rp = r_precision(caps, caps, 32, rng);
  EXPECT_DOUBLE_EQ(rp.top1, 1.0);
  EXPECT_DOUBLE_EQ(rp.top3, 1.0);
  EXPECT_EQ(rp.motions, 40u);
}

TEST(RPrecisionSuite, RandomFeaturesMatchChanceBaseline) {
  Rng init = Rng::stream(6, "rp-rand");
  const std::size_t n = 2000;
  FeatureSet motions = random_features(n, 8, init);
  FeatureSet caps = random_features(n, 8, init);
  Rng rng = Rng::stream(6, "rp-pool");
  RPrecision rp = r_precision(motions, caps, 32, rng);
  EXPECT_LE(rp.top1, rp.top2);
  EXPECT_LE(rp.top2, rp.top3);
  for (int k = 1; k <= 3; ++k) {
    const double p = k / 32.0;
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    const double got = k == 1 ? rp.top1 : k == 2 ? rp.top2 : rp.top3;
    EXPECT_NEAR(got, p, 3.0 * sigma) << "top-" << k;
  }
}

TEST(RPrecisionSuite, SeededPoolsAreDeterministic) {
  Rng init = Rng::stream(7, "rp-det");
  FeatureSet motions = random_features(64, 4, init);
  FeatureSet caps = random_features(64, 4, init);
  Rng r1 = Rng::stream(7, "rp-run");
  Rng r2 = Rng::stream(7, "rp-run");
  RPrecision a = r_precision(motions, caps, 32, r1);
  RPrecision b = r_precision(motions, caps, 32, r2);
  EXPECT_DOUBLE_EQ(a.top1, b.top1);
  EXPECT_DOUBLE_EQ(a.top2, b.top2);
  EXPECT_DOUBLE_EQ(a.top3, b.top3);
}

TEST(RPrecisionSuite, RejectsOversizedPool) {
  FeatureSet f = {{0.0}, {1.0}, {2.0}};
  Rng rng = Rng::stream(1, "rp-err");
  EXPECT_THROW(r_precision(f, f, 4, rng), std::invalid_argument);
  FeatureSet g = {{0.0}};
  EXPECT_THROW(r_precision(f, g, 2, rng), std::invalid_argument);
}

// ---- diversity ----

TEST(DiversitySuite, IdenticalFeaturesScoreZero) {
  FeatureSet f(10, std::vector<double>{1.0, 2.0});
  Rng rng = Rng::stream(2, "div");
  EXPECT_DOUBLE_EQ(diversity(f, 50, rng), 0.0);
}

TEST(DiversitySuite, TwoFeaturesAlwaysPairUp) {
  FeatureSet f = {{0.0, 0.0}, {3.0, 4.0}};
  Rng rng = Rng::stream(2, "div2");
  EXPECT_DOUBLE_EQ(diversity(f, 7, rng), 5.0);
}

TEST(DiversitySuite, SampledEstimateTracksAllPairsMean) {
  Rng init = Rng::stream(8, "div-init");
  FeatureSet f = random_features(30, 6, init);
  double brute = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t j = i + 1; j < f.size(); ++j) {
      brute += euclidean(f[i], f[j]);
      ++count;
    }
  brute /= static_cast<double>(count);
  Rng rng = Rng::stream(8, "div-sample");
  EXPECT_NEAR(diversity(f, 300, rng), brute, 0.05 * brute);
}

TEST(DiversitySuite, RejectsDegenerateInput) {
  Rng rng = Rng::stream(1, "div-err");
  EXPECT_THROW(diversity({{1.0}}, 10, rng), std::invalid_argument);
  EXPECT_THROW(diversity({{1.0}, {2.0}}, 0, rng), std::invalid_argument);
}

// ---- motion-text distance ----

TEST(MmDistSuite, MatchesHandValues) {
  FeatureSet m = {{0.0, 0.0}};
  FeatureSet c = {{3.0, 0.0}};
  EXPECT_DOUBLE_EQ(mm_dist(m, c), 3.0);
  EXPECT_DOUBLE_EQ(mm_dist(c, c), 0.0);
  FeatureSet m4 = {{0.0}, {0.0}, {0.0}, {0.0}};
  FeatureSet c4 = {{1.0}, {2.0}, {3.0}, {6.0}};
  EXPECT_DOUBLE_EQ(mm_dist(m4, c4), 3.0);
  EXPECT_THROW(mm_dist(m, c4), std::invalid_argument);
}

// ---- multimodality ----

TEST(MultimodalitySuite, IdenticalSamplesScoreZero) {
  FeatureSet group(20, std::vector<double>{1.0, 1.0});
  EXPECT_DOUBLE_EQ(multimodality({group}), 0.0);
}

TEST(MultimodalitySuite, AlternatingPointsScoreTheirDistance) {
  FeatureSet group;
  for (int i = 0; i < 20; ++i)
    group.push_back(i % 2 == 0 ? std::vector<double>{0.0, 0.0} : std::vector<double>{0.0, 2.5});
  EXPECT_DOUBLE_EQ(multimodality({group}), 2.5);
}

TEST(MultimodalitySuite, MatchesBruteForceFixedPairing) {
  Rng rng = Rng::stream(11, "mm");
  FeatureSet group = random_features(20, 5, rng);
  double expect = 0.0;
  for (std::size_t p = 0; p < 20; p += 2) expect += euclidean(group[p], group[p + 1]);
  expect /= 10.0;
  EXPECT_DOUBLE_EQ(multimodality({group}), expect);
}

TEST(MultimodalitySuite, AveragesOverPromptsAndValidatesCounts) {
  FeatureSet zeros(20, std::vector<double>{0.0});
  FeatureSet group;
  for (int i = 0; i < 20; ++i)
    group.push_back(i % 2 == 0 ? std::vector<double>{0.0} : std::vector<double>{4.0});
  EXPECT_DOUBLE_EQ(multimodality({zeros, group}), 2.0);
  FeatureSet short_group(19, std::vector<double>{0.0});
  EXPECT_THROW(multimodality({short_group}), std::invalid_argument);
  EXPECT_THROW(multimodality({}), std::invalid_argument);
}

// ---- tensor bridge ----

TEST(FeatureConversion, CopiesTensorRows) {
  Tensor<float> t = Tensor<float>::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  FeatureSet f = features_from_tensor(t);
  ASSERT_EQ(f.size(), 2u);
  ASSERT_EQ(f[0].size(), 3u);
  EXPECT_DOUBLE_EQ(f[1][2], 6.0);
  Tensor<float> flat = Tensor<float>::constant({2}, {1, 2});
  EXPECT_THROW(features_from_tensor(flat), std::invalid_argument);
}

}  // namespace
}  // namespace anchordiff
