#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fmrnet/inspection.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace fmrnet;
using namespace fmrnet::inspect;
using fmrnet::testing::random_map;
using namespace fmrnet::testing::oracle;

namespace {

Map2D const_map(int h, int w, double v) { return Map2D::Constant(h, w, v); }

}  // namespace

TEST(GradientMagnitude, ConstantImageIsZero) {
  EXPECT_LT(gradient_magnitude(const_map(6, 7, 0.4)).abs().maxCoeff(), 1e-15);
}

TEST(GradientMagnitude, StepEdgeHandCase) {
  Map2D m = Map2D::Zero(5, 5);
  m.rightCols(3) = 1.0;
  Map2D g = gradient_magnitude(m);
  for (int y = 0; y < 5; ++y) {
    EXPECT_NEAR(g(y, 0), 0.0, 1e-15);
    EXPECT_NEAR(g(y, 1), 1.0, 1e-15);
    EXPECT_NEAR(g(y, 2), 1.0, 1e-15);
    EXPECT_NEAR(g(y, 3), 0.0, 1e-15);
    EXPECT_NEAR(g(y, 4), 0.0, 1e-15);
  }
}

TEST(GradientMagnitude, OffsetInvariant) {
  Map2D m = random_map(9, 11, 1);
  EXPECT_LT((gradient_magnitude(m) - gradient_magnitude(m + 0.3)).abs().maxCoeff(), 1e-12);
}

TEST(Gms, IdenticalIsOneAndSymmetric) {
  Map2D a = random_map(16, 16, 2), b = random_map(16, 16, 3);
  EXPECT_LT((gms_map(a, a, 1e-4) - 1.0).abs().maxCoeff(), 1e-15);
  EXPECT_LT((gms_map(a, b, 1e-4) - gms_map(b, a, 1e-4)).abs().maxCoeff(), 1e-15);
  Map2D g = gms_map(a, b, 1e-4);
  EXPECT_GT(g.minCoeff(), 0.0);
  EXPECT_LE(g.maxCoeff(), 1.0 + 1e-12);
}

TEST(Gms, ScalarClosedForm) {
  // g(I)=0 everywhere, g(I_rec)=1 in the interior columns of a step
  Map2D flat = Map2D::Zero(5, 5), step = Map2D::Zero(5, 5);
  step.rightCols(3) = 1.0;
  Map2D g = gms_map(flat, step, 0.01);
  EXPECT_NEAR(g(2, 1), 0.01 / 1.01, 1e-15);
  EXPECT_NEAR(g(2, 4), 1.0, 1e-15);
}

TEST(Gms, MatchesReferenceLoop) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Map2D a = random_map(16, 16, seed), b = random_map(16, 16, seed + 10);
    EXPECT_LT((gms_map(a, b, 1e-4) - reference_gms(a, b, 1e-4)).abs().maxCoeff(), 1e-6);
  }
}

TEST(Ssim, IdenticalIsOne) {
  Map2D a = random_map(16, 16, 4);
  InspectionConfig cfg;
  EXPECT_LT((ssim_map(a, a, cfg) - 1.0).abs().maxCoeff(), 1e-9);
  cfg.ssim_mode = SsimMode::strict;
  EXPECT_LT((ssim_map(a, a, cfg) - 1.0).abs().maxCoeff(), 1e-9);
}

TEST(Ssim, ConstantZeroVersusOne) {
  InspectionConfig cfg;
  Map2D s = ssim_map(const_map(16, 16, 0.0), const_map(16, 16, 1.0), cfg);
  const double expect = cfg.c1 / (1.0 + cfg.c1);
  EXPECT_LT((s - expect).abs().maxCoeff(), 1e-9);
}

TEST(Ssim, MatchesReferenceLoopBothModes) {
  for (auto mode : {SsimMode::covariance, SsimMode::strict})
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      InspectionConfig cfg;
      cfg.ssim_mode = mode;
      Map2D a = random_map(16, 16, seed), b = (0.6 * a + 0.4 * random_map(16, 16, seed + 20));
      EXPECT_LT((ssim_map(a, b, cfg) - reference_ssim(a, b, cfg)).abs().maxCoeff(), 1e-6);
    }
}

TEST(Ssim, ShapeMismatch) {
  EXPECT_THROW(ssim_map(const_map(4, 4, 0), const_map(4, 5, 0), InspectionConfig{}), std::invalid_argument);
  EXPECT_THROW(gms_map(const_map(4, 4, 0), const_map(5, 4, 0), 1e-4), std::invalid_argument);
}

TEST(Residual, HandCases) {
  Image a(3, 3, 1, 0.2f), b(3, 3, 1, 0.7f);
  EXPECT_LT((residual_map(a, b) - 0.5).abs().maxCoeff(), 1e-7);
  EXPECT_EQ(residual_map(a, a).abs().maxCoeff(), 0.0);
  EXPECT_TRUE((residual_map(a, b) == residual_map(b, a)).all());
  Image c(2, 2, 3, 0.0f), d(2, 2, 3, 0.0f);
  d.at(0, 0, 0) = 0.3f;
  d.at(2, 0, 0) = 0.6f;
  EXPECT_NEAR(residual_map(c, d)(0, 0), 0.3, 1e-7);
  EXPECT_THROW(residual_map(a, Image(3, 3, 3)), std::invalid_argument);
}

TEST(AnomalyMaps, IdenticalGivesZeros) {
  auto img = fmrnet::testing::random_image(16, 16, 3, 5);
  auto m = anomaly_maps(img, img, InspectionConfig{});
  EXPECT_LT(m.gms.abs().maxCoeff(), 1e-12);
  EXPECT_LT(m.ssim.abs().maxCoeff(), 1e-9);
  EXPECT_EQ(m.residual.abs().maxCoeff(), 0.0);
}

TEST(Median, RemovesIsolatedImpulse) {
  Map2D m = const_map(7, 7, 0.2);
  m(3, 3) = 5.0;
  Map2D f = median_filter(m, 3);
  EXPECT_LT((f - 0.2).abs().maxCoeff(), 1e-7);
  EXPECT_TRUE((median_filter(m, 1) == m).all());
  EXPECT_THROW(median_filter(m, 4), std::invalid_argument);
}

TEST(Fuse, ProductProperties) {
  InspectionConfig raw;
  raw.normalize_maps = false;
  raw.median_kernel = 1;
  AnomalyMapSet s{const_map(4, 4, 0.5), const_map(4, 4, 0.5), const_map(4, 4, 0.5), {}};
  EXPECT_LT((fuse(s, raw) - 0.125).abs().maxCoeff(), 1e-15);

  AnomalyMapSet r{random_map(8, 8, 1), random_map(8, 8, 2), random_map(8, 8, 3), {}};
  for (const auto& cfg : {raw, InspectionConfig{}}) {
    auto zeroed = r;
    zeroed.ssim = Map2D::Zero(8, 8);
    EXPECT_EQ(fuse(zeroed, cfg).abs().maxCoeff(), 0.0);
    AnomalyMapSet perm{r.residual, r.gms, r.ssim, {}};
    EXPECT_LT((fuse(perm, cfg) - fuse(r, cfg)).abs().maxCoeff(), 1e-15);
  }
  Map2D base = fuse(r, raw);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    auto up = r;
    const int y = static_cast<int>(rng() % 8), x = static_cast<int>(rng() % 8);
    Map2D* target = t % 3 == 0 ? &up.gms : (t % 3 == 1 ? &up.ssim : &up.residual);
    (*target)(y, x) += 0.25;
    EXPECT_GE(fuse(up, raw)(y, x), base(y, x));
  }
}

TEST(Fuse, NormalizedMapsInUnitRange) {
  AnomalyMapSet r{random_map(8, 8, 1, 0, 3), random_map(8, 8, 2, -1, 1), random_map(8, 8, 3, 5, 9), {}};
  fuse_in_place(r, InspectionConfig{});
  EXPECT_GE(r.fused.minCoeff(), 0.0);
  EXPECT_LE(r.fused.maxCoeff(), 1.0);
  EXPECT_EQ(minmax_normalize(const_map(3, 3, 2.0)).abs().maxCoeff(), 0.0);
}

TEST(KSigma, HandCases) {
  EXPECT_EQ(binarize_ksigma(const_map(5, 5, 0.7), 3.0).sum(), 0.0);
  Map2D m = Map2D::Zero(10, 10);
  m(4, 7) = 10.0;
  Threshold t;
  Map2D mask = binarize_ksigma(m, 3.0, &t);
  EXPECT_EQ(mask.rows(), 10);
  EXPECT_EQ(mask.sum(), 1.0);
  EXPECT_EQ(mask(4, 7), 1.0);
  EXPECT_NEAR(t.mean, 0.1, 1e-15);
  EXPECT_NEAR(t.stddev, std::sqrt(0.99), 1e-12);
}

TEST(KSigma, AffineInvariant) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Map2D m = random_map(20, 20, seed).square();
    EXPECT_TRUE((binarize_ksigma(m, 2.0) == binarize_ksigma(2.5 * m + 7.0, 2.0)).all());
  }
}

TEST(Auc, PerfectAndReversed) {
  EXPECT_EQ(auc_roc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auc_roc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}), 0.0);
  EXPECT_EQ(auc_roc({0.5, 0.5}, {0, 1}), 0.5);
  EXPECT_THROW(auc_roc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(auc_roc({0.1}, {1, 0}), std::invalid_argument);
}

TEST(Auc, MatchesPairwiseOracleWithTies) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(50);
    std::vector<int> l(50);
    for (int i = 0; i < 50; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(rng() % 12);  // many ties
      l[static_cast<std::size_t>(i)] = i % 3 == 0 ? 1 : static_cast<int>(rng() % 2);
    }
    EXPECT_NEAR(auc_roc(s, l), pairwise_auc(s, l), 1e-9);
    std::vector<double> mono;
    for (double v : s) mono.push_back(std::exp(0.7 * v) - 3.0);
    EXPECT_NEAR(auc_roc(mono, l), auc_roc(s, l), 1e-12);
  }
}

TEST(Auc, RandomLabelsNearHalf) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u;
  std::vector<double> s(20000);
  std::vector<int> l(20000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = u(rng), l[i] = static_cast<int>(rng() % 2);
  EXPECT_NEAR(auc_roc(s, l), 0.5, 0.05);
}

TEST(Prf, HandCases) {
  Map2D truth = Map2D::Zero(2, 4);
  truth(0, 0) = truth(0, 1) = truth(0, 2) = truth(0, 3) = 1;
  auto same = prf(truth, truth);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  EXPECT_EQ(same.f1, 1.0);

  auto empty = prf(Map2D::Zero(2, 4), truth);
  EXPECT_TRUE(empty.precision_undefined);
  EXPECT_EQ(empty.precision, 0.0);
  EXPECT_EQ(empty.recall, 0.0);
  EXPECT_EQ(empty.f1, 0.0);

  Map2D mask = Map2D::Zero(2, 4);
  mask(0, 0) = mask(0, 1) = mask(1, 0) = mask(1, 1) = 1;
  auto half = prf(mask, truth);
  EXPECT_EQ(half.tp, 2u);
  EXPECT_EQ(half.fp, 2u);
  EXPECT_EQ(half.fn, 2u);
  EXPECT_EQ(half.tn, 2u);
  EXPECT_EQ(half.precision, 0.5);
  EXPECT_EQ(half.recall, 0.5);
  EXPECT_EQ(half.f1, 0.5);
}

TEST(Config, Validation) {
  InspectionConfig c;
  EXPECT_NO_THROW(c.validate());
  c.median_kernel = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = InspectionConfig{};
  c.c0 = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = InspectionConfig{};
  c.ssim_window = 10;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
