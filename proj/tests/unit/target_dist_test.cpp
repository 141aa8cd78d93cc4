#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "dist2/target_dist.hpp"

using namespace dist2;

namespace {

MetricSpec digits_sq() { return MetricSpec(MetricKind::squared_euclidean_scalar, VocabSubset::iota(10, 10)); }

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST(BuildTarget, DigitExampleMatchesDirectEvaluation) {
  const auto td = build_target(TargetConfig(1.0, digits_sq()), 5);
  double z = 0.0;
  for (int v = 0; v < 10; ++v) z += std::exp(-double((v - 5) * (v - 5)));
  EXPECT_NEAR(td.probs[5], 1.0 / z, 1e-15);
  EXPECT_NEAR(td.probs[4], std::exp(-1.0) / z, 1e-15);
  EXPECT_EQ(td.probs[4], td.probs[6]);
  EXPECT_NEAR(td.probs[2], std::exp(-9.0) / z, 1e-18);
  EXPECT_GT(td.probs[4], td.probs[2]);
  EXPECT_EQ(td.target_token, 5);
}

TEST(BuildTarget, UniformDistanceMetric) {
  // One-hot embeddings: every off-diagonal mse distance is 2/D.
  const std::size_t m = 6;
  std::vector<double> e(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) e[i * m + i] = 1.0;
  const MetricSpec spec(MetricKind::mse_embedding, VocabSubset::iota(m, m, false),
                        std::make_shared<const EmbeddingTable>(m, m, e));
  for (double tau : {0.1, 1.0, 10.0}) {
    const auto td = build_target(TargetConfig(tau, spec), 2);
    for (std::size_t i = 0; i < m; ++i) {
      if (i == 2) continue;
      EXPECT_GT(td.probs[2], td.probs[i]);
      EXPECT_DOUBLE_EQ(td.probs[i], td.probs[i == 0 ? 1 : 0]);
    }
  }
}

TEST(BuildTarget, TwoPointClosedForm) {
  const MetricSpec spec(MetricKind::absolute_scalar, VocabSubset(3, {0, 2}, std::vector<double>{0.0, 1.0}));
  const auto td = build_target(TargetConfig(1.0, spec), 0);
  const double e = std::exp(-1.0);
  EXPECT_NEAR(td.probs[0], 1.0 / (1.0 + e), 1e-15);
  EXPECT_NEAR(td.probs[1], e / (1.0 + e), 1e-15);
  EXPECT_NEAR(td.probs[0], 0.7311, 5e-5);
}

TEST(BuildTarget, Errors) {
  EXPECT_THROW(TargetConfig(0.0, digits_sq()), Error);
  EXPECT_THROW(TargetConfig(-1.0, digits_sq()), Error);
  try {
    TargetConfig(0.0, digits_sq());
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
  const std::vector<double> bad = {0.0, std::nan("")};
  try {
    boltzmann(bad, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(BuildTarget, StabilizedAtTinyTau) {
  const auto td = build_target(TargetConfig(1e-300, digits_sq()), 9);
  EXPECT_EQ(td.probs[9], 1.0);
  EXPECT_EQ(sum(td.probs), 1.0);
}

TEST(BuildTargetBatch, MatchesScalarForm) {
  const TargetConfig cfg(0.7, digits_sq());
  const std::vector<TokenId> twin = {5, 5};
  const auto b = build_target_batch(cfg, twin);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].probs, b[1].probs);
  EXPECT_EQ(b[0].probs, build_target(cfg, 5).probs);
  EXPECT_TRUE(build_target_batch(cfg, std::vector<TokenId>{}).empty());
  std::vector<TokenId> all(10);
  std::iota(all.begin(), all.end(), 0);
  const auto rows = build_target_batch(cfg, all);
  ASSERT_EQ(rows.size(), 10u);
  for (const auto& r : rows) EXPECT_NEAR(sum(r.probs), 1.0, 1e-12);
}

TEST(EntropyCalibration, HitsTargetEntropy) {
  Rng rng(4);
  const std::size_t m = 64, d = 4;
  std::vector<double> e(m * d);
  for (double& x : e) x = rng.normal();
  const MetricSpec spec(MetricKind::mse_embedding, VocabSubset::iota(m, m, false),
                        std::make_shared<const EmbeddingTable>(m, d, e));
  const double tau = calibrate_tau_for_entropy(spec, std::log(10.0));
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  EXPECT_NEAR(mean_target_entropy(spec, tau, idx), std::log(10.0), 1e-9);
  EXPECT_THROW(calibrate_tau_for_entropy(spec, std::log(64.0) + 0.1), Error);
}

TEST(Contrastive, BorrowAwareWorkedCase) {
  const DigitSpanFormat fmt{2, 10};
  const auto subset = VocabSubset::iota(10, 10);
  const auto plan = make_contrastive_plan(40, 39, fmt, subset);
  EXPECT_EQ(plan.per_position_distance, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(plan.target_sequence, (std::vector<TokenId>{4, 0}));
  EXPECT_EQ(plan.negative_sequence, (std::vector<TokenId>{3, 9}));
}

TEST(Contrastive, PlainDigitFallbackForLargeGaps) {
  const DigitSpanFormat fmt{4, 10};
  const auto plan = make_contrastive_plan(1234, 1290, fmt, VocabSubset::iota(10, 10));
  EXPECT_EQ(plan.per_position_distance, (std::vector<double>{0, 0, 6, 4}));
  const auto near = make_contrastive_plan(7, 12, fmt, VocabSubset::iota(10, 10));
  EXPECT_EQ(near.per_position_distance, (std::vector<double>{0, 0, 0, 5}));
  EXPECT_EQ(near.negative_sequence, (std::vector<TokenId>{0, 0, 1, 2}));
}

TEST(Contrastive, NeverReturnsTarget) {
  const TargetConfig cfg(1.0, digits_sq());
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const auto p = sample_contrastive(cfg, 55, 3, rng, {2, 10});
    EXPECT_NE(p.negative_value, 55);
    EXPECT_LE(std::abs(p.negative_value - 55), 3);
  }
}

TEST(Contrastive, ClippedAtRangeEdges) {
  const TargetConfig cfg(1.0, digits_sq());
  Rng rng(8);
  for (int i = 0; i < 500; ++i) {
    const auto lo = sample_contrastive(cfg, 0, 2, rng, {2, 10});
    EXPECT_TRUE(lo.negative_value == 1 || lo.negative_value == 2);
    const auto hi = sample_contrastive(cfg, 99, 2, rng, {2, 10});
    EXPECT_TRUE(hi.negative_value == 98 || hi.negative_value == 97);
  }
}

TEST(Contrastive, UniformOverNeighbours) {
  // target 100, radius 1: chi-square with one degree of freedom at n = 10000.
  const TargetConfig cfg(1.0, digits_sq());
  Rng rng(2024);
  std::map<std::int64_t, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) counts[sample_contrastive(cfg, 100, 1, rng, {3, 10}).negative_value]++;
  ASSERT_EQ(counts.size(), 2u);
  const double e = n / 2.0;
  const double chi2 = std::pow(counts[99] - e, 2) / e + std::pow(counts[101] - e, 2) / e;
  EXPECT_LT(chi2, 6.635);  // p > 0.01
}

TEST(Contrastive, CannotSampleFromSingleValueRange) {
  const TargetConfig cfg(1.0, digits_sq());
  Rng rng(1);
  try {
    sample_contrastive(cfg, 0, 1, rng, {0, 10});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::cannot_sample);
  }
}

TEST(ExtendTarget, ZeroDistanceSlotMatchesTarget) {
  const TargetConfig cfg(1.0, digits_sq());
  const auto base = build_target(cfg, 4);
  const auto plan = make_contrastive_plan(40, 39, {2, 10}, cfg.metric.subset());
  const auto ext = extend_with_contrastive(base, plan, 0, cfg);
  ASSERT_EQ(ext.probs.size(), 11u);
  EXPECT_EQ(ext.probs[10], ext.probs[4]);
  EXPECT_EQ(ext.negative_token, 3);
  EXPECT_NEAR(sum(ext.probs), 1.0, 1e-12);
}

TEST(ExtendTarget, DistanceOneSlotEqualsNeighbour) {
  const TargetConfig cfg(1.0, digits_sq());
  const auto base = build_target(cfg, 5);
  ContrastivePlan plan;
  plan.negative_sequence = {7};
  plan.per_position_distance = {1.0};
  const auto ext = extend_with_contrastive(base, plan, 0, cfg);
  EXPECT_DOUBLE_EQ(ext.probs[10], ext.probs[4]);
  EXPECT_DOUBLE_EQ(ext.probs[10], ext.probs[6]);
}

TEST(ExtendTarget, InfiniteDistanceLeavesBase) {
  const TargetConfig cfg(1.0, digits_sq());
  const auto base = build_target(cfg, 5);
  ContrastivePlan plan;
  plan.negative_sequence = {1};
  plan.per_position_distance = {1e300};
  const auto ext = extend_with_contrastive(base, plan, 0, cfg);
  EXPECT_EQ(ext.probs[10], 0.0);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(ext.probs[i], base.probs[i], 1e-15);
  EXPECT_THROW(extend_with_contrastive(base, plan, 1, cfg), Error);
}

TEST(ExtendTarget, LikelihoodNormalized) {
  const std::vector<double> z = {0.3, -1.0, 2.0};
  const auto q = extended_likelihood(z, 0.5);
  ASSERT_EQ(q.size(), 4u);
  EXPECT_NEAR(sum(q), 1.0, 1e-15);
  EXPECT_GT(q[2], q[3]);
}

TEST(PlaceWeights, Examples) {
  EXPECT_EQ(place_weights_for(4).weights, (std::vector<double>{4, 3, 2, 1}));
  EXPECT_EQ(place_weights_for(1).weights, (std::vector<double>{1}));
  const auto six = place_weights_for(6).weights;
  EXPECT_EQ(six, (std::vector<double>{6, 5, 4, 3, 2, 1}));
  EXPECT_EQ(std::vector<double>(six.end() - 4, six.end()), place_weights_for(4).weights);
  EXPECT_THROW(place_weights_for(0), Error);
}

TEST(PlaceWeights, DecimalModes) {
  EXPECT_EQ(place_weights_for_decimal(1, 3, FractionWeighting::uniform).weights, (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(place_weights_for_decimal(2, 2, FractionWeighting::uniform).weights, (std::vector<double>{2, 1, 1, 1}));
  EXPECT_EQ(place_weights_for_decimal(1, 3, FractionWeighting::significance).weights,
            (std::vector<double>{4, 3, 2, 1}));
}

TEST(TargetProperties, RandomisedSweep) {
  Rng rng(77);
  for (int inst = 0; inst < 300; ++inst) {
    const std::size_t m = 2 + static_cast<std::size_t>(rng.below(200));
    std::vector<double> vals(m);
    for (std::size_t i = 0; i < m; ++i) vals[i] = static_cast<double>(i) + rng.uniform(0.0, 0.5);
    const MetricSpec spec(MetricKind::absolute_scalar, VocabSubset(m, VocabSubset::iota(m, m).token_ids(), vals));
    const double taus[] = {1e-3, 1.0, 1e3};
    const TokenId t = static_cast<TokenId>(rng.below(m));
    const auto row = spec.distance_row(t);
    for (double tau : taus) {
      const auto p = build_target(TargetConfig(tau, spec), t).probs;
      EXPECT_NEAR(sum(p), 1.0, 1e-12);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
          if (row[i] < row[j] && p[j] > 0.0) {
            ASSERT_GT(p[i], p[j]);
          }
      std::vector<double> shifted = row;
      for (double& x : shifted) x += 3.5;
      const auto q = boltzmann(shifted, tau);
      for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
    }
  }
}
