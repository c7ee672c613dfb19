#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "barstyle/metrics.hpp"
#include "support.hpp"

using namespace barstyle;

namespace {

std::vector<double> unit(int n, int i) {
  std::vector<double> v(n, 0.0);
  v[i] = 1;
  return v;
}

/// Rank of x_i = 1 + #(x_j < x_i) + (#(x_j == x_i, j != i)) / 2, then Pearson on ranks.
double brute_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto rank = [](const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        if (x[j] < x[i]) ++less;
        if (j != i && x[j] == x[i]) ++equal;
      }
      r[i] = 1 + less + equal / 2;
    }
    return r;
  };
  auto ra = rank(a), rb = rank(b);
  double n = a.size(), ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += ra[i] / n, mb += rb[i] / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

}  // namespace

TEST(Similarity, ChromaExamples) {
  std::vector<double> a(12, 0.0), b(12, 0.0);
  a[0] = a[1] = 1;
  b[0] = 1;
  EXPECT_NEAR(sim_chr(a, b), 100 / std::sqrt(2.0), 1e-9);
  EXPECT_DOUBLE_EQ(sim_chr(a, a), 100.0);
  EXPECT_DOUBLE_EQ(sim_chr(unit(12, 2), unit(12, 5)), 0.0);
}

TEST(Similarity, ZeroVectorConvention) {
  std::vector<double> z(16, 0.0);
  EXPECT_DOUBLE_EQ(sim_grv(z, z), 100.0);
  EXPECT_DOUBLE_EQ(sim_grv(z, unit(16, 3)), 0.0);
  EXPECT_DOUBLE_EQ(sim_grv(unit(16, 3), z), 0.0);
}

TEST(Similarity, GroovingIsScaleInvariant) {
  std::vector<double> g = {1, 0, 2, 0, 1, 0, 0, 3, 0, 0, 0, 1, 0, 0, 2, 0};
  std::vector<double> g3;
  for (double v : g) g3.push_back(3 * v);
  EXPECT_NEAR(sim_grv(g, g3), 100.0, 1e-9);
  EXPECT_DOUBLE_EQ(sim_grv(unit(16, 0), unit(16, 4)), 0.0);
}

TEST(Similarity, InstrumentExamples) {
  std::vector<double> a(17, 1.0), b(17, 1.0), c(17, 0.0);
  b[4] = 0;
  EXPECT_DOUBLE_EQ(sim_ins(a, a), 100.0);
  EXPECT_NEAR(sim_ins(a, b), 100.0 * 16 / 17, 1e-9);
  EXPECT_NEAR(sim_ins(a, b), 94.12, 0.005);
  EXPECT_DOUBLE_EQ(sim_ins(a, c), 0.0);
  EXPECT_THROW(sim_ins(a, std::vector<double>(16, 1.0)), LengthMismatch);
}

TEST(Similarity, SymmetricBoundedAndMaximalOnIdentity) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> cnt(0, 3);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> a(12), b(12);
    for (auto& v : a) v = cnt(rng);
    for (auto& v : b) v = cnt(rng);
    double s = sim_chr(a, b);
    ASSERT_GE(s, 0);
    ASSERT_LE(s, 100);
    ASSERT_DOUBLE_EQ(s, sim_chr(b, a));
    ASSERT_NEAR(sim_chr(a, a), 100, 1e-9);
    std::vector<double> a2;
    for (double v : a) a2.push_back(2.5 * v);
    ASSERT_NEAR(sim_chr(a2, b), s, 1e-9);
  }
}

TEST(SelfSimilarity, IdentityAndDiagonal) {
  std::mt19937_64 rng(4);
  auto q = testsupport::random_score(rng, 4);
  EXPECT_DOUBLE_EQ(dist_ssm(q, q), 0.0);
  auto feats = half_beat_chroma(q);
  auto S = self_similarity(q);
  ASSERT_EQ(S.size(), 32u);
  for (std::size_t i = 0; i < S.size(); ++i) {
    bool silent = std::all_of(feats[i].begin(), feats[i].end(), [](double v) { return v == 0; });
    if (!silent) EXPECT_NEAR(S[i][i], 1.0, 1e-12);
    for (std::size_t j = 0; j < S.size(); ++j) {
      EXPECT_EQ(S[i][j], S[j][i]);
      EXPECT_GE(S[i][j], 0.0);
      EXPECT_LE(S[i][j], 1.0);
    }
  }
}

TEST(SelfSimilarity, ExtremeMatricesAreHundredApart) {
  std::vector<std::vector<double>> zeros(8, std::vector<double>(8, 0.0)), ones(8, std::vector<double>(8, 1.0));
  EXPECT_DOUBLE_EQ(ssm_distance(zeros, ones), 100.0);
  QuantizedScore a, b;
  a.bars.resize(2);
  b.bars.resize(3);
  EXPECT_THROW(dist_ssm(a, b), LengthMismatch);
}

TEST(SelfSimilarity, SustainedNoteFillsLaterHalfBeats) {
  QuantizedScore q;
  q.bars.resize(2);
  q.bars[0].notes.push_back({12, 60, 10, 8});  // half-beats 6..9 (spills into the next bar)
  auto f = half_beat_chroma(q);
  for (int h = 0; h < 16; ++h) EXPECT_EQ(f[h][0], (h >= 6 && h <= 9) ? 1.0 : 0.0) << h;
}

TEST(QualityKl, WorkedHistogramExample) {
  // p = (0.5, 0.5, 0, ...) and q = (0.25, 0.75, 0, ...) as raw counts
  std::vector<double> p(50, 0.0), q(50, 0.0);
  p[0] = 2, p[1] = 2;
  q[0] = 1, q[1] = 3;
  EXPECT_NEAR(kl_divergence(p, q), 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-4);
  EXPECT_NEAR(kl_divergence(p, q), 0.1438, 1e-4);
}

TEST(QualityKl, IdenticalSetsGiveZeroAndAlwaysNonnegative) {
  std::mt19937_64 rng(6);
  std::vector<QuantizedScore> a, b;
  for (int i = 0; i < 3; ++i) a.push_back(testsupport::random_score(rng, 6));
  for (int i = 0; i < 3; ++i) b.push_back(testsupport::random_score(rng, 6, 16, 0.4));
  for (auto f : {SimFeature::Chroma, SimFeature::Grooving, SimFeature::Instrument}) {
    EXPECT_NEAR(kl_quality(a, a, f), 0.0, 1e-12);
    EXPECT_GE(kl_quality(a, b, f), 0.0);
  }
  EXPECT_GT(kl_quality(a, b, SimFeature::Grooving), 0.0);
  EXPECT_THROW(kl_quality({}, a, SimFeature::Chroma), EmptySet);
  EXPECT_EQ(histogram100({0, 1.99, 2, 100}, 50), ([] {
              std::vector<double> h(50, 0.0);
              h[0] = 2, h[1] = 1, h[49] = 1;
              return h;
            })());
}

TEST(Spearman, MonotoneExtremes) {
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{10, 20, 30, 40}), 1.0, 1e-12);
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}), -1.0, 1e-12);
}

TEST(Spearman, TiesMatchBruteForceOracle) {
  std::vector<double> a = {1, 2, 2, 3}, s = {10, 20, 20, 15};
  EXPECT_NEAR(spearman(a, s), brute_spearman(a, s), 1e-12);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> cls(0, 7);
  std::normal_distribution<double> n01(0, 1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x, y;
    for (int i = 0; i < 25; ++i) {
      x.push_back(cls(rng));
      y.push_back(std::round(x.back() + 3 * n01(rng)));
    }
    ASSERT_NEAR(spearman(x, y), brute_spearman(x, y), 1e-12);
    // invariance under strictly increasing transforms
    std::vector<double> ex, cy;
    for (double v : x) ex.push_back(std::exp(v));
    for (double v : y) cy.push_back(v * v * v + 5);
    ASSERT_NEAR(spearman(ex, cy), spearman(x, y), 1e-12);
  }
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DegenerateInput);
  EXPECT_THROW(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), LengthMismatch);
}

TEST(Perplexity, ReferenceValues) {
  EXPECT_NEAR(perplexity(std::vector<double>(100, std::log(1.0 / 330))), 330.0, 1e-6);
  EXPECT_DOUBLE_EQ(perplexity(std::vector<double>(10, 0.0)), 1.0);
  EXPECT_NEAR(perplexity(std::vector<double>(7, std::log(0.5))), 2.0, 1e-12);
  EXPECT_THROW(perplexity({-1.0, -std::numeric_limits<double>::infinity()}), ZeroProbability);
  std::vector<double> lp = {-0.3, -2.0, -1.1}, twice = lp;
  twice.insert(twice.end(), lp.begin(), lp.end());
  EXPECT_NEAR(perplexity(twice), perplexity(lp), 1e-12);
}

TEST(Perplexity, UniformLanguageModel) {
  StackConfig sc;
  sc.layers = 1;
  sc.heads = 2;
  sc.d_model = sc.d_embed = 8;
  sc.d_ff = 8;
  sc.max_len = 64;
  LanguageModel lm(sc, 330, 1);
  // zero output weights and bias give uniform next-token probabilities
  for (std::size_t i = 0; i < lm.params().size(); ++i)
    if (lm.params()[i].name.rfind("lm.out.", 0) == 0) lm.params()[i].value.setZero();
  std::vector<int> tokens = {3, 10, 40, 200, 3, 17};
  EXPECT_NEAR(perplexity(lm, tokens), 330.0, 1e-6);
}

TEST(Fidelity, BarAlignedMean) {
  std::mt19937_64 rng(10);
  auto q = testsupport::random_score(rng, 5, 16, 0.3);
  EXPECT_NEAR(bar_fidelity(q, q, SimFeature::Chroma).mean, 100.0, 1e-9);
  EXPECT_NEAR(bar_fidelity(q, q, SimFeature::Grooving).mean, 100.0, 1e-9);
}
