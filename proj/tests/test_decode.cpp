#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "barstyle/decode.hpp"
#include "support.hpp"

using namespace barstyle;

namespace {

std::vector<double> log_of(const std::vector<double>& p) {
  std::vector<double> out;
  for (double v : p) out.push_back(std::log(v));
  return out;
}

VaeConfig tiny_config(const Vocab& vocab) {
  VaeConfig c = VaeConfig::toy(vocab.size());
  for (StackConfig* s : {&c.encoder, &c.decoder}) {
    s->layers = 1;
    s->heads = 2;
    s->d_model = 16;
    s->d_embed = 16;
    s->d_ff = 32;
  }
  c.encoder.max_len = 128;
  c.decoder.max_len = 1024;
  c.d_z = 4;
  c.d_attr = 4;
  return c;
}

TransferRequest request_for(const Vocab& vocab, int bars, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto q = testsupport::random_score(rng, bars, 16, 0.2);
  auto seq = tokenize(q, vocab);
  TransferRequest req;
  req.tokens = seq.tokens;
  req.source_rhythm.assign(bars, 3);
  req.source_polyphony.assign(bars, 4);
  req.sampling.max_bar_tokens = 24;
  req.sampling.seed = seed;
  return req;
}

}  // namespace

TEST(Nucleus, SupportOfTheWorkedExample) {
  EXPECT_EQ(nucleus_set({0.5, 0.3, 0.15, 0.05}, 0.9), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(nucleus_set({0.05, 0.15, 0.3, 0.5}, 0.9), (std::vector<int>{3, 2, 1}));
  EXPECT_EQ(nucleus_set({0.5, 0.3, 0.15, 0.05}, 1.0).size(), 4u);
  EXPECT_EQ(nucleus_set({0.5, 0.3, 0.15, 0.05}, 0.5), (std::vector<int>{0}));
}

TEST(Nucleus, EqualProbabilitiesBreakTiesByTokenId) {
  EXPECT_EQ(nucleus_set({0.25, 0.25, 0.25, 0.25}, 0.5), (std::vector<int>{0, 1}));
  EXPECT_EQ(nucleus_set({0.1, 0.3, 0.3, 0.3}, 0.6), (std::vector<int>{1, 2}));
}

TEST(Nucleus, DominantLogitIsAlwaysChosen) {
  std::mt19937_64 rng(1);
  std::vector<double> logits(10, -1e9);
  logits[7] = 1e9;
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(nucleus_sample(logits, 0.9, 1.2, rng), 7);
  EXPECT_THROW(nucleus_sample({0.0, std::nan("")}, 0.9, 1.0, rng), std::invalid_argument);
}

TEST(Nucleus, DrawsStayInTheNucleusWithMatchingFrequencies) {
  const std::vector<double> probs = {0.4, 0.25, 0.15, 0.1, 0.06, 0.04};
  for (auto [p, tau] : {std::pair{0.9, 1.0}, std::pair{0.8, 1.2}, std::pair{1.0, 0.7}}) {
    auto tempered = tempered_probs(log_of(probs), tau);
    auto support = nucleus_set(tempered, p);
    double mass = 0;
    for (int id : support) mass += tempered[id];
    std::mt19937_64 rng(99);
    const int N = 100000;
    std::map<int, int> counts;
    for (int i = 0; i < N; ++i) ++counts[nucleus_sample(log_of(probs), p, tau, rng)];
    for (auto [id, n] : counts) ASSERT_NE(std::find(support.begin(), support.end(), id), support.end()) << id;
    for (int id : support) {
      double q = tempered[id] / mass;
      double se = std::sqrt(q * (1 - q) / N);
      EXPECT_NEAR(static_cast<double>(counts[id]) / N, q, 3 * se) << "token " << id << " p=" << p << " tau=" << tau;
    }
  }
}

TEST(Nucleus, EntropyIsMonotoneInTemperature) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(30);
    for (double& v : logits) v = n01(rng);
    double prev = -1;
    for (double tau = 0.05; tau <= 20; tau *= 1.15) {
      double h = tempered_entropy(logits, tau);
      ASSERT_GE(h, prev - 1e-12);
      prev = h;
    }
    EXPECT_LE(prev, std::log(30.0) + 1e-12);
  }
}

TEST(Windows, ThirtyTwoBarsInWindowsOfSixteen) {
  auto plans = plan_windows(32, 16);
  ASSERT_EQ(plans.size(), 3u);
  EXPECT_EQ(plans[0].begin, 0u);
  EXPECT_EQ(plans[1].begin, 8u);
  EXPECT_EQ(plans[2].begin, 16u);
  std::vector<int> generated(32, 0);
  for (const auto& w : plans) {
    EXPECT_LE(w.end - w.begin, 16u);
    for (std::size_t k = w.begin + w.frozen; k < w.end; ++k) ++generated[k];
  }
  for (int c : generated) EXPECT_EQ(c, 1);
}

TEST(Windows, CoverageHoldsForAnyLength) {
  for (std::size_t K = 1; K <= 100; ++K)
    for (std::size_t W : {2u, 3u, 8u, 16u}) {
      std::vector<int> generated(K, 0);
      std::size_t prev_end = 0;
      for (const auto& w : plan_windows(K, W)) {
        ASSERT_EQ(w.begin + w.frozen, prev_end);
        ASSERT_LE(w.end - w.begin, W);
        for (std::size_t k = w.begin + w.frozen; k < w.end; ++k) ++generated[k];
        prev_end = w.end;
      }
      for (int c : generated) ASSERT_EQ(c, 1);
      if (K <= W) EXPECT_EQ(plan_windows(K, W).size(), 1u);
    }
}

TEST(Overrides, RelativeShiftClampsAtTheTop) {
  EXPECT_EQ(apply_overrides({7, 0, 3}, {AttributeOverride::parse("+2"), AttributeOverride::parse("-1"),
                                        AttributeOverride::parse("=5")}),
            (std::vector<int>{7, 0, 5}));
  EXPECT_EQ(apply_overrides({1, 2}, {}), (std::vector<int>{1, 2}));
  EXPECT_THROW(apply_overrides({1, 2}, {AttributeOverride::keep()}), LengthMismatch);
}

TEST(Transfer, KBarsInGivesKBarsOut) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 1);
  auto req = request_for(vocab, 6, 2);
  auto res = style_transfer(model, req);
  EXPECT_EQ(res.seq.num_bars(), 6u);
  EXPECT_EQ(make_token_seq(res.seq.tokens).bar_spans, res.seq.bar_spans);
  for (const auto& s : res.seq.bar_spans) EXPECT_LE(s.size(), 24u);
  EXPECT_EQ(res.target_rhythm, req.source_rhythm);
}

TEST(Transfer, SameSeedSameOutput) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 2);
  auto req = request_for(vocab, 5, 3);
  EXPECT_EQ(style_transfer(model, req).seq, style_transfer(model, req).seq);
  auto other = req;
  other.sampling.seed = 4;
  EXPECT_NE(style_transfer(model, other).seq, style_transfer(model, req).seq);
}

TEST(Transfer, ShortInputIgnoresTheWindow) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 3);
  auto req = request_for(vocab, 8, 5);
  req.window = 8;
  auto a = style_transfer(model, req);
  req.window = 64;
  EXPECT_EQ(style_transfer(model, req).seq, a.seq);
}

TEST(Transfer, TightCapTruncatesAndFlags) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 4);
  auto req = request_for(vocab, 4, 6);
  req.sampling.max_bar_tokens = 2;
  auto res = style_transfer(model, req);
  EXPECT_EQ(res.seq.num_bars(), 4u);
  EXPECT_FALSE(res.truncated_bars.empty());
  for (int k : res.truncated_bars) EXPECT_EQ(res.seq.bar_spans[k].size(), 2u);
}

TEST(Transfer, NinetySixBarsThroughTheSlidingWindow) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 5);
  auto req = request_for(vocab, 96, 7);
  req.sampling.max_bar_tokens = 12;
  auto res = style_transfer(model, req);
  EXPECT_EQ(res.seq.num_bars(), 96u);
  EXPECT_EQ(std::count(res.seq.tokens.begin(), res.seq.tokens.end(), Vocab::kBar), 96);
}

TEST(Transfer, PositionBudgetLimitsBarLength) {
  Vocab vocab(16);
  VaeConfig cfg = tiny_config(vocab);
  cfg.decoder.max_len = 40;
  StyleVae model(cfg, 6);
  auto req = request_for(vocab, 8, 8);
  req.sampling.max_bar_tokens = 256;
  auto res = style_transfer(model, req);
  EXPECT_EQ(res.seq.num_bars(), 8u);
  EXPECT_LE(res.seq.tokens.size(), 40u);
}
