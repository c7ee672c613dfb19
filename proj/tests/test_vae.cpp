#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "barstyle/vae.hpp"
#include "support.hpp"

using namespace barstyle;

namespace {

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
  c.decoder.max_len = 512;
  c.d_z = 4;
  c.d_attr = 4;
  return c;
}

std::vector<AttributedSequence> random_pieces(const Vocab& vocab, int count, int bars, std::uint64_t seed,
                                               double note_p = 0.08) {
  std::mt19937_64 rng(seed);
  std::vector<AttributedSequence> out;
  std::uniform_int_distribution<int> cls(0, kAttributeClasses - 1);
  while (static_cast<int>(out.size()) < count) {
    auto q = testsupport::random_score(rng, bars, 16, note_p);
    auto seq = tokenize(q, vocab);
    AttributedSequence a{seq.tokens, seq.bar_spans, {}, {}};
    for (int k = 0; k < bars; ++k) {
      a.rhythm.push_back(cls(rng));
      a.polyphony.push_back(cls(rng));
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace

TEST(Latent, ClosedFormKlMatchesMonteCarlo) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01(0, 1);
  for (auto [mu, sigma] : {std::pair{0.7, 0.4}, std::pair{-1.5, 1.8}, std::pair{0.0, 0.2}}) {
    const int N = 400000;
    double acc = 0;
    for (int i = 0; i < N; ++i) {
      double x = mu + sigma * n01(rng);
      double log_q = -0.5 * std::pow((x - mu) / sigma, 2) - std::log(sigma);
      double log_p = -0.5 * x * x;
      acc += log_q - log_p;
    }
    double mc = acc / N;
    double closed = kl_per_dim({mu}, {sigma})[0];
    EXPECT_NEAR(closed, mc, 0.01 * closed) << mu << " " << sigma;
  }
  EXPECT_DOUBLE_EQ(kl_per_dim({0.0}, {1.0})[0], 0.0);
}

TEST(Latent, FreeBitsFloorAndZeroGradientBelowIt) {
  EXPECT_DOUBLE_EQ(free_bits_kl({0.1, 0.5, 0.0}, 0.25), 0.25 + 0.5 + 0.25);
  ad::Graph g;
  ad::Matrix mu(2, 3), sigma(2, 3);
  mu << 0.1, -0.2, 0.05, 0.0, 0.3, -0.1;
  sigma << 0.9, 1.1, 1.0, 0.95, 1.05, 0.85;
  ad::Var m = g.input(mu, true), s = g.input(sigma, true);
  ad::Var kl = kl_per_dim(m, s);
  ASSERT_LT(kl.value().maxCoeff(), 0.25);
  ad::Var loss = free_bits_kl(kl, 0.25);
  EXPECT_DOUBLE_EQ(loss.value()(0, 0), 0.25 * 3);
  g.backward(loss);
  EXPECT_EQ(m.grad().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(s.grad().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Latent, GraphKlMatchesScalarFormula) {
  ad::Graph g;
  ad::Matrix mu(1, 2), sigma(1, 2);
  mu << 1.2, -0.4;
  sigma << 0.3, 2.0;
  ad::Var kl = kl_per_dim(g.input(mu), g.input(sigma));
  auto ref = kl_per_dim({1.2, -0.4}, {0.3, 2.0});
  EXPECT_NEAR(kl.value()(0, 0), ref[0], 1e-12);
  EXPECT_NEAR(kl.value()(0, 1), ref[1], 1e-12);
}

TEST(Latent, ReparameterizedSamplesHaveRequestedMoments) {
  std::mt19937_64 rng(5);
  ad::Graph g;
  const int N = 200000;
  ad::Matrix mu = ad::Matrix::Constant(N, 1, 1.5), sigma = ad::Matrix::Constant(N, 1, 0.5);
  ad::Var z = ad::reparameterize(g.input(mu), g.input(sigma), ad::standard_normal(N, 1, rng));
  double mean = z.value().mean();
  double var = (z.value().array() - mean).square().sum() / (N - 1);
  EXPECT_NEAR(mean, 1.5, 3 * 0.5 / std::sqrt(N));
  EXPECT_NEAR(var, 0.25, 3 * 0.25 * std::sqrt(2.0 / (N - 1)));
}

TEST(KlWeight, CyclicalScheduleReferencePoints) {
  KlSchedule s;  // beta_max 1, cycle 5000, kl_free 10000
  EXPECT_EQ(beta_schedule(0, s), 0.0);
  EXPECT_EQ(beta_schedule(9999, s), 0.0);
  EXPECT_EQ(beta_schedule(10000, s), 0.0);
  EXPECT_DOUBLE_EQ(beta_schedule(11250, s), 0.5);
  EXPECT_DOUBLE_EQ(beta_schedule(12500, s), 1.0);
  EXPECT_DOUBLE_EQ(beta_schedule(14999, s), 1.0);
  EXPECT_EQ(beta_schedule(15000, s), 0.0);
  EXPECT_DOUBLE_EQ(beta_schedule(16250, s), 0.5);
  s.beta_max = 0.5;
  EXPECT_DOUBLE_EQ(beta_schedule(12500, s), 0.5);
  for (long t = 10000; t < 30000; t += 37) {
    double b = beta_schedule(t, s);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, s.beta_max);
  }
}

TEST(Model, UntrainedReconstructionIsNearUniform) {
  Vocab vocab(16);
  VaeConfig cfg = tiny_config(vocab);
  cfg.encoder.init_std = cfg.decoder.init_std = 0.001;
  StyleVae model(cfg, 3);
  auto pieces = random_pieces(vocab, 3, 4, 8);
  EXPECT_NEAR(reconstruction_nll(model, pieces), std::log(vocab.size()), 0.01);
}

TEST(Model, ZeroBetaLossIsReconstructionAlone) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 4);
  auto p = random_pieces(vocab, 1, 3, 9)[0];
  std::mt19937_64 rng(1);
  ad::Graph g;
  auto f = model.forward(g, p, 0.0, 0.25, &rng);
  EXPECT_EQ(f.loss.value()(0, 0), f.nll.value()(0, 0));
  ad::Graph g2;
  std::mt19937_64 rng2(1);
  auto f2 = model.forward(g2, p, 0.5, 0.25, &rng2);
  EXPECT_NEAR(f2.loss.value()(0, 0), f2.nll.value()(0, 0) + 0.5 * f2.kl_clamped.value()(0, 0), 1e-12);
  EXPECT_GE(f2.kl_clamped.value()(0, 0), 0.25 * model.config().d_z - 1e-12);
  EXPECT_EQ(f.mu.rows(), 3);
  EXPECT_EQ(f.sigma.value().minCoeff() > 0, true);
}

TEST(Model, ConditionsConcatenateLatentAndAttributeEmbeddings) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 5);
  ad::Matrix z = ad::Matrix::Random(2, 4);
  ad::Matrix c = model.conditions(z, {0, 7}, {3, 3});
  ASSERT_EQ(c.cols(), model.config().d_cond());
  EXPECT_EQ(c.leftCols(4), z);
  EXPECT_EQ(c.block(0, 8, 1, 4), c.block(1, 8, 1, 4));  // same polyphony class
  EXPECT_NE(c.block(0, 4, 1, 4), c.block(1, 4, 1, 4));
  EXPECT_THROW(model.conditions(z, {0, 8}, {0, 0}), std::invalid_argument);
  EXPECT_THROW(model.conditions(z, {0}, {0, 0}), LengthMismatch);
}

TEST(Model, EncodingOfABarIgnoresOtherBars) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 6);
  auto p = random_pieces(vocab, 1, 3, 10)[0];
  ad::Matrix full = model.encode_means(p.tokens, p.spans);
  auto middle = p.crop(1, 1);
  ad::Matrix alone = model.encode_means(middle.tokens, middle.spans);
  EXPECT_LT((full.row(1) - alone.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, OverlongBarsAreTruncatedForEncodingOnly) {
  Vocab vocab(16);
  VaeConfig cfg = tiny_config(vocab);
  cfg.encoder.max_len = 8;
  StyleVae model(cfg, 7);
  auto p = random_pieces(vocab, 1, 2, 12, 0.3)[0];
  ASSERT_GT(p.spans[0].size(), 8u);
  ad::Matrix mu = model.encode_means(p.tokens, p.spans);
  std::vector<int> head(p.tokens.begin(), p.tokens.begin() + 8);
  ad::Matrix mu_head = model.encode_means(head, {{0, 8}});
  EXPECT_LT((mu.row(0) - mu_head.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, CheckpointRestoresIdenticalBehaviour) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 8);
  auto dir = (std::filesystem::temp_directory_path() / "barstyle_vae_ckpt").string();
  std::filesystem::remove_all(dir);
  model.save(dir, 17);
  CheckpointData data;
  StyleVae back = StyleVae::load(dir, nullptr, &data);
  EXPECT_EQ(data.step, 17);
  EXPECT_EQ(back.config().to_kv().to_text(), model.config().to_kv().to_text());
  auto p = random_pieces(vocab, 1, 2, 13)[0];
  EXPECT_LT((back.encode_means(p.tokens, p.spans) - model.encode_means(p.tokens, p.spans)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Sampler, CropsFitBudgetsAndStayInVocabulary) {
  Vocab vocab(16);
  auto pieces = random_pieces(vocab, 5, 10, 14);
  CropSampler sampler(pieces, vocab, 4, 200, 6, 3);
  for (int i = 0; i < 100; ++i) {
    auto s = sampler.next();
    ASSERT_LE(s.num_bars(), 4u);
    ASSERT_LE(s.tokens.size(), 200u);
    ASSERT_EQ(s.rhythm.size(), s.num_bars());
    EXPECT_EQ(s.spans.front().begin, 0u);
    EXPECT_EQ(s.spans.back().end, s.tokens.size());
    for (int t : s.tokens) ASSERT_TRUE(t >= 0 && t < vocab.size());
    auto back = detokenize(s.tokens, vocab);
    EXPECT_EQ(back.skipped, 0);
  }
  std::vector<AttributedSequence> none;
  EXPECT_THROW(CropSampler(none, vocab, 4, 200, 6, 3), EmptyCorpus);
}

TEST(Trainer, RejectsOversizedSamples) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 9);
  VaeTrainConfig tc;
  tc.max_tokens = 10;
  VaeTrainer trainer(model, tc);
  auto p = random_pieces(vocab, 1, 3, 15, 0.3);
  EXPECT_THROW(trainer.train_step(p, 0), OOMGuard);
}

TEST(Trainer, LossFallsOnASmallCorpus) {
  Vocab vocab(16);
  StyleVae model(tiny_config(vocab), 10);
  auto pieces = random_pieces(vocab, 10, 4, 16);
  VaeTrainConfig tc;
  tc.batch_size = 2;
  tc.crop_bars = 4;
  tc.lr = {3e-3, 20, 100000, 1e-4};
  tc.kl = {1.0, 200, 100};
  VaeTrainer trainer(model, tc);
  CropSampler sampler(pieces, vocab, tc.crop_bars, tc.max_tokens, 0, 1);
  double before = reconstruction_nll(model, pieces);
  for (long step = 0; step < 300; ++step) {
    std::vector<AttributedSequence> batch{sampler.next(), sampler.next()};
    auto st = trainer.train_step(batch, step);
    ASSERT_TRUE(std::isfinite(st.nll));
    EXPECT_EQ(st.beta, beta_schedule(step, tc.kl));
  }
  double after = reconstruction_nll(model, pieces);
  EXPECT_LT(after, before - 1.0);
  EXPECT_EQ(trainer.optimizer().step, 300);
}
