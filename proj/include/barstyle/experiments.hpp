/**
 * @file experiments.hpp
 * @brief End-to-end toy experiments: VAE training loop, attribute-control evaluation,
 *        and the segment-conditioning comparison.
 */
#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "barstyle/attributes.hpp"
#include "barstyle/corpus.hpp"
#include "barstyle/decode.hpp"
#include "barstyle/metrics.hpp"
#include "barstyle/remi.hpp"
#include "barstyle/transformer.hpp"
#include "barstyle/vae.hpp"

namespace barstyle {

// ---- VAE training ------------------------------------------------------------------

using StepCallback = std::function<void(const VaeStepStats&)>;

/// Runs steps [first_step, first_step + steps) of random-crop training.
inline void train_vae(StyleVae& model, VaeTrainer& trainer, const std::vector<AttributedSequence>& train, long first_step,
                      long steps, const StepCallback& on_step = {}) {
  const auto& tc = trainer.config();
  Vocab vocab(model.config().sub_beats_per_bar);
  CropSampler sampler(train, vocab, tc.crop_bars, tc.max_tokens, tc.transpose, tc.seed + static_cast<std::uint64_t>(first_step));
  std::vector<AttributedSequence> batch(tc.batch_size);
  for (long s = first_step; s < first_step + steps; ++s) {
    for (auto& b : batch) b = sampler.next();
    auto st = trainer.train_step(batch, s);
    if (on_step) on_step(st);
  }
}

// ---- attribute control ---------------------------------------------------------------

/**
 * `count` excerpts of `bars` bars from the pieces of one split: pieces are visited in a
 * seeded order (cycling when there are fewer pieces than excerpts), each excerpt
 * starting at a random bar. Pieces shorter than `bars` are used whole.
 */
inline std::vector<AttributedSequence> select_excerpts(const Corpus& corpus, Split split, int count, int bars,
                                                       std::uint64_t seed) {
  auto pieces = corpus.attributed(split);
  if (pieces.empty()) throw EmptySet(std::string("the ") + to_string(split) + " split is empty");
  if (count < 1 || bars < 1) throw std::invalid_argument("excerpt count and length must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pieces.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<AttributedSequence> out;
  for (int i = 0; i < count; ++i) {
    const auto& p = pieces[order[static_cast<std::size_t>(i) % order.size()]];
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(bars), p.num_bars());
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, p.num_bars() - n)(rng);
    out.push_back(p.crop(first, n));
  }
  return out;
}

struct ControlReport {
  double rho_rhym = 0;
  double rho_poly = 0;
  double rho_poly_given_rhym = 0;  ///< target rhythm class vs achieved polyphony score
  double rho_rhym_given_poly = 0;  ///< target polyphony class vs achieved rhythm score
  Summary fidelity_chr;
  Summary fidelity_grv;
  std::size_t samples = 0;
  std::size_t bars = 0;
  std::size_t truncated_bars = 0;
};

struct ControlProtocol {
  int attribute_sets = 5;  ///< random class assignments per excerpt
  int window = 16;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
};

/**
 * Setting #1: every excerpt is transferred under `attribute_sets` random per-bar
 * class assignments. Correlations are taken over all generated bars; fidelity is
 * the bar-aligned chroma/grooving similarity to the source.
 */
inline ControlReport evaluate_control(const StyleVae& model, const std::vector<AttributedSequence>& excerpts,
                                      const AttributeBins& bins, const ControlProtocol& proto) {
  if (excerpts.empty()) throw EmptySet("no excerpts to evaluate");
  Vocab vocab(model.config().sub_beats_per_bar);
  std::mt19937_64 rng(proto.seed);
  std::uniform_int_distribution<int> cls(0, kAttributeClasses - 1);
  std::vector<double> tr, tp, sr, sp, chr, grv;
  ControlReport rep;
  for (const auto& ex : excerpts) {
    QuantizedScore source = detokenize(ex.tokens, vocab).score;
    for (int set = 0; set < proto.attribute_sets; ++set) {
      TransferRequest req;
      req.tokens = ex.tokens;
      req.source_rhythm = ex.rhythm;
      req.source_polyphony = ex.polyphony;
      for (std::size_t k = 0; k < ex.num_bars(); ++k) {
        req.rhythm.push_back({AttributeOverride::Mode::Absolute, cls(rng)});
        req.polyphony.push_back({AttributeOverride::Mode::Absolute, cls(rng)});
      }
      req.window = proto.window;
      req.sampling = proto.sampling;
      req.sampling.seed = rng();
      TransferResult res = style_transfer(model, req);
      QuantizedScore gen = detokenize(res.seq.tokens, vocab).score;
      auto achieved = compute_attributes(gen, bins);
      for (std::size_t k = 0; k < achieved.size(); ++k) {
        tr.push_back(res.target_rhythm[k]);
        tp.push_back(res.target_polyphony[k]);
        sr.push_back(achieved[k].s_rhym);
        sp.push_back(achieved[k].s_poly);
      }
      chr.push_back(bar_fidelity(source, gen, SimFeature::Chroma).mean);
      grv.push_back(bar_fidelity(source, gen, SimFeature::Grooving).mean);
      rep.truncated_bars += res.truncated_bars.size();
      ++rep.samples;
    }
  }
  rep.bars = tr.size();
  // a constant side (e.g. every bar came out empty) has no rank correlation
  auto rho = [](const std::vector<double>& a, const std::vector<double>& b) {
    try {
      return spearman(a, b);
    } catch (const DegenerateInput&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  rep.rho_rhym = rho(tr, sr);
  rep.rho_poly = rho(tp, sp);
  rep.rho_poly_given_rhym = rho(tr, sp);
  rep.rho_rhym_given_poly = rho(tp, sr);
  rep.fidelity_chr = summarize(chr);
  rep.fidelity_grv = summarize(grv);
  return rep;
}

/// Setting #2: several generations per excerpt under one fixed (source) attribute set; mean pairwise similarity.
struct DiversityReport {
  Summary sim_chr;
  Summary sim_grv;
  std::size_t pairs = 0;
};

inline DiversityReport evaluate_diversity(const StyleVae& model, const std::vector<AttributedSequence>& excerpts,
                                          int versions, const ControlProtocol& proto) {
  Vocab vocab(model.config().sub_beats_per_bar);
  std::mt19937_64 rng(proto.seed ^ 0xd1ce);
  std::vector<double> chr, grv;
  for (const auto& ex : excerpts) {
    std::vector<QuantizedScore> gens;
    for (int v = 0; v < versions; ++v) {
      TransferRequest req;
      req.tokens = ex.tokens;
      req.source_rhythm = ex.rhythm;
      req.source_polyphony = ex.polyphony;
      req.window = proto.window;
      req.sampling = proto.sampling;
      req.sampling.seed = rng();
      gens.push_back(detokenize(style_transfer(model, req).seq.tokens, vocab).score);
    }
    for (int i = 0; i < versions; ++i)
      for (int j = i + 1; j < versions; ++j) {
        chr.push_back(bar_fidelity(gens[i], gens[j], SimFeature::Chroma).mean);
        grv.push_back(bar_fidelity(gens[i], gens[j], SimFeature::Grooving).mean);
      }
  }
  return {summarize(chr), summarize(grv), chr.size()};
}

/// Mean bar-aligned similarity over random pairs of distinct pieces.
inline std::pair<Summary, Summary> random_pair_baseline(const std::vector<QuantizedScore>& pieces, int pairs,
                                                        std::uint64_t seed) {
  if (pieces.size() < 2) throw EmptySet("need two pieces for random pairs");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  std::vector<double> chr, grv;
  for (int i = 0; i < pairs; ++i) {
    std::size_t a = pick(rng), b = pick(rng);
    while (b == a) b = pick(rng);
    chr.push_back(bar_fidelity(pieces[a], pieces[b], SimFeature::Chroma).mean);
    grv.push_back(bar_fidelity(pieces[a], pieces[b], SimFeature::Grooving).mean);
  }
  return {summarize(chr), summarize(grv)};
}

// ---- segment-level conditioning comparison -----------------------------------------

/// A decoder conditioned on fixed per-bar vectors (or unconditional), with its own parameters.
class SegmentModel {
 public:
  SegmentModel(const StackConfig& stack, ConditioningMode mode, int d_cond, int vocab_size, std::uint64_t seed)
      : mode_(mode), d_cond_(d_cond), vocab_size_(vocab_size) {
    std::mt19937_64 rng(seed);
    auto& emb = params_.add("embed.token", ad::gaussian_matrix(vocab_size, stack.d_embed, stack.init_std, rng));
    decoder_ = Decoder(params_, "decoder.", DecoderConfig{stack, mode, d_cond, vocab_size}, emb, rng);
  }
  SegmentModel(const SegmentModel&) = delete;
  SegmentModel& operator=(const SegmentModel&) = delete;
  SegmentModel(SegmentModel&&) noexcept = default;
  SegmentModel& operator=(SegmentModel&&) noexcept = default;

  ad::ParameterStore& params() { return params_; }
  const Decoder& decoder() const { return decoder_; }
  ConditioningMode mode() const { return mode_; }
  bool conditioned() const { return mode_ != ConditioningMode::Unconditional; }

  /// Mean next-token NLL given one condition row per bar.
  ad::Var loss(ad::Graph& g, const std::vector<int>& tokens, const std::vector<BarSpan>& spans, const ad::Matrix& cond,
               int final_target = Vocab::kEos) const {
    std::optional<ad::Var> c;
    if (conditioned()) c = g.input(cond);
    ad::Var logits = decoder_.forward(g, tokens, spans, c);
    return ad::cross_entropy(logits, LanguageModel::shifted_targets(tokens, final_target));
  }

  KeyValues config_kv() const {
    KeyValues kv;
    kv.set("model", std::string("segment_decoder"));
    kv.set("mode", std::string(to_string(mode_)));
    kv.set("d_cond", d_cond_);
    kv.set("vocab_size", vocab_size_);
    decoder_.config().stack.to_kv(kv, "stack.");
    return kv;
  }

  void save(const std::string& dir, long step) const { save_checkpoint(dir, config_kv(), step, params_); }

 private:
  ConditioningMode mode_;
  int d_cond_;
  int vocab_size_;
  ad::ParameterStore params_;
  Decoder decoder_;
};

struct SegmentExperimentConfig {
  int pieces = 200;
  int bars = 16;
  int sub_beats_per_bar = 32;
  std::uint64_t seed = 1;
  StackConfig stack;         ///< shared by the extractor and both decoders
  int extractor_layer = 1;   ///< pooled hidden layer of the extractor
  long extractor_steps = 3000;
  int extractor_batch = 8;   ///< bars per extractor step
  long decoder_steps = 15000;
  int crop_bars = 4;
  ad::LrSchedule lr{1e-3, 200, 15000, 5e-5};
  int recreation_pieces = 10;
  int random_pairs = 400;
  SamplingConfig sampling;
};

struct SegmentReport {
  double extractor_nll = 0;
  double nll_conditioned = 0;
  double nll_unconditional = 0;
  Summary recreate_chr, recreate_grv;
  Summary random_chr, random_grv;
  double seconds = 0;
};

/// K x d matrix of pooled extractor states, one row per bar.
inline ad::Matrix bar_embeddings(const LanguageModel& lm, const std::vector<int>& tokens, const std::vector<BarSpan>& spans,
                                 int layer) {
  ad::Matrix out(static_cast<Eigen::Index>(spans.size()), lm.config().d_model);
  for (std::size_t k = 0; k < spans.size(); ++k) {
    std::vector<int> bar(tokens.begin() + static_cast<long>(spans[k].begin), tokens.begin() + static_cast<long>(spans[k].end));
    out.row(static_cast<Eigen::Index>(k)) = lm.bar_embedding(bar, layer);
  }
  return out;
}

/// Piece with its per-bar condition rows.
struct ConditionedPiece {
  AttributedSequence seq;
  ad::Matrix cond;
};

namespace detail {

inline ConditionedPiece crop_conditioned(const ConditionedPiece& p, std::size_t first, std::size_t count) {
  return {p.seq.crop(first, count), p.cond.middleRows(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(count))};
}

/// Mean per-token NLL over consecutive non-overlapping crops of `crop` bars; the last token of a crop predicts the next Bar or EOS.
inline double windowed_nll(const SegmentModel& m, const std::vector<ConditionedPiece>& pieces, std::size_t crop) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& p : pieces) {
    const std::size_t K = p.seq.num_bars();
    for (std::size_t first = 0; first < K; first += crop) {
      std::size_t n = std::min(crop, K - first);
      auto c = crop_conditioned(p, first, n);
      ad::Graph g;
      int final_target = first + n < K ? Vocab::kBar : Vocab::kEos;
      total += m.loss(g, c.seq.tokens, c.seq.spans, c.cond, final_target).value()(0, 0) * static_cast<double>(c.seq.tokens.size());
      count += c.seq.tokens.size();
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace detail

/**
 * Trains a per-bar causal LM as the embedding extractor, then a conditioned and an
 * unconditional decoder on bar crops, and reports validation NLL and re-creation
 * fidelity against a random-pairs baseline.
 */
inline SegmentReport run_segment_experiment(const SegmentExperimentConfig& cfg, ConditioningMode mode = ConditioningMode::InAttention,
                                            const std::function<void(const std::string&)>& log = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  Corpus corpus = generate_synthetic({cfg.pieces, cfg.bars, cfg.sub_beats_per_bar, cfg.seed});
  Vocab vocab(cfg.sub_beats_per_bar);
  auto train = corpus.attributed(Split::Train), val = corpus.attributed(Split::Val), test = corpus.attributed(Split::Test);
  std::mt19937_64 rng(cfg.seed ^ 0x5e9);
  SegmentReport rep;

  // 1. extractor: causal LM over single bars, each bar predicting the next Bar token at its end
  std::vector<std::vector<int>> bars;
  for (const auto& p : train)
    for (const auto& s : p.spans) bars.emplace_back(p.tokens.begin() + static_cast<long>(s.begin), p.tokens.begin() + static_cast<long>(s.end));
  LanguageModel extractor(cfg.stack, vocab.size(), cfg.seed + 1);
  {
    ad::AdamState opt;
    opt.reset(extractor.params());
    std::uniform_int_distribution<std::size_t> pick(0, bars.size() - 1);
    double recent = 0;
    for (long step = 0; step < cfg.extractor_steps; ++step) {
      extractor.params().zero_grad();
      double nll = 0;
      for (int b = 0; b < cfg.extractor_batch; ++b) {
        ad::Graph g;
        ad::Var l = extractor.loss(g, bars[pick(rng)], Vocab::kBar);
        g.backward(ad::affine(l, 1.0 / cfg.extractor_batch));
        nll += l.value()(0, 0) / cfg.extractor_batch;
      }
      ad::adam_step(extractor.params(), opt, ad::lr_schedule(step, cfg.lr));
      recent = step == 0 ? nll : 0.98 * recent + 0.02 * nll;
      if ((step + 1) % 500 == 0) say("extractor step " + std::to_string(step + 1) + " nll " + std::to_string(recent));
    }
    rep.extractor_nll = recent;
  }
  auto attach = [&](const std::vector<AttributedSequence>& set) {
    std::vector<ConditionedPiece> out;
    for (const auto& p : set) out.push_back({p, bar_embeddings(extractor, p.tokens, p.spans, cfg.extractor_layer)});
    return out;
  };
  auto train_c = attach(train), val_c = attach(val), test_c = attach(test);

  // 2. decoders: identical data order and initialization seed; only the conditioning differs
  auto fit = [&](ConditioningMode m) {
    SegmentModel model(cfg.stack, m, cfg.stack.d_model, vocab.size(), cfg.seed + 2);
    ad::AdamState opt;
    opt.reset(model.params());
    std::mt19937_64 order(cfg.seed + 3);
    std::uniform_int_distribution<std::size_t> pick(0, train_c.size() - 1);
    double recent = 0;
    for (long step = 0; step < cfg.decoder_steps; ++step) {
      const auto& p = train_c[pick(order)];
      std::size_t n = std::min<std::size_t>(cfg.crop_bars, p.seq.num_bars());
      std::size_t first = std::uniform_int_distribution<std::size_t>(0, p.seq.num_bars() - n)(order);
      auto c = detail::crop_conditioned(p, first, n);
      model.params().zero_grad();
      ad::Graph g;
      int final_target = first + n < p.seq.num_bars() ? Vocab::kBar : Vocab::kEos;
      ad::Var l = model.loss(g, c.seq.tokens, c.seq.spans, c.cond, final_target);
      g.backward(l);
      ad::adam_step(model.params(), opt, ad::lr_schedule(step, cfg.lr));
      recent = step == 0 ? l.value()(0, 0) : 0.98 * recent + 0.02 * l.value()(0, 0);
      if ((step + 1) % 1000 == 0)
        say(std::string(to_string(m)) + " step " + std::to_string(step + 1) + " nll " + std::to_string(recent));
    }
    return model;
  };
  SegmentModel conditioned = fit(mode);
  rep.nll_conditioned = detail::windowed_nll(conditioned, val_c, cfg.crop_bars);
  {
    SegmentModel plain = fit(ConditioningMode::Unconditional);
    rep.nll_unconditional = detail::windowed_nll(plain, val_c, cfg.crop_bars);
  }

  // 3. re-creation: generate each test piece from its own bar embeddings
  std::vector<double> chr, grv;
  std::mt19937_64 sample_rng(cfg.seed + 4);
  const std::size_t n_test = std::min<std::size_t>(cfg.recreation_pieces, test_c.size());
  for (std::size_t i = 0; i < n_test; ++i) {
    const auto& p = test_c[i];
    auto gen = sliding_window_decode(conditioned.decoder(), &p.cond, p.seq.num_bars(), static_cast<std::size_t>(cfg.crop_bars),
                                     cfg.sampling, sample_rng);
    QuantizedScore a = detokenize(p.seq.tokens, vocab).score, b = detokenize(join_bars(gen.bars).tokens, vocab).score;
    chr.push_back(bar_fidelity(a, b, SimFeature::Chroma).mean);
    grv.push_back(bar_fidelity(a, b, SimFeature::Grooving).mean);
  }
  rep.recreate_chr = summarize(chr);
  rep.recreate_grv = summarize(grv);
  std::vector<QuantizedScore> train_scores;
  for (const auto& p : train) train_scores.push_back(detokenize(p.tokens, vocab).score);
  std::tie(rep.random_chr, rep.random_grv) = random_pair_baseline(train_scores, cfg.random_pairs, cfg.seed + 5);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace barstyle
