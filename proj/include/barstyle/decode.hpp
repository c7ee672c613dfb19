/**
 * @file decode.hpp
 * @brief Nucleus sampling, bar-synchronous generation, style transfer and the sliding window.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "barstyle/attributes.hpp"
#include "barstyle/autodiff.hpp"
#include "barstyle/remi.hpp"
#include "barstyle/transformer.hpp"
#include "barstyle/vae.hpp"

namespace barstyle {

struct SamplingConfig {
  double p = 0.9;    ///< nucleus mass
  double tau = 1.2;  ///< softmax temperature
  std::uint64_t seed = 0;
  int max_bar_tokens = 256;  ///< per-bar cap, Bar token included

  void validate() const {
    if (!(p > 0 && p <= 1)) throw ConfigError("nucleus mass p must lie in (0, 1]");
    if (!(tau > 0)) throw ConfigError("temperature must be positive");
    if (max_bar_tokens < 2) throw ConfigError("max_bar_tokens must be >= 2");
  }
};

/// softmax(logits / tau), computed stably; entries at -inf get probability 0.
inline std::vector<double> tempered_probs(const std::vector<double>& logits, double tau) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  std::vector<double> p(logits.size(), 0.0);
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == -std::numeric_limits<double>::infinity()) continue;
    p[i] = std::exp((logits[i] - m) / tau);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

/**
 * Smallest prefix of the tokens sorted by descending probability (ties broken
 * by ascending id) whose cumulative mass reaches p. Zero-probability tokens are never included.
 */
inline std::vector<int> nucleus_set(const std::vector<double>& probs, double p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  std::vector<int> out;
  double cum = 0;
  for (int id : order) {
    if (probs[id] <= 0) break;
    out.push_back(id);
    cum += probs[id];
    if (cum >= p) break;
  }
  return out;
}

/// Draws from the renormalized nucleus of softmax(logits / tau).
inline int nucleus_sample(const std::vector<double>& logits, double p, double tau, std::mt19937_64& rng) {
  for (double v : logits)
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) throw std::invalid_argument("logits must be finite");
  auto probs = tempered_probs(logits, tau);
  auto support = nucleus_set(probs, p);
  if (support.empty()) throw std::invalid_argument("no token has positive probability");
  double mass = 0;
  for (int id : support) mass += probs[id];
  double r = std::uniform_real_distribution<double>(0.0, mass)(rng);
  for (int id : support) {
    r -= probs[id];
    if (r < 0) return id;
  }
  return support.back();
}

inline int nucleus_sample(const std::vector<double>& logits, const SamplingConfig& cfg, std::mt19937_64& rng) {
  return nucleus_sample(logits, cfg.p, cfg.tau, rng);
}

/// Shannon entropy (nats) of softmax(logits / tau).
inline double tempered_entropy(const std::vector<double>& logits, double tau) {
  double h = 0;
  for (double q : tempered_probs(logits, tau))
    if (q > 0) h -= q * std::log(q);
  return h;
}

// ---- bar-synchronous decoding ----------------------------------------------------

struct GeneratedBars {
  std::vector<std::vector<int>> bars;  ///< each starts with the Bar token
  std::vector<int> truncated;          ///< indices (into `bars`) that hit the per-bar cap
};

/**
 * Decodes bars [frozen.size(), total) of one window. `cond` holds one condition
 * row per window bar (unused by unconditional decoders). Frozen bars are fed as
 * fixed context. Bar framing is forced: when the model emits Bar (or the cap is hit)
 * decoding moves to the next bar and its condition row. PAD and BOS are never
 * sampled; EOS is only allowed in the final bar and ends it. The per-bar cap is
 * also limited so that every remaining bar fits in the decoder's position range.
 */
inline GeneratedBars decode_bars(const Decoder& dec, const ad::Matrix* cond, const std::vector<std::vector<int>>& frozen,
                                 std::size_t total, const SamplingConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (frozen.size() > total) throw std::invalid_argument("more frozen bars than bars in the window");
  if (cond && static_cast<std::size_t>(cond->rows()) < total) throw ShapeMismatch("fewer condition rows than bars");
  DecodeCache cache = dec.start(cond);
  auto row = [&](std::size_t k) {
    return cond ? ad::Matrix(cond->row(static_cast<Eigen::Index>(k))) : ad::Matrix();
  };
  GeneratedBars out;
  ad::Matrix logits;
  ad::Matrix ck;
  for (std::size_t k = 0; k < frozen.size(); ++k) {
    if (frozen[k].empty() || frozen[k][0] != Vocab::kBar) throw EmptyBar("frozen bar must start with Bar");
    ck = row(k);
    for (int t : frozen[k]) logits = dec.step(cache, t, cond ? &ck : nullptr);
    out.bars.push_back(frozen[k]);
  }
  for (std::size_t k = frozen.size(); k < total; ++k) {
    ck = row(k);
    const bool last = k + 1 == total;
    // share what is left of the position budget among the remaining bars
    const int budget = dec.config().stack.max_len - cache.length;
    const int cap = std::min(cfg.max_bar_tokens, budget / static_cast<int>(total - k));
    if (cap < 1) throw OOMGuard("frozen context leaves no room for the remaining bars");
    std::vector<int> bar{Vocab::kBar};
    logits = dec.step(cache, Vocab::kBar, cond ? &ck : nullptr);
    while (true) {
      if (static_cast<int>(bar.size()) >= cap) {
        out.truncated.push_back(static_cast<int>(k));
        break;
      }
      std::vector<double> l(logits.data(), logits.data() + logits.size());
      l[Vocab::kPad] = l[Vocab::kBos] = -std::numeric_limits<double>::infinity();
      if (!last) l[Vocab::kEos] = -std::numeric_limits<double>::infinity();
      int tok = nucleus_sample(l, cfg, rng);
      if (tok == Vocab::kBar || tok == Vocab::kEos) break;
      bar.push_back(tok);
      logits = dec.step(cache, tok, cond ? &ck : nullptr);
    }
    out.bars.push_back(std::move(bar));
  }
  return out;
}

/// Bar windows [begin, end) of width `window` and stride window/2 covering K bars.
struct WindowPlan {
  std::size_t begin, end;
  std::size_t frozen;  ///< leading bars of the window kept from the previous window
};

inline std::vector<WindowPlan> plan_windows(std::size_t K, std::size_t window) {
  if (window < 2) throw std::invalid_argument("window must be >= 2 bars");
  std::vector<WindowPlan> plans;
  const std::size_t stride = window / 2;
  std::size_t covered = 0;
  for (std::size_t s = 0; covered < K; s += stride) {
    std::size_t e = std::min(s + window, K);
    plans.push_back({s, e, covered - s});
    covered = e;
  }
  return plans;
}

/**
 * Sliding-window decoding over K condition rows: each window restarts positions,
 * re-feeds the previous window's overlap as frozen context, and generates the rest.
 */
inline GeneratedBars sliding_window_decode(const Decoder& dec, const ad::Matrix* cond, std::size_t K, std::size_t window,
                                           const SamplingConfig& cfg, std::mt19937_64& rng) {
  GeneratedBars all;
  for (const auto& w : plan_windows(K, window)) {
    std::vector<std::vector<int>> frozen(all.bars.begin() + static_cast<long>(w.begin),
                                         all.bars.begin() + static_cast<long>(w.begin + w.frozen));
    ad::Matrix sub;
    if (cond) sub = cond->middleRows(static_cast<Eigen::Index>(w.begin), static_cast<Eigen::Index>(w.end - w.begin));
    auto part = decode_bars(dec, cond ? &sub : nullptr, frozen, w.end - w.begin, cfg, rng);
    for (std::size_t i = w.frozen; i < part.bars.size(); ++i) all.bars.push_back(std::move(part.bars[i]));
    for (int t : part.truncated) all.truncated.push_back(t + static_cast<int>(w.begin));
  }
  return all;
}

/// Concatenates bars into a sequence in the tokenizer's layout (no EOS).
inline TokenSeq join_bars(const std::vector<std::vector<int>>& bars) {
  TokenSeq seq;
  for (const auto& b : bars) seq.tokens.insert(seq.tokens.end(), b.begin(), b.end());
  std::size_t pos = 0;
  for (const auto& b : bars) {
    seq.bar_spans.push_back({pos, pos + b.size()});
    pos += b.size();
  }
  return seq;
}

// ---- style transfer --------------------------------------------------------------

struct TransferRequest {
  std::vector<int> tokens;          ///< source REMI tokens
  std::vector<int> source_rhythm;   ///< per-bar source classes
  std::vector<int> source_polyphony;
  std::vector<AttributeOverride> rhythm;     ///< empty, or one per bar
  std::vector<AttributeOverride> polyphony;  ///< empty, or one per bar
  int window = 16;                           ///< bars per decoding window
  SamplingConfig sampling;
};

struct TransferResult {
  TokenSeq seq;  ///< K bars
  std::vector<int> target_rhythm;
  std::vector<int> target_polyphony;
  std::vector<int> truncated_bars;  ///< bars that hit the per-bar cap
};

inline std::vector<int> apply_overrides(const std::vector<int>& source, const std::vector<AttributeOverride>& ov) {
  if (ov.empty()) return source;
  if (ov.size() != source.size())
    throw LengthMismatch(std::to_string(ov.size()) + " overrides for " + std::to_string(source.size()) + " bars");
  std::vector<int> out(source.size());
  for (std::size_t k = 0; k < source.size(); ++k) out[k] = ov[k].apply(source[k]);
  return out;
}

/**
 * Encodes the source once (z = mu), conditions each bar on the overridden classes, and decodes.
 * `means` may supply the K x d_z posterior means computed earlier for the same source.
 */
inline TransferResult style_transfer(const StyleVae& model, const TransferRequest& req,
                                     const ad::Matrix* means = nullptr) {
  std::vector<int> source = req.tokens;
  while (!source.empty() && (source.back() == Vocab::kEos || source.back() == Vocab::kPad)) source.pop_back();
  TokenSeq src = make_token_seq(std::move(source));
  const std::size_t K = src.num_bars();
  if (K == 0) throw NoBars("source has no bars");
  if (req.source_rhythm.size() != K || req.source_polyphony.size() != K)
    throw LengthMismatch("source attribute classes do not match the bar count");
  TransferResult res;
  res.target_rhythm = apply_overrides(req.source_rhythm, req.rhythm);
  res.target_polyphony = apply_overrides(req.source_polyphony, req.polyphony);
  if (means && (static_cast<std::size_t>(means->rows()) != K || means->cols() != model.config().d_z))
    throw ShapeMismatch("cached latents are " + ad::shape_str(*means) + " for " + std::to_string(K) + " bars");
  ad::Matrix mu = means ? *means : model.encode_means(src.tokens, src.bar_spans);
  ad::Matrix cond = model.conditions(mu, res.target_rhythm, res.target_polyphony);
  std::mt19937_64 rng(req.sampling.seed);
  auto window = static_cast<std::size_t>(std::max(2, req.window));
  auto gen = sliding_window_decode(model.decoder(), &cond, K, window, req.sampling, rng);
  res.seq = join_bars(gen.bars);
  res.truncated_bars = gen.truncated;
  return res;
}

}  // namespace barstyle
