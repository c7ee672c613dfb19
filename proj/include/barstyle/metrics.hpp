/**
 * @file metrics.hpp
 * @brief Bar similarities, self-similarity distance, histogram KL, Spearman's rho, perplexity.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "barstyle/error.hpp"
#include "barstyle/score.hpp"
#include "barstyle/transformer.hpp"

namespace barstyle {

/// Onset counts per pitch class.
inline std::vector<double> chroma_vector(const Bar& bar) {
  std::vector<double> r(12, 0.0);
  for (const auto& n : bar.notes) r[n.pitch % 12] += 1;
  return r;
}

/// Onset counts per sub-beat (length B).
inline std::vector<double> grooving_vector(const Bar& bar, int B) {
  std::vector<double> g(B, 0.0);
  for (const auto& n : bar.notes)
    if (n.sub_beat >= 0 && n.sub_beat < B) g[n.sub_beat] += 1;
  return g;
}

/// Track presence of a single-instrument bar: the first entry marks whether it has notes.
inline std::vector<double> track_presence(const Bar& bar, int n_tracks = 1) {
  if (n_tracks < 1) throw std::invalid_argument("n_tracks must be >= 1");
  std::vector<double> b(n_tracks, 0.0);
  b[0] = bar.notes.empty() ? 0.0 : 1.0;
  return b;
}

/// 100 x cosine similarity; both zero -> 100, exactly one zero -> 0.
inline double cosine100(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw LengthMismatch("vectors differ in length");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 && nb == 0) return 100.0;
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(100.0 * dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 100.0);
}

inline double sim_chr(const std::vector<double>& a, const std::vector<double>& b) { return cosine100(a, b); }
inline double sim_grv(const std::vector<double>& a, const std::vector<double>& b) { return cosine100(a, b); }

/// 100 * (1 - Hamming distance / n_tracks) on binary presence vectors.
inline double sim_ins(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw LengthMismatch("presence vectors differ in length");
  if (a.empty()) throw EmptySet("empty presence vectors");
  int diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] != 0) != (b[i] != 0);
  return 100.0 * (1.0 - static_cast<double>(diff) / static_cast<double>(a.size()));
}

inline double sim_chr(const Bar& a, const Bar& b) { return sim_chr(chroma_vector(a), chroma_vector(b)); }
inline double sim_grv(const Bar& a, const Bar& b, int B) { return sim_grv(grooving_vector(a, B), grooving_vector(b, B)); }

// ---- self-similarity ---------------------------------------------------------------

/// Pitch-class counts of the notes sounding in each half-beat (8 per bar); rows = half-beats.
inline std::vector<std::vector<double>> half_beat_chroma(const QuantizedScore& q) {
  const int B = q.sub_beats_per_bar;
  const int per_unit = q.sub_beats_per_unit();
  const int hb = B / 8;
  const std::size_t N = q.bars.size() * 8;
  std::vector<std::vector<double>> feats(N, std::vector<double>(12, 0.0));
  for (std::size_t k = 0; k < q.bars.size(); ++k) {
    for (const auto& n : q.bars[k].notes) {
      long start = static_cast<long>(k) * B + n.sub_beat;
      long end = start + static_cast<long>(n.duration) * per_unit;
      for (long h = start / hb; h * hb < end && h < static_cast<long>(N); ++h) feats[h][n.pitch % 12] += 1;
    }
  }
  return feats;
}

/// Cosine self-similarity of half-beat chroma, in [0, 1]; silent/silent pairs count as 1.
inline std::vector<std::vector<double>> self_similarity(const QuantizedScore& q) {
  auto f = half_beat_chroma(q);
  const std::size_t N = f.size();
  std::vector<std::vector<double>> S(N, std::vector<double>(N));
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i; j < N; ++j) S[i][j] = S[j][i] = cosine100(f[i], f[j]) / 100.0;
  return S;
}

/// 100 x mean absolute entrywise difference.
inline double ssm_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) throw LengthMismatch("self-similarity matrices differ in size");
  if (a.empty()) throw EmptySet("empty self-similarity matrices");
  double total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != a.size() || b[i].size() != b.size()) throw LengthMismatch("matrix is not square");
    for (std::size_t j = 0; j < a.size(); ++j) total += std::abs(a[i][j] - b[i][j]);
  }
  return 100.0 * total / static_cast<double>(a.size() * a.size());
}

inline double dist_ssm(const QuantizedScore& a, const QuantizedScore& b) {
  if (a.bars.size() != b.bars.size()) throw LengthMismatch("pieces differ in bar count");
  return ssm_distance(self_similarity(a), self_similarity(b));
}

// ---- distribution KL ---------------------------------------------------------------

enum class SimFeature { Chroma, Grooving, Instrument };

/// Histogram of values in [0, 100] over `bins` equal-width bins (100 falls in the last bin).
inline std::vector<double> histogram100(const std::vector<double>& values, int bins) {
  std::vector<double> h(bins, 0.0);
  for (double v : values) {
    int i = static_cast<int>(std::floor(std::clamp(v, 0.0, 100.0) / 100.0 * bins));
    h[std::min(i, bins - 1)] += 1;
  }
  return h;
}

/// KL(p || q) in nats after adding eps to every bin and renormalizing both.
inline double kl_divergence(std::vector<double> p, std::vector<double> q, double eps = 1e-6) {
  if (p.size() != q.size()) throw LengthMismatch("histograms differ in length");
  if (p.empty()) throw EmptySet("empty histograms");
  auto normalize = [eps](std::vector<double>& h) {
    double s = 0;
    for (double& v : h) s += (v += eps);
    for (double& v : h) v /= s;
  };
  normalize(p);
  normalize(q);
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return std::max(0.0, kl);
}

/// Similarities over all bar pairs (i < j) within each piece.
inline std::vector<double> within_piece_similarities(const std::vector<QuantizedScore>& pieces, SimFeature f,
                                                     int n_tracks = 1) {
  std::vector<double> out;
  for (const auto& q : pieces) {
    for (std::size_t i = 0; i < q.bars.size(); ++i)
      for (std::size_t j = i + 1; j < q.bars.size(); ++j) {
        const Bar &a = q.bars[i], &b = q.bars[j];
        switch (f) {
          case SimFeature::Chroma: out.push_back(sim_chr(a, b)); break;
          case SimFeature::Grooving: out.push_back(sim_grv(a, b, q.sub_beats_per_bar)); break;
          case SimFeature::Instrument: out.push_back(sim_ins(track_presence(a, n_tracks), track_presence(b, n_tracks))); break;
        }
      }
  }
  return out;
}

/**
 * KL(p_real || p_gen) between histograms of within-piece bar-pair similarities:
 * 50 bins for chroma and grooving, n_tracks + 1 for instrument presence.
 */
inline double kl_quality(const std::vector<QuantizedScore>& real, const std::vector<QuantizedScore>& gen, SimFeature f,
                         int n_tracks = 1) {
  if (real.empty() || gen.empty()) throw EmptySet("kl_quality needs at least one piece per set");
  const int bins = f == SimFeature::Instrument ? n_tracks + 1 : 50;
  return kl_divergence(histogram100(within_piece_similarities(real, f, n_tracks), bins),
                       histogram100(within_piece_similarities(gen, f, n_tracks), bins));
}

// ---- rank correlation and perplexity -----------------------------------------------

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation of average ranks.
inline double spearman(const std::vector<double>& a, const std::vector<double>& s) {
  if (a.size() != s.size()) throw LengthMismatch("spearman inputs differ in length");
  if (a.empty()) throw EmptySet("spearman needs data");
  auto ra = average_ranks(a), rs = average_ranks(s);
  const double n = static_cast<double>(a.size());
  double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, ms = std::accumulate(rs.begin(), rs.end(), 0.0) / n;
  double sab = 0, saa = 0, sss = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rs[i] - ms);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sss += (rs[i] - ms) * (rs[i] - ms);
  }
  if (saa == 0 || sss == 0) throw DegenerateInput("spearman input is constant");
  return std::clamp(sab / std::sqrt(saa * sss), -1.0, 1.0);
}

inline double spearman(const std::vector<int>& a, const std::vector<double>& s) {
  return spearman(std::vector<double>(a.begin(), a.end()), s);
}

/// exp(-(1/T) sum_t log p_t) from per-token natural-log probabilities.
inline double perplexity(const std::vector<double>& log_probs) {
  if (log_probs.empty()) throw EmptySet("perplexity of an empty sequence");
  double s = 0;
  for (double lp : log_probs) {
    if (!(lp > -std::numeric_limits<double>::infinity())) throw ZeroProbability("a gold token has probability 0");
    s += lp;
  }
  return std::exp(-s / static_cast<double>(log_probs.size()));
}

/// Length-normalized perplexity of `tokens` under a causal language model; the first token is given.
inline double perplexity(const LanguageModel& lm, const std::vector<int>& tokens) {
  return perplexity(lm.token_log_probs(tokens));
}

/// Mean and sample standard deviation.
struct Summary {
  double mean = 0;
  double std = 0;
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

/// Mean bar-aligned similarity between two pieces over their common bars.
inline Summary bar_fidelity(const QuantizedScore& a, const QuantizedScore& b, SimFeature f) {
  std::vector<double> v;
  const std::size_t K = std::min(a.bars.size(), b.bars.size());
  for (std::size_t k = 0; k < K; ++k)
    v.push_back(f == SimFeature::Chroma ? sim_chr(a.bars[k], b.bars[k]) : sim_grv(a.bars[k], b.bars[k], a.sub_beats_per_bar));
  return summarize(v);
}

}  // namespace barstyle
