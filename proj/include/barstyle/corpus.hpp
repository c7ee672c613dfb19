/**
 * @file corpus.hpp
 * @brief Corpora on disk: a synthetic pop-piano-like generator, MIDI folder ingestion, seeded splits.
 *
 * Directory layout:
 *   <dir>/manifest.txt                 key=value: format, seed, grid, bins, split fractions,
 *                                      piece.<id>=<split>,<source>
 *   <dir>/pieces/<id>.tokens           token text (one token per line)
 *   <dir>/pieces/<id>.attrs.csv        per-bar attribute records
 */
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "barstyle/attributes.hpp"
#include "barstyle/config.hpp"
#include "barstyle/midi_io.hpp"
#include "barstyle/remi.hpp"
#include "barstyle/score.hpp"
#include "barstyle/vae.hpp"

namespace barstyle {

inline constexpr const char* kCorpusFormat = "barstyle-corpus-1";

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : s == Split::Val ? "val" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "'");
}

struct SplitFractions {
  double train = 0.90;
  double val = 0.05;
  double test = 0.05;
};

struct CorpusPiece {
  std::string id;
  std::string source;  ///< "synthetic" or the ingested file path
  Split split = Split::Train;
  TokenSeq seq;
  std::vector<BarAttributes> attributes;

  AttributedSequence attributed() const { return make_attributed(seq, attributes); }
};

struct Corpus {
  int sub_beats_per_bar = 16;
  std::uint64_t seed = 0;
  SplitFractions fractions;
  AttributeBins bins = AttributeBins::reference();
  std::vector<CorpusPiece> pieces;

  std::vector<const CorpusPiece*> in_split(Split s) const {
    std::vector<const CorpusPiece*> out;
    for (const auto& p : pieces)
      if (p.split == s) out.push_back(&p);
    return out;
  }

  std::vector<AttributedSequence> attributed(Split s) const {
    std::vector<AttributedSequence> out;
    for (const auto* p : in_split(s)) out.push_back(p->attributed());
    return out;
  }
};

/**
 * Seeded split assignment: ids are sorted, shuffled with the seed, then cut in
 * train/val/test order. With at least 3 pieces, val and test each get >= 1.
 */
inline std::map<std::string, Split> assign_splits(std::vector<std::string> ids, std::uint64_t seed,
                                                  const SplitFractions& f = {}) {
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9 || f.train < 0 || f.val < 0 || f.test < 0)
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n = ids.size();
  auto portion = [&](double frac) {
    auto c = static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 0.5));
    return n >= 3 && frac > 0 ? std::max<std::size_t>(c, 1) : c;
  };
  std::size_t n_val = portion(f.val), n_test = portion(f.test);
  if (n_val + n_test > n) n_val = n_test = 0;
  std::map<std::string, Split> out;
  for (std::size_t i = 0; i < n; ++i) {
    Split s = i < n - n_val - n_test ? Split::Train : i < n - n_test ? Split::Val : Split::Test;
    out[ids[i]] = s;
  }
  return out;
}

// ---- synthetic generator -------------------------------------------------------

struct SyntheticConfig {
  int pieces = 200;
  int bars = 16;
  int sub_beats_per_bar = 16;
  std::uint64_t seed = 0;
};

namespace detail {

/// Diatonic triads of a major key as (root offset, minor?) pairs: I ii iii IV V vi.
inline constexpr std::array<std::pair<int, bool>, 6> kDiatonic = {{{0, false}, {2, true}, {4, true}, {5, false}, {7, false}, {9, true}}};

/// Piecewise-constant level track over `bars`, levels in 0..7, segments of 1..4 bars.
inline std::vector<int> level_envelope(int bars, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> level(0, 7), length(1, 4);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < bars) {
    int l = level(rng), n = length(rng);
    for (int i = 0; i < n && static_cast<int>(out.size()) < bars; ++i) out.push_back(l);
  }
  return out;
}

}  // namespace detail

/**
 * One synthetic piece. A rhythm-density envelope sets the melody's onset count per
 * bar; an independent voicing envelope sets how many chord voices are sustained
 * through the bar. Melody notes last until the next onset, so the sounding-note
 * count is driven by the voicing and the onset count by the density; a per-bar
 * legato factor shortens melody notes to spread the polyphony scores.
 * Each piece draws its own groove (per-sixteenth onset weights) and comping
 * pattern (strike offset and roll), so rhythms differ between pieces.
 */
inline QuantizedScore synthetic_piece(int bars, std::mt19937_64& rng, int sub_beats_per_bar = 16) {
  if (bars < 1) throw std::invalid_argument("bars must be >= 1");
  if (sub_beats_per_bar != 16 && sub_beats_per_bar != 32) throw std::invalid_argument("grid must be 16 or 32");
  constexpr int B = 16;  // generated on the sixteenth grid, then scaled
  const int scale = sub_beats_per_bar / B;
  std::uniform_int_distribution<int> key_dist(0, 11), chord_dist(0, 5), jitter(-1, 1);
  std::uniform_real_distribution<double> u(0, 1);
  // onsets per bar for each density level
  static constexpr std::array<int, 8> kOnsets = {1, 3, 4, 6, 8, 10, 12, 15};
  const int key = key_dist(rng);
  const auto density = detail::level_envelope(bars, rng);
  const auto voicing = detail::level_envelope(bars, rng);
  const int tempo = std::uniform_int_distribution<int>(20, 40)(rng);
  std::gamma_distribution<double> lump(0.5, 1.0);
  std::array<double, B> groove{};
  for (double& w : groove) w = 0.05 + lump(rng);
  const int anchor = u(rng) < 0.35 ? 0 : 2 * std::uniform_int_distribution<int>(0, 5)(rng);

  QuantizedScore q;
  q.sub_beats_per_bar = sub_beats_per_bar;
  q.bars.resize(bars);
  int melody = 72 + key % 12 - 6;
  Note* held = nullptr;  // last melody note so far; it sounds until the next onset, even across the bar line
  double held_legato = 1.0;
  for (int k = 0; k < bars; ++k) {
    Bar& bar = q.bars[k];
    if (k == 0) bar.tempos.push_back({0, tempo});
    auto [offset, minor] = detail::kDiatonic[chord_dist(rng)];
    const int root = (key + offset) % 12;
    const std::array<int, 3> triad = {0, minor ? 3 : 4, 7};

    // sustained chord voices stacked upward from the bass register
    int voices = std::clamp(voicing[k] + (u(rng) < 0.3 ? jitter(rng) : 0), 0, 7);
    const int vel_chord = std::uniform_int_distribution<int>(6, 12)(rng);
    for (int v = 0; v < voices; ++v) {
      int pitch = 36 + root + 12 * (v / 3) + triad[v % 3];
      int start = anchor, room = B - start;
      int dur = u(rng) < 0.6 ? room : std::uniform_int_distribution<int>((room + 1) / 2, room)(rng);
      bar.notes.push_back({start, pitch, vel_chord, std::min(dur, kMaxDuration)});
    }

    // melody onsets: `count` distinct positions drawn by the piece's groove weights
    int count = std::clamp(kOnsets[density[k]] + jitter(rng), 1, B);
    std::vector<std::pair<double, int>> keyed;
    for (int p = 0; p < B; ++p) keyed.push_back({std::pow(u(rng), 1.0 / groove[p]), p});
    std::partial_sort(keyed.begin(), keyed.begin() + count, keyed.end(), std::greater<>());
    std::vector<int> chosen;
    for (int i = 0; i < count; ++i) chosen.push_back(keyed[i].second);
    std::sort(chosen.begin(), chosen.end());
    const int vel_melody = std::uniform_int_distribution<int>(12, 18)(rng);
    const double legato = std::uniform_real_distribution<double>(0.5, 1.0)(rng);
    if (held) held->duration = std::clamp(static_cast<int>(std::lround(held_legato * (B - held->sub_beat + chosen[0]))), 1, kMaxDuration);
    bar.notes.reserve(bar.notes.size() + chosen.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      int next = i + 1 < chosen.size() ? chosen[i + 1] : B;
      // small random steps in a register above the chord voices
      int step = std::uniform_int_distribution<int>(-3, 3)(rng);
      melody = std::clamp(melody + step, 69, 88);
      int dur = std::clamp(static_cast<int>(std::lround(legato * (next - chosen[i]))), 1, kMaxDuration);
      bar.notes.push_back({chosen[i], melody, vel_melody, dur});
    }
    held = &bar.notes.back();
    held_legato = legato;
  }
  for (auto& bar : q.bars)
    for (auto& n : bar.notes) n.sub_beat *= scale;
  canonicalize(q);
  return q;
}

/// Rebuilds attributes of every piece with `bins` (scores are kept).
inline void reclassify(Corpus& c) {
  for (auto& p : c.pieces)
    for (auto& a : p.attributes) {
      a.a_rhym = classify(a.s_rhym, c.bins.rhym);
      a.a_poly = classify(a.s_poly, c.bins.poly);
    }
}

/// Fits bins on the training split's bar scores; keeps the current bins if the split is degenerate.
inline void fit_corpus_bins(Corpus& c) {
  std::vector<double> r, p;
  for (const auto* piece : c.in_split(Split::Train))
    for (const auto& a : piece->attributes) {
      r.push_back(a.s_rhym);
      p.push_back(a.s_poly);
    }
  try {
    c.bins = {fit_bins(r), fit_bins(p)};
  } catch (const DegenerateDistribution&) {
  }
  reclassify(c);
}

inline std::string piece_id(std::size_t i) {
  std::ostringstream os;
  os << "piece" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

inline Corpus generate_synthetic(const SyntheticConfig& cfg, const SplitFractions& fractions = {}) {
  if (cfg.pieces < 1) throw std::invalid_argument("need at least one piece");
  Vocab vocab(cfg.sub_beats_per_bar);
  Corpus c;
  c.sub_beats_per_bar = cfg.sub_beats_per_bar;
  c.seed = cfg.seed;
  c.fractions = fractions;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::string> ids;
  for (int i = 0; i < cfg.pieces; ++i) {
    QuantizedScore q = synthetic_piece(cfg.bars, rng, cfg.sub_beats_per_bar);
    CorpusPiece p;
    p.id = piece_id(static_cast<std::size_t>(i));
    p.source = "synthetic";
    p.seq = tokenize(q, vocab);
    p.attributes = compute_attributes(q, c.bins);
    ids.push_back(p.id);
    c.pieces.push_back(std::move(p));
  }
  auto splits = assign_splits(ids, cfg.seed, fractions);
  for (auto& p : c.pieces) p.split = splits.at(p.id);
  fit_corpus_bins(c);
  return c;
}

// ---- ingestion -----------------------------------------------------------------

struct IngestReport {
  std::vector<std::pair<std::string, std::string>> skipped;  ///< (path, reason)
};

/// Parses every .mid/.midi file under `dir` (sorted), skipping unreadable ones.
inline Corpus ingest(const std::string& dir, int sub_beats_per_bar, std::uint64_t seed, IngestReport* report = nullptr,
                     const SplitFractions& fractions = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".mid" || ext == ".midi") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());

  Vocab vocab(sub_beats_per_bar);
  struct Slot {
    std::optional<QuantizedScore> score;
    std::string error;
  };
  std::vector<Slot> slots(files.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < files.size();) {
      try {
        auto q = quantize(parse_midi(read_file_bytes(files[i])), sub_beats_per_bar);
        if (q.bars.empty()) throw NoBars("no bars");
        slots[i].score = std::move(q);
      } catch (const std::exception& e) {
        slots[i].error = e.what();
      }
    }
  };
  unsigned n_threads = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 8));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  Corpus c;
  c.sub_beats_per_bar = sub_beats_per_bar;
  c.seed = seed;
  c.fractions = fractions;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!slots[i].score) {
      if (report) report->skipped.emplace_back(files[i], slots[i].error);
      continue;
    }
    CorpusPiece p;
    p.id = piece_id(c.pieces.size());
    p.source = files[i];
    p.seq = tokenize(*slots[i].score, vocab);
    p.attributes = compute_attributes(*slots[i].score, c.bins);
    ids.push_back(p.id);
    c.pieces.push_back(std::move(p));
  }
  if (c.pieces.empty()) throw EmptyCorpus("no parseable MIDI files in " + dir);
  auto splits = assign_splits(ids, seed, fractions);
  for (auto& p : c.pieces) p.split = splits.at(p.id);
  fit_corpus_bins(c);
  return c;
}

// ---- persistence ---------------------------------------------------------------

namespace detail {

inline std::string join_cutoffs(const Cutoffs& c) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < c.size(); ++i) os << (i ? "," : "") << c[i];
  return os.str();
}

inline Cutoffs split_cutoffs(const std::string& text) {
  Cutoffs c{};
  std::istringstream is(text);
  std::string field;
  std::size_t i = 0;
  while (std::getline(is, field, ',')) {
    if (i >= c.size()) throw ConfigError("too many cut-offs in '" + text + "'");
    c[i++] = std::stod(field);
  }
  if (i != c.size()) throw ConfigError("expected 7 cut-offs in '" + text + "'");
  return c;
}

}  // namespace detail

/// Stores both cut-off lists as "bins.rhym" / "bins.poly".
inline void put_bins(KeyValues& kv, const AttributeBins& bins) {
  kv.set("bins.rhym", detail::join_cutoffs(bins.rhym));
  kv.set("bins.poly", detail::join_cutoffs(bins.poly));
}

/// Reads the cut-offs written by put_bins; `fallback` when they are absent.
inline AttributeBins get_bins(const KeyValues& kv, const AttributeBins& fallback) {
  if (!kv.has("bins.rhym") || !kv.has("bins.poly")) return fallback;
  return {detail::split_cutoffs(kv.get("bins.rhym", "")), detail::split_cutoffs(kv.get("bins.poly", ""))};
}

inline void save_corpus(const Corpus& c, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "pieces");
  Vocab vocab(c.sub_beats_per_bar);
  KeyValues kv;
  kv.set("format", std::string(kCorpusFormat));
  kv.set("seed", c.seed);
  kv.set("sub_beats_per_bar", c.sub_beats_per_bar);
  kv.set("split.train", c.fractions.train);
  kv.set("split.val", c.fractions.val);
  kv.set("split.test", c.fractions.test);
  put_bins(kv, c.bins);
  for (const auto& p : c.pieces) {
    kv.set("piece." + p.id, std::string(to_string(p.split)) + "," + p.source);
    auto base = (fs::path(dir) / "pieces" / p.id).string();
    write_token_file(base + ".tokens", p.seq.tokens, vocab);
    write_attribute_file(base + ".attrs.csv", p.attributes);
  }
  kv.save((fs::path(dir) / "manifest.txt").string());
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  KeyValues kv = KeyValues::load((fs::path(dir) / "manifest.txt").string());
  if (kv.get("format", "") != kCorpusFormat) throw ConfigError(dir + " is not a corpus directory");
  Corpus c;
  c.seed = kv.require<std::uint64_t>("seed");
  c.sub_beats_per_bar = kv.require<int>("sub_beats_per_bar");
  c.fractions = {kv.require<double>("split.train"), kv.require<double>("split.val"), kv.require<double>("split.test")};
  c.bins = {detail::split_cutoffs(kv.get("bins.rhym", "")), detail::split_cutoffs(kv.get("bins.poly", ""))};
  Vocab vocab(c.sub_beats_per_bar);
  for (const auto& [key, value] : kv.items()) {
    if (key.rfind("piece.", 0) != 0) continue;
    CorpusPiece p;
    p.id = key.substr(6);
    auto comma = value.find(',');
    if (comma == std::string::npos) throw ConfigError("bad piece entry " + key);
    p.split = parse_split(value.substr(0, comma));
    p.source = value.substr(comma + 1);
    auto base = (fs::path(dir) / "pieces" / p.id).string();
    p.seq = make_token_seq(read_token_file(base + ".tokens", vocab));
    p.attributes = read_attribute_file(base + ".attrs.csv");
    if (p.attributes.size() != p.seq.num_bars())
      throw LengthMismatch("piece " + p.id + ": attribute rows do not match bars");
    c.pieces.push_back(std::move(p));
  }
  if (c.pieces.empty()) throw EmptyCorpus(dir + " lists no pieces");
  return c;
}

}  // namespace barstyle
