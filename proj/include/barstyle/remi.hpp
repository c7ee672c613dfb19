/**
 * @file remi.hpp
 * @brief REMI event vocabulary and conversion between quantized scores and
 *        token sequences partitioned into bars.
 *
 * Token families (in id order): PAD, BOS, EOS, Bar, Sub-beat (B), Tempo (54),
 * Pitch (86), Velocity (24), Duration (16), Chord (133). With B = 16 the
 * content families total 330 tokens.
 */
#pragma once

#include <array>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "barstyle/error.hpp"
#include "barstyle/score.hpp"

namespace barstyle {

enum class TokenKind { Pad, Bos, Eos, Bar, SubBeat, Tempo, Pitch, Velocity, Duration, Chord };

inline constexpr int kChordRoots = 12;
inline constexpr int kChordQualities = 11;
inline constexpr int kChordTokens = kChordRoots * kChordQualities + 1;  // + no-chord
inline constexpr std::array<const char*, 12> kRootNames = {"C",  "C#", "D",  "D#", "E",  "F",
                                                           "F#", "G",  "G#", "A",  "A#", "B"};
inline constexpr std::array<const char*, kChordQualities> kQualityNames = {
    "maj", "min", "dim", "aug", "sus2", "sus4", "dom7", "maj7", "min7", "hdim7", "dim7"};

class Vocab {
 public:
  explicit Vocab(int sub_beats_per_bar = 16) : sub_beats_(sub_beats_per_bar) {
    if (sub_beats_ != 16 && sub_beats_ != 32) throw std::invalid_argument("sub_beats_per_bar must be 16 or 32");
    sub_beat_base_ = kBar + 1;
    tempo_base_ = sub_beat_base_ + sub_beats_;
    pitch_base_ = tempo_base_ + kTempoClasses;
    velocity_base_ = pitch_base_ + kNumPitches;
    duration_base_ = velocity_base_ + kVelocityClasses;
    chord_base_ = duration_base_ + kMaxDuration;
    size_ = chord_base_ + kChordTokens;
    names_.reserve(size_);
    for (int id = 0; id < size_; ++id) {
      names_.push_back(make_name(id));
      ids_.emplace(names_.back(), id);
    }
  }

  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kBar = 3;
  static constexpr int kSpecials = 3;

  int sub_beats_per_bar() const { return sub_beats_; }
  int size() const { return size_; }
  int content_size() const { return size_ - kSpecials; }

  int bar() const { return kBar; }
  int sub_beat(int p) const { return checked(sub_beat_base_, p, 0, sub_beats_, "sub-beat"); }
  int tempo(int cls) const { return checked(tempo_base_, cls, 0, kTempoClasses, "tempo class"); }
  int pitch(int midi_pitch) const { return checked(pitch_base_, midi_pitch - kMinPitch, 0, kNumPitches, "pitch"); }
  int velocity(int cls) const { return checked(velocity_base_, cls, 0, kVelocityClasses, "velocity class"); }
  int duration(int units) const { return checked(duration_base_, units - 1, 0, kMaxDuration, "duration"); }
  int chord(int root, int quality) const {
    if (root < 0 || root >= kChordRoots || quality < 0 || quality >= kChordQualities)
      throw VocabMiss("chord root/quality out of range");
    return chord_base_ + root * kChordQualities + quality;
  }
  int no_chord() const { return chord_base_ + kChordRoots * kChordQualities; }

  TokenKind kind(int id) const {
    if (id < 0 || id >= size_) throw VocabMiss("token id " + std::to_string(id));
    if (id == kPad) return TokenKind::Pad;
    if (id == kBos) return TokenKind::Bos;
    if (id == kEos) return TokenKind::Eos;
    if (id == kBar) return TokenKind::Bar;
    if (id < tempo_base_) return TokenKind::SubBeat;
    if (id < pitch_base_) return TokenKind::Tempo;
    if (id < velocity_base_) return TokenKind::Pitch;
    if (id < duration_base_) return TokenKind::Velocity;
    if (id < chord_base_) return TokenKind::Duration;
    return TokenKind::Chord;
  }

  /// Family-specific value: sub-beat index, class, MIDI pitch, duration units, or chord index.
  int value(int id) const {
    switch (kind(id)) {
      case TokenKind::SubBeat: return id - sub_beat_base_;
      case TokenKind::Tempo: return id - tempo_base_;
      case TokenKind::Pitch: return id - pitch_base_ + kMinPitch;
      case TokenKind::Velocity: return id - velocity_base_;
      case TokenKind::Duration: return id - duration_base_ + 1;
      case TokenKind::Chord: return id - chord_base_;
      default: return 0;
    }
  }

  bool is_special(int id) const { return id >= 0 && id < kSpecials; }
  const std::string& name(int id) const {
    if (id < 0 || id >= size_) throw VocabMiss("token id " + std::to_string(id));
    return names_[id];
  }
  int id(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) throw VocabMiss("unknown token name '" + name + "'");
    return it->second;
  }

 private:
  static int checked(int base, int offset, int lo, int hi, const char* what) {
    if (offset < lo || offset >= hi) throw VocabMiss(std::string(what) + " out of range");
    return base + offset;
  }

  std::string make_name(int id) const {
    switch (kind(id)) {
      case TokenKind::Pad: return "PAD";
      case TokenKind::Bos: return "BOS";
      case TokenKind::Eos: return "EOS";
      case TokenKind::Bar: return "Bar";
      case TokenKind::SubBeat: return "SubBeat_" + std::to_string(value(id));
      case TokenKind::Tempo: return "Tempo_" + std::to_string(value(id));
      case TokenKind::Pitch: return "Pitch_" + std::to_string(value(id));
      case TokenKind::Velocity: return "Velocity_" + std::to_string(value(id));
      case TokenKind::Duration: return "Duration_" + std::to_string(value(id));
      case TokenKind::Chord: {
        int c = value(id);
        if (c == kChordRoots * kChordQualities) return "Chord_NC";
        return std::string("Chord_") + kRootNames[c / kChordQualities] + "_" + kQualityNames[c % kChordQualities];
      }
    }
    return {};
  }

  int sub_beats_;
  int sub_beat_base_, tempo_base_, pitch_base_, velocity_base_, duration_base_, chord_base_, size_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> ids_;
};

/// Half-open token index range [begin, end) of one bar.
struct BarSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const BarSpan&) const = default;
};

struct TokenSeq {
  std::vector<int> tokens;
  std::vector<BarSpan> bar_spans;
  std::size_t num_bars() const { return bar_spans.size(); }
  bool operator==(const TokenSeq&) const = default;
};

/// Bar partition recovered from Bar-token positions alone.
inline std::vector<BarSpan> bar_slices(const std::vector<int>& tokens) {
  std::vector<BarSpan> spans;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == Vocab::kBar) {
      if (!spans.empty()) spans.back().end = i;
      spans.push_back({i, tokens.size()});
    }
  }
  if (spans.empty()) throw NoBars("token sequence has no Bar token");
  if (spans.front().begin != 0) throw BadPartition("token sequence does not start with a Bar token");
  return spans;
}

inline TokenSeq make_token_seq(std::vector<int> tokens) {
  TokenSeq seq;
  seq.bar_spans = bar_slices(tokens);
  seq.tokens = std::move(tokens);
  return seq;
}

// ---- chord templates -------------------------------------------------------

inline constexpr std::array<std::array<int, 4>, kChordQualities> kChordIntervals = {{
    {0, 4, 7, -1},  {0, 3, 7, -1}, {0, 3, 6, -1},  {0, 4, 8, -1}, {0, 2, 7, -1}, {0, 5, 7, -1},
    {0, 4, 7, 10},  {0, 4, 7, 11}, {0, 3, 7, 10},  {0, 3, 6, 10}, {0, 3, 6, 9},
}};

/// Template-matching chord label for a pitch-class weight vector; kChordRoots*kChordQualities means no chord.
inline int detect_chord(const std::array<double, 12>& weights) {
  double total = 0;
  for (double w : weights) total += w;
  if (total <= 0) return kChordRoots * kChordQualities;
  int best = kChordRoots * kChordQualities;
  double best_score = 0.0;
  for (int root = 0; root < kChordRoots; ++root) {
    for (int q = 0; q < kChordQualities; ++q) {
      double in = 0;
      int members = 0;
      for (int iv : kChordIntervals[q]) {
        if (iv < 0) continue;
        in += weights[(root + iv) % 12];
        ++members;
      }
      // root presence breaks ties between inversions of the same pitch set
      double score = in - (total - in) - 0.1 * members + 0.05 * weights[root];
      if (score > best_score + 1e-12) {
        best_score = score;
        best = root * kChordQualities + q;
      }
    }
  }
  return best;
}

struct TokenizeOptions {
  bool emit_chords = false;
};

/**
 * Bar, then per occupied sub-beat (ascending): Sub-beat, optional Tempo,
 * optional Chord, and a Pitch/Velocity/Duration triple per note (ascending pitch).
 */
inline TokenSeq tokenize(const QuantizedScore& q, const Vocab& vocab, TokenizeOptions opts = {}) {
  if (q.sub_beats_per_bar != vocab.sub_beats_per_bar())
    throw VocabMiss("score grid does not match vocabulary grid");
  QuantizedScore canon = q;
  canonicalize(canon);
  const int B = canon.sub_beats_per_bar;
  const int beat = B / kBeatsPerBar;
  const int per_unit = canon.sub_beats_per_unit();
  int last_chord = -1;

  TokenSeq seq;
  for (const auto& bar : canon.bars) {
    std::size_t begin = seq.tokens.size();
    seq.tokens.push_back(vocab.bar());
    std::vector<int> positions;
    for (const auto& n : bar.notes) positions.push_back(n.sub_beat);
    for (const auto& t : bar.tempos) positions.push_back(t.sub_beat);
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());

    for (int p : positions) {
      seq.tokens.push_back(vocab.sub_beat(p));
      for (const auto& t : bar.tempos)
        if (t.sub_beat == p) seq.tokens.push_back(vocab.tempo(t.tempo_class));
      if (opts.emit_chords && p % beat == 0) {
        std::array<double, 12> w{};
        for (const auto& n : bar.notes) {
          int end = n.sub_beat + n.duration * per_unit;
          if (n.sub_beat < p + beat && end > p) w[n.pitch % 12] += 1.0;
        }
        int c = detect_chord(w);
        if (c != last_chord) {
          seq.tokens.push_back(c == kChordRoots * kChordQualities ? vocab.no_chord()
                                                                 : vocab.chord(c / kChordQualities, c % kChordQualities));
          last_chord = c;
        }
      }
      for (const auto& n : bar.notes) {
        if (n.sub_beat != p) continue;
        seq.tokens.push_back(vocab.pitch(n.pitch));
        seq.tokens.push_back(vocab.velocity(n.velocity));
        seq.tokens.push_back(vocab.duration(n.duration));
      }
    }
    seq.bar_spans.push_back({begin, seq.tokens.size()});
  }
  return seq;
}

struct DetokenizeResult {
  QuantizedScore score;
  int skipped = 0;  ///< malformed note fragments dropped
};

/// Rebuilds notes from the token stream; fragments that are not a complete Pitch/Velocity/Duration triple are skipped.
inline DetokenizeResult detokenize(const std::vector<int>& tokens, const Vocab& vocab) {
  DetokenizeResult out;
  out.score.sub_beats_per_bar = vocab.sub_beats_per_bar();
  bool any_bar = false;
  int position = -1;
  // 0: expecting Pitch, 1: have pitch, 2: have pitch+velocity
  int stage = 0;
  Note pending;

  auto drop_pending = [&] {
    if (stage != 0) ++out.skipped;
    stage = 0;
  };

  for (int tok : tokens) {
    TokenKind k = vocab.kind(tok);
    switch (k) {
      case TokenKind::Bar:
        drop_pending();
        out.score.bars.emplace_back();
        any_bar = true;
        position = -1;
        break;
      case TokenKind::SubBeat:
        drop_pending();
        position = vocab.value(tok);
        break;
      case TokenKind::Tempo:
        drop_pending();
        if (any_bar && position >= 0) out.score.bars.back().tempos.push_back({position, vocab.value(tok)});
        break;
      case TokenKind::Pitch:
        drop_pending();
        if (!any_bar || position < 0) {
          ++out.skipped;
          break;
        }
        pending = Note{position, vocab.value(tok), 0, 1};
        stage = 1;
        break;
      case TokenKind::Velocity:
        if (stage != 1) {
          drop_pending();
          ++out.skipped;
          break;
        }
        pending.velocity = vocab.value(tok);
        stage = 2;
        break;
      case TokenKind::Duration:
        if (stage != 2) {
          drop_pending();
          ++out.skipped;
          break;
        }
        pending.duration = vocab.value(tok);
        out.score.bars.back().notes.push_back(pending);
        stage = 0;
        break;
      case TokenKind::Chord:
      case TokenKind::Pad:
      case TokenKind::Bos:
      case TokenKind::Eos:
        break;
    }
  }
  drop_pending();
  if (!any_bar) throw NoBars("token sequence has no Bar token");
  canonicalize(out.score);
  return out;
}

inline DetokenizeResult detokenize(const TokenSeq& seq, const Vocab& vocab) { return detokenize(seq.tokens, vocab); }

/// Shifts Pitch tokens and chord roots by `semitones`; nullopt if any pitch leaves the vocabulary.
inline std::optional<std::vector<int>> transpose_tokens(const std::vector<int>& tokens, const Vocab& vocab,
                                                        int semitones) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int tok : tokens) {
    TokenKind k = vocab.kind(tok);
    if (k == TokenKind::Pitch) {
      int p = vocab.value(tok) + semitones;
      if (p < kMinPitch || p > kMaxPitch) return std::nullopt;
      out.push_back(vocab.pitch(p));
    } else if (k == TokenKind::Chord && tok != vocab.no_chord()) {
      int c = vocab.value(tok);
      int root = ((c / kChordQualities + semitones) % 12 + 12) % 12;
      out.push_back(vocab.chord(root, c % kChordQualities));
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

// ---- token text format -----------------------------------------------------

inline std::string to_token_text(const std::vector<int>& tokens, const Vocab& vocab, const std::string& comment = {}) {
  std::ostringstream os;
  if (!comment.empty()) os << "# " << comment << "\n";
  for (int t : tokens) os << vocab.name(t) << "\n";
  return os.str();
}

inline std::vector<int> parse_token_text(const std::string& text, const Vocab& vocab) {
  std::vector<int> tokens;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    if (line[0] == '#') continue;
    tokens.push_back(vocab.id(line));
  }
  return tokens;
}

inline void write_token_file(const std::string& path, const std::vector<int>& tokens, const Vocab& vocab,
                             const std::string& comment = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_token_text(tokens, vocab, comment);
}

inline std::vector<int> read_token_file(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_token_text(ss.str(), vocab);
}

}  // namespace barstyle
