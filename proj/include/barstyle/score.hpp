/**
 * @file score.hpp
 * @brief The quantized score: notes on a sub-beat grid, partitioned into 4/4 bars.
 *
 * Value ranges follow the 16th-note piano grid: pitches 22..107, 24 velocity
 * classes (width 2 over 40..86), durations of 1..16 sixteenths, 54 tempo
 * classes over 32..224 bpm.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "barstyle/error.hpp"

namespace barstyle {

inline constexpr int kMinPitch = 22;
inline constexpr int kMaxPitch = 107;
inline constexpr int kNumPitches = kMaxPitch - kMinPitch + 1;  // 86
inline constexpr int kVelocityClasses = 24;
inline constexpr int kVelocityFloor = 40;
inline constexpr int kVelocityStep = 2;
inline constexpr int kMaxDuration = 16;  // in sixteenth notes
inline constexpr int kTempoClasses = 54;
inline constexpr int kBeatsPerBar = 4;

// Tempo classes: 32..155 in steps of 3 (42 classes), then 158..224 in steps of 6 (12 classes).
inline constexpr int kTempoFineClasses = 42;

inline constexpr double tempo_class_bpm(int cls) {
  return cls < kTempoFineClasses ? 32.0 + 3.0 * cls : 158.0 + 6.0 * (cls - kTempoFineClasses);
}

/// Nearest tempo class; halfway values go to the slower class.
inline int tempo_class(double bpm) {
  int best = 0;
  double best_dist = std::abs(bpm - tempo_class_bpm(0));
  for (int c = 1; c < kTempoClasses; ++c) {
    double dist = std::abs(bpm - tempo_class_bpm(c));
    if (dist < best_dist) {
      best = c;
      best_dist = dist;
    }
  }
  return best;
}

inline constexpr int velocity_class_value(int cls) { return kVelocityFloor + kVelocityStep * cls; }

/// Rounds num/den to the nearest integer, ties toward the smaller value (num >= 0, den > 0).
inline std::int64_t round_half_down(std::int64_t num, std::int64_t den) {
  std::int64_t a = 2 * num - den;
  std::int64_t b = 2 * den;
  if (a <= 0) return 0;
  return (a + b - 1) / b;
}

inline int velocity_class(int velocity) {
  if (velocity <= kVelocityFloor) return 0;
  auto cls = static_cast<int>(round_half_down(velocity - kVelocityFloor, kVelocityStep));
  return std::min(cls, kVelocityClasses - 1);
}

/// Folds a MIDI pitch into [kMinPitch, kMaxPitch] by whole octaves.
inline int fold_pitch(int pitch) {
  while (pitch < kMinPitch) pitch += 12;
  while (pitch > kMaxPitch) pitch -= 12;
  return pitch;
}

struct Note {
  int sub_beat = 0;
  int pitch = 60;
  int velocity = 0;  ///< velocity class 0..23
  int duration = 1;  ///< sixteenth notes, 1..16
  auto operator<=>(const Note&) const = default;
};

struct TempoMark {
  int sub_beat = 0;
  int tempo_class = 0;
  auto operator<=>(const TempoMark&) const = default;
};

struct Bar {
  std::vector<Note> notes;
  std::vector<TempoMark> tempos;
  bool operator==(const Bar&) const = default;
};

struct QuantizedScore {
  int sub_beats_per_bar = 16;
  std::vector<Bar> bars;

  bool operator==(const QuantizedScore&) const = default;

  std::size_t note_count() const {
    std::size_t n = 0;
    for (const auto& b : bars) n += b.notes.size();
    return n;
  }
  /// Sub-beats spanned by one sixteenth-note duration unit.
  int sub_beats_per_unit() const { return sub_beats_per_bar / 16; }
};

/// Sorts notes and drops tempo marks that do not change the running tempo class.
inline void canonicalize(QuantizedScore& q) {
  int current = -1;
  for (auto& bar : q.bars) {
    std::sort(bar.notes.begin(), bar.notes.end());
    std::stable_sort(bar.tempos.begin(), bar.tempos.end(),
                     [](const TempoMark& a, const TempoMark& b) { return a.sub_beat < b.sub_beat; });
    // last mark at a position wins
    std::vector<TempoMark> kept;
    for (std::size_t i = 0; i < bar.tempos.size(); ++i) {
      if (i + 1 < bar.tempos.size() && bar.tempos[i + 1].sub_beat == bar.tempos[i].sub_beat) continue;
      if (bar.tempos[i].tempo_class == current) continue;
      current = bar.tempos[i].tempo_class;
      kept.push_back(bar.tempos[i]);
    }
    bar.tempos = std::move(kept);
  }
}

/// Throws std::invalid_argument describing the first violated invariant.
inline void validate(const QuantizedScore& q) {
  const int B = q.sub_beats_per_bar;
  if (B != 16 && B != 32) throw std::invalid_argument("sub_beats_per_bar must be 16 or 32");
  for (std::size_t k = 0; k < q.bars.size(); ++k) {
    for (const auto& n : q.bars[k].notes) {
      if (n.sub_beat < 0 || n.sub_beat >= B || n.pitch < kMinPitch || n.pitch > kMaxPitch ||
          n.velocity < 0 || n.velocity >= kVelocityClasses || n.duration < 1 || n.duration > kMaxDuration)
        throw std::invalid_argument("note out of range in bar " + std::to_string(k));
    }
    for (const auto& t : q.bars[k].tempos) {
      if (t.sub_beat < 0 || t.sub_beat >= B || t.tempo_class < 0 || t.tempo_class >= kTempoClasses)
        throw std::invalid_argument("tempo mark out of range in bar " + std::to_string(k));
    }
  }
}

}  // namespace barstyle
