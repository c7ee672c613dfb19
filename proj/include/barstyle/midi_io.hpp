/**
 * @file midi_io.hpp
 * @brief Standard MIDI File (format 0/1) reading and writing, and quantization
 *        of raw note events onto the 4/4 sub-beat grid.
 */
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include "barstyle/error.hpp"
#include "barstyle/score.hpp"

namespace barstyle {

struct NoteEvent {
  std::int64_t onset_ticks = 0;
  std::int64_t duration_ticks = 1;
  int pitch = 60;
  int velocity = 64;
  int channel = 0;
  auto operator<=>(const NoteEvent&) const = default;
};

struct TempoChange {
  std::int64_t tick = 0;
  double bpm = 120.0;
};

struct TimeSignature {
  std::int64_t tick = 0;
  int numerator = 4;
  int denominator = 4;
};

struct RawScore {
  int ticks_per_quarter = 480;
  std::vector<std::vector<NoteEvent>> tracks;
  std::vector<TempoChange> tempo_changes;
  std::vector<TimeSignature> time_signatures;
  std::int64_t end_tick = 0;  ///< latest end-of-track tick over all tracks

  std::size_t note_count() const {
    std::size_t n = 0;
    for (const auto& t : tracks) n += t.size();
    return n;
  }
};

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  bool done() const { return pos_ >= data_.size(); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint8_t u8() {
    if (pos_ >= data_.size()) throw MalformedFile("unexpected end of data at byte " + std::to_string(pos_));
    return data_[pos_++];
  }
  std::uint8_t peek() const {
    if (pos_ >= data_.size()) throw MalformedFile("unexpected end of data at byte " + std::to_string(pos_));
    return data_[pos_];
  }
  std::uint32_t be(int nbytes) {
    std::uint32_t v = 0;
    for (int i = 0; i < nbytes; ++i) v = (v << 8) | u8();
    return v;
  }
  std::uint32_t vlq() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t b = u8();
      v = (v << 7) | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw MalformedFile("variable-length quantity longer than 4 bytes");
  }
  void skip(std::size_t n) {
    if (n > remaining()) throw MalformedFile("length field overruns data");
    pos_ += n;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > remaining()) throw MalformedFile("chunk length overruns file");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int nbytes) {
  for (int i = nbytes - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::array<std::uint8_t, 5> buf{};
  int n = 0;
  buf[n++] = v & 0x7F;
  while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

struct TrackParse {
  std::vector<NoteEvent> notes;
  std::vector<TempoChange> tempos;
  std::vector<TimeSignature> meters;
  std::int64_t end_tick = 0;
};

inline TrackParse parse_track(std::span<const std::uint8_t> body) {
  TrackParse out;
  ByteReader r(body);
  std::int64_t tick = 0;
  std::uint8_t status = 0;
  // open notes per (channel, pitch); FIFO so identical stacked notes pair in order
  std::map<std::pair<int, int>, std::vector<std::pair<std::int64_t, int>>> open;

  auto close_note = [&](int ch, int pitch) {
    auto it = open.find({ch, pitch});
    if (it == open.end() || it->second.empty()) return;  // stray release
    auto [start, vel] = it->second.front();
    it->second.erase(it->second.begin());
    out.notes.push_back({start, std::max<std::int64_t>(tick - start, 0), pitch, vel, ch});
  };

  while (!r.done()) {
    tick += r.vlq();
    std::uint8_t b = r.peek();
    if (b & 0x80) {
      r.u8();
      if (b < 0xF0) status = b;
    } else if (status == 0) {
      throw MalformedFile("running status without a preceding status byte");
    } else {
      b = status;
    }

    if (b == 0xFF) {
      std::uint8_t type = r.u8();
      std::uint32_t len = r.vlq();
      auto payload = r.take(len);
      if (type == 0x51 && len == 3) {
        std::uint32_t us = (payload[0] << 16) | (payload[1] << 8) | payload[2];
        if (us == 0) throw MalformedFile("zero tempo");
        out.tempos.push_back({tick, 60'000'000.0 / us});
      } else if (type == 0x58 && len >= 2) {
        out.meters.push_back({tick, payload[0], 1 << payload[1]});
      } else if (type == 0x2F) {
        break;
      }
      continue;
    }
    if (b == 0xF0 || b == 0xF7) {
      r.skip(r.vlq());
      continue;
    }
    if (b >= 0xF0) throw MalformedFile("unexpected system message in track");

    int kind = b & 0xF0;
    int ch = b & 0x0F;
    int d1 = r.u8();
    int d2 = (kind == 0xC0 || kind == 0xD0) ? 0 : r.u8();
    if (kind == 0x90 && d2 > 0) {
      open[{ch, d1}].push_back({tick, d2});
    } else if (kind == 0x80 || (kind == 0x90 && d2 == 0)) {
      close_note(ch, d1);
    }
  }
  out.end_tick = tick;
  for (auto& [key, stack] : open) {
    for (auto [start, vel] : stack) {
      out.notes.push_back({start, std::max<std::int64_t>(tick - start, 0), key.second, vel, key.first});
    }
  }
  std::sort(out.notes.begin(), out.notes.end());
  return out;
}

}  // namespace detail

/// Parses a format-0 or format-1 SMF. Unmatched note-ons are closed at the end of their track.
inline RawScore parse_midi(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 14 || r.be(4) != 0x4D546864) throw MalformedFile("missing MThd header");
  std::uint32_t hlen = r.be(4);
  if (hlen < 6) throw MalformedFile("header chunk too short");
  auto header = r.take(hlen);
  int format = (header[0] << 8) | header[1];
  int ntracks = (header[2] << 8) | header[3];
  int division = (header[4] << 8) | header[5];
  if (format == 2) throw UnsupportedFormat("SMF type 2 is not supported");
  if (format > 2) throw MalformedFile("unknown SMF format " + std::to_string(format));
  if (division & 0x8000) throw UnsupportedFormat("SMPTE time division is not supported");
  if (division == 0) throw MalformedFile("zero ticks per quarter");

  RawScore raw;
  raw.ticks_per_quarter = division;
  int seen = 0;
  while (!r.done() && seen < ntracks) {
    if (r.remaining() < 8) throw MalformedFile("truncated chunk header");
    std::uint32_t id = r.be(4);
    std::uint32_t len = r.be(4);
    auto body = r.take(len);
    if (id != 0x4D54726B) continue;  // unknown chunk
    ++seen;
    auto t = detail::parse_track(body);
    raw.tracks.push_back(std::move(t.notes));
    raw.tempo_changes.insert(raw.tempo_changes.end(), t.tempos.begin(), t.tempos.end());
    raw.time_signatures.insert(raw.time_signatures.end(), t.meters.begin(), t.meters.end());
    raw.end_tick = std::max(raw.end_tick, t.end_tick);
  }
  if (seen < ntracks) throw MalformedFile("header announces more tracks than present");
  std::stable_sort(raw.tempo_changes.begin(), raw.tempo_changes.end(),
                   [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
  std::stable_sort(raw.time_signatures.begin(), raw.time_signatures.end(),
                   [](const TimeSignature& a, const TimeSignature& b) { return a.tick < b.tick; });
  return raw;
}

/**
 * Snaps a raw score onto the bar/sub-beat grid.
 *
 * Onsets go to the nearest sub-beat (ties to the earlier one), durations to the
 * nearest sixteenth clamped to 1..16, velocities and tempi to their classes,
 * and out-of-range pitches are folded by octaves so no note is dropped.
 */
inline QuantizedScore quantize(const RawScore& raw, int sub_beats_per_bar = 16) {
  const int B = sub_beats_per_bar;
  if (B != 16 && B != 32) throw std::invalid_argument("sub_beats_per_bar must be 16 or 32");
  for (const auto& ts : raw.time_signatures) {
    if (ts.numerator != 4 || ts.denominator != 4)
      throw UnsupportedMeter("time signature " + std::to_string(ts.numerator) + "/" +
                             std::to_string(ts.denominator) + " at tick " + std::to_string(ts.tick));
  }
  const std::int64_t tpq = raw.ticks_per_quarter;
  const std::int64_t ticks_per_bar = kBeatsPerBar * tpq;
  auto grid_of = [&](std::int64_t tick) { return round_half_down(tick * B, ticks_per_bar); };

  QuantizedScore q;
  q.sub_beats_per_bar = B;
  auto bar_at = [&](std::int64_t k) -> Bar& {
    if (static_cast<std::int64_t>(q.bars.size()) <= k) q.bars.resize(k + 1);
    return q.bars[k];
  };

  for (const auto& track : raw.tracks) {
    for (const auto& ev : track) {
      std::int64_t g = grid_of(ev.onset_ticks);
      auto dur = round_half_down(ev.duration_ticks * 4, tpq);
      dur = std::clamp<std::int64_t>(dur, 1, kMaxDuration);
      bar_at(g / B).notes.push_back(
          {static_cast<int>(g % B), fold_pitch(ev.pitch), velocity_class(ev.velocity), static_cast<int>(dur)});
    }
  }
  for (const auto& tc : raw.tempo_changes) {
    std::int64_t g = grid_of(tc.tick);
    bar_at(g / B).tempos.push_back({static_cast<int>(g % B), tempo_class(tc.bpm)});
  }
  std::int64_t tail_bars = raw.end_tick / ticks_per_bar;
  if (tail_bars > static_cast<std::int64_t>(q.bars.size())) q.bars.resize(tail_bars);
  canonicalize(q);
  return q;
}

/**
 * Serializes a quantized score as a format-0 SMF at 480 ticks per quarter.
 *
 * Notes that overlap on the same pitch are spread over MIDI channels so that
 * every note-on/note-off pair is recovered exactly on re-parse.
 */
inline std::vector<std::uint8_t> write_midi(const QuantizedScore& q) {
  validate(q);
  constexpr std::int64_t tpq = 480;
  const int B = q.sub_beats_per_bar;
  const std::int64_t ticks_per_bar = kBeatsPerBar * tpq;
  const std::int64_t ticks_per_sub = ticks_per_bar / B;
  const std::int64_t ticks_per_unit = tpq / 4;

  struct Ev {
    std::int64_t tick;
    int order;  // 0 meta, 1 note-off, 2 note-on
    std::vector<std::uint8_t> bytes;
  };
  std::vector<Ev> events;
  if (!q.bars.empty()) events.push_back({0, 0, {0xFF, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08}});

  struct Placed {
    std::int64_t on, off;
    int pitch, vel;
  };
  std::vector<Placed> notes;
  for (std::size_t k = 0; k < q.bars.size(); ++k) {
    const auto base = static_cast<std::int64_t>(k) * ticks_per_bar;
    for (const auto& t : q.bars[k].tempos) {
      auto us = static_cast<std::uint32_t>(std::llround(60'000'000.0 / tempo_class_bpm(t.tempo_class)));
      events.push_back({base + t.sub_beat * ticks_per_sub, 0,
                        {0xFF, 0x51, 0x03, static_cast<std::uint8_t>(us >> 16),
                         static_cast<std::uint8_t>(us >> 8), static_cast<std::uint8_t>(us)}});
    }
    for (const auto& n : q.bars[k].notes) {
      auto on = base + n.sub_beat * ticks_per_sub;
      notes.push_back({on, on + n.duration * ticks_per_unit, n.pitch, velocity_class_value(n.velocity)});
    }
  }
  // interval colouring per pitch: a channel is free once its previous note has ended
  std::sort(notes.begin(), notes.end(), [](const Placed& a, const Placed& b) {
    return std::tie(a.on, a.pitch, a.off) < std::tie(b.on, b.pitch, b.off);
  });
  std::map<int, std::array<std::int64_t, 16>> busy_until;
  for (const auto& n : notes) {
    auto& slots = busy_until.try_emplace(n.pitch, std::array<std::int64_t, 16>{}).first->second;
    int ch = -1;
    for (int c = 0; c < 16; ++c) {
      if (c == 9) continue;  // keep the percussion channel clear
      if (slots[c] <= n.on) {
        ch = c;
        break;
      }
    }
    if (ch < 0) throw std::invalid_argument("more than 15 overlapping notes on pitch " + std::to_string(n.pitch));
    slots[ch] = n.off;
    events.push_back({n.on, 2, {static_cast<std::uint8_t>(0x90 | ch), static_cast<std::uint8_t>(n.pitch),
                                static_cast<std::uint8_t>(n.vel)}});
    events.push_back({n.off, 1, {static_cast<std::uint8_t>(0x80 | ch), static_cast<std::uint8_t>(n.pitch), 0x40}});
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Ev& a, const Ev& b) { return std::tie(a.tick, a.order) < std::tie(b.tick, b.order); });

  std::vector<std::uint8_t> track;
  std::int64_t now = 0;
  for (const auto& e : events) {
    detail::put_vlq(track, static_cast<std::uint32_t>(e.tick - now));
    now = e.tick;
    track.insert(track.end(), e.bytes.begin(), e.bytes.end());
  }
  std::int64_t end = std::max<std::int64_t>(now, static_cast<std::int64_t>(q.bars.size()) * ticks_per_bar);
  detail::put_vlq(track, static_cast<std::uint32_t>(end - now));
  track.insert(track.end(), {0xFF, 0x2F, 0x00});

  std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, 0, 0, 1};
  detail::put_be(out, tpq, 2);
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  detail::put_be(out, static_cast<std::uint32_t>(track.size()), 4);
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace barstyle
