#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

#include "hiermusic/log.hpp"
#include "hiermusic/midi/smf.hpp"
#include "hiermusic/midi/types.hpp"

namespace hiermusic::midi {

/// Nearest grid step for `ticks`, ties resolved toward the earlier step.
/// step = ceil(ticks * grid / tpq - 1/2), computed exactly in integers.
inline long snap_to_grid(long ticks, int ticks_per_quarter, int steps_per_quarter = 4) {
  const long num = 2 * ticks * steps_per_quarter - ticks_per_quarter;  // (2x - 1) scaled by tpq
  const long den = 2L * ticks_per_quarter;
  if (num <= 0) return num > -den ? 0 : -((-num) / den);
  return (num + den - 1) / den;
}

struct QuantizeStats {
  double max_snap_steps = 0.0;  // largest onset displacement, in steps
  std::size_t clamped = 0;      // durations that rounded to zero
};

/// Snaps onsets and durations to the semiquaver grid. Lossy; the largest snap
/// distance is logged at debug level and returned through `stats`.
inline TokenSequence quantize(const std::vector<NoteEvent>& events, int ticks_per_quarter, int steps_per_quarter = 4,
                              int bar_length = 16, QuantizeStats* stats = nullptr) {
  TokenSequence seq;
  seq.steps_per_quarter = steps_per_quarter;
  seq.bar_length = bar_length;
  QuantizeStats st;
  for (const auto& e : events) {
    Token t;
    t.pitch = e.pitch;
    t.onset = static_cast<int>(snap_to_grid(e.onset, ticks_per_quarter, steps_per_quarter));
    t.duration = static_cast<int>(snap_to_grid(e.duration, ticks_per_quarter, steps_per_quarter));
    if (t.duration < 1) {
      t.duration = 1;
      ++st.clamped;
    }
    const double exact = static_cast<double>(e.onset) * steps_per_quarter / ticks_per_quarter;
    st.max_snap_steps = std::max(st.max_snap_steps, std::abs(exact - t.onset));
    seq.tokens.push_back(t);
  }
  seq.normalize();
  log_debug("quantize: max onset snap " + std::to_string(st.max_snap_steps) + " steps, " +
            std::to_string(st.clamped) + " durations clamped");
  if (stats) *stats = st;
  return seq;
}

inline TokenSequence quantize(const MidiFile& f, int steps_per_quarter = 4, int bar_length = 16) {
  TokenSequence seq = quantize(f.notes, f.ticks_per_quarter, steps_per_quarter, bar_length);
  seq.bpm = f.initial_bpm();
  return seq;
}

/// Grid steps back to ticks (exact when tpq is a multiple of the grid).
inline std::vector<NoteEvent> to_events(const TokenSequence& seq, int ticks_per_quarter = 480, int velocity = 80) {
  std::vector<NoteEvent> out;
  out.reserve(seq.tokens.size());
  const long mul = ticks_per_quarter / seq.steps_per_quarter;
  for (const auto& t : seq.tokens)
    out.push_back({t.pitch, t.onset * mul, std::max(1L, t.duration * mul), velocity, 0});
  std::sort(out.begin(), out.end(), note_event_less);
  return out;
}

}  // namespace hiermusic::midi
