#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "hiermusic/midi/types.hpp"

namespace hiermusic::model {

/// Compound note tokens: pitch x advance class, where the advance is the step
/// gap to the next onset. Specials and section labels come first.
struct Vocab {
  static constexpr int kPad = 0, kStart = 1, kEnd = 2, kMask = 3, kSep = 4, kSpecials = 5;

  int pitch_lo = 21;
  int pitch_hi = 108;  // inclusive
  std::vector<int> advances = {0, 1, 2, 3, 4, 6, 8, 12, 16};
  int labels = 6;

  int pitches() const { return pitch_hi - pitch_lo + 1; }
  int label_base() const { return kSpecials; }
  int note_base() const { return kSpecials + labels; }
  int size() const { return note_base() + pitches() * static_cast<int>(advances.size()); }

  int label_token(int label) const {
    if (label < 0 || label >= labels) throw std::out_of_range("vocab: label " + std::to_string(label));
    return label_base() + label;
  }
  bool is_note(int id) const { return id >= note_base() && id < size(); }

  /// Nearest advance class; ties go to the shorter one.
  int advance_class(int steps) const {
    int best = 0;
    for (std::size_t k = 1; k < advances.size(); ++k)
      if (std::abs(advances[k] - steps) < std::abs(advances[static_cast<std::size_t>(best)] - steps)) best = static_cast<int>(k);
    return best;
  }

  int note_token(int pitch, int advance_steps) const {
    const int p = std::clamp(pitch, pitch_lo, pitch_hi) - pitch_lo;
    return note_base() + p * static_cast<int>(advances.size()) + advance_class(advance_steps);
  }
  int pitch_of(int id) const { return pitch_lo + (id - note_base()) / static_cast<int>(advances.size()); }
  int advance_of(int id) const { return advances[static_cast<std::size_t>((id - note_base()) % static_cast<int>(advances.size()))]; }

  /// Note tokens of a normalized sequence. The last note's advance is its
  /// duration.
  std::vector<int> encode(const midi::TokenSequence& seq) const {
    std::vector<int> out;
    out.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto& t = seq.tokens[i];
      const int adv = i + 1 < seq.size() ? seq.tokens[i + 1].onset - t.onset : t.duration;
      out.push_back(note_token(t.pitch, adv));
    }
    return out;
  }

  /// Notes from tokens, starting at `onset`. Non-note ids are skipped. A
  /// note's duration is the next non-zero advance at or after it (4 if none).
  midi::TokenSequence decode(const std::vector<int>& ids, int onset = 0) const {
    midi::TokenSequence s;
    std::vector<int> notes;
    for (int id : ids)
      if (is_note(id)) notes.push_back(id);
    int next_gap = 4;
    std::vector<int> dur(notes.size());
    for (std::size_t i = notes.size(); i-- > 0;) {
      if (advance_of(notes[i]) > 0) next_gap = advance_of(notes[i]);
      dur[i] = next_gap;
    }
    for (std::size_t i = 0; i < notes.size(); ++i) {
      s.tokens.push_back({pitch_of(notes[i]), onset, dur[i]});
      onset += advance_of(notes[i]);
    }
    s.normalize();
    return s;
  }

  /// Bar index of each token position, from cumulative advances. Non-note ids
  /// stay in the current bar.
  std::vector<int> bars(const std::vector<int>& ids, int bar_length = 16, int onset = 0) const {
    std::vector<int> b;
    b.reserve(ids.size());
    for (int id : ids) {
      b.push_back(onset / bar_length);
      if (is_note(id)) onset += advance_of(id);
    }
    return b;
  }

  /// Total steps spanned by the advances.
  int span(const std::vector<int>& ids) const {
    int s = 0;
    for (int id : ids)
      if (is_note(id)) s += advance_of(id);
    return s;
  }
};

}  // namespace hiermusic::model
