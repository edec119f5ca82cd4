#pragma once

#include <algorithm>
#include <string>
#include <tuple>
#include <vector>

namespace hiermusic::midi {

/// A resolved note from a MIDI file, in file ticks.
struct NoteEvent {
  int pitch = 60;
  long onset = 0;
  long duration = 1;
  int velocity = 64;
  int track = 0;

  friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

inline bool note_event_less(const NoteEvent& a, const NoteEvent& b) {
  return std::tie(a.onset, a.track, a.pitch, a.duration, a.velocity) <
         std::tie(b.onset, b.track, b.pitch, b.duration, b.velocity);
}

/// One note on the semiquaver grid.
struct Token {
  int pitch = 60;
  int onset = 0;     // steps
  int duration = 1;  // steps, >= 1

  friend bool operator==(const Token&, const Token&) = default;
  friend auto operator<=>(const Token& a, const Token& b) {
    return std::tie(a.onset, a.pitch, a.duration) <=> std::tie(b.onset, b.pitch, b.duration);
  }
};

/// Quantized note sequence. Tokens are ordered by (onset, pitch, duration);
/// simultaneous notes share an onset step.
struct TokenSequence {
  std::vector<Token> tokens;
  int bar_length = 16;          // steps per bar
  int steps_per_quarter = 4;    // semiquaver grid
  double bpm = 120.0;           // tempo used to convert steps to seconds
  std::string source;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  void normalize() { std::sort(tokens.begin(), tokens.end()); }

  /// Bars spanned by note onsets: last onset bar + 1.
  int bar_count() const {
    if (tokens.empty()) return 0;
    int last = 0;
    for (const auto& t : tokens) last = std::max(last, t.onset);
    return last / bar_length + 1;
  }

  int end_step() const {
    int e = 0;
    for (const auto& t : tokens) e = std::max(e, t.onset + t.duration);
    return e;
  }

  double seconds_per_step() const { return 60.0 / bpm / static_cast<double>(steps_per_quarter); }

  /// Bar index of each token.
  std::vector<int> bar_of_tokens() const {
    std::vector<int> b;
    b.reserve(tokens.size());
    for (const auto& t : tokens) b.push_back(t.onset / bar_length);
    return b;
  }

  /// Index of the first token whose onset is in bar >= `bar`.
  std::size_t first_token_of_bar(int bar) const {
    const int step = bar * bar_length;
    return static_cast<std::size_t>(
        std::lower_bound(tokens.begin(), tokens.end(), step, [](const Token& t, int s) { return t.onset < s; }) -
        tokens.begin());
  }

  bool valid() const {
    if (bar_length <= 0) return false;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].onset < 0 || tokens[i].duration < 1) return false;
      if (i > 0 && tokens[i].onset < tokens[i - 1].onset) return false;
    }
    return true;
  }
};

}  // namespace hiermusic::midi
