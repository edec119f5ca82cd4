#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hiermusic/chord/recognize.hpp"
#include "hiermusic/midi/annotations.hpp"
#include "hiermusic/midi/types.hpp"

// Toy corpora with known ground truth: chords per bar, labelled sections.
namespace hiermusic::synth {

using chord::ChordLabel;

/// One note of a bar pattern: chord tone index (wrapping up an octave past
/// the chord size), onset step, duration, octave offset.
struct PatternNote {
  int tone, step, duration, octave;
};
using BarPattern = std::vector<PatternNote>;

inline const std::vector<BarPattern>& bar_patterns() {
  static const std::vector<BarPattern> p = {
      // 0: block chord
      {{0, 0, 16, -1}, {0, 0, 16, 0}, {1, 0, 16, 0}, {2, 0, 16, 0}},
      // 1: quarter-note arpeggio
      {{0, 0, 4, -1}, {1, 4, 4, 0}, {2, 8, 4, 0}, {1, 12, 4, 0}},
      // 2: bass + eighth-note arpeggio
      {{0, 0, 8, -1}, {0, 0, 2, 0}, {1, 2, 2, 0}, {2, 4, 2, 0}, {3, 6, 2, 0},
       {2, 8, 2, 0}, {1, 10, 2, 0}, {0, 12, 2, 1}, {2, 14, 2, 0}},
      // 3: half-note dyads
      {{0, 0, 8, -1}, {2, 0, 8, 0}, {1, 8, 8, 0}, {3, 8, 8, 0}},
      // 4: sustained root + third
      {{0, 0, 16, -1}, {1, 0, 16, 0}, {2, 8, 8, 0}},
      // 5: descending quarters
      {{0, 0, 4, -1}, {2, 4, 4, 0}, {1, 8, 4, 0}, {0, 12, 4, 0}},
  };
  return p;
}

/// Noise applied when rendering one bar.
struct BarNoise {
  int drop_pc = -1;  // pitch class to omit (never the bass note)
  int add_pc = -1;   // foreign pitch class added as a passing note
};

/// Appends one bar of `chord` (a non-chord label renders a lone root note).
inline void render_bar(midi::TokenSequence& seq, int bar, const ChordLabel& c, int pattern, BarNoise noise = {}) {
  const int base = bar * seq.bar_length;
  if (!c.is_chord()) {
    seq.tokens.push_back({60 + std::max(c.root, 0), base, seq.bar_length});
    return;
  }
  const auto& iv = chord::chord_type(c.type_id).intervals;
  const int n = static_cast<int>(iv.size());
  const auto& pat = bar_patterns()[static_cast<std::size_t>(pattern) % bar_patterns().size()];
  for (const auto& pn : pat) {
    const int wrap = pn.tone / n, idx = pn.tone % n;
    const int pitch = 60 + c.root + iv[static_cast<std::size_t>(idx)] + 12 * (wrap + pn.octave);
    const bool is_bass = pn.octave < 0 && pn.tone == 0;
    if (!is_bass && pitch % 12 == noise.drop_pc) continue;
    seq.tokens.push_back({pitch, base + pn.step, pn.duration});
  }
  // Tones the pattern does not reach (sevenths and up) fill in on the last beat.
  std::uint16_t have = 0;
  for (std::size_t i = seq.tokens.size(); i-- > 0 && seq.tokens[i].onset >= base;)
    have |= static_cast<std::uint16_t>(1u << (seq.tokens[i].pitch % 12));
  for (int k = 0; k < n; ++k) {
    const int pc = (c.root + iv[static_cast<std::size_t>(k)]) % 12;
    if (pc != noise.drop_pc && !(have & (1u << pc))) seq.tokens.push_back({72 + pc, base + 12, 4});
  }
  if (noise.add_pc >= 0) seq.tokens.push_back({72 + noise.add_pc, base + 15, 1});
}

// ---------------------------------------------------------------------------
// Sectioned toy songs.

/// Four-bar chord signature per section label (index = label id).
inline const std::vector<std::array<ChordLabel, 4>>& label_signatures() {
  static const std::vector<std::array<ChordLabel, 4>> s = {
      {{{36, 0}, {36, 5}, {36, 0}, {44, 7}}},   // intro: Cj7 Fj7 Cj7 Gsus
      {{{1, 0}, {9, 9}, {1, 5}, {1, 7}}},       // verse: C Am F G
      {{{1, 5}, {1, 7}, {9, 4}, {9, 9}}},       // chorus: F G Em Am
      {{{12, 2}, {23, 7}, {36, 0}, {23, 9}}},   // bridge: Dm7 G7 Cj7 A7
      {{{1, 5}, {9, 5}, {1, 0}, {44, 0}}},      // outro: F Fm C Csus
      {{{41, 11}, {23, 4}, {9, 9}, {42, 2}}},   // other: Bm7b5 E7 Am Do
  };
  return s;
}

/// Rhythm pattern per section label.
inline int label_pattern(int label) {
  static const int p[] = {0, 1, 2, 3, 4, 5};
  return p[label % 6];
}

struct ToySection {
  int label = 0;
  int start_bar = 0;
  int bars = 0;
};

struct ToyPiece {
  midi::TokenSequence seq;
  std::vector<ToySection> sections;               // in bars
  std::vector<midi::SectionAnnotation> annotations;  // in note indices
  std::vector<ChordLabel> chords;                 // ground truth per bar
};

struct ToyOptions {
  int min_sections = 3;
  int max_sections = 6;
  bool noisy = false;          // jitter section lengths off the 8/16 grid
  int noisy_min_bars = 5;
  int noisy_max_bars = 20;
  double passing_note_prob = 0.0;  // per bar
  std::vector<int> labels;         // allowed labels; empty = all six
};

/// Annotations in note indices for bar-level sections of a normalized sequence.
inline std::vector<midi::SectionAnnotation> annotations_from_bars(const midi::TokenSequence& seq,
                                                                  const std::vector<ToySection>& secs) {
  std::vector<midi::SectionAnnotation> out;
  for (const auto& s : secs) {
    const auto a = seq.first_token_of_bar(s.start_bar), b = seq.first_token_of_bar(s.start_bar + s.bars);
    out.push_back({midi::default_labels()[static_cast<std::size_t>(s.label)], static_cast<int>(a),
                   static_cast<int>(b - a)});
  }
  return out;
}

inline ToyPiece make_toy_piece(std::mt19937_64& rng, const ToyOptions& opt = {}) {
  ToyPiece p;
  std::vector<int> allowed = opt.labels;
  if (allowed.empty()) allowed = {0, 1, 2, 3, 4, 5};
  const int n = opt.min_sections + static_cast<int>(rng() % static_cast<unsigned>(opt.max_sections - opt.min_sections + 1));
  int bar = 0, prev = -1;
  for (int s = 0; s < n; ++s) {
    int label;
    do {
      label = allowed[rng() % allowed.size()];
    } while (allowed.size() > 1 && label == prev);
    prev = label;
    int len = (rng() % 2) ? 16 : 8;
    if (opt.noisy)
      len = opt.noisy_min_bars + static_cast<int>(rng() % static_cast<unsigned>(opt.noisy_max_bars - opt.noisy_min_bars + 1));
    p.sections.push_back({label, bar, len});
    const auto& sig = label_signatures()[static_cast<std::size_t>(label)];
    std::uniform_real_distribution<double> u(0, 1);
    for (int b = 0; b < len; ++b) {
      const ChordLabel c = sig[static_cast<std::size_t>(b % 4)];
      BarNoise noise;
      if (u(rng) < opt.passing_note_prob) {
        const auto mask = chord::profile_mask(c.type_id, c.root);
        do {
          noise.add_pc = static_cast<int>(rng() % 12);
        } while (mask & (1u << noise.add_pc));
      }
      render_bar(p.seq, bar + b, c, label_pattern(label), noise);
      p.chords.push_back(c);
    }
    bar += len;
  }
  p.seq.normalize();
  p.annotations = annotations_from_bars(p.seq, p.sections);
  return p;
}

inline std::vector<ToyPiece> make_toy_corpus(int count, std::uint64_t seed, const ToyOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::vector<ToyPiece> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(make_toy_piece(rng, opt));
    out.back().seq.source = "toy_" + std::to_string(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chord-progression grammar for the fallback classifier.

struct ProgressionPiece {
  midi::TokenSequence seq;
  std::vector<ChordLabel> truth;
  std::vector<char> corrupted;  // bar rendered with a missing or foreign note
};

/// Loops of common four-chord progressions (relative to the key), transposed
/// to a random key per piece. A fraction of bars lose one chord tone or gain
/// a foreign passing note, always leaving a set no profile matches.
inline ProgressionPiece make_progression_piece(std::mt19937_64& rng, int bars, double corrupt_prob) {
  static const std::vector<std::array<ChordLabel, 4>> progs = {
      {{{1, 0}, {9, 9}, {1, 5}, {1, 7}}},      // I vi IV V
      {{{12, 2}, {23, 7}, {36, 0}, {36, 0}}},  // ii7 V7 Imaj7
      {{{1, 0}, {1, 7}, {9, 9}, {1, 5}}},      // I V vi IV
      {{{9, 9}, {1, 5}, {1, 0}, {1, 7}}},      // vi IV I V
      {{{41, 11}, {23, 4}, {9, 9}, {9, 9}}},   // ii-7b5 V7 i (relative minor)
      {{{1, 0}, {44, 5}, {1, 5}, {45, 7}}},    // I IVsus IV Vsus7
  };
  ProgressionPiece p;
  const auto& prog = progs[rng() % progs.size()];
  const int key = static_cast<int>(rng() % 12);
  const int pattern = static_cast<int>(rng() % bar_patterns().size());
  std::uniform_real_distribution<double> u(0, 1);
  for (int b = 0; b < bars; ++b) {
    const ChordLabel c = chord::transpose_label(prog[static_cast<std::size_t>(b % 4)], key);
    BarNoise noise;
    const bool corrupt = u(rng) < corrupt_prob;
    if (corrupt) {
      // Only damage that leaves an incomplete chord: a corruption that happens
      // to spell another complete profile would be resolved by template matching.
      const auto& iv = chord::chord_type(c.type_id).intervals;
      const auto mask = chord::profile_mask(c.type_id, c.root);
      for (int attempt = 0; attempt < 16; ++attempt) {
        noise = {};
        if (rng() % 2 == 0 && iv.size() >= 3) {
          noise.drop_pc = (c.root + iv[1 + rng() % (iv.size() - 1)]) % 12;
        } else {
          do {
            noise.add_pc = static_cast<int>(rng() % 12);
          } while (mask & (1u << noise.add_pc));
        }
        std::uint16_t m = mask;
        if (noise.drop_pc >= 0) m &= static_cast<std::uint16_t>(~(1u << noise.drop_pc));
        if (noise.add_pc >= 0) m |= static_cast<std::uint16_t>(1u << noise.add_pc);
        chord::PitchClassVector v{};
        for (int i = 0; i < 12; ++i) v[static_cast<std::size_t>(i)] = (m >> i) & 1;
        if (!chord::match_template(v, c.root)) break;
        noise = {};
      }
    }
    render_bar(p.seq, b, c, pattern, noise);
    p.truth.push_back(c);
    p.corrupted.push_back(noise.drop_pc >= 0 || noise.add_pc >= 0 ? 1 : 0);
  }
  p.seq.normalize();
  return p;
}

// ---------------------------------------------------------------------------
// Per-label first-order Markov chains over K symbols. Each label follows its
// own successor permutation with probability 1 - (K - 1) * floor; every other
// transition has probability `floor`. The first symbol is uniform.
struct MarkovGrammar {
  int symbols = 12;
  double floor = 0.01;
  std::vector<std::vector<int>> successor;  // [label][symbol]

  int labels() const { return static_cast<int>(successor.size()); }

  double prob(int label, int from, int to) const {
    const double hit = 1.0 - floor * (symbols - 1);
    return successor[static_cast<std::size_t>(label)][static_cast<std::size_t>(from)] == to ? hit : floor;
  }

  std::vector<int> sample(int label, int n, std::mt19937_64& rng) const {
    std::vector<int> out;
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < n; ++i) {
      if (i == 0) {
        out.push_back(static_cast<int>(rng() % static_cast<unsigned>(symbols)));
        continue;
      }
      const int from = out.back();
      double r = u(rng), acc = 0;
      int next = symbols - 1;
      for (int b = 0; b < symbols; ++b)
        if ((acc += prob(label, from, b)) > r) {
          next = b;
          break;
        }
      out.push_back(next);
    }
    return out;
  }

  /// Log-likelihood of xs[from..] given the preceding symbol (uniform start
  /// when from == 0).
  double log_prob(int label, const std::vector<int>& xs, std::size_t from = 0) const {
    double lp = 0;
    for (std::size_t i = from; i < xs.size(); ++i)
      lp += i == 0 ? -std::log(static_cast<double>(symbols)) : std::log(prob(label, xs[i - 1], xs[i]));
    return lp;
  }
};

inline MarkovGrammar make_markov_grammar(int labels, int symbols, std::uint64_t seed, double floor = 0.01) {
  if (symbols < 2 || floor * (symbols - 1) >= 1.0) throw std::invalid_argument("markov grammar: bad symbol count or floor");
  std::mt19937_64 rng(seed);
  MarkovGrammar g;
  g.symbols = symbols;
  g.floor = floor;
  for (int l = 0; l < labels; ++l) {
    // A single cycle through all symbols, distinct per label.
    std::vector<int> order(static_cast<std::size_t>(symbols));
    for (int i = 0; i < symbols; ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> succ(static_cast<std::size_t>(symbols));
    for (int i = 0; i < symbols; ++i)
      succ[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = order[static_cast<std::size_t>((i + 1) % symbols)];
    g.successor.push_back(std::move(succ));
  }
  return g;
}

}  // namespace hiermusic::synth
