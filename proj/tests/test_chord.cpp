#include <gtest/gtest.h>

#include <bit>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "hiermusic/chord/recognize.hpp"
#include "hiermusic/synth.hpp"

using namespace hiermusic;
using namespace hiermusic::chord;

namespace {

midi::TokenSequence bar_of(const std::vector<int>& pitches, int bar = 0) {
  midi::TokenSequence s;
  int step = 0;
  for (int p : pitches) s.tokens.push_back({p, bar * 16 + (step++ % 16), 2});
  s.normalize();
  return s;
}

PitchClassVector pcv_of(std::initializer_list<int> pcs) {
  PitchClassVector v{};
  for (int p : pcs) ++v[static_cast<std::size_t>(p)];
  return v;
}

}  // namespace

TEST(ChordTable, DataFileMatchesEmbeddedTable) {
  const auto file = load_chord_table(std::string(HIERMUSIC_DATA_DIR) + "/chord_profiles.tsv");
  EXPECT_EQ(file, chord_table());
}

TEST(ChordTable, ShapeAndDistinctProfiles) {
  ASSERT_EQ(chord_table().size(), 48u);
  std::set<std::vector<int>> profiles;
  for (int id = 1; id <= kNumTypes; ++id) {
    const auto& t = chord_type(id);
    EXPECT_EQ(t.id, id);
    EXPECT_EQ(t.intervals.front(), 0);
    EXPECT_TRUE(std::is_sorted(t.intervals.begin(), t.intervals.end()));
    profiles.insert(t.intervals);
  }
  EXPECT_EQ(profiles.size(), 48u);
  EXPECT_EQ(chord_type(1).intervals, (std::vector<int>{0, 4, 7}));
  EXPECT_EQ(chord_type(9).intervals, (std::vector<int>{0, 3, 7}));
}

TEST(PitchClassVector, Examples) {
  EXPECT_EQ(pitch_class_vector(bar_of({60, 64, 67}), 0), pcv_of({0, 4, 7}));
  EXPECT_EQ(pitch_class_vector(bar_of({60, 64, 67}), 1), PitchClassVector{});
  EXPECT_EQ(pitch_class_vector(bar_of({60, 72}), 0)[0], 2);
  const auto s = bar_of({60, 62, 65}, 3);
  const auto v = pitch_class_vector(s, 3);
  EXPECT_EQ(std::accumulate(v.begin(), v.end(), 0), 3);
}

TEST(MatchTemplate, Examples) {
  EXPECT_EQ(match_template(pcv_of({0, 4, 7})), (ChordLabel{1, 0}));
  EXPECT_EQ(match_template(pcv_of({2, 5, 9})), (ChordLabel{9, 2}));
  EXPECT_FALSE(match_template(pcv_of({0})).has_value());
  EXPECT_FALSE(match_template(pcv_of({0, 1, 2})).has_value());
  EXPECT_FALSE(match_template(PitchClassVector{}).has_value());
}

TEST(MatchTemplate, SymmetricChordsUseBassThenSmallestRoot) {
  // Diminished seventh: every rotation is the same set.
  EXPECT_EQ(match_template(pcv_of({0, 3, 6, 9})), (ChordLabel{43, 0}));
  EXPECT_EQ(match_template(pcv_of({0, 3, 6, 9}), 6), (ChordLabel{43, 6}));
  // C6 and Am7 spell the same set.
  EXPECT_EQ(match_template(pcv_of({0, 4, 7, 9}), 0), (ChordLabel{20, 0}));
  EXPECT_EQ(match_template(pcv_of({0, 4, 7, 9}), 9), (ChordLabel{12, 9}));
}

// Every profile at every root, voiced with the root lowest, comes back exactly.
TEST(MatchTemplate, ExhaustiveAllProfilesAllRoots) {
  int recovered = 0;
  for (int type = 1; type < kNumTypes; ++type) {
    for (int root = 0; root < 12; ++root) {
      std::vector<int> pitches = {36 + root};
      for (int iv : chord_type(type).intervals) pitches.push_back(60 + (root + iv) % 12);
      const auto seq = bar_of(pitches);
      const auto cs = recognize_chords(seq);
      ASSERT_EQ(cs.bar_count(), 1);
      EXPECT_EQ(cs.labels[0], (ChordLabel{type, root})) << "type " << type << " root " << root;
      EXPECT_EQ(cs.sources[0], LabelSource::template_match);
      recovered += cs.labels[0] == ChordLabel{type, root};
    }
  }
  EXPECT_EQ(recovered, 47 * 12);
}

TEST(RecognizeChords, SingleNotesAreNonChord) {
  for (int pc = 0; pc < 12; ++pc) {
    const auto cs = recognize_chords(bar_of({48 + pc, 60 + pc, 72 + pc}));
    EXPECT_EQ(cs.labels[0].type_id, kNonChord);
    EXPECT_EQ(cs.sources[0], LabelSource::rule);
  }
}

TEST(MatchTemplate, TranspositionShiftsRoot) {
  std::mt19937_64 rng(4);
  int matched = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    PitchClassVector v{};
    const int n = 3 + static_cast<int>(rng() % 3);
    for (int i = 0; i < n; ++i) v[rng() % 12] = 1;
    const int bass = static_cast<int>(rng() % 12);
    v[static_cast<std::size_t>(bass)] = 1;
    const auto m = match_template(v, bass);
    for (int k = 1; k < 12; ++k) {
      const auto mk = match_template(transpose_pcv(v, k), (bass + k) % 12);
      ASSERT_EQ(m.has_value(), mk.has_value());
      if (m) {
        EXPECT_EQ(mk->type_id, m->type_id);
        EXPECT_EQ(mk->root, (m->root + k) % 12);
      }
    }
    matched += m.has_value();
  }
  EXPECT_GT(matched, 50);
}

TEST(RecognizeChords, AllTriadPieceNeedsNoClassifier) {
  midi::TokenSequence seq;
  const ChordLabel prog[] = {{1, 0}, {9, 9}, {1, 5}, {1, 7}};
  for (int b = 0; b < 12; ++b) synth::render_bar(seq, b, prog[b % 4], 1);
  seq.normalize();
  const auto cs = recognize_chords(seq);
  ASSERT_EQ(cs.bar_count(), 12);
  for (int b = 0; b < 12; ++b) {
    EXPECT_EQ(cs.labels[static_cast<std::size_t>(b)], prog[b % 4]);
    EXPECT_EQ(cs.sources[static_cast<std::size_t>(b)], LabelSource::template_match);
  }
}

TEST(RecognizeChords, EmptyPiece) {
  EXPECT_EQ(recognize_chords(midi::TokenSequence{}).bar_count(), 0);
}

TEST(RecognizeChords, UnresolvedBarWithoutClassifierThrows) {
  EXPECT_THROW(recognize_chords(bar_of({60, 61, 62, 63})), UntrainedError);
  ChordClassifier untrained;
  EXPECT_THROW(untrained.estimate({}), UntrainedError);
  EXPECT_THROW(recognize_chords(bar_of({60, 61, 62, 63}), &untrained), UntrainedError);
}

TEST(RecognizeChords, EmptyBarEmptyContextIsNonChord) {
  midi::TokenSequence seq;
  seq.tokens = {{60, 32, 4}};  // bars 0 and 1 are empty
  const auto cs = recognize_chords(seq);
  ASSERT_EQ(cs.bar_count(), 3);
  EXPECT_EQ(cs.labels[0].type_id, kNonChord);
  EXPECT_EQ(cs.labels[1].type_id, kNonChord);
}

namespace {

struct TrainedGrammar {
  ChordClassifier clf;
  std::vector<synth::ProgressionPiece> held_out;
};

const TrainedGrammar& grammar_classifier() {
  static const TrainedGrammar g = [] {
    std::mt19937_64 rng(21);
    std::vector<synth::ProgressionPiece> train;
    for (int i = 0; i < 150; ++i) train.push_back(synth::make_progression_piece(rng, 16, 0.25));
    std::vector<ChordExample> ex;
    for (const auto& p : train) {
      const auto s1 = template_pass(p.seq);
      for (int b = 0; b < s1.bar_count(); ++b)
        if (s1.sources[static_cast<std::size_t>(b)] == LabelSource::classifier)
          ex.push_back({context_at(s1, b, pitch_class_vector(p.seq, b), 2), p.truth[static_cast<std::size_t>(b)]});
    }
    std::vector<midi::TokenSequence> seqs;
    for (const auto& p : train) seqs.push_back(p.seq);
    const auto self = make_chord_examples(seqs, 2, 5);
    ex.insert(ex.end(), self.begin(), self.end());
    ChordClassifierConfig cfg;
    cfg.epochs = 40;
    TrainedGrammar g{ChordClassifier(cfg), {}};
    g.clf.train(ex);
    for (int i = 0; i < 30; ++i) g.held_out.push_back(synth::make_progression_piece(rng, 16, 0.25));
    return g;
  }();
  return g;
}

}  // namespace

TEST(ChordClassifier, GrammarHeldOutAccuracy) {
  const auto& g = grammar_classifier();
  int correct = 0, total = 0, classified = 0, classified_ok = 0;
  for (const auto& p : g.held_out) {
    const auto cs = recognize_chords(p.seq, &g.clf);
    for (int b = 0; b < cs.bar_count(); ++b) {
      const bool ok = cs.labels[static_cast<std::size_t>(b)] == p.truth[static_cast<std::size_t>(b)];
      correct += ok;
      ++total;
      if (cs.sources[static_cast<std::size_t>(b)] == LabelSource::classifier) {
        ++classified;
        classified_ok += ok;
      }
    }
  }
  ASSERT_GT(classified, 20);
  EXPECT_GE(static_cast<double>(correct) / total, 0.95);
  EXPECT_GE(static_cast<double>(classified_ok) / classified, 0.9);
}

// Deterministic grammar: the context alone pins down the centre chord, so the
// Bayes answer under a drop-one-tone noise model is computable by counting.
TEST(ChordClassifier, AgreesWithBruteForceBayes) {
  const auto& g = grammar_classifier();
  std::mt19937_64 rng(99);
  // n-gram statistics: (context) -> counts of centre label, from clean pieces.
  std::map<std::vector<ChordLabel>, std::map<ChordLabel, int>> stats;
  for (int i = 0; i < 400; ++i) {
    const auto p = synth::make_progression_piece(rng, 16, 0.0);
    for (int b = 2; b + 2 < 16; ++b) {
      std::vector<ChordLabel> ctx = {p.truth[b - 2], p.truth[b - 1], p.truth[b + 1], p.truth[b + 2]};
      ++stats[ctx][p.truth[static_cast<std::size_t>(b)]];
    }
  }
  int agree = 0, cases = 0;
  for (const auto& [ctx, centre] : stats) {
    for (const auto& [truth, cnt] : centre) {
      const auto& iv = chord_type(truth.type_id).intervals;
      for (std::size_t drop = 1; drop < iv.size(); ++drop) {
        PitchClassVector v{};
        for (std::size_t k = 0; k < iv.size(); ++k)
          if (k != drop) v[static_cast<std::size_t>((truth.root + iv[k]) % 12)] = 1;
        if (match_template(v, truth.root)) continue;  // step 1 would resolve it
        // Bayes: argmax_c count(ctx, c) * P(v | c), P = 1/(|c|-1) when v is c minus one non-root tone.
        double best = -1;
        ChordLabel bayes;
        for (const auto& [c, k] : centre) {
          const auto m = profile_mask(c.type_id, c.root), vm = pc_mask(v);
          const int sz = std::popcount(m);
          const double like = ((vm & ~m) == 0 && std::popcount(static_cast<unsigned>(m & ~vm)) == 1) ? 1.0 / (sz - 1) : 0;
          if (k * like > best) best = k * like, bayes = c;
        }
        ChordContext c{ctx, v};
        agree += g.clf.estimate(c) == bayes;
        ++cases;
      }
    }
  }
  ASSERT_GT(cases, 10);
  EXPECT_GE(static_cast<double>(agree) / cases, 0.95);
}

TEST(ChordClassifier, ZeroEpochsLeavesInitAndDeterministic) {
  ChordClassifierConfig cfg;
  cfg.epochs = 0;
  ChordClassifier a(cfg), b(cfg);
  const auto init = a.params();
  a.train({ChordExample{{{}, pcv_of({0, 4})}, {1, 0}}});
  EXPECT_EQ(a.params(), init);
  EXPECT_EQ(a.params(), b.params());
}

TEST(ChordClassifier, TrainingReducesLoss) {
  std::mt19937_64 rng(2);
  std::vector<midi::TokenSequence> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back(synth::make_progression_piece(rng, 16, 0.0).seq);
  const auto ex = make_chord_examples(seqs, 2, 3);
  ChordClassifierConfig cfg;
  cfg.epochs = 5;
  ChordClassifier clf(cfg);
  const double before = clf.loss(ex);
  clf.train(ex);
  EXPECT_LT(clf.loss(ex), before);
}

TEST(Ngrams, Counts) {
  ChordSequence cs;
  for (int i = 0; i < 5; ++i) cs.labels.push_back({1, i}), cs.sources.push_back(LabelSource::template_match);
  EXPECT_EQ(chord_progression_ngrams(cs, 3).size(), 3u);
  ChordSequence constant;
  constant.labels.assign(8, {9, 2});
  const auto g = chord_progression_ngrams(constant);
  EXPECT_EQ(g.size(), 6u);
  EXPECT_EQ(distinct_ngrams(g), 1u);
  ChordSequence loop;
  const ChordLabel prog[] = {{1, 0}, {9, 9}, {1, 5}, {1, 7}};
  for (int b = 0; b < 16; ++b) loop.labels.push_back(prog[b % 4]);
  EXPECT_EQ(distinct_ngrams(chord_progression_ngrams(loop)), 4u);
  ChordSequence shortseq;
  shortseq.labels.assign(2, {1, 0});
  EXPECT_TRUE(chord_progression_ngrams(shortseq).empty());
}

// Bars 19-21 (1-based) repeat the note content of bars 2-4 together with
// their neighbourhood; bar 17 is an unresolvable cluster so both runs see the
// same unknown left context.
TEST(RecognizeChords, RepeatedBarsGetRepeatedLabels) {
  const auto& g = grammar_classifier();
  std::mt19937_64 rng(8);
  const auto base = synth::make_progression_piece(rng, 24, 0.4);
  midi::TokenSequence seq;
  for (const auto& t : base.seq.tokens) {
    const int bar = t.onset / 16;
    if (bar < 16 || bar > 22) seq.tokens.push_back(t);
    if (bar <= 5) seq.tokens.push_back({t.pitch, t.onset + 17 * 16, t.duration});
  }
  for (int p : {60, 61, 62, 63}) seq.tokens.push_back({p, 16 * 16, 4});
  seq.normalize();
  const auto cs = recognize_chords(seq, &g.clf);
  ASSERT_EQ(cs.bar_count(), 24);
  for (int b = 1; b <= 3; ++b) {
    EXPECT_EQ(cs.labels[static_cast<std::size_t>(b)], cs.labels[static_cast<std::size_t>(b + 17)]) << b;
    EXPECT_EQ(cs.sources[static_cast<std::size_t>(b)], cs.sources[static_cast<std::size_t>(b + 17)]);
  }
}

TEST(ChordJson, Shape) {
  const auto j = chords_to_json(recognize_chords(bar_of({60, 64, 67})));
  EXPECT_EQ(j["bars"][0]["name"], "C");
  EXPECT_EQ(j["bars"][0]["source"], "template");
}
