#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "hiermusic/fsl/model.hpp"
#include "support/gradcheck.hpp"
#include "support/toy_fsl.hpp"

using namespace hiermusic;
using namespace hiermusic::fsl;

TEST(Jaccard, Examples) {
  EXPECT_NEAR(jaccard(Interval{0, 16}, Interval{8, 16}), 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(jaccard(Interval{3, 5}, Interval{3, 5}), 1.0);
  EXPECT_DOUBLE_EQ(jaccard(Interval{0, 4}, Interval{4, 4}), 0.0);
  EXPECT_DOUBLE_EQ(jaccard(Interval{2, 0}, Interval{2, 0}), 1.0);
}

TEST(Jaccard, SymmetricAndBounded) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    Interval a{static_cast<int>(rng() % 50), 1 + static_cast<int>(rng() % 30)};
    Interval b{static_cast<int>(rng() % 50), 1 + static_cast<int>(rng() % 30)};
    const double j = jaccard(a, b);
    EXPECT_DOUBLE_EQ(j, jaccard(b, a));
    EXPECT_GE(j, 0.0);
    EXPECT_LE(j, 1.0);
  }
}

TEST(RegLoss, Values) {
  EXPECT_DOUBLE_EQ(reg_loss({0, 16}, {0, 16}), 0.0);
  EXPECT_NEAR(reg_loss({0, 16}, {8, 16}), std::log(3.0), 1e-12);
  EXPECT_NEAR(reg_loss({0, 4}, {10, 4}), -std::log(1e-6), 1e-9);
}

TEST(GumbelClsLoss, UniformIsLogClasses) {
  const std::vector<double> p(6, 1.0 / 6.0);
  for (double tau : {1.0, 0.5, 0.1}) EXPECT_NEAR(gumbel_cls_loss(p, 2, tau), std::log(6.0), 1e-12);
}

TEST(GumbelClsLoss, ConfidentAndCorrectIsNearZeroAtLowTemperature) {
  const std::vector<double> p = {0.98, 0.004, 0.004, 0.004, 0.004, 0.004};
  EXPECT_LT(gumbel_cls_loss(p, 0, 0.05), 1e-6);
  EXPECT_GT(gumbel_cls_loss(p, 1, 0.05), 10.0);
}

TEST(GumbelClsLoss, NonPositiveTemperatureThrows) {
  const std::vector<double> p = {0.5, 0.5};
  EXPECT_THROW(gumbel_cls_loss(p, 0, 0.0), std::invalid_argument);
  nn::Tape t;
  auto v = t.constant(nn::Tensor::matrix(1, 2, {0.5, 0.5}));
  EXPECT_THROW(gumbel_cls_loss(v, {0}, -1.0), std::invalid_argument);
}

TEST(GumbelClsLoss, MonotoneInTemperatureWhenArgmaxIsCorrect) {
  const std::vector<double> p = {0.1, 0.6, 0.2, 0.1};
  double prev = 1e300;
  for (double tau = 1.0; tau >= 0.05; tau -= 0.05) {
    const double l = gumbel_cls_loss(p, 1, tau);
    EXPECT_LE(l, prev + 1e-12);
    prev = l;
  }
}

TEST(GumbelClsLoss, TapeMatchesDirectFormula) {
  std::mt19937_64 rng(9);
  const nn::Tensor theta = sample_gumbel(3, 4, rng);
  const nn::Tensor p = nn::Tensor::matrix(3, 4, {0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25});
  const std::vector<int> labels = {3, 0, 2};
  nn::Tape t;
  const double tape = gumbel_cls_loss(t.constant(p), labels, 0.5, &theta).value()[0];
  double direct = 0;
  for (std::size_t i = 0; i < 3; ++i) direct += gumbel_cls_loss(p.row(i), labels[i], 0.5, theta.row(i));
  EXPECT_NEAR(tape, direct / 3.0, 1e-12);
}

TEST(IouLoss, MatchesRegLossAtZeroOffsets) {
  nn::Tape t;
  auto d = t.constant(nn::Tensor::matrix(2, 2));
  const double v = iou_loss(d, {{0, 16}, {4, 8}}, {{8, 16}, {4, 8}}).value()[0];
  EXPECT_NEAR(v, (std::log(3.0) + 0.0) / 2.0, 1e-12);
}

TEST(IouLoss, GradientMatchesFiniteDifferences) {
  nn::ParamSet ps;
  ps.add("d", nn::Tensor::matrix(3, 2, {0.13, -0.21, -0.07, 0.31, 0.02, 0.05}));
  const std::vector<Interval> anchors = {{0, 16}, {10, 8}, {5, 12}};
  const std::vector<Interval> targets = {{3, 14}, {9, 13}, {2, 9}};
  auto r = hiermusic::testing::check_gradients(ps, [&](nn::ParamSet& p, bool backprop) {
    nn::Tape t;
    auto l = iou_loss(p.var(t, "d"), anchors, targets);
    if (backprop) t.backward(l);
    return l.value()[0];
  });
  EXPECT_LT(r.max_rel_err, 1e-5) << r.worst;
}

TEST(IouLoss, DisjointPairIsClampedWithoutGradient) {
  nn::ParamSet ps;
  ps.add("d", nn::Tensor::matrix(1, 2));
  nn::Tape t;
  auto l = iou_loss(ps.var(t, "d"), {{0, 4}}, {{20, 4}});
  t.backward(l);
  EXPECT_NEAR(l.value()[0], -std::log(1e-6), 1e-9);
  EXPECT_EQ(ps.at("d").grad[0], 0.0);
  EXPECT_EQ(ps.at("d").grad[1], 0.0);
}

TEST(FslLoss, Combination) {
  EXPECT_DOUBLE_EQ(fsl_loss({0.5}, {0.25}), 0.75);
  EXPECT_DOUBLE_EQ(fsl_loss({1.0, 2.0, 3.0}, {0.5, 1.5}), 2.0 + 1.0);
  EXPECT_DOUBLE_EQ(fsl_loss({1.0, 3.0}, {}), 2.0);
  EXPECT_THROW(fsl_loss({}, {}), std::invalid_argument);
}

namespace {

Scorer flat(double c = 0.5) {
  return [c](int, int) { return WindowScore{c, 0, 0, 0}; };
}

}  // namespace

TEST(ProposeL2R, EqualConfidenceTilesWithSmallestWindow) {
  const auto w = propose_l2r(24, default_window_sizes(), flat());
  ASSERT_EQ(w.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(w[static_cast<std::size_t>(i)].start, 8 * i);
    EXPECT_EQ(w[static_cast<std::size_t>(i)].length, 8);
  }
}

TEST(ProposeL2R, PrefersMostConfidentSize) {
  Scorer s = [](int, int len) { return WindowScore{len == 16 ? 0.9 : 0.3, 1, 0, 0}; };
  const auto w = propose_l2r(24, default_window_sizes(), s);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(w[0].scope(), (Interval{0, 16}));
  EXPECT_EQ(w[1].scope(), (Interval{16, 8}));
  EXPECT_TRUE(covers_exactly(w, 24));
}

TEST(ProposeL2R, EmptyThrows) {
  EXPECT_THROW(propose_l2r(0, default_window_sizes(), flat()), std::invalid_argument);
  EXPECT_THROW(propose_global(0, default_window_sizes(), flat()), std::invalid_argument);
}

TEST(ProposeL2R, EarlyBoundaryErrorShiftsEverythingAfter) {
  // Regression lengthens only the first window by delta bars.
  for (int delta : {1, 3}) {
    Scorer s = [delta](int start, int len) {
      WindowScore w{0.5, 0, 0, 0};
      if (start == 0 && len == 8) w.d_loglen = std::log((8.0 + delta) / 8.0);
      return w;
    };
    const auto base = propose_l2r(40, default_window_sizes(), flat());
    const auto shifted = propose_l2r(40, default_window_sizes(), s);
    ASSERT_GE(shifted.size(), 3u);
    for (std::size_t i = 1; i + 1 < shifted.size(); ++i) EXPECT_EQ(shifted[i].start, base[i].start + delta);
    EXPECT_TRUE(covers_exactly(shifted, 40));
  }
}

TEST(ProposeGlobal, SingleCentreOnShortSequenceCoversAll) {
  GlobalOptions o;
  o.m_count = 1;
  const auto w = propose_global(8, default_window_sizes(), flat(), o);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].scope(), (Interval{0, 8}));
}

TEST(ProposeGlobal, TwoWindowsPaddedExactly) {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    GlobalOptions o;
    o.seed = seed;
    o.m_count = 2;
    const auto w = propose_global(64, default_window_sizes(), flat(), o);
    EXPECT_TRUE(covers_exactly(w, 64));
    const auto real = std::count_if(w.begin(), w.end(), [](const CandidateWindow& c) { return !c.padding; });
    if (real != 2) continue;
    ++checked;
    const auto pads = static_cast<long>(w.size()) - real;
    EXPECT_GE(pads, 1);
    EXPECT_LE(pads, 3);
  }
  EXPECT_GT(checked, 10);
}

TEST(ProposeGlobal, SameSeedSameProposals) {
  Scorer s = [](int start, int len) { return WindowScore{std::fmod(start * 0.37 + len * 0.11, 1.0), start % 6, 0, 0}; };
  GlobalOptions o;
  o.seed = 42;
  const auto a = propose_global(100, default_window_sizes(), s, o);
  const auto b = propose_global(100, default_window_sizes(), s, o);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].scope(), b[i].scope());
  EXPECT_TRUE(covers_exactly(a, 100));
}

TEST(PadGap, PrefersHighConfidenceTiling) {
  Scorer s = [](int start, int len) { return WindowScore{start == 0 && len == 6 ? 0.9 : (start == 6 && len == 6 ? 0.9 : 0.1), 0, 0, 0}; };
  const auto w = pad_gap(0, 12, s, 4, 64);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(w[0].scope(), (Interval{0, 6}));
  EXPECT_EQ(w[1].scope(), (Interval{6, 6}));
}

// ---- model ----------------------------------------------------------------

namespace {

FslConfig small_config() {
  FslConfig c;
  c.epochs = 6;
  c.hidden = 32;
  c.random_windows = 20;
  return c;
}

}  // namespace

TEST(FslModel, UntrainedThrows) {
  FslModel m;
  chord::ChordSequence cs;
  cs.labels.assign(8, {1, 0});
  EXPECT_THROW(m.segment_bars(cs, Strategy::l2r), UntrainedError);
}

TEST(FslModel, ZeroEpochsLeavesInitialisation) {
  auto corpus = hiermusic::testing::fsl_pieces(synth::make_toy_corpus(4, 1));
  FslConfig c = small_config();
  c.epochs = 0;
  FslModel m(c);
  const nn::ParamSet before = m.params();
  const auto h = m.train(corpus);
  EXPECT_TRUE(h.train_loss.empty());
  EXPECT_TRUE(m.params() == before);
}

TEST(FslModel, TrainingReducesLoss) {
  auto corpus = hiermusic::testing::fsl_pieces(synth::make_toy_corpus(10, 2));
  FslModel m(small_config());
  const auto h = m.train(corpus, hiermusic::testing::fsl_pieces(synth::make_toy_corpus(3, 99)));
  ASSERT_EQ(h.train_loss.size(), 6u);
  ASSERT_EQ(h.val_loss.size(), 6u);
  // Training losses use annealed temperatures and noise; validation is comparable across epochs.
  EXPECT_LT(h.val_loss.back(), h.val_loss.front());
  EXPECT_TRUE(m.trained());
}

TEST(FslModel, SegmentationIsSortedDisjointDeterministic) {
  auto corpus = hiermusic::testing::fsl_pieces(synth::make_toy_corpus(10, 5));
  FslModel m(small_config());
  m.train(corpus);
  const auto& cs = corpus[0].chords;
  for (Strategy s : {Strategy::l2r, Strategy::global}) {
    const auto a = m.segment_bars(cs, s, 7);
    const auto b = m.segment_bars(cs, s, 7);
    EXPECT_EQ(a, b);
    int pos = 0;
    for (const auto& x : a) {
      EXPECT_EQ(x.start, pos);
      EXPECT_GE(x.bars, 1);
      pos += x.bars;
    }
    EXPECT_EQ(pos, cs.bar_count());
  }
}

TEST(FslModel, NoteScopesFollowBars) {
  std::mt19937_64 rng(4);
  const auto piece = synth::make_toy_piece(rng);
  std::vector<BarSection> bars;
  for (const auto& s : piece.sections) bars.push_back({s.label, s.start_bar, s.bars});
  const auto notes = to_note_sections(piece.seq, bars);
  ASSERT_EQ(notes.size(), piece.annotations.size());
  for (std::size_t i = 0; i < notes.size(); ++i) {
    EXPECT_EQ(notes[i].start, piece.annotations[i].start);
    EXPECT_EQ(notes[i].length, piece.annotations[i].length);
  }
  EXPECT_EQ(bar_sections_from_annotations(piece.seq, piece.annotations), bars);
}

TEST(FslModel, SingleSectionPiece) {
  synth::ToyOptions o;
  o.min_sections = o.max_sections = 1;
  auto corpus = hiermusic::testing::fsl_pieces(synth::make_toy_corpus(30, 8));
  FslModel m(small_config());
  m.train(corpus);
  auto one = hiermusic::testing::fsl_pieces(synth::make_toy_corpus(1, 77, o));
  const auto seg = m.segment_bars(one[0].chords, Strategy::l2r);
  ASSERT_FALSE(seg.empty());
  EXPECT_EQ(seg.front().start, 0);
  EXPECT_EQ(seg.back().start + seg.back().bars, one[0].chords.bar_count());
}

TEST(SegmentationScore, PerfectAndOffByHalf) {
  const auto s = score_segmentation({{0, 16}, {16, 8}}, {1, 2}, {{0, 16}, {16, 8}}, {1, 2});
  EXPECT_DOUBLE_EQ(s.mean_jaccard, 1.0);
  EXPECT_DOUBLE_EQ(s.label_accuracy, 1.0);
  const auto h = score_segmentation({{0, 16}}, {1}, {{8, 16}}, {0});
  EXPECT_NEAR(h.mean_jaccard, 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(h.label_accuracy, 0.0);
}
