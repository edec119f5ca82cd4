#pragma once

#include <vector>

#include "hiermusic/fsl/model.hpp"
#include "hiermusic/synth.hpp"

namespace hiermusic::testing {

inline fsl::FslPiece fsl_piece(const synth::ToyPiece& p, bool recognized = true) {
  fsl::FslPiece out;
  if (recognized) {
    out.chords = chord::recognize_chords(p.seq);
  } else {
    out.chords.labels = p.chords;
    out.chords.sources.assign(p.chords.size(), chord::LabelSource::rule);
  }
  for (const auto& s : p.sections) out.sections.push_back({s.label, s.start_bar, s.bars});
  return out;
}

inline std::vector<fsl::FslPiece> fsl_pieces(const std::vector<synth::ToyPiece>& ps, bool recognized = true) {
  std::vector<fsl::FslPiece> out;
  for (const auto& p : ps) out.push_back(fsl_piece(p, recognized));
  return out;
}

struct BenchScore {
  double jaccard = 0, accuracy = 0;
};

/// Mean over pieces of bar-level segmentation scores.
inline BenchScore bench(const fsl::FslModel& m, const std::vector<fsl::FslPiece>& pieces, fsl::Strategy s) {
  BenchScore r;
  for (const auto& p : pieces) {
    const auto pred = m.segment_bars(p.chords, s);
    std::vector<fsl::Interval> ti, pi;
    std::vector<int> tl, pl;
    for (const auto& t : p.sections) ti.push_back(t.scope()), tl.push_back(t.label);
    for (const auto& q : pred) pi.push_back(q.scope()), pl.push_back(q.label);
    const auto sc = fsl::score_segmentation(ti, tl, pi, pl);
    r.jaccard += sc.mean_jaccard;
    r.accuracy += sc.label_accuracy;
  }
  r.jaccard /= static_cast<double>(pieces.size());
  r.accuracy /= static_cast<double>(pieces.size());
  return r;
}

}  // namespace hiermusic::testing
