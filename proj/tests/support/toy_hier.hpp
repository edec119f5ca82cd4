#pragma once

#include <random>
#include <vector>

#include "hiermusic/model/hier.hpp"
#include "hiermusic/synth.hpp"

namespace hiermusic::testing {

inline model::HierPiece hier_piece(const synth::ToyPiece& p, const model::Vocab& v) {
  std::vector<fsl::BarSection> secs;
  for (const auto& s : p.sections) secs.push_back({s.label, s.start_bar, s.bars});
  return model::make_hier_piece(p.seq, secs, v);
}

inline std::vector<model::HierPiece> hier_pieces(const std::vector<synth::ToyPiece>& ps, const model::Vocab& v) {
  std::vector<model::HierPiece> out;
  for (const auto& p : ps) out.push_back(hier_piece(p, v));
  return out;
}

inline std::vector<model::HierSection> all_sections(const std::vector<model::HierPiece>& ps) {
  std::vector<model::HierSection> out;
  for (const auto& p : ps) out.insert(out.end(), p.sections.begin(), p.sections.end());
  return out;
}

/// Small, fast configuration for unit tests.
inline model::HierConfig tiny_hier(int labels = 6) {
  model::HierConfig c;
  c.vocab.labels = labels;
  c.dim = 16;
  c.ffn = 32;
  c.fine_layers = 1;
  c.coarse_layers = 1;
  c.fine_heads = {2, 2, 0};
  c.coarse_heads = {2, 1, 1};
  c.buckets = {64, 256};
  c.coarse_max_len = 1024;
  c.max_offset = 16;
  c.q_hidden = 16;
  c.batch = 4;
  c.lr = 1e-2;
  return c;
}

/// Sections repeating a per-label four-note motif, one note per eighth.
inline std::vector<model::HierSection> motif_sections(const model::Vocab& v, int per_label, int length, int labels,
                                                      std::uint64_t seed) {
  static const int motifs[4][4] = {{60, 64, 67, 71}, {62, 57, 65, 69}, {72, 67, 64, 60}, {55, 59, 62, 65}};
  std::mt19937_64 rng(seed);
  std::vector<model::HierSection> out;
  for (int l = 0; l < labels; ++l)
    for (int k = 0; k < per_label; ++k) {
      model::HierSection s;
      s.label = l;
      const int phase = static_cast<int>(rng() % 4);
      for (int i = 0; i < length; ++i) s.ids.push_back(v.note_token(motifs[l % 4][(i + phase) % 4], 2));
      s.bars = v.bars(s.ids);
      out.push_back(std::move(s));
    }
  return out;
}

}  // namespace hiermusic::testing
