#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hiermusic/midi/image.hpp"

namespace hiermusic::attention {

enum class MaskKind { full, local, dilated, sparse, multiscale };
enum class Scale { note = 0, chord = 1, section = 2 };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::full: return "full";
    case MaskKind::local: return "local";
    case MaskKind::dilated: return "dilated";
    case MaskKind::sparse: return "sparse";
    case MaskKind::multiscale: return "multiscale";
  }
  return "?";
}

inline MaskKind parse_mask_kind(const std::string& s) {
  for (MaskKind k : {MaskKind::full, MaskKind::local, MaskKind::dilated, MaskKind::sparse, MaskKind::multiscale})
    if (s == mask_kind_name(k)) return k;
  throw std::invalid_argument("unknown mask kind '" + s + "'");
}

/// Boolean attendability over L query rows and L + G key columns. Columns
/// past L are summary slots: the mean of the positions in groups[g].
struct AttentionMask {
  MaskKind kind = MaskKind::full;
  int L = 0;
  bool causal = false;
  std::vector<std::vector<int>> groups;
  std::vector<char> cells;

  AttentionMask() = default;
  AttentionMask(MaskKind k, int len, std::vector<std::vector<int>> g = {}, bool c = false)
      : kind(k), L(len), causal(c), groups(std::move(g)),
        cells(static_cast<std::size_t>(len) * static_cast<std::size_t>(len + static_cast<int>(groups.size())), 0) {}

  int G() const { return static_cast<int>(groups.size()); }
  int width() const { return L + G(); }
  bool at(int i, int j) const { return cells[static_cast<std::size_t>(i) * width() + j] != 0; }
  void set(int i, int j, bool v = true) { cells[static_cast<std::size_t>(i) * width() + j] = v ? 1 : 0; }

  /// Attended columns per row, ascending.
  std::vector<std::vector<int>> columns() const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < width(); ++j)
        if (at(i, j)) out[static_cast<std::size_t>(i)].push_back(j);
    return out;
  }
};

struct MaskParams {
  int window = 3;  // local width; bidirectional masks reach window / 2 each side
  int stride = 1;  // dilation gap: attended offsets are multiples of stride + 1
  bool causal = false;
};

namespace detail {

inline bool local_ok(int i, int j, const MaskParams& p) {
  if (p.causal) return j <= i && i - j < p.window;
  return std::abs(i - j) <= p.window / 2;
}

inline bool dilated_ok(int i, int j, const MaskParams& p) {
  if (p.causal && j > i) return false;
  return std::abs(i - j) % (p.stride + 1) == 0;
}

}  // namespace detail

/// Single-pattern masks (full, local, dilated, sparse). Sparse is the local
/// window plus every (stride + 1)-th column as a global column.
inline AttentionMask build_mask(MaskKind kind, const MaskParams& p, int L) {
  if (L < 1) throw std::invalid_argument("build_mask: L must be >= 1");
  if (p.window < 1) throw std::invalid_argument("build_mask: window must be >= 1");
  if (p.stride < 0) throw std::invalid_argument("build_mask: stride must be >= 0");
  if (kind == MaskKind::multiscale) throw std::invalid_argument("build_mask: multiscale needs a scale pattern");
  AttentionMask m(kind, L, {}, p.causal);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) {
      bool ok = false;
      switch (kind) {
        case MaskKind::full: ok = !p.causal || j <= i; break;
        case MaskKind::local: ok = detail::local_ok(i, j, p); break;
        case MaskKind::dilated: ok = detail::dilated_ok(i, j, p); break;
        case MaskKind::sparse:
          ok = detail::local_ok(i, j, p) || ((!p.causal || j <= i) && j % (p.stride + 1) == 0);
          break;
        default: break;
      }
      if (ok) m.set(i, j);
    }
  return m;
}

/// Which positions each scale may reference. Summary columns: one per bar,
/// then one per section.
struct ScalePattern {
  int L = 0;
  std::vector<int> bar_of;      // per position
  std::vector<int> section_of;  // per position
  std::vector<std::vector<int>> bar_groups;
  std::vector<std::vector<int>> section_groups;
  std::array<int, 3> heads = {4, 2, 2};
  int note_window = 16;
  bool causal = false;

  int G() const { return static_cast<int>(bar_groups.size() + section_groups.size()); }
  std::vector<std::vector<int>> groups() const {
    auto g = bar_groups;
    g.insert(g.end(), section_groups.begin(), section_groups.end());
    return g;
  }
};

struct SectionSpan {
  int start = 0, length = 0;
};

/// `sections` must tile [0, L) in order; `bars` maps each position to a bar
/// index (non-decreasing). A bar cut by a section boundary becomes two groups.
inline ScalePattern build_scale_pattern(const std::vector<SectionSpan>& sections, const std::vector<int>& bars, int L,
                                        int note_window = 16, bool causal = false) {
  if (L < 1) throw std::invalid_argument("build_scale_pattern: L must be >= 1");
  if (static_cast<int>(bars.size()) != L) throw std::invalid_argument("build_scale_pattern: bar map must cover every position");
  ScalePattern p;
  p.L = L;
  p.note_window = note_window;
  p.causal = causal;
  p.section_of.assign(static_cast<std::size_t>(L), -1);
  int pos = 0;
  for (const auto& s : sections) {
    if (s.start != pos || s.length < 1)
      throw std::invalid_argument("build_scale_pattern: sections must tile the sequence; gap or overlap at " + std::to_string(pos));
    p.section_groups.emplace_back();
    for (int i = s.start; i < s.start + s.length && i < L; ++i) {
      p.section_of[static_cast<std::size_t>(i)] = static_cast<int>(p.section_groups.size() - 1);
      p.section_groups.back().push_back(i);
    }
    pos += s.length;
  }
  if (pos != L) throw std::invalid_argument("build_scale_pattern: positions " + std::to_string(pos) + ".. are not covered by a section");
  for (int i = 0; i < L; ++i) {
    const int b = bars[static_cast<std::size_t>(i)];
    const auto ui = static_cast<std::size_t>(i);
    if (i == 0 || b != bars[ui - 1] || p.section_of[ui] != p.section_of[ui - 1]) p.bar_groups.emplace_back();
    p.bar_groups.back().push_back(i);
    p.bar_of.push_back(static_cast<int>(p.bar_groups.size() - 1));
  }
  return p;
}

/// Convenience: consecutive sections of the given lengths, bars of `bar_len`.
inline ScalePattern build_scale_pattern(const std::vector<int>& lengths, int bar_len = 16, int note_window = 16,
                                        bool causal = false) {
  std::vector<SectionSpan> s;
  int L = 0;
  for (int l : lengths) s.push_back({L, l}), L += l;
  std::vector<int> bars(static_cast<std::size_t>(std::max(L, 0)));
  for (int i = 0; i < L; ++i) bars[static_cast<std::size_t>(i)] = i / std::max(1, bar_len);
  return build_scale_pattern(s, bars, L, note_window, causal);
}

/// Mask for one scale. Note: local window. Chord: same bar, plus summaries of
/// the bars in the same section. Section: same section, plus every section
/// summary. Causal patterns only expose summaries of groups that ended before
/// the querying position, which the prefix alone determines.
inline AttentionMask scale_mask(const ScalePattern& p, Scale s) {
  AttentionMask m(MaskKind::multiscale, p.L, p.groups(), p.causal);
  const int nb = static_cast<int>(p.bar_groups.size());
  auto summary_ok = [&](int i, const std::vector<int>& g) { return !p.causal || g.back() < i; };
  for (int i = 0; i < p.L; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    for (int j = 0; j < p.L; ++j) {
      const auto uj = static_cast<std::size_t>(j);
      if (p.causal && j > i) continue;
      bool ok = false;
      switch (s) {
        case Scale::note: ok = detail::local_ok(i, j, {p.note_window, 0, p.causal}); break;
        case Scale::chord: ok = p.bar_of[ui] == p.bar_of[uj]; break;
        case Scale::section: ok = p.section_of[ui] == p.section_of[uj]; break;
      }
      if (ok) m.set(i, j);
    }
    if (s == Scale::chord) {
      for (int b = 0; b < nb; ++b) {
        const auto& g = p.bar_groups[static_cast<std::size_t>(b)];
        if (p.section_of[static_cast<std::size_t>(g.front())] == p.section_of[ui] && summary_ok(i, g)) m.set(i, p.L + b);
      }
    } else if (s == Scale::section) {
      for (std::size_t k = 0; k < p.section_groups.size(); ++k)
        if (summary_ok(i, p.section_groups[k])) m.set(i, p.L + nb + static_cast<int>(k));
    }
  }
  return m;
}

/// Elementwise union of the three scale masks.
inline AttentionMask build_mask(const ScalePattern& p) {
  AttentionMask u(MaskKind::multiscale, p.L, p.groups(), p.causal);
  for (Scale s : {Scale::note, Scale::chord, Scale::section}) {
    const auto m = scale_mask(p, s);
    for (std::size_t i = 0; i < u.cells.size(); ++i) u.cells[i] |= m.cells[i];
  }
  return u;
}

inline long long count_attended_pairs(const AttentionMask& m) {
  return std::count(m.cells.begin(), m.cells.end(), char{1});
}

/// Token-to-token part only (summary columns excluded).
inline long long count_token_pairs(const AttentionMask& m) {
  long long n = 0;
  for (int i = 0; i < m.L; ++i)
    for (int j = 0; j < m.L; ++j) n += m.at(i, j);
  return n;
}

/// L x (L + G) picture. Single masks are black on white; a scale pattern gets
/// one colour channel per scale (note red, chord green, section blue).
inline Image render_mask(const AttentionMask& m, int cell = 8) {
  Image img(m.width() * cell, m.L * cell);
  for (int i = 0; i < m.L; ++i)
    for (int j = 0; j < m.width(); ++j)
      if (m.at(i, j)) img.fill_rect(j * cell, i * cell, cell, cell, {0, 0, 0});
  return img;
}

inline Image render_mask(const ScalePattern& p, int cell = 8) {
  const std::array<AttentionMask, 3> ms = {scale_mask(p, Scale::note), scale_mask(p, Scale::chord),
                                           scale_mask(p, Scale::section)};
  const int w = p.L + p.G();
  Image img(w * cell, p.L * cell);
  for (int i = 0; i < p.L; ++i)
    for (int j = 0; j < w; ++j) {
      Rgb c = {255, 255, 255};
      bool any = false;
      for (int s = 0; s < 3; ++s)
        if (ms[static_cast<std::size_t>(s)].at(i, j)) {
          if (!any) c = {0, 0, 0};
          any = true;
          c[static_cast<std::size_t>(s)] = 220;
        }
      img.fill_rect(j * cell, i * cell, cell, cell, c);
    }
  for (int i = 0; i <= p.L; ++i) img.fill_rect(0, i * cell, w * cell, 1, {200, 200, 200});
  for (int j = 0; j <= w; ++j) img.fill_rect(j * cell, 0, 1, p.L * cell, {200, 200, 200});
  img.fill_rect(p.L * cell, 0, 2, p.L * cell, {120, 120, 120});
  return img;
}

/// PNG when the path ends in .png, PGM otherwise.
inline void write_mask_image(const std::string& path, const Image& img) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0) {
    write_png(path, img);
    return;
  }
  std::vector<char> cells(static_cast<std::size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Rgb c = img.get(x, y);
      cells[static_cast<std::size_t>(y) * img.width + x] = (c[0] + c[1] + c[2]) < 3 * 200 ? 1 : 0;
    }
  write_pgm(path, img.width, img.height, cells);
}

}  // namespace hiermusic::attention
