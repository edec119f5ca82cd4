#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <vector>

#include "hiermusic/fsl/losses.hpp"

namespace hiermusic::fsl {

/// Candidate window sizes, in chord units (bars of 16 steps).
inline const std::vector<int>& default_window_sizes() {
  static const std::vector<int> s = {8, 16, 32, 64, 128, 256, 512, 1024};
  return s;
}

enum class Strategy { l2r, global };

inline const char* strategy_name(Strategy s) { return s == Strategy::l2r ? "l2r" : "global"; }

struct CandidateWindow {
  int size_index = -1;  // -1 for padding windows
  int size = 0;         // nominal window size before clamping/regression
  int start = 0;        // final scope, in bars
  int length = 0;
  Strategy strategy = Strategy::l2r;
  int label = -1;
  double confidence = 0.0;
  bool padding = false;

  Interval scope() const { return {start, length}; }
};

/// What the classification and regression layers say about one window.
struct WindowScore {
  double confidence = 0.0;  // probability that the window is a section
  int label = -1;           // most likely section label
  double d_start = 0.0;     // regression offsets relative to the window
  double d_loglen = 0.0;
};

using Scorer = std::function<WindowScore(int start, int length)>;

namespace detail {

inline Interval clamp_window(int start, int length, int bars) {
  length = std::clamp(length, 1, bars);
  start = std::clamp(start, 0, bars - length);
  return {start, length};
}

inline Interval regressed(Interval w, const WindowScore& s, int bars) {
  const auto [a, b] = apply_offsets(w.start, w.length, s.d_start, s.d_loglen);
  int s0 = static_cast<int>(std::lround(a)), s1 = static_cast<int>(std::lround(b));
  s0 = std::clamp(s0, 0, bars - 1);
  s1 = std::clamp(s1, s0 + 1, bars);
  return {s0, s1 - s0};
}

}  // namespace detail

/// Left-to-right tiling. At each location every size is scored; the most
/// confident one wins (ties go to the smaller size) and, with `regress`, its
/// end is moved by the regression layer. The next window starts where this
/// one ends, so an early boundary error shifts everything after it.
inline std::vector<CandidateWindow> propose_l2r(int bars, const std::vector<int>& sizes, const Scorer& score,
                                                bool regress = true) {
  if (bars <= 0) throw std::invalid_argument("propose_l2r: empty chord sequence");
  if (sizes.empty()) throw std::invalid_argument("propose_l2r: no window sizes");
  std::vector<CandidateWindow> out;
  int loc = 0;
  while (loc < bars) {
    const int remaining = bars - loc;
    CandidateWindow best;
    WindowScore best_score;
    bool have = false;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const int len = std::min(sizes[k], remaining);
      const WindowScore s = score(loc, len);
      if (!have || s.confidence > best.confidence) {
        best = {static_cast<int>(k), sizes[k], loc, len, Strategy::l2r, s.label, s.confidence, false};
        best_score = s;
        have = true;
      }
      if (sizes[k] >= remaining) break;
    }
    if (regress) {
      // Start stays pinned at Loc; only the extent is refined.
      const Interval r = detail::regressed({best.start, best.length}, best_score, bars);
      best.length = std::clamp(r.end() - loc, 1, remaining);
    }
    out.push_back(best);
    loc += best.length;
  }
  return out;
}

struct GlobalOptions {
  int m_count = 0;          // random centres; 0 = ceil(bars / smallest window size)
  std::uint64_t seed = 0;
  bool regress = true;
  int min_padding = 4;      // shortest padding window unless the gap is shorter
};

/// Best tiling of [a, b) by padding windows, maximising their average
/// confidence; among equal averages the tiling with fewer windows wins.
inline std::vector<CandidateWindow> pad_gap(int a, int b, const Scorer& score, int min_len, int max_len) {
  const int g = b - a;
  if (g <= 0) return {};
  if (g <= min_len) {
    const WindowScore s = score(a, g);
    return {{-1, g, a, g, Strategy::global, s.label, s.confidence, true}};
  }
  max_len = std::max(max_len, min_len);
  std::map<std::pair<int, int>, WindowScore> cache;
  auto conf = [&](int s, int len) -> const WindowScore& {
    auto key = std::make_pair(s, len);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, score(a + s, len)).first;
    return it->second;
  };
  const int max_cnt = g / min_len + 1;
  const double neg = -1e300;
  // best[p][c]: max summed confidence tiling [0, p) with c windows.
  std::vector<std::vector<double>> best(static_cast<std::size_t>(g + 1), std::vector<double>(max_cnt + 1, neg));
  std::vector<std::vector<int>> from(static_cast<std::size_t>(g + 1), std::vector<int>(max_cnt + 1, -1));
  best[0][0] = 0;
  for (int p = 1; p <= g; ++p) {
    for (int len = min_len; len <= std::min(p, max_len); ++len) {
      const int q = p - len;
      for (int c = 0; c < max_cnt; ++c) {
        if (best[q][c] == neg) continue;
        const double v = best[q][c] + conf(q, len).confidence;
        if (v > best[p][c + 1]) {
          best[p][c + 1] = v;
          from[p][c + 1] = len;
        }
      }
    }
  }
  int best_c = -1;
  double best_avg = neg;
  for (int c = 1; c <= max_cnt; ++c) {
    if (best[g][c] == neg) continue;
    const double avg = best[g][c] / c;
    if (avg > best_avg + 1e-12) {
      best_avg = avg;
      best_c = c;
    }
  }
  std::vector<CandidateWindow> out;
  if (best_c < 0) {
    const WindowScore s = score(a, g);
    return {{-1, g, a, g, Strategy::global, s.label, s.confidence, true}};
  }
  for (int p = g, c = best_c; c > 0; --c) {
    const int len = from[p][c];
    const WindowScore& s = conf(p - len, len);
    out.push_back({-1, len, a + p - len, len, Strategy::global, s.label, s.confidence, true});
    p -= len;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

/// Global strategy: windows around seeded random centres, each taking the most
/// confident size (and regression refinement). Overlaps resolve by
/// confidence; uncovered stretches are tiled by padding windows. The result
/// covers [0, bars) without overlap and is sorted by start.
inline std::vector<CandidateWindow> propose_global(int bars, const std::vector<int>& sizes, const Scorer& score,
                                                   GlobalOptions opt = {}) {
  if (bars <= 0) throw std::invalid_argument("propose_global: empty chord sequence");
  if (sizes.empty()) throw std::invalid_argument("propose_global: no window sizes");
  int m = opt.m_count;
  if (m <= 0) {
    const int smallest = *std::min_element(sizes.begin(), sizes.end());
    m = std::max(1, (bars + smallest - 1) / smallest);
  }
  std::mt19937_64 rng(opt.seed);
  std::vector<CandidateWindow> cands;
  for (int i = 0; i < m; ++i) {
    const int centre = static_cast<int>(rng() % static_cast<unsigned>(bars));
    CandidateWindow best;
    WindowScore best_score;
    bool have = false;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const Interval w = detail::clamp_window(centre - sizes[k] / 2, sizes[k], bars);
      if (have && w.length == best.length && w.start == best.start) continue;
      const WindowScore s = score(w.start, w.length);
      if (!have || s.confidence > best.confidence) {
        best = {static_cast<int>(k), sizes[k], w.start, w.length, Strategy::global, s.label, s.confidence, false};
        best_score = s;
        have = true;
      }
      if (sizes[k] >= bars) break;
    }
    if (opt.regress) {
      const Interval r = detail::regressed(best.scope(), best_score, bars);
      best.start = r.start;
      best.length = r.length;
    }
    cands.push_back(best);
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const CandidateWindow& a, const CandidateWindow& b) { return a.confidence > b.confidence; });
  std::vector<CandidateWindow> kept;
  for (const auto& c : cands) {
    const bool overlaps = std::any_of(kept.begin(), kept.end(), [&](const CandidateWindow& k) {
      return c.start < k.start + k.length && k.start < c.start + c.length;
    });
    if (!overlaps) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end(), [](const CandidateWindow& a, const CandidateWindow& b) { return a.start < b.start; });
  const int max_pad = *std::max_element(sizes.begin(), sizes.end());
  std::vector<CandidateWindow> out;
  int pos = 0;
  for (const auto& k : kept) {
    for (auto& p : pad_gap(pos, k.start, score, opt.min_padding, max_pad)) out.push_back(p);
    out.push_back(k);
    pos = k.start + k.length;
  }
  for (auto& p : pad_gap(pos, bars, score, opt.min_padding, max_pad)) out.push_back(p);
  return out;
}

/// True when the windows are sorted, pairwise disjoint and cover [0, bars).
inline bool covers_exactly(const std::vector<CandidateWindow>& w, int bars) {
  int pos = 0;
  for (const auto& c : w) {
    if (c.start != pos || c.length < 1) return false;
    pos += c.length;
  }
  return pos == bars;
}

}  // namespace hiermusic::fsl
