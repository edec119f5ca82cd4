#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hiermusic/midi/image.hpp"
#include "hiermusic/midi/types.hpp"

namespace hiermusic::midi {

/// Step-range box drawn over the roll (sections, primers, chords).
struct Highlight {
  std::string label;
  int start_step = 0;
  int end_step = 0;  // exclusive
  int kind = 0;      // 0 section, 1 primer, 2 chord; selects the colour
};

struct RollDims {
  int pitch_lo = -1;  // -1: derive from the sequence
  int pitch_hi = -1;
  int steps = -1;
};

inline RollDims resolve_dims(const TokenSequence& seq, RollDims d) {
  if (d.pitch_lo < 0 || d.pitch_hi < 0) {
    int lo = 60, hi = 71;
    if (!seq.empty()) {
      lo = 127;
      hi = 0;
      for (const auto& t : seq.tokens) {
        lo = std::min(lo, t.pitch);
        hi = std::max(hi, t.pitch);
      }
    }
    if (d.pitch_lo < 0) d.pitch_lo = lo;
    if (d.pitch_hi < 0) d.pitch_hi = hi;
  }
  if (d.steps < 0) {
    const int e = seq.end_step();
    d.steps = (e + seq.bar_length - 1) / seq.bar_length * seq.bar_length;
  }
  return d;
}

/// Text piano roll. One row per pitch (high to low); 'O' marks an onset,
/// '-' a sustained step, '.' silence. Bar lines live in the ruler row;
/// highlights follow the grid as `@` lines.
inline std::string render_piano_roll_text(const TokenSequence& seq, const std::vector<Highlight>& highlights = {},
                                          RollDims dims = {}) {
  const RollDims d = resolve_dims(seq, dims);
  const int rows = d.pitch_hi - d.pitch_lo + 1;
  std::vector<std::string> grid(static_cast<std::size_t>(std::max(rows, 0)), std::string(d.steps, '.'));
  for (const auto& t : seq.tokens) {
    if (t.pitch < d.pitch_lo || t.pitch > d.pitch_hi) continue;
    auto& row = grid[static_cast<std::size_t>(d.pitch_hi - t.pitch)];
    for (int s = t.onset; s < std::min(t.onset + t.duration, d.steps); ++s)
      if (row[s] != 'O') row[s] = (s == t.onset) ? 'O' : '-';
  }
  std::ostringstream os;
  os << "# piano-roll pitch_lo=" << d.pitch_lo << " pitch_hi=" << d.pitch_hi << " steps=" << d.steps
     << " bar=" << seq.bar_length << '\n';
  std::string ruler(d.steps, ' ');
  for (int s = 0; s < d.steps; s += seq.bar_length) ruler[s] = '|';
  os << "     " << ruler << '\n';
  for (int r = 0; r < rows; ++r) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%3d  ", d.pitch_hi - r);
    os << buf << grid[r] << '\n';
  }
  for (const auto& h : highlights) {
    std::string line(d.steps, ' ');
    const int a = std::clamp(h.start_step, 0, d.steps), b = std::clamp(h.end_step, 0, d.steps);
    for (int s = a; s < b; ++s) line[s] = '=';
    if (b > a) {
      line[a] = '[';
      line[b - 1] = ']';
    }
    os << "@    " << line << "  " << h.label << ' ' << h.start_step << ' ' << h.end_step << ' ' << h.kind << '\n';
  }
  return os.str();
}

struct ParsedRoll {
  TokenSequence seq;
  RollDims dims;
  std::vector<Highlight> highlights;
};

/// Inverse of render_piano_roll_text for sequences without overlapping
/// same-pitch notes.
inline ParsedRoll parse_piano_roll_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ParsedRoll out;
  if (!std::getline(in, line) || line.rfind("# piano-roll", 0) != 0)
    throw std::invalid_argument("parse_piano_roll_text: missing header");
  if (std::sscanf(line.c_str(), "# piano-roll pitch_lo=%d pitch_hi=%d steps=%d bar=%d", &out.dims.pitch_lo,
                  &out.dims.pitch_hi, &out.dims.steps, &out.seq.bar_length) != 4)
    throw std::invalid_argument("parse_piano_roll_text: malformed header");
  std::getline(in, line);  // ruler
  for (int r = 0; r < out.dims.pitch_hi - out.dims.pitch_lo + 1; ++r) {
    if (!std::getline(in, line) || line.size() < 5 + static_cast<std::size_t>(out.dims.steps))
      throw std::invalid_argument("parse_piano_roll_text: short grid row " + std::to_string(r));
    const int pitch = std::stoi(line.substr(0, 3));
    const std::string cells = line.substr(5, out.dims.steps);
    for (int s = 0; s < out.dims.steps; ++s) {
      if (cells[s] != 'O') continue;
      int e = s + 1;
      while (e < out.dims.steps && cells[e] == '-') ++e;
      out.seq.tokens.push_back({pitch, s, e - s});
    }
  }
  while (std::getline(in, line)) {
    if (line.rfind("@", 0) != 0) continue;
    std::istringstream ss(line.substr(5 + out.dims.steps));
    Highlight h;
    if (ss >> h.label >> h.start_step >> h.end_step >> h.kind) out.highlights.push_back(h);
  }
  out.seq.normalize();
  return out;
}

/// Raster piano roll with bar lines and highlight boxes.
inline Image render_piano_roll_image(const TokenSequence& seq, const std::vector<Highlight>& highlights = {},
                                     RollDims dims = {}, int cell_w = 4, int cell_h = 4) {
  const RollDims d = resolve_dims(seq, dims);
  const int rows = std::max(d.pitch_hi - d.pitch_lo + 1, 1);
  const int pad = 6;
  Image img(std::max(d.steps, 1) * cell_w + 2 * pad, rows * cell_h + 2 * pad, {255, 255, 255});
  for (int s = 0; s <= d.steps; s += seq.bar_length) img.fill_rect(pad + s * cell_w, pad, 1, rows * cell_h, {210, 210, 210});
  for (const auto& t : seq.tokens) {
    if (t.pitch < d.pitch_lo || t.pitch > d.pitch_hi) continue;
    const int y = pad + (d.pitch_hi - t.pitch) * cell_h;
    img.fill_rect(pad + t.onset * cell_w, y, std::max(1, t.duration * cell_w - 1), cell_h - 1, {40, 70, 160});
    img.fill_rect(pad + t.onset * cell_w, y, 1, cell_h - 1, {10, 20, 60});
  }
  static const Rgb colours[] = {{220, 40, 40}, {40, 160, 60}, {230, 150, 20}};
  for (const auto& h : highlights) {
    const int a = std::max(h.start_step, 0), b = std::min(h.end_step, d.steps);
    if (b <= a) continue;
    const int inset = h.kind == 0 ? 0 : 2;
    img.stroke_rect(pad + a * cell_w - 2 + inset, pad - 2 + inset, (b - a) * cell_w + 4 - 2 * inset,
                    rows * cell_h + 4 - 2 * inset, colours[std::clamp(h.kind, 0, 2)], 2);
  }
  return img;
}

inline void render_piano_roll(const TokenSequence& seq, const std::string& out_path,
                              const std::vector<Highlight>& highlights = {}, RollDims dims = {}) {
  const bool png = out_path.size() >= 4 && out_path.compare(out_path.size() - 4, 4, ".png") == 0;
  if (png) {
    write_png(out_path, render_piano_roll_image(seq, highlights, dims));
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << render_piano_roll_text(seq, highlights, dims);
  if (!out) throw std::runtime_error("write failed: " + out_path);
}

}  // namespace hiermusic::midi
