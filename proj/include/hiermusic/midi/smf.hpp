#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "hiermusic/log.hpp"
#include "hiermusic/midi/types.hpp"

// Standard MIDI File (format 0/1) reading and writing.
namespace hiermusic::midi {

class MidiParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TempoChange {
  long tick = 0;
  int us_per_quarter = 500000;
};

struct MidiFile {
  int format = 1;
  int ticks_per_quarter = 480;
  std::vector<TempoChange> tempo_map;  // sorted by tick; empty means 120 BPM
  std::vector<NoteEvent> notes;        // sorted by note_event_less
  int track_count = 0;

  double initial_bpm() const {
    return tempo_map.empty() ? 120.0 : 60'000'000.0 / static_cast<double>(tempo_map.front().us_per_quarter);
  }
};

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint8_t u8() {
    if (pos_ >= bytes_.size()) throw MidiParseError("truncated file at byte " + std::to_string(pos_));
    return bytes_[pos_++];
  }
  std::uint8_t peek() const {
    if (pos_ >= bytes_.size()) throw MidiParseError("truncated file at byte " + std::to_string(pos_));
    return bytes_[pos_];
  }
  std::uint32_t be(int n) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | u8();
    return v;
  }
  std::uint32_t vlq() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8();
      v = (v << 7) | (b & 0x7f);
      if (!(b & 0x80)) return v;
    }
    throw MidiParseError("variable-length quantity longer than 4 bytes at byte " + std::to_string(pos_));
  }
  std::string tag() {
    std::string s;
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>(u8()));
    return s;
  }
  void skip(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw MidiParseError("truncated file at byte " + std::to_string(pos_));
    pos_ += n;
  }
  ByteReader sub(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw MidiParseError("truncated chunk: need " + std::to_string(n) + " bytes at byte " + std::to_string(pos_));
    ByteReader r(bytes_.subspan(pos_, n));
    pos_ += n;
    return r;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int n) {
  for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7f;
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((v & 0x7f) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

}  // namespace detail

/// Decodes a Standard MIDI File. Note-on/note-off pairs are matched FIFO per
/// (track, channel, pitch); a note-on left open is closed at its track's end
/// with a warning.
inline MidiFile parse_midi(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.tag() != "MThd") throw MidiParseError("missing MThd header");
  const std::uint32_t hlen = r.be(4);
  if (hlen < 6) throw MidiParseError("MThd chunk too short");
  detail::ByteReader h = r.sub(hlen);
  MidiFile f;
  f.format = static_cast<int>(h.be(2));
  const int ntracks = static_cast<int>(h.be(2));
  const std::uint32_t division = h.be(2);
  if (f.format > 1) throw MidiParseError("unsupported SMF format " + std::to_string(f.format));
  if (division & 0x8000) throw MidiParseError("SMPTE time division is not supported");
  if (division == 0) throw MidiParseError("zero ticks per quarter");
  f.ticks_per_quarter = static_cast<int>(division);

  int track_index = 0;
  while (!r.done() && track_index < ntracks) {
    const std::string tag = r.tag();
    const std::uint32_t len = r.be(4);
    detail::ByteReader t = r.sub(len);
    if (tag != "MTrk") continue;  // unknown chunk types are skipped
    long tick = 0;
    std::uint8_t status = 0;
    std::map<std::tuple<int, int>, std::deque<std::pair<long, int>>> open;  // (channel, pitch) -> (onset, vel)
    while (!t.done()) {
      tick += static_cast<long>(t.vlq());
      std::uint8_t b = t.peek();
      if (b & 0x80) {
        t.u8();
        if (b < 0xf0) status = b;
      } else if (status == 0) {
        throw MidiParseError("running status without a prior status byte in track " + std::to_string(track_index));
      } else {
        b = status;
      }
      if (b == 0xff) {
        const std::uint8_t type = t.u8();
        const std::uint32_t mlen = t.vlq();
        if (type == 0x51 && mlen == 3) {
          f.tempo_map.push_back({tick, static_cast<int>(t.be(3))});
        } else {
          t.skip(mlen);
        }
        if (type == 0x2f) break;
        continue;
      }
      if (b == 0xf0 || b == 0xf7) {
        t.skip(t.vlq());
        continue;
      }
      const int kind = b & 0xf0;
      const int channel = b & 0x0f;
      switch (kind) {
        case 0x80:
        case 0x90: {
          const int pitch = t.u8() & 0x7f;
          const int vel = t.u8() & 0x7f;
          auto& q = open[{channel, pitch}];
          if (kind == 0x90 && vel > 0) {
            q.emplace_back(tick, vel);
          } else if (!q.empty()) {
            auto [on, v] = q.front();
            q.pop_front();
            f.notes.push_back({pitch, on, std::max(1L, tick - on), v, track_index});
          }
          break;
        }
        case 0xa0:
        case 0xb0:
        case 0xe0:
          t.skip(2);
          break;
        case 0xc0:
        case 0xd0:
          t.skip(1);
          break;
        default:
          throw MidiParseError("unexpected status byte in track " + std::to_string(track_index));
      }
    }
    for (auto& [key, q] : open) {
      for (auto [on, v] : q) {
        log_warn("unmatched note-on (pitch " + std::to_string(std::get<1>(key)) + ", tick " + std::to_string(on) +
                 ") closed at end of track " + std::to_string(track_index));
        f.notes.push_back({std::get<1>(key), on, std::max(1L, tick - on), v, track_index});
      }
    }
    ++track_index;
  }
  if (track_index < ntracks)
    throw MidiParseError("truncated file: expected " + std::to_string(ntracks) + " tracks, found " +
                         std::to_string(track_index));
  f.track_count = track_index;
  std::stable_sort(f.tempo_map.begin(), f.tempo_map.end(),
                   [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
  std::sort(f.notes.begin(), f.notes.end(), note_event_less);
  return f;
}

inline MidiFile read_midi_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MidiParseError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_midi(bytes);
}

/// Encodes notes as a format-1 file. MTrk chunk k holds the notes with
/// NoteEvent::track == k on channel 0; the tempo sits at the start of chunk 0.
inline std::vector<std::uint8_t> write_midi(const std::vector<NoteEvent>& notes, int ticks_per_quarter = 480,
                                            double bpm = 120.0) {
  int tracks = 1;
  for (const auto& n : notes) tracks = std::max(tracks, n.track + 1);
  std::vector<std::uint8_t> out;
  auto chunk = [&out](const char* tag, const std::vector<std::uint8_t>& body) {
    out.insert(out.end(), tag, tag + 4);
    detail::put_be(out, static_cast<std::uint32_t>(body.size()), 4);
    out.insert(out.end(), body.begin(), body.end());
  };
  std::vector<std::uint8_t> hdr;
  detail::put_be(hdr, 1, 2);
  detail::put_be(hdr, static_cast<std::uint32_t>(tracks), 2);
  detail::put_be(hdr, static_cast<std::uint32_t>(ticks_per_quarter), 2);
  chunk("MThd", hdr);

  for (int k = 0; k < tracks; ++k) {
    // (tick, is_on, pitch, velocity); offs sort before ons at equal ticks
    std::vector<std::tuple<long, int, int, int>> ev;
    for (const auto& n : notes) {
      if (n.track != k) continue;
      if (n.duration < 1 || n.onset < 0 || n.pitch < 0 || n.pitch > 127)
        throw std::invalid_argument("write_midi: invalid note");
      ev.emplace_back(n.onset, 1, n.pitch, n.velocity);
      ev.emplace_back(n.onset + n.duration, 0, n.pitch, 0);
    }
    std::sort(ev.begin(), ev.end());
    std::vector<std::uint8_t> body;
    if (k == 0) {
      const auto us = static_cast<std::uint32_t>(std::lround(60'000'000.0 / bpm));
      detail::put_vlq(body, 0);
      body.insert(body.end(), {0xff, 0x51, 0x03});
      detail::put_be(body, us, 3);
    }
    long last = 0;
    for (const auto& [tick, on, pitch, vel] : ev) {
      detail::put_vlq(body, static_cast<std::uint32_t>(tick - last));
      last = tick;
      body.push_back(on ? 0x90 : 0x80);
      body.push_back(static_cast<std::uint8_t>(pitch));
      body.push_back(static_cast<std::uint8_t>(on ? std::clamp(vel, 1, 127) : 0));
    }
    detail::put_vlq(body, 0);
    body.insert(body.end(), {0xff, 0x2f, 0x00});
    chunk("MTrk", body);
  }
  return out;
}

inline void write_midi_file(const std::string& path, const std::vector<NoteEvent>& notes, int ticks_per_quarter = 480,
                            double bpm = 120.0) {
  const auto bytes = write_midi(notes, ticks_per_quarter, bpm);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace hiermusic::midi
