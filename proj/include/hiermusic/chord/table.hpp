#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hiermusic::chord {

inline constexpr int kNumTypes = 48;
inline constexpr int kNonChord = 48;

struct ChordType {
  int id = 0;
  std::string name;
  std::vector<int> intervals;  // ascending, starts at 0

  friend bool operator==(const ChordType&, const ChordType&) = default;
};

/// The 48 chord profiles. Entry i has id i + 1; id 48 is the non-chord class.
/// Mirrors data/chord_profiles.tsv.
inline const std::vector<ChordType>& chord_table() {
  static const std::vector<ChordType> table = {
      {1, "maj", {0, 4, 7}},
      {2, "+", {0, 4, 8}},
      {3, "+7", {0, 4, 8, 10}},
      {4, "+79", {0, 2, 4, 8, 10}},
      {5, "+79#", {0, 3, 4, 8, 10}},
      {6, "+7911#", {0, 2, 4, 6, 8, 10}},
      {7, "+79b", {0, 1, 4, 8, 10}},
      {8, "+j7", {0, 4, 8, 11}},
      {9, "-", {0, 3, 7}},
      {10, "-6", {0, 3, 7, 9}},
      {11, "-69", {0, 2, 3, 7, 9}},
      {12, "-7", {0, 3, 7, 10}},
      {13, "-79", {0, 2, 3, 7, 10}},
      {14, "-7911", {0, 2, 3, 5, 7, 10}},
      {15, "-7913", {0, 2, 3, 5, 7, 9, 10}},
      {16, "-79b", {0, 1, 3, 7, 10}},
      {17, "-j7", {0, 3, 7, 11}},
      {18, "-j7911#", {0, 2, 3, 6, 7, 11}},
      {19, "-j7913", {0, 2, 3, 5, 7, 9, 11}},
      {20, "6", {0, 4, 7, 9}},
      {21, "69", {0, 2, 4, 7, 9}},
      {22, "6911#", {0, 2, 4, 6, 7, 9}},
      {23, "7", {0, 4, 7, 10}},
      {24, "79", {0, 2, 4, 7, 10}},
      {25, "79#", {0, 3, 4, 7, 10}},
      {26, "79#11#", {0, 3, 4, 6, 7, 10}},
      {27, "79#13", {0, 3, 4, 5, 7, 9, 10}},
      {28, "7911", {0, 2, 4, 5, 7, 10}},
      {29, "7911#", {0, 2, 4, 6, 7, 10}},
      {30, "7913", {0, 2, 4, 5, 7, 9, 10}},
      {31, "7913b", {0, 2, 4, 5, 7, 8, 10}},
      {32, "79b", {0, 1, 4, 7, 10}},
      {33, "79b13", {0, 1, 4, 5, 7, 9, 10}},
      {34, "79b13b", {0, 1, 4, 5, 7, 8, 10}},
      {35, "7alt", {0, 1, 4, 6, 10}},
      {36, "j7", {0, 4, 7, 11}},
      {37, "j79", {0, 2, 4, 7, 11}},
      {38, "j79#", {0, 3, 4, 7, 11}},
      {39, "j79#11#", {0, 3, 4, 6, 7, 11}},
      {40, "j7911#", {0, 2, 4, 6, 7, 11}},
      {41, "m7b5", {0, 3, 6, 10}},
      {42, "o", {0, 3, 6}},
      {43, "o7", {0, 3, 6, 9}},
      {44, "sus", {0, 5, 7}},
      {45, "sus7", {0, 5, 7, 10}},
      {46, "sus79", {0, 2, 5, 7, 10}},
      {47, "sus7913", {0, 2, 5, 7, 9, 10}},
      {48, "none", {0}},
  };
  return table;
}

inline const ChordType& chord_type(int id) {
  if (id < 1 || id > kNumTypes) throw std::out_of_range("chord type id " + std::to_string(id));
  return chord_table()[static_cast<std::size_t>(id - 1)];
}

/// Reads a table in the data-file format: `id<TAB>name<TAB>i,j,k`, `#` comments.
inline std::vector<ChordType> load_chord_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<ChordType> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ChordType t;
    std::string ivs;
    if (!(ss >> t.id >> t.name >> ivs)) throw std::runtime_error("malformed chord table line: " + line);
    std::istringstream is(ivs);
    for (std::string tok; std::getline(is, tok, ',');) t.intervals.push_back(std::stoi(tok));
    out.push_back(std::move(t));
  }
  return out;
}

inline const std::array<const char*, 12>& pitch_class_names() {
  static const std::array<const char*, 12> n = {"C", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"};
  return n;
}

}  // namespace hiermusic::chord
