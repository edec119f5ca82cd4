#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hiermusic::midi {

/// Default section vocabulary; index order is the label id used by models.
inline const std::vector<std::string>& default_labels() {
  static const std::vector<std::string> labels = {"intro", "verse", "chorus", "bridge", "outro", "other"};
  return labels;
}

inline int label_id(const std::string& label, const std::vector<std::string>& vocab = default_labels()) {
  auto it = std::find(vocab.begin(), vocab.end(), label);
  return it == vocab.end() ? -1 : static_cast<int>(it - vocab.begin());
}

/// Labeled half-open note-index span [start, start + length).
struct SectionAnnotation {
  std::string label;
  int start = 0;
  int length = 0;

  int end() const { return start + length; }
  friend bool operator==(const SectionAnnotation&, const SectionAnnotation&) = default;
};

class AnnotationError : public std::runtime_error {
 public:
  AnnotationError(const std::string& msg, int line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// Parses the `.sections` sidecar format: one `label start length` per line,
/// blank lines and `#` comments ignored. Spans must be ordered and disjoint;
/// when `note_count` >= 0 they must also lie within [0, note_count).
inline std::vector<SectionAnnotation> parse_annotations(std::istream& in, long note_count = -1,
                                                        const std::vector<std::string>& vocab = default_labels()) {
  std::vector<SectionAnnotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    SectionAnnotation a;
    if (!(ss >> a.label)) continue;
    if (!(ss >> a.start >> a.length)) throw AnnotationError("expected `label start length`", lineno);
    if (std::string extra; ss >> extra) throw AnnotationError("unexpected trailing field '" + extra + "'", lineno);
    if (label_id(a.label, vocab) < 0) throw AnnotationError("unknown label '" + a.label + "'", lineno);
    if (a.start < 0 || a.length < 1) throw AnnotationError("span must have start >= 0 and length >= 1", lineno);
    if (note_count >= 0 && a.end() > note_count)
      throw AnnotationError("span [" + std::to_string(a.start) + ", " + std::to_string(a.end()) +
                                ") exceeds sequence of " + std::to_string(note_count) + " notes",
                            lineno);
    if (!out.empty() && a.start < out.back().end())
      throw AnnotationError("span starting at " + std::to_string(a.start) + " overlaps or precedes previous span [" +
                                std::to_string(out.back().start) + ", " + std::to_string(out.back().end()) + ")",
                            lineno);
    out.push_back(a);
  }
  return out;
}

inline std::vector<SectionAnnotation> load_annotations(const std::string& path, long note_count = -1,
                                                       const std::vector<std::string>& vocab = default_labels()) {
  std::ifstream in(path);
  if (!in) throw AnnotationError("cannot open " + path, 0);
  return parse_annotations(in, note_count, vocab);
}

inline std::string format_annotations(const std::vector<SectionAnnotation>& anns) {
  std::ostringstream os;
  for (const auto& a : anns) os << a.label << ' ' << a.start << ' ' << a.length << '\n';
  return os.str();
}

inline void write_annotations(const std::string& path, const std::vector<SectionAnnotation>& anns) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << format_annotations(anns);
}

/// Sidecar path for a MIDI file: `song.mid` -> `song.sections`.
inline std::string sidecar_path(const std::string& midi_path) {
  const auto dot = midi_path.find_last_of('.');
  const auto slash = midi_path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return midi_path + ".sections";
  return midi_path.substr(0, dot) + ".sections";
}

}  // namespace hiermusic::midi
