#pragma once

// Run-directory stages behind the command line tool: each stage reads the
// artifacts of the previous ones from the run directory and writes its own.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiermusic/attention/mask.hpp"
#include "hiermusic/chord/recognize.hpp"
#include "hiermusic/errors.hpp"
#include "hiermusic/fsl/model.hpp"
#include "hiermusic/log.hpp"
#include "hiermusic/metrics/metrics.hpp"
#include "hiermusic/midi/annotations.hpp"
#include "hiermusic/midi/dataset.hpp"
#include "hiermusic/midi/piano_roll.hpp"
#include "hiermusic/midi/quantize.hpp"
#include "hiermusic/midi/smf.hpp"
#include "hiermusic/model/hier.hpp"
#include "hiermusic/model/probes.hpp"
#include "hiermusic/nn/checkpoint.hpp"
#include "hiermusic/synth.hpp"

namespace hiermusic::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

inline model::HierConfig recipe_model() {
  model::HierConfig c;
  c.lr = 1e-3;
  c.weight_decay = 1e-4;
  c.fine_epochs = 100;
  c.coarse_epochs = 100;
  c.batch = 8;
  c.dropout = 0.2;
  c.patience = 10;
  return c;
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::vector<std::string> labels = midi::default_labels();
  int bar_length = 16;
  int steps_per_quarter = 4;
  std::string strategy = "global";
  model::HierConfig model = recipe_model();
  fsl::FslConfig fsl;
  chord::ChordClassifierConfig chords;
  bool greedy = false;
  double temperature = 1.0;
  int refine_rounds = 0;
  double refine_fraction = 0.15;

  fsl::Strategy segment_strategy() const {
    if (strategy == "global") return fsl::Strategy::global;
    if (strategy == "l2r") return fsl::Strategy::l2r;
    throw std::invalid_argument("unknown strategy '" + strategy + "' (expected global or l2r)");
  }
};

inline json to_json(const RunConfig& c) {
  return {{"schema", "hiermusic.config/1"},
          {"seed", c.seed},
          {"labels", c.labels},
          {"bar_length", c.bar_length},
          {"steps_per_quarter", c.steps_per_quarter},
          {"strategy", c.strategy},
          {"model", model::to_json(c.model)},
          {"fsl",
           {{"window_sizes", c.fsl.window_sizes},
            {"hidden", c.fsl.hidden},
            {"epochs", c.fsl.epochs},
            {"batch", c.fsl.batch},
            {"lr", c.fsl.lr},
            {"weight_decay", c.fsl.weight_decay},
            {"tau_start", c.fsl.tau_start},
            {"tau_end", c.fsl.tau_end}}},
          {"chords",
           {{"context", c.chords.context},
            {"hidden", c.chords.hidden},
            {"epochs", c.chords.epochs},
            {"batch", c.chords.batch},
            {"lr", c.chords.lr}}},
          {"generation",
           {{"greedy", c.greedy},
            {"temperature", c.temperature},
            {"refine_rounds", c.refine_rounds},
            {"refine_fraction", c.refine_fraction}}}};
}

/// Fields missing from `j` keep their values in `c`. The run seed, label list
/// and bar length are copied into the component configurations.
inline RunConfig run_config_from_json(const json& j, RunConfig c = {}) {
  c.seed = j.value("seed", c.seed);
  c.labels = j.value("labels", c.labels);
  c.bar_length = j.value("bar_length", c.bar_length);
  c.steps_per_quarter = j.value("steps_per_quarter", c.steps_per_quarter);
  c.strategy = j.value("strategy", c.strategy);
  if (j.contains("model")) c.model = model::hier_config_from_json(j["model"], c.model);
  if (j.contains("fsl")) {
    const auto& f = j["fsl"];
    c.fsl.window_sizes = f.value("window_sizes", c.fsl.window_sizes);
    c.fsl.hidden = f.value("hidden", c.fsl.hidden);
    c.fsl.epochs = f.value("epochs", c.fsl.epochs);
    c.fsl.batch = f.value("batch", c.fsl.batch);
    c.fsl.lr = f.value("lr", c.fsl.lr);
    c.fsl.weight_decay = f.value("weight_decay", c.fsl.weight_decay);
    c.fsl.tau_start = f.value("tau_start", c.fsl.tau_start);
    c.fsl.tau_end = f.value("tau_end", c.fsl.tau_end);
  }
  if (j.contains("chords")) {
    const auto& h = j["chords"];
    c.chords.context = h.value("context", c.chords.context);
    c.chords.hidden = h.value("hidden", c.chords.hidden);
    c.chords.epochs = h.value("epochs", c.chords.epochs);
    c.chords.batch = h.value("batch", c.chords.batch);
    c.chords.lr = h.value("lr", c.chords.lr);
  }
  if (j.contains("generation")) {
    const auto& g = j["generation"];
    c.greedy = g.value("greedy", c.greedy);
    c.temperature = g.value("temperature", c.temperature);
    c.refine_rounds = g.value("refine_rounds", c.refine_rounds);
    c.refine_fraction = g.value("refine_fraction", c.refine_fraction);
  }
  if (c.labels.empty()) throw std::invalid_argument("config: empty label list");
  const int n = static_cast<int>(c.labels.size());
  c.model.vocab.labels = n;
  c.model.seed = c.seed;
  c.model.bar_length = c.bar_length;
  c.fsl.labels = n;
  c.fsl.seed = c.seed;
  c.chords.seed = c.seed;
  c.segment_strategy();
  return c;
}

/// Defaults, then each patch in order (later wins).
inline RunConfig resolve_config(const std::vector<json>& patches) {
  json j = to_json(RunConfig{});
  for (const auto& p : patches)
    if (!p.is_null()) j.merge_patch(p);
  return run_config_from_json(j);
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

/// Creates the run directory and echoes the resolved configuration into it.
inline void echo_config(const fs::path& run, const RunConfig& c) {
  fs::create_directories(run);
  write_json(run / "config.json", to_json(c));
}

inline int label_index(const RunConfig& c, const json& v) {
  if (v.is_number_integer()) {
    const int l = v.get<int>();
    if (l < 0 || l >= static_cast<int>(c.labels.size())) throw std::out_of_range("label " + std::to_string(l));
    return l;
  }
  const int l = midi::label_id(v.get<std::string>(), c.labels);
  if (l < 0) throw std::invalid_argument("unknown label '" + v.get<std::string>() + "'");
  return l;
}

// ---------------------------------------------------------------------------
// Corpus

struct Piece {
  std::string name;
  midi::TokenSequence seq;
  std::vector<fsl::BarSection> annotated;
  std::vector<fsl::BarSection> segments;
  std::vector<chord::ChordLabel> chords;  // empty until the chords stage

  /// Segmentation when present, otherwise the annotation.
  const std::vector<fsl::BarSection>& sections() const { return segments.empty() ? annotated : segments; }
  chord::ChordSequence chord_sequence() const {
    chord::ChordSequence cs;
    cs.labels = chords;
    cs.sources.assign(chords.size(), chord::LabelSource::template_match);
    return cs;
  }
};

struct Corpus {
  std::vector<Piece> pieces;
  midi::DatasetSplit split;

  std::vector<const Piece*> part(const std::vector<std::string>& names) const {
    std::vector<const Piece*> out;
    for (const auto& n : names)
      for (const auto& p : pieces)
        if (p.name == n) out.push_back(&p);
    return out;
  }
  std::vector<const Piece*> train() const { return part(split.train); }
  std::vector<const Piece*> validation() const { return part(split.validation); }
  std::vector<const Piece*> test() const { return part(split.test); }
};

inline json sections_json(const std::vector<fsl::BarSection>& s) {
  json a = json::array();
  for (const auto& b : s) a.push_back({b.label, b.start, b.bars});
  return a;
}

inline std::vector<fsl::BarSection> sections_from_json(const json& a) {
  std::vector<fsl::BarSection> out;
  for (const auto& b : a) out.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>()});
  return out;
}

inline json piece_to_json(const Piece& p) {
  json notes = json::array(), chords = json::array();
  for (const auto& t : p.seq.tokens) notes.push_back({t.pitch, t.onset, t.duration});
  for (const auto& c : p.chords) chords.push_back({c.type_id, c.root});
  return {{"name", p.name},
          {"source", p.seq.source},
          {"bpm", p.seq.bpm},
          {"bar_length", p.seq.bar_length},
          {"steps_per_quarter", p.seq.steps_per_quarter},
          {"notes", notes},
          {"annotated", sections_json(p.annotated)},
          {"segments", sections_json(p.segments)},
          {"chords", chords}};
}

inline Piece piece_from_json(const json& j) {
  Piece p;
  p.name = j.at("name").get<std::string>();
  p.seq.source = j.value("source", p.name);
  p.seq.bpm = j.value("bpm", 120.0);
  p.seq.bar_length = j.value("bar_length", 16);
  p.seq.steps_per_quarter = j.value("steps_per_quarter", 4);
  for (const auto& n : j.at("notes")) p.seq.tokens.push_back({n[0].get<int>(), n[1].get<int>(), n[2].get<int>()});
  p.seq.normalize();
  p.annotated = sections_from_json(j.value("annotated", json::array()));
  p.segments = sections_from_json(j.value("segments", json::array()));
  for (const auto& c : j.value("chords", json::array())) p.chords.push_back({c[0].get<int>(), c[1].get<int>()});
  return p;
}

inline void save_corpus(const fs::path& run, const Corpus& c) {
  json pieces = json::array();
  for (const auto& p : c.pieces) pieces.push_back(piece_to_json(p));
  write_json(run / "corpus.json", {{"schema", "hiermusic.corpus/1"}, {"pieces", pieces}});
  write_json(run / "manifest.json", midi::split_manifest(c.split, 0));
}

inline Corpus load_corpus(const fs::path& run) {
  if (!fs::exists(run / "corpus.json")) throw std::runtime_error(run.string() + ": no corpus.json (run ingest first)");
  Corpus c;
  const json j = read_json(run / "corpus.json");
  for (const auto& p : j.at("pieces")) c.pieces.push_back(piece_from_json(p));
  const json m = read_json(run / "manifest.json");
  c.split.train = m.at("train").get<std::vector<std::string>>();
  c.split.validation = m.at("validation").get<std::vector<std::string>>();
  c.split.test = m.at("test").get<std::vector<std::string>>();
  return c;
}

inline std::vector<fs::path> midi_files(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  auto is_midi = [](const fs::path& p) {
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return e == ".mid" || e == ".midi";
  };
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file() && is_midi(e.path())) out.push_back(e.path());
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw std::runtime_error("no such file or directory: " + in);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline midi::TokenSequence read_sequence(const fs::path& p, const RunConfig& c) {
  auto seq = midi::quantize(midi::read_midi_file(p.string()), c.steps_per_quarter, c.bar_length);
  seq.source = p.filename().string();
  return seq;
}

inline void write_sequence(const fs::path& p, const midi::TokenSequence& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  midi::write_midi_file(p.string(), midi::to_events(s), 480, s.bpm);
}

// ---------------------------------------------------------------------------
// Stages

/// Writes `count` toy pieces as MIDI files with `.sections` sidecars.
inline json make_toy_files(const fs::path& out, int count, std::uint64_t seed, const synth::ToyOptions& opt = {}) {
  fs::create_directories(out);
  const auto toy = synth::make_toy_corpus(count, seed, opt);
  json names = json::array();
  for (std::size_t i = 0; i < toy.size(); ++i) {
    std::ostringstream n;
    n << "toy_" << std::setw(3) << std::setfill('0') << i;
    const auto path = out / (n.str() + ".mid");
    write_sequence(path, toy[i].seq);
    midi::write_annotations(midi::sidecar_path(path.string()), toy[i].annotations);
    names.push_back(n.str());
  }
  return {{"pieces", names.size()}, {"dir", out.string()}};
}

/// MIDI files (and directories of them) to the run corpus, with sidecar
/// annotations where present and a seeded train/validation/test split.
inline json ingest(const fs::path& run, const RunConfig& c, const std::vector<std::string>& inputs) {
  const auto files = midi_files(inputs);
  std::vector<std::future<std::optional<Piece>>> jobs;
  for (const auto& f : files)
    jobs.push_back(std::async(std::launch::async, [&c, f] {
      Piece p;
      p.name = f.stem().string();
      p.seq = read_sequence(f, c);
      if (p.seq.empty()) return std::optional<Piece>{};
      const auto side = midi::sidecar_path(f.string());
      if (fs::exists(side))
        p.annotated = fsl::bar_sections_from_annotations(
            p.seq, midi::load_annotations(side, static_cast<long>(p.seq.size()), c.labels), c.labels);
      return std::optional<Piece>(std::move(p));
    }));
  Corpus corpus;
  std::vector<std::string> names;
  long notes = 0, annotated = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto p = jobs[i].get();
    if (!p) {
      log_warn(files[i].string() + ": no notes, skipped");
      continue;
    }
    if (std::find(names.begin(), names.end(), p->name) != names.end()) p->name += "_" + std::to_string(i);
    names.push_back(p->name);
    notes += static_cast<long>(p->seq.size());
    annotated += !p->annotated.empty();
    corpus.pieces.push_back(std::move(*p));
  }
  if (corpus.pieces.empty()) throw std::runtime_error("ingest: no MIDI notes found");
  corpus.split = midi::split_dataset(names, c.seed);
  save_corpus(run, corpus);
  return {{"pieces", corpus.pieces.size()},
          {"notes", notes},
          {"annotated", annotated},
          {"train", corpus.split.train.size()},
          {"validation", corpus.split.validation.size()},
          {"test", corpus.split.test.size()}};
}

inline void save_chord_classifier(const fs::path& p, const chord::ChordClassifier& clf) {
  nn::save_checkpoint(p.string(), clf.params(), {{"kind", "chord-classifier"}, {"context", clf.config().context},
                                                 {"hidden", clf.config().hidden}});
}

inline std::optional<chord::ChordClassifier> load_chord_classifier(const fs::path& run) {
  const auto p = run / "chords.ckpt";
  if (!fs::exists(p)) return std::nullopt;
  json meta;
  auto ps = nn::load_checkpoint(p.string(), &meta);
  chord::ChordClassifierConfig cfg;
  cfg.context = meta.value("context", cfg.context);
  cfg.hidden = meta.value("hidden", cfg.hidden);
  chord::ChordClassifier clf(cfg);
  for (auto& [name, param] : clf.params()) param.value = ps.at(name).value;
  clf.mark_trained();
  return clf;
}

/// Per-bar chord labels. The fallback classifier is trained on the corpus
/// only when some bar matches no template.
inline json chords(const fs::path& run, const RunConfig& c) {
  Corpus corpus = load_corpus(run);
  long pending = 0, bars = 0;
  for (const auto& p : corpus.pieces) {
    const auto s1 = chord::template_pass(p.seq);
    bars += s1.bar_count();
    pending += std::count(s1.sources.begin(), s1.sources.end(), chord::LabelSource::classifier);
  }
  std::optional<chord::ChordClassifier> clf;
  if (pending > 0) {
    std::vector<midi::TokenSequence> seqs;
    for (const auto* p : corpus.train()) seqs.push_back(p->seq);
    const auto ex = chord::make_chord_examples(seqs, c.chords.context, c.seed);
    if (ex.empty()) throw std::runtime_error("chords: no template-matched bars to train the fallback classifier");
    clf.emplace(c.chords);
    clf->train(ex);
    save_chord_classifier(run / "chords.ckpt", *clf);
  }
  json per_piece = json::object();
  for (auto& p : corpus.pieces) {
    const auto cs = chord::recognize_chords(p.seq, clf ? &*clf : nullptr);
    p.chords = cs.labels;
    per_piece[p.name] = chord::chords_to_json(cs);
  }
  save_corpus(run, corpus);
  write_json(run / "chords.json", per_piece);
  return {{"bars", bars}, {"classifier_bars", pending}, {"classifier_trained", clf.has_value()}};
}

inline fsl::FslPiece fsl_piece(const Piece& p) { return {p.chord_sequence(), p.annotated}; }

inline void require_chords(const Piece& p) {
  if (p.chords.empty() && !p.seq.empty()) throw std::runtime_error(p.name + ": no chords (run chords first)");
}

inline fsl::FslModel load_fsl(const fs::path& run, const RunConfig& c) {
  const auto p = run / "fsl.ckpt";
  if (!fs::exists(p)) throw UntrainedError("fsl model (run train-fsl first)");
  json meta;
  auto ps = nn::load_checkpoint(p.string(), &meta);
  fsl::FslConfig cfg = c.fsl;
  cfg.labels = meta.value("labels", cfg.labels);
  cfg.hidden = meta.value("hidden", cfg.hidden);
  cfg.window_sizes = meta.value("window_sizes", cfg.window_sizes);
  fsl::FslModel m(cfg);
  for (auto& [name, param] : m.params()) param.value = ps.at(name).value;
  m.mark_trained(meta.value("trained", false));
  return m;
}

inline fsl::SegmentationScore score_piece(const fsl::FslModel& m, const Piece& p, fsl::Strategy s, std::uint64_t seed) {
  std::vector<fsl::Interval> truth, pred;
  std::vector<int> tl, pl;
  for (const auto& b : p.annotated) truth.push_back(b.scope()), tl.push_back(b.label);
  for (const auto& b : m.segment_bars(p.chord_sequence(), s, seed)) pred.push_back(b.scope()), pl.push_back(b.label);
  return fsl::score_segmentation(truth, tl, pred, pl);
}

/// Trains the segmenter on annotated training pieces and scores it on the
/// annotated test pieces.
inline json train_fsl(const fs::path& run, const RunConfig& c) {
  const Corpus corpus = load_corpus(run);
  std::vector<fsl::FslPiece> tr, va;
  for (const auto* p : corpus.train())
    if (!p->annotated.empty()) require_chords(*p), tr.push_back(fsl_piece(*p));
  for (const auto* p : corpus.validation())
    if (!p->annotated.empty()) require_chords(*p), va.push_back(fsl_piece(*p));
  fsl::FslModel m(c.fsl);
  const auto h = m.train(tr, va);
  auto meta = m.meta();
  nn::save_checkpoint((run / "fsl.ckpt").string(), m.params(), meta);
  double jac = 0, acc = 0;
  int n = 0;
  for (const auto* p : corpus.test())
    if (!p->annotated.empty()) {
      const auto s = score_piece(m, *p, c.segment_strategy(), c.seed);
      jac += s.mean_jaccard, acc += s.label_accuracy, ++n;
    }
  json r = {{"schema", "hiermusic.fsl-train/1"},
            {"train_pieces", tr.size()},
            {"train_loss", h.train_loss},
            {"val_loss", h.val_loss},
            {"test_pieces", n},
            {"strategy", c.strategy},
            {"test_mean_jaccard", n ? jac / n : 0.0},
            {"test_label_accuracy", n ? acc / n : 0.0}};
  write_json(run / "fsl_train.json", r);
  return r;
}

inline std::vector<midi::Highlight> section_boxes(const midi::TokenSequence& seq, const std::vector<fsl::BarSection>& s,
                                                  const std::vector<std::string>& labels) {
  std::vector<midi::Highlight> h;
  for (const auto& b : s)
    h.push_back({labels.at(static_cast<std::size_t>(b.label)), b.start * seq.bar_length, (b.start + b.bars) * seq.bar_length, 0});
  return h;
}

/// Labelled sections for every corpus piece, with a piano roll per piece.
inline json segment(const fs::path& run, const RunConfig& c) {
  Corpus corpus = load_corpus(run);
  const auto m = load_fsl(run, c);
  json out = {{"schema", "hiermusic.segments/1"}, {"strategy", c.strategy}, {"pieces", json::object()}};
  double jac = 0;
  int scored = 0;
  for (auto& p : corpus.pieces) {
    require_chords(p);
    p.segments = m.segment_bars(p.chord_sequence(), c.segment_strategy(), c.seed);
    json e = {{"sections", fsl::sections_to_json(fsl::to_note_sections(p.seq, p.segments), c.labels)}};
    if (!p.annotated.empty()) {
      const auto s = score_piece(m, p, c.segment_strategy(), c.seed);
      e["mean_jaccard"] = s.mean_jaccard;
      e["label_accuracy"] = s.label_accuracy;
      jac += s.mean_jaccard, ++scored;
    }
    out["pieces"][p.name] = e;
    fs::create_directories(run / "segments");
    midi::render_piano_roll(p.seq, (run / "segments" / (p.name + ".png")).string(),
                            section_boxes(p.seq, p.segments, c.labels));
  }
  out["mean_jaccard"] = scored ? jac / scored : 0.0;
  save_corpus(run, corpus);
  write_json(run / "segments.json", out);
  return {{"pieces", corpus.pieces.size()}, {"mean_jaccard", out["mean_jaccard"]}};
}

/// Single file: chords (with the run's classifier if one exists), sections
/// JSON and a piano roll with section boxes next to `out_prefix`.
inline json segment_file(const fs::path& run, const RunConfig& c, const fs::path& in, const fs::path& out_prefix) {
  const auto seq = read_sequence(in, c);
  const auto clf = load_chord_classifier(run);
  const auto cs = chord::recognize_chords(seq, clf ? &*clf : nullptr);
  const auto m = load_fsl(run, c);
  const auto bars = m.segment_bars(cs, c.segment_strategy(), c.seed);
  json j = {{"schema", "hiermusic.segments/1"},
            {"source", in.string()},
            {"strategy", c.strategy},
            {"sections", fsl::sections_to_json(fsl::to_note_sections(seq, bars), c.labels)}};
  write_json(out_prefix.string() + ".sections.json", j);
  midi::render_piano_roll(seq, out_prefix.string() + ".png", section_boxes(seq, bars, c.labels));
  return j;
}

inline std::vector<model::HierPiece> hier_pieces(const std::vector<const Piece*>& ps, const model::HierConfig& c) {
  const int cap = *std::max_element(c.buckets.begin(), c.buckets.end());
  std::vector<model::HierPiece> out;
  for (const auto* p : ps) {
    if (p->sections().empty()) {
      log_warn(p->name + ": no sections (segment or annotate it), skipped");
      continue;
    }
    out.push_back(model::make_hier_piece(p->seq, p->sections(), c.vocab, cap));
  }
  return out;
}

inline std::vector<model::HierSection> flatten(const std::vector<model::HierPiece>& ps) {
  std::vector<model::HierSection> out;
  for (const auto& p : ps) out.insert(out.end(), p.sections.begin(), p.sections.end());
  return out;
}

inline json loss_json(const std::map<int, model::EpochLoss>& h) {
  json j = json::object();
  for (const auto& [b, l] : h) j[std::to_string(b)] = {{"train", l.train}, {"val", l.val}};
  return j;
}

/// Fine decoders and style vectors on the training split's sections.
inline json pretrain_fine(const fs::path& run, const RunConfig& c) {
  const Corpus corpus = load_corpus(run);
  model::HierModel m(c.model);
  const auto tr = flatten(hier_pieces(corpus.train(), m.config()));
  const auto va = flatten(hier_pieces(corpus.validation(), m.config()));
  if (tr.empty()) throw std::runtime_error("pretrain-fine: no training sections");
  const auto h = m.pretrain_fine(tr, va);
  m.save((run / "fine.ckpt").string());
  json r = {{"schema", "hiermusic.pretrain/1"}, {"sections", tr.size()}, {"history", loss_json(h)}};
  if (!va.empty()) r["val_perplexity"] = m.fine_perplexity(va);
  write_json(run / "pretrain.json", r);
  return r;
}

/// MSN, aggregation, coarse decoder and Q on top of the frozen fine decoders.
inline json train(const fs::path& run, const RunConfig& c) {
  const Corpus corpus = load_corpus(run);
  if (!fs::exists(run / "fine.ckpt")) throw UntrainedError("fine decoders (run pretrain-fine first)");
  auto m = model::HierModel::load((run / "fine.ckpt").string());
  m.set_schedule(c.model);
  const auto tr = hier_pieces(corpus.train(), m.config());
  const auto va = hier_pieces(corpus.validation(), m.config());
  const auto h = m.train_coarse(tr, va);
  m.save((run / "model.ckpt").string());
  json r = {{"schema", "hiermusic.train/1"}, {"pieces", tr.size()}, {"train", h.train}, {"val", h.val}};
  if (!va.empty()) r["val_style_bound"] = m.style_bound_of(va);
  write_json(run / "train.json", r);
  return r;
}

inline model::HierModel load_model(const fs::path& run, const RunConfig& c) {
  fs::path p = run / "model.ckpt";
  if (!fs::exists(p)) {
    if (c.refine_rounds > 0) throw UntrainedError("coarse decoder (run train first)");
    p = run / "fine.ckpt";
    if (!fs::exists(p)) throw UntrainedError("fine decoders (run pretrain-fine first)");
    log_warn("no model.ckpt; generating from fine.ckpt without refinement");
  }
  auto m = model::HierModel::load(p.string());
  m.set_schedule(c.model);
  return m;
}

inline std::vector<int> primer_from_json(const json& s, const RunConfig& c, const model::Vocab& v) {
  if (s.contains("primer_midi")) {
    auto ids = v.encode(read_sequence(s["primer_midi"].get<std::string>(), c));
    const auto n = static_cast<std::size_t>(s.value("primer_length", c.model.primer));
    if (ids.size() > n) ids.resize(n);
    return ids;
  }
  midi::TokenSequence seq;
  seq.bar_length = c.bar_length;
  for (const auto& n : s.value("primer", json::array())) seq.tokens.push_back({n[0].get<int>(), n[1].get<int>(), n[2].get<int>()});
  seq.normalize();
  return v.encode(seq);
}

struct NamedRequest {
  std::string name;
  model::GenerationRequest req;
  double bpm = 120.0;
};

/// `{sections: [{label, primer | primer_midi, length}], seed, sampling}`.
inline NamedRequest request_from_json(const json& j, const RunConfig& c, const model::Vocab& v) {
  NamedRequest r;
  r.name = j.value("name", std::string("request"));
  r.req.seed = j.value("seed", c.seed);
  r.req.sampling = {c.greedy, c.temperature};
  if (j.contains("sampling")) {
    const auto& s = j["sampling"];
    if (s.is_string()) {
      r.req.sampling.greedy = s.get<std::string>() == "greedy";
    } else {
      r.req.sampling.greedy = s.value("greedy", r.req.sampling.greedy);
      r.req.sampling.temperature = s.value("temperature", r.req.sampling.temperature);
    }
  }
  r.req.refine_rounds = j.value("refine_rounds", c.refine_rounds);
  r.req.refine_fraction = j.value("refine_fraction", c.refine_fraction);
  r.bpm = j.value("bpm", 120.0);
  for (const auto& s : j.at("sections")) {
    model::SectionRequest q;
    q.label = label_index(c, s.at("label"));
    q.primer = primer_from_json(s, c, v);
    q.length = s.value("length", c.model.buckets.front());
    r.req.sections.push_back(std::move(q));
  }
  return r;
}

/// One request per test piece: each section keeps its label, its first
/// `primer` tokens and its length (capped at the largest bucket).
inline std::vector<NamedRequest> held_out_requests(const Corpus& corpus, const RunConfig& c, const model::HierConfig& mc) {
  std::vector<NamedRequest> out;
  const int cap = *std::max_element(c.model.buckets.begin(), c.model.buckets.end());
  for (const auto* p : corpus.test()) {
    const auto hp = hier_pieces({p}, mc);
    if (hp.empty()) continue;
    NamedRequest r;
    r.name = p->name;
    r.bpm = p->seq.bpm;
    r.req.seed = c.seed;
    r.req.sampling = {c.greedy, c.temperature};
    r.req.refine_rounds = c.refine_rounds;
    r.req.refine_fraction = c.refine_fraction;
    for (const auto& s : hp[0].sections) {
      model::SectionRequest q;
      q.label = s.label;
      const int n = std::min(static_cast<int>(s.ids.size()), cap);
      q.primer.assign(s.ids.begin(), s.ids.begin() + std::min(n, c.model.primer));
      q.length = n;
      r.req.sections.push_back(std::move(q));
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Generates each request into `out_dir`: MIDI, a provenance trace and a
/// piano roll with section and primer boxes.
inline json generate(const fs::path& run, const RunConfig& c, const std::optional<json>& request, const fs::path& out_dir) {
  const auto m = load_model(run, c);
  std::vector<NamedRequest> reqs;
  if (request) {
    reqs.push_back(request_from_json(*request, c, m.vocab()));
  } else {
    reqs = held_out_requests(load_corpus(run), c, m.config());
    if (reqs.empty()) throw std::runtime_error("generate: no sectioned test pieces to take primers from");
  }
  json pieces = json::array();
  long steps = 0;
  for (const auto& r : reqs) {
    const auto res = m.generate(r.req);
    std::vector<std::vector<int>> ids;
    for (const auto& s : res.sections) ids.push_back(s.ids);
    std::vector<int> starts;
    auto seq = model::to_sequence(ids, m.vocab(), c.bar_length, &starts);
    seq.bpm = r.bpm;
    seq.source = r.name;
    std::vector<midi::Highlight> boxes;
    json secs = json::array();
    for (std::size_t k = 0; k < res.sections.size(); ++k) {
      const auto& g = res.sections[k];
      const int a = starts[k] * c.bar_length;
      const int e = k + 1 < starts.size() ? starts[k + 1] * c.bar_length : (seq.end_step() + c.bar_length - 1) / c.bar_length * c.bar_length;
      const std::vector<int> primer(g.ids.begin(), g.ids.begin() + g.primer_length);
      const std::string name = c.labels.at(static_cast<std::size_t>(g.label));
      boxes.push_back({name, a, e, 0});
      if (g.primer_length > 0) boxes.push_back({"primer", a, a + std::max(m.vocab().span(primer), 1), 1});
      secs.push_back({{"label", name},
                      {"bucket", g.bucket},
                      {"primer_length", g.primer_length},
                      {"length", g.ids.size()},
                      {"steps", g.steps},
                      {"start_bar", starts[k]},
                      {"seed", model::section_seed(r.req.seed, k)}});
    }
    write_sequence(out_dir / (r.name + ".mid"), seq);
    midi::render_piano_roll(seq, (out_dir / (r.name + ".png")).string(), boxes);
    steps = std::max(steps, res.sequential_steps);
    pieces.push_back({{"name", r.name},
                      {"midi", (out_dir / (r.name + ".mid")).string()},
                      {"sections", secs},
                      {"sequential_steps", res.sequential_steps},
                      {"refine_rounds", r.req.refine_rounds},
                      {"greedy", r.req.sampling.greedy},
                      {"temperature", r.req.sampling.temperature}});
  }
  json trace = {{"schema", "hiermusic.generation/1"}, {"pieces", pieces}, {"sequential_steps", steps}};
  write_json(out_dir / "trace.json", trace);
  return trace;
}

/// Bounded metrics in [0, 1], the rest non-negative, PPL at least 1.
inline void check_report(const metrics::MetricsReport& r) {
  for (const auto* mv : {&r.generated, &r.reference})
    for (const auto& [k, x] : mv->v) {
      if (std::isnan(x)) continue;
      const bool ok = k == "PPL" ? x >= 1.0 - 1e-12 : (x >= 0 && (!metrics::is_bounded(k) || x <= 1.0));
      if (!ok) throw InvariantError("metric " + k + " = " + std::to_string(x) + " out of range");
    }
  for (const auto& [k, x] : r.closeness.v)
    if (x < 0) throw InvariantError("closeness " + k + " negative");
}

inline metrics::Corpus read_midi_corpus(const std::vector<std::string>& inputs, const RunConfig& c) {
  metrics::Corpus out;
  for (const auto& f : midi_files(inputs)) {
    auto s = read_sequence(f, c);
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

/// Metrics of the generated MIDI against a reference (MIDI inputs, or the
/// run's training split), written as JSON and as an aligned table.
inline metrics::MetricsReport evaluate(const fs::path& run, const RunConfig& c, const std::vector<std::string>& generated,
                                       const std::vector<std::string>& reference, const fs::path& out_dir) {
  const auto gen = read_midi_corpus(generated, c);
  metrics::Corpus ref;
  if (!reference.empty()) {
    ref = read_midi_corpus(reference, c);
  } else {
    const Corpus corpus = load_corpus(run);
    for (const auto* p : corpus.train()) ref.push_back(p->seq);
  }
  if (gen.empty() || ref.empty()) throw std::runtime_error("evaluate: empty generated or reference corpus");
  const auto clf = fs::exists(run / "chords.ckpt") ? load_chord_classifier(run) : std::nullopt;
  metrics::EvalOptions o;
  o.chords = clf ? &*clf : nullptr;
  const auto r = metrics::closeness_report(gen, ref, o);
  auto j = r.to_json();
  j["generated_pieces"] = gen.size();
  j["reference_pieces"] = ref.size();
  write_json(out_dir / "metrics.json", j);
  write_text(out_dir / "metrics.txt", r.table());
  check_report(r);
  return r;
}

// ---------------------------------------------------------------------------
// Probes and diagnostics

inline std::vector<int> equal_sections(int L, int M) {
  if (L < 1 || M < 1 || M > L) throw std::invalid_argument("need 1 <= sections <= L");
  std::vector<int> out;
  for (int k = 0; k < M; ++k) out.push_back(L / M + (k < L % M ? 1 : 0));
  return out;
}

/// Sequential decoding steps and attended pairs, hierarchical vs monolithic.
inline json probe_steps(int L, int M, std::uint64_t seed, int bar_length = 16, int note_window = 16) {
  const auto lengths = equal_sections(L, M);
  const auto sp = model::decoding_step_probe(lengths, seed);
  const auto pattern = attention::build_scale_pattern(lengths, bar_length, note_window, true);
  const long long ms = attention::count_attended_pairs(attention::build_mask(pattern));
  attention::MaskParams full;
  full.causal = true;
  const long long fp = attention::count_attended_pairs(attention::build_mask(attention::MaskKind::full, full, L));
  return {{"schema", "hiermusic.steps/1"},
          {"L", L},
          {"sections", M},
          {"section_lengths", lengths},
          {"hierarchical_steps", sp.hierarchical},
          {"monolithic_steps", sp.monolithic},
          {"per_section_steps", sp.per_section},
          {"multiscale_pairs", ms},
          {"full_pairs", fp}};
}

inline std::string steps_table(const json& j) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "model" << std::right << std::setw(10) << "steps" << std::setw(14) << "pairs" << '\n';
  os << std::left << std::setw(16) << "hierarchical" << std::right << std::setw(10) << j["hierarchical_steps"].get<long>()
     << std::setw(14) << j["multiscale_pairs"].get<long long>() << '\n';
  os << std::left << std::setw(16) << "monolithic" << std::right << std::setw(10) << j["monolithic_steps"].get<long>()
     << std::setw(14) << j["full_pairs"].get<long long>() << '\n';
  return os.str();
}

inline json probe_error_accum(const model::ErrorProbeConfig& pc) {
  const auto r = model::error_accumulation_probe(pc);
  return {{"schema", "hiermusic.error-accum/1"},
          {"section_length", pc.section_length},
          {"sections", pc.sections},
          {"lengths", r.lengths},
          {"hierarchical_ppl", r.hier_ppl},
          {"monolithic_ppl", r.mono_ppl},
          {"hierarchical_ratio", r.hier_ratio()},
          {"monolithic_ratio", r.mono_ratio()},
          {"hierarchical_params", r.hier_params},
          {"monolithic_params", r.mono_params}};
}

inline std::string error_accum_table(const json& j) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "length" << std::right << std::setw(16) << "hierarchical" << std::setw(16)
     << "monolithic" << '\n';
  os << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < j["lengths"].size(); ++i)
    os << std::left << std::setw(10) << j["lengths"][i].get<int>() << std::right << std::setw(16)
       << j["hierarchical_ppl"][i].get<double>() << std::setw(16) << j["monolithic_ppl"][i].get<double>() << '\n';
  os << std::left << std::setw(10) << "ratio" << std::right << std::setw(16) << j["hierarchical_ratio"].get<double>()
     << std::setw(16) << j["monolithic_ratio"].get<double>() << '\n';
  return os.str();
}

struct MaskVizOptions {
  std::string kind = "multiscale";
  int L = 64;
  attention::MaskParams params;
  std::vector<int> sections;  // multiscale only; empty = one section
  int bar_length = 16;
  int note_window = 16;
  int cell = 8;
};

inline json mask_viz(const MaskVizOptions& o, const fs::path& out) {
  const auto kind = attention::parse_mask_kind(o.kind);
  long long pairs = 0;
  if (kind == attention::MaskKind::multiscale) {
    auto lengths = o.sections.empty() ? std::vector<int>{o.L} : o.sections;
    const auto p = attention::build_scale_pattern(lengths, o.bar_length, o.note_window, o.params.causal);
    pairs = attention::count_attended_pairs(attention::build_mask(p));
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    attention::write_mask_image(out.string(), attention::render_mask(p, o.cell));
    return {{"kind", o.kind}, {"L", p.L}, {"summaries", p.G()}, {"pairs", pairs}, {"image", out.string()}};
  }
  const auto m = attention::build_mask(kind, o.params, o.L);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  attention::write_mask_image(out.string(), attention::render_mask(m, o.cell));
  return {{"kind", o.kind}, {"L", o.L}, {"pairs", attention::count_attended_pairs(m)}, {"image", out.string()}};
}

}  // namespace hiermusic::pipeline
