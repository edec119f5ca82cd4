#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiermusic/chord/table.hpp"
#include "hiermusic/errors.hpp"
#include "hiermusic/log.hpp"
#include "hiermusic/midi/types.hpp"
#include "hiermusic/nn/layers.hpp"
#include "hiermusic/nn/optim.hpp"

namespace hiermusic::chord {

using PitchClassVector = std::array<int, 12>;

struct ChordLabel {
  int type_id = kNonChord;
  int root = -1;  // -1 for the non-chord type

  bool is_chord() const { return type_id != kNonChord; }
  std::string name() const {
    if (!is_chord()) return "N";
    const auto& t = chord_type(type_id);
    return std::string(pitch_class_names()[root]) + (type_id == 1 ? "" : t.name);
  }
  friend bool operator==(const ChordLabel&, const ChordLabel&) = default;
  friend auto operator<=>(const ChordLabel&, const ChordLabel&) = default;
};

enum class LabelSource : std::uint8_t { template_match, classifier, rule };

struct ChordSequence {
  std::vector<ChordLabel> labels;
  std::vector<LabelSource> sources;

  int bar_count() const { return static_cast<int>(labels.size()); }
};

inline PitchClassVector pitch_class_vector(const midi::TokenSequence& seq, int bar) {
  PitchClassVector v{};
  const int lo = bar * seq.bar_length, hi = lo + seq.bar_length;
  for (std::size_t i = seq.first_token_of_bar(bar); i < seq.size() && seq.tokens[i].onset < hi; ++i)
    if (seq.tokens[i].onset >= lo) ++v[static_cast<std::size_t>(seq.tokens[i].pitch % 12)];
  return v;
}

/// Pitch class of the lowest note sounding from the bar's onsets.
inline std::optional<int> bass_pitch_class(const midi::TokenSequence& seq, int bar) {
  std::optional<int> low;
  const int hi = (bar + 1) * seq.bar_length;
  for (std::size_t i = seq.first_token_of_bar(bar); i < seq.size() && seq.tokens[i].onset < hi; ++i)
    if (!low || seq.tokens[i].pitch < *low) low = seq.tokens[i].pitch;
  if (low) return *low % 12;
  return std::nullopt;
}

inline std::uint16_t pc_mask(const PitchClassVector& v) {
  std::uint16_t m = 0;
  for (int i = 0; i < 12; ++i)
    if (v[static_cast<std::size_t>(i)] > 0) m |= static_cast<std::uint16_t>(1u << i);
  return m;
}

inline std::uint16_t profile_mask(int type_id, int root) {
  std::uint16_t m = 0;
  for (int iv : chord_type(type_id).intervals) m |= static_cast<std::uint16_t>(1u << ((iv + root) % 12));
  return m;
}

namespace detail {
// Pitch-class set -> every (type, root) whose rotated profile equals it.
inline const std::map<std::uint16_t, std::vector<ChordLabel>>& template_index() {
  static const auto idx = [] {
    std::map<std::uint16_t, std::vector<ChordLabel>> m;
    for (int t = 1; t < kNumTypes; ++t)
      for (int r = 0; r < 12; ++r) m[profile_mask(t, r)].push_back({t, r});
    return m;
  }();
  return idx;
}
}  // namespace detail

/// Exact set-equality lookup against the 47 chord profiles. Several
/// (type, root) pairs can spell the same set (C6 == Am7, all roots of o7);
/// the one whose root is the bass wins, then the root nearest above the bass
/// (the smallest root when no bass is given), then the smallest type id.
inline std::optional<ChordLabel> match_template(const PitchClassVector& pcv, std::optional<int> bass = std::nullopt) {
  const auto& idx = detail::template_index();
  auto it = idx.find(pc_mask(pcv));
  if (it == idx.end()) return std::nullopt;
  const auto& cands = it->second;
  auto best = std::min_element(cands.begin(), cands.end(), [&](const ChordLabel& a, const ChordLabel& b) {
    const bool ab = bass && a.root == *bass, bb = bass && b.root == *bass;
    if (ab != bb) return ab;
    // Without a bass match, count roots upward from the bass so the choice
    // transposes with the input.
    const int ra = bass ? (a.root - *bass + 12) % 12 : a.root, rb = bass ? (b.root - *bass + 12) % 12 : b.root;
    return std::tie(ra, a.type_id) < std::tie(rb, b.type_id);
  });
  return *best;
}

// ---------------------------------------------------------------------------
// Fallback classifier over neighbouring labels and the bar's own profile.

/// Context order: bars i-k..i-1 then i+1..i+k. Unknown neighbours use type 0.
struct ChordContext {
  std::vector<ChordLabel> labels;
  PitchClassVector pcv{};
};

struct ChordClassifierConfig {
  int context = 2;  // k on each side
  int hidden = 64;
  int epochs = 40;
  int batch = 32;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool augment_transpose = true;
};

struct ChordExample {
  ChordContext ctx;
  ChordLabel target;
};

inline ChordLabel transpose_label(ChordLabel l, int k) {
  if (l.type_id >= 1 && l.is_chord()) l.root = (l.root + k) % 12;
  return l;
}

inline PitchClassVector transpose_pcv(const PitchClassVector& v, int k) {
  PitchClassVector o{};
  for (int i = 0; i < 12; ++i) o[static_cast<std::size_t>((i + k) % 12)] = v[static_cast<std::size_t>(i)];
  return o;
}

class ChordClassifier {
 public:
  explicit ChordClassifier(ChordClassifierConfig cfg = {}) : cfg_(cfg) {
    std::mt19937_64 rng(cfg_.seed);
    nn::add_linear(ps_, "chordclf.fc1", feature_dim(), static_cast<std::size_t>(cfg_.hidden), rng);
    nn::add_linear(ps_, "chordclf.type", static_cast<std::size_t>(cfg_.hidden), kNumTypes, rng);
    nn::add_linear(ps_, "chordclf.root", static_cast<std::size_t>(cfg_.hidden), 12, rng);
  }

  std::size_t feature_dim() const { return static_cast<std::size_t>(2 * cfg_.context) * (kNumTypes + 12) + 12; }
  const ChordClassifierConfig& config() const { return cfg_; }
  bool trained() const { return trained_; }
  void mark_trained(bool t = true) { trained_ = t; }
  nn::ParamSet& params() { return ps_; }
  const nn::ParamSet& params() const { return ps_; }

  std::vector<double> features(const ChordContext& c) const {
    std::vector<double> f(feature_dim(), 0.0);
    const std::size_t slot = kNumTypes + 12;
    for (std::size_t k = 0; k < c.labels.size() && k < static_cast<std::size_t>(2 * cfg_.context); ++k) {
      const auto& l = c.labels[k];
      if (l.type_id < 1) continue;
      f[k * slot + static_cast<std::size_t>(l.type_id - 1)] = 1.0;
      if (l.is_chord()) f[k * slot + kNumTypes + static_cast<std::size_t>(l.root)] = 1.0;
    }
    double total = 0;
    for (int v : c.pcv) total += v;
    const std::size_t base = static_cast<std::size_t>(2 * cfg_.context) * slot;
    if (total > 0)
      for (int i = 0; i < 12; ++i) f[base + static_cast<std::size_t>(i)] = c.pcv[static_cast<std::size_t>(i)] / total;
    return f;
  }

  struct Probs {
    std::vector<double> type;  // kNumTypes
    std::vector<double> root;  // 12
  };

  std::vector<Probs> predict(const std::vector<ChordContext>& batch) const {
    if (!trained_) throw UntrainedError("chord classifier");
    nn::Tape t;
    auto& ps = const_cast<nn::ParamSet&>(ps_);
    auto [tl, rl] = forward(ps, t, batch);
    const auto tp = nn::softmax_rows_value(tl.value()), rp = nn::softmax_rows_value(rl.value());
    std::vector<Probs> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out[i].type.assign(tp.row(i).begin(), tp.row(i).end());
      out[i].root.assign(rp.row(i).begin(), rp.row(i).end());
    }
    return out;
  }

  ChordLabel estimate(const ChordContext& c) const {
    const auto p = predict({c})[0];
    ChordLabel l;
    l.type_id = static_cast<int>(std::max_element(p.type.begin(), p.type.end()) - p.type.begin()) + 1;
    l.root = l.is_chord() ? static_cast<int>(std::max_element(p.root.begin(), p.root.end()) - p.root.begin()) : -1;
    return l;
  }

  /// Mean cross-entropy (type + root) over the examples.
  double loss(const std::vector<ChordExample>& ex) const {
    nn::Tape t;
    return batch_loss(const_cast<nn::ParamSet&>(ps_), t, ex).value()[0];
  }

  /// Minibatch AdamW. Returns the training loss of each epoch.
  std::vector<double> train(const std::vector<ChordExample>& examples) {
    std::vector<double> history;
    if (examples.empty()) throw std::invalid_argument("chord classifier: no training examples");
    std::mt19937_64 rng(cfg_.seed + 17);
    nn::OptimizerState opt;
    opt.learning_rate = cfg_.lr;
    opt.weight_decay = cfg_.weight_decay;
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int e = 0; e < cfg_.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      double total = 0;
      std::size_t nb = 0;
      for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg_.batch)) {
        std::vector<ChordExample> b;
        for (std::size_t i = s; i < std::min(order.size(), s + static_cast<std::size_t>(cfg_.batch)); ++i) {
          ChordExample x = examples[order[i]];
          if (cfg_.augment_transpose) {
            const int k = static_cast<int>(rng() % 12);
            for (auto& l : x.ctx.labels) l = transpose_label(l, k);
            x.ctx.pcv = transpose_pcv(x.ctx.pcv, k);
            x.target = transpose_label(x.target, k);
          }
          b.push_back(std::move(x));
        }
        ps_.zero_grad();
        nn::Tape t;
        t.training = true;
        nn::Var l = batch_loss(ps_, t, b);
        t.backward(l);
        nn::optimizer_step(opt, ps_);
        total += l.value()[0];
        ++nb;
      }
      history.push_back(total / static_cast<double>(nb));
    }
    trained_ = true;
    return history;
  }

 private:
  std::pair<nn::Var, nn::Var> forward(nn::ParamSet& ps, nn::Tape& t, const std::vector<ChordContext>& batch) const {
    nn::Tensor x = nn::Tensor::matrix(batch.size(), feature_dim());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto f = features(batch[i]);
      std::copy(f.begin(), f.end(), x.row(i).begin());
    }
    nn::Var h = nn::relu(nn::linear(ps, t, "chordclf.fc1", t.constant(std::move(x))));
    return {nn::linear(ps, t, "chordclf.type", h), nn::linear(ps, t, "chordclf.root", h)};
  }

  nn::Var batch_loss(nn::ParamSet& ps, nn::Tape& t, const std::vector<ChordExample>& b) const {
    std::vector<ChordContext> ctx;
    std::vector<int> ty, ro;
    for (const auto& e : b) {
      ctx.push_back(e.ctx);
      ty.push_back(e.target.type_id - 1);
      ro.push_back(e.target.is_chord() ? e.target.root : -1);
    }
    auto [tl, rl] = forward(ps, t, ctx);
    nn::Var lt = nn::cross_entropy(tl, ty);
    if (std::all_of(ro.begin(), ro.end(), [](int r) { return r < 0; })) return lt;
    return nn::add(lt, nn::cross_entropy(rl, ro));
  }

  ChordClassifierConfig cfg_;
  nn::ParamSet ps_;
  bool trained_ = false;
};

// ---------------------------------------------------------------------------

/// Step-1 labels: template matches, plus the non-chord type for bars with at
/// most one distinct pitch class. Unresolved bars get type 0.
inline ChordSequence template_pass(const midi::TokenSequence& seq) {
  ChordSequence cs;
  const int bars = seq.bar_count();
  for (int b = 0; b < bars; ++b) {
    const auto pcv = pitch_class_vector(seq, b);
    if (std::popcount(pc_mask(pcv)) <= 1) {
      cs.labels.push_back({kNonChord, -1});
      cs.sources.push_back(LabelSource::rule);
    } else if (auto m = match_template(pcv, bass_pitch_class(seq, b))) {
      cs.labels.push_back(*m);
      cs.sources.push_back(LabelSource::template_match);
    } else {
      cs.labels.push_back({0, -1});
      cs.sources.push_back(LabelSource::classifier);
    }
  }
  return cs;
}

inline ChordContext context_at(const ChordSequence& step1, int bar, const PitchClassVector& pcv, int k) {
  ChordContext c;
  c.pcv = pcv;
  const int n = step1.bar_count();
  auto known = [&](int i) -> ChordLabel {
    if (i < 0 || i >= n || step1.sources[static_cast<std::size_t>(i)] == LabelSource::classifier) return {0, -1};
    return step1.labels[static_cast<std::size_t>(i)];
  };
  for (int d = k; d >= 1; --d) c.labels.push_back(known(bar - d));
  for (int d = 1; d <= k; ++d) c.labels.push_back(known(bar + d));
  return c;
}

/// Labels every bar. Template and rule labels are final; the classifier is
/// consulted only for bars left unresolved, so a piece made entirely of
/// complete chords never needs one.
inline ChordSequence recognize_chords(const midi::TokenSequence& seq, const ChordClassifier* clf = nullptr) {
  ChordSequence cs = template_pass(seq);
  const int k = clf ? clf->config().context : 2;
  const ChordSequence step1 = cs;
  for (int b = 0; b < cs.bar_count(); ++b) {
    if (cs.sources[static_cast<std::size_t>(b)] != LabelSource::classifier) continue;
    if (!clf) throw UntrainedError("chord classifier (bar " + std::to_string(b) + " needs sequence estimation)");
    cs.labels[static_cast<std::size_t>(b)] = clf->estimate(context_at(step1, b, pitch_class_vector(seq, b), k));
  }
  return cs;
}

/// Self-supervised examples: each template-matched bar, with its profile
/// corrupted by dropping one pitch class or adding a foreign one, labelled
/// with its clean chord.
inline std::vector<ChordExample> make_chord_examples(const std::vector<midi::TokenSequence>& corpus, int k,
                                                     std::uint64_t seed, int variants = 2) {
  std::mt19937_64 rng(seed);
  std::vector<ChordExample> out;
  for (const auto& seq : corpus) {
    const ChordSequence s1 = template_pass(seq);
    for (int b = 0; b < s1.bar_count(); ++b) {
      if (s1.sources[static_cast<std::size_t>(b)] != LabelSource::template_match) continue;
      const auto pcv = pitch_class_vector(seq, b);
      for (int v = 0; v < variants; ++v) {
        PitchClassVector c = pcv;
        std::vector<int> on, off;
        for (int i = 0; i < 12; ++i) (c[static_cast<std::size_t>(i)] ? on : off).push_back(i);
        if (v % 2 == 0 && on.size() > 2) {
          c[static_cast<std::size_t>(on[rng() % on.size()])] = 0;
        } else if (!off.empty()) {
          c[static_cast<std::size_t>(off[rng() % off.size()])] = 1;
        }
        out.push_back({context_at(s1, b, c, k), s1.labels[static_cast<std::size_t>(b)]});
      }
    }
  }
  return out;
}

/// All consecutive n-grams of bar labels, in order (a multiset).
using ChordNgram = std::vector<ChordLabel>;

inline std::vector<ChordNgram> chord_progression_ngrams(const ChordSequence& chords, int n = 3) {
  std::vector<ChordNgram> out;
  if (n < 1) throw std::invalid_argument("n-gram order must be >= 1");
  if (chords.bar_count() < n) {
    log_warn("chord sequence of " + std::to_string(chords.bar_count()) + " bars is shorter than n = " +
             std::to_string(n));
    return out;
  }
  for (int i = 0; i + n <= chords.bar_count(); ++i)
    out.emplace_back(chords.labels.begin() + i, chords.labels.begin() + i + n);
  return out;
}

inline std::size_t distinct_ngrams(const std::vector<ChordNgram>& grams) {
  std::vector<ChordNgram> s = grams;
  std::sort(s.begin(), s.end());
  return static_cast<std::size_t>(std::unique(s.begin(), s.end()) - s.begin());
}

inline nlohmann::json chords_to_json(const ChordSequence& cs) {
  nlohmann::json bars = nlohmann::json::array();
  static const char* src[] = {"template", "classifier", "rule"};
  for (int b = 0; b < cs.bar_count(); ++b) {
    const auto& l = cs.labels[static_cast<std::size_t>(b)];
    bars.push_back({{"bar", b},
                    {"type", l.type_id},
                    {"root", l.root},
                    {"name", l.type_id >= 1 ? l.name() : "?"},
                    {"source", src[static_cast<int>(cs.sources[static_cast<std::size_t>(b)])]}});
  }
  return {{"format", "hiermusic-chords"}, {"version", 1}, {"bars", bars}};
}

}  // namespace hiermusic::chord
