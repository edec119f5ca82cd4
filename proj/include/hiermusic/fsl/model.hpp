#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiermusic/chord/recognize.hpp"
#include "hiermusic/errors.hpp"
#include "hiermusic/fsl/losses.hpp"
#include "hiermusic/fsl/proposals.hpp"
#include "hiermusic/midi/annotations.hpp"
#include "hiermusic/nn/checkpoint.hpp"
#include "hiermusic/nn/layers.hpp"
#include "hiermusic/nn/optim.hpp"

namespace hiermusic::fsl {

/// A labelled stretch of whole bars.
struct BarSection {
  int label = 0;
  int start = 0;  // bar
  int bars = 0;

  Interval scope() const { return {start, bars}; }
  friend bool operator==(const BarSection&, const BarSection&) = default;
};

/// Segmentation result: bar scope plus the matching note-index scope.
struct Section {
  int label = 0;
  int start = 0;   // note index
  int length = 0;  // notes
  int start_bar = 0;
  int bars = 0;
  double confidence = 0.0;

  Interval scope() const { return {start, length}; }
};

/// Note-index scopes of bar sections; boundaries land on bar starts.
inline std::vector<Section> to_note_sections(const midi::TokenSequence& seq, const std::vector<BarSection>& bs) {
  std::vector<Section> out;
  for (const auto& b : bs) {
    const auto a = seq.first_token_of_bar(b.start), e = seq.first_token_of_bar(b.start + b.bars);
    out.push_back({b.label, static_cast<int>(a), static_cast<int>(e - a), b.start, b.bars, 1.0});
  }
  return out;
}

/// Bar sections from note-index annotations: each span takes the bars its
/// first and last notes fall in.
inline std::vector<BarSection> bar_sections_from_annotations(const midi::TokenSequence& seq,
                                                             const std::vector<midi::SectionAnnotation>& anns,
                                                             const std::vector<std::string>& vocab = midi::default_labels()) {
  std::vector<BarSection> out;
  for (const auto& a : anns) {
    if (a.length < 1 || a.end() > static_cast<int>(seq.size())) throw std::out_of_range("annotation outside sequence");
    const int b0 = seq.tokens[static_cast<std::size_t>(a.start)].onset / seq.bar_length;
    const int b1 = seq.tokens[static_cast<std::size_t>(a.end() - 1)].onset / seq.bar_length + 1;
    const int lo = out.empty() ? b0 : std::max(b0, out.back().start + out.back().bars);
    if (b1 > lo) out.push_back({midi::label_id(a.label, vocab), lo, b1 - lo});
  }
  return out;
}

struct FslConfig {
  std::vector<int> window_sizes = default_window_sizes();
  int labels = 6;
  int hidden = 64;
  int epochs = 20;
  int batch = 64;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  double tau_start = 1.0;
  double tau_end = 0.1;
  double pos_iou = 0.6;   // windows at least this close to a section are positives
  double bg_iou = 0.4;    // windows below this are background
  double bg_ratio = 2.0;  // background windows kept per positive
  int random_windows = 60;  // extra arbitrary-length windows per piece
  std::uint64_t seed = 1;
  bool merge_adjacent = true;
  GlobalOptions global;
};

struct FslPiece {
  chord::ChordSequence chords;
  std::vector<BarSection> sections;
};

struct FslHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

class FslModel {
 public:
  static constexpr int kBoundary = 2;  // chords inspected on each side of each edge
  static constexpr int kContext = 4;   // bars compared for similarity outside the window

  explicit FslModel(FslConfig cfg = {}) : cfg_(std::move(cfg)) {
    std::mt19937_64 rng(cfg_.seed);
    const auto h = static_cast<std::size_t>(cfg_.hidden);
    nn::add_linear(ps_, "fsl.fc1", feature_dim(), h, rng);
    nn::add_linear(ps_, "fsl.fc2", h, h, rng);
    nn::add_linear(ps_, "fsl.cls", h, static_cast<std::size_t>(cfg_.labels + 1), rng);
    nn::add_linear(ps_, "fsl.reg", h, 2, rng);
    ps_.at("fsl.reg.w").value.fill(0.0);
  }

  const FslConfig& config() const { return cfg_; }
  FslConfig& config() { return cfg_; }
  nn::ParamSet& params() { return ps_; }
  const nn::ParamSet& params() const { return ps_; }
  bool trained() const { return trained_; }
  void mark_trained(bool t = true) { trained_ = t; }
  int background() const { return cfg_.labels; }

  static constexpr std::size_t kSlot = chord::kNumTypes + 12;

  std::size_t feature_dim() const {
    return chord::kNumTypes + 12 + 12 + static_cast<std::size_t>(4 * kBoundary) * kSlot + 2 + 1;
  }

  /// Window features: chord-type, root and root-motion histograms; one-hot
  /// chords at both edges (inside and outside); similarity of the window's
  /// chord histogram to the bars just before and after; log length.
  std::vector<double> features(const chord::ChordSequence& cs, int start, int length) const {
    std::vector<double> f(feature_dim(), 0.0);
    const int n = cs.bar_count();
    const int end = std::min(start + length, n);
    auto lab = [&](int i) { return cs.labels[static_cast<std::size_t>(i)]; };
    const double inv = 1.0 / std::max(1, end - start);
    for (int i = start; i < end; ++i) {
      const auto l = lab(i);
      f[static_cast<std::size_t>(l.type_id - 1)] += inv;
      if (l.is_chord()) f[chord::kNumTypes + static_cast<std::size_t>(l.root)] += inv;
      if (i > start && l.is_chord() && lab(i - 1).is_chord())
        f[chord::kNumTypes + 12 + static_cast<std::size_t>((l.root - lab(i - 1).root + 12) % 12)] += inv;
    }
    std::size_t o = chord::kNumTypes + 24;
    auto put = [&](int i) {
      if (i >= 0 && i < n) {
        const auto l = lab(i);
        f[o + static_cast<std::size_t>(l.type_id - 1)] = 1.0;
        if (l.is_chord()) f[o + chord::kNumTypes + static_cast<std::size_t>(l.root)] = 1.0;
      }
      o += kSlot;
    };
    for (int d = kBoundary; d >= 1; --d) put(start - d);
    for (int d = 0; d < kBoundary; ++d) put(start + d);
    for (int d = kBoundary; d >= 1; --d) put(end - d);
    for (int d = 0; d < kBoundary; ++d) put(end + d);
    f[o++] = similarity(cs, start, end, start - kContext, start);
    f[o++] = similarity(cs, start, end, end, end + kContext);
    f[o] = std::log(static_cast<double>(std::max(1, length))) / std::log(1024.0);
    return f;
  }

  struct Output {
    std::vector<double> probs;  // labels + background
    double d_start = 0, d_loglen = 0;
  };

  /// Tape-free inference over a batch of feature rows.
  std::vector<Output> infer(const std::vector<std::vector<double>>& rows) const {
    if (!trained_) throw UntrainedError("fsl model");
    return infer_unchecked(rows);
  }

  WindowScore score(const chord::ChordSequence& cs, int start, int length) const {
    const auto o = infer({features(cs, start, length)})[0];
    WindowScore s;
    s.confidence = 1.0 - o.probs[static_cast<std::size_t>(background())];
    s.label = static_cast<int>(std::max_element(o.probs.begin(), o.probs.end() - 1) - o.probs.begin());
    s.d_start = o.d_start;
    s.d_loglen = o.d_loglen;
    return s;
  }

  Scorer scorer(const chord::ChordSequence& cs) const {
    return [this, &cs](int s, int l) { return score(cs, s, l); };
  }

  /// Proposals, then adjacent windows carrying the same label merged.
  std::vector<BarSection> segment_bars(const chord::ChordSequence& cs, Strategy strategy, std::uint64_t seed = 0) const {
    if (!trained_) throw UntrainedError("fsl model");
    const int bars = cs.bar_count();
    if (bars == 0) return {};
    std::vector<CandidateWindow> w;
    if (strategy == Strategy::l2r) {
      w = propose_l2r(bars, cfg_.window_sizes, scorer(cs));
    } else {
      GlobalOptions g = cfg_.global;
      g.seed = seed;
      w = propose_global(bars, cfg_.window_sizes, scorer(cs), g);
    }
    std::vector<BarSection> out;
    for (const auto& c : w) {
      if (cfg_.merge_adjacent && !out.empty() && out.back().label == c.label) {
        out.back().bars += c.length;
      } else {
        out.push_back({c.label, c.start, c.length});
      }
    }
    return out;
  }

  std::vector<Section> segment(const midi::TokenSequence& seq, const chord::ChordSequence& cs, Strategy strategy,
                               std::uint64_t seed = 0) const {
    return to_note_sections(seq, segment_bars(cs, strategy, seed));
  }

  // ---- training --------------------------------------------------------

  struct Example {
    std::vector<double> x;
    int target = 0;  // label, or background()
    bool reg = false;
    Interval anchor, gt;
  };

  std::vector<Example> make_examples(const std::vector<FslPiece>& pieces, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<Example> pos, bg;
    for (const auto& p : pieces) {
      const int bars = p.chords.bar_count();
      if (bars == 0 || p.sections.empty()) continue;
      std::vector<Interval> windows;
      for (int size : cfg_.window_sizes) {
        if (size > bars) {
          windows.push_back({0, bars});
          break;
        }
        for (int s = 0; s + size <= bars; ++s) windows.push_back({s, size});
      }
      for (int r = 0; r < cfg_.random_windows; ++r) {
        const int len = 4 + static_cast<int>(rng() % static_cast<unsigned>(std::max(1, std::min(bars, 64) - 3)));
        const int l = std::min(len, bars);
        windows.push_back({static_cast<int>(rng() % static_cast<unsigned>(bars - l + 1)), l});
      }
      for (const auto& w : windows) {
        double best = 0;
        const BarSection* match = nullptr;
        for (const auto& s : p.sections) {
          const double j = jaccard(w, s.scope());
          if (j > best) best = j, match = &s;
        }
        if (best >= cfg_.pos_iou) {
          pos.push_back({features(p.chords, w.start, w.length), match->label, true, w, match->scope()});
        } else if (best < cfg_.bg_iou) {
          bg.push_back({features(p.chords, w.start, w.length), background(), false, w, {}});
        }
      }
    }
    std::shuffle(bg.begin(), bg.end(), rng);
    const auto keep = static_cast<std::size_t>(cfg_.bg_ratio * static_cast<double>(pos.size()));
    if (bg.size() > keep) bg.resize(keep);
    pos.insert(pos.end(), std::make_move_iterator(bg.begin()), std::make_move_iterator(bg.end()));
    return pos;
  }

  /// Loss over examples with no Gumbel noise at temperature `tau`. Validation
  /// uses tau = 1 so epochs stay comparable while the training tau anneals.
  double evaluate_loss(const std::vector<Example>& ex, double tau) const {
    if (ex.empty()) throw std::invalid_argument("fsl: empty batch");
    nn::Tape t;
    return batch_loss(const_cast<nn::ParamSet&>(ps_), t, ex, 0, ex.size(), tau, nullptr).value()[0];
  }

  double temperature(int epoch) const {
    if (cfg_.epochs <= 1) return cfg_.tau_end;
    const double a = static_cast<double>(epoch) / (cfg_.epochs - 1);
    return cfg_.tau_start + (cfg_.tau_end - cfg_.tau_start) * a;
  }

  FslHistory train(const std::vector<FslPiece>& train_set, const std::vector<FslPiece>& val_set = {}) {
    bool any = false;
    for (const auto& p : train_set) any = any || !p.sections.empty();
    if (!any) throw std::invalid_argument("train_fsl: no annotated sections");
    auto ex = make_examples(train_set, cfg_.seed + 1);
    const auto val = val_set.empty() ? std::vector<Example>{} : make_examples(val_set, cfg_.seed + 2);
    FslHistory h;
    nn::OptimizerState opt;
    opt.learning_rate = cfg_.lr;
    opt.weight_decay = cfg_.weight_decay;
    std::mt19937_64 rng(cfg_.seed + 3);
    for (int e = 0; e < cfg_.epochs; ++e) {
      const double tau = temperature(e);
      std::shuffle(ex.begin(), ex.end(), rng);
      double total = 0;
      std::size_t nb = 0;
      for (std::size_t s = 0; s < ex.size(); s += static_cast<std::size_t>(cfg_.batch)) {
        const std::size_t n = std::min(ex.size(), s + static_cast<std::size_t>(cfg_.batch)) - s;
        const nn::Tensor theta = sample_gumbel(n, static_cast<std::size_t>(cfg_.labels + 1), rng);
        ps_.zero_grad();
        nn::Tape t;
        t.training = true;
        nn::Var l = batch_loss(ps_, t, ex, s, n, tau, &theta);
        t.backward(l);
        nn::optimizer_step(opt, ps_);
        total += l.value()[0];
        ++nb;
      }
      h.train_loss.push_back(total / static_cast<double>(std::max<std::size_t>(nb, 1)));
      if (!val.empty()) h.val_loss.push_back(evaluate_loss(val, 1.0));
    }
    trained_ = true;
    return h;
  }

  nlohmann::json meta() const {
    return {{"kind", "fsl"},
            {"labels", cfg_.labels},
            {"hidden", cfg_.hidden},
            {"window_sizes", cfg_.window_sizes},
            {"trained", trained_}};
  }

 private:
  static double similarity(const chord::ChordSequence& cs, int a0, int a1, int b0, int b1) {
    const int n = cs.bar_count();
    std::vector<double> ha(chord::kNumTypes * 12 + 1, 0.0), hb(ha.size(), 0.0);
    auto bin = [](const chord::ChordLabel& l) {
      return l.is_chord() ? static_cast<std::size_t>((l.type_id - 1) * 12 + l.root) : chord::kNumTypes * 12;
    };
    for (int i = std::max(a0, 0); i < std::min(a1, n); ++i) ha[bin(cs.labels[static_cast<std::size_t>(i)])] += 1;
    for (int i = std::max(b0, 0); i < std::min(b1, n); ++i) hb[bin(cs.labels[static_cast<std::size_t>(i)])] += 1;
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < ha.size(); ++i) dot += ha[i] * hb[i], na += ha[i] * ha[i], nb += hb[i] * hb[i];
    return (na > 0 && nb > 0) ? dot / std::sqrt(na * nb) : 0.0;
  }

  std::vector<Output> infer_unchecked(const std::vector<std::vector<double>>& rows) const {
    const std::size_t d = feature_dim();
    nn::Tensor x = nn::Tensor::matrix(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), x.row(i).begin());
    auto dense = [&](const nn::Tensor& in, const std::string& p, bool relu) {
      nn::Tensor out;
      nn::gemm(in, false, ps_.at(p + ".w").value, false, out, false);
      const auto& b = ps_.at(p + ".b").value;
      for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) {
          out(i, j) += b[j];
          if (relu && out(i, j) < 0) out(i, j) = 0;
        }
      return out;
    };
    const nn::Tensor h = dense(dense(x, "fsl.fc1", true), "fsl.fc2", true);
    const nn::Tensor cls = nn::softmax_rows_value(dense(h, "fsl.cls", false));
    const nn::Tensor reg = dense(h, "fsl.reg", false);
    std::vector<Output> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out[i].probs.assign(cls.row(i).begin(), cls.row(i).end());
      out[i].d_start = reg(i, 0);
      out[i].d_loglen = reg(i, 1);
    }
    return out;
  }

  nn::Var batch_loss(nn::ParamSet& ps, nn::Tape& t, const std::vector<Example>& ex, std::size_t s, std::size_t n,
                     double tau, const nn::Tensor* theta) const {
    nn::Tensor x = nn::Tensor::matrix(n, feature_dim());
    std::vector<int> targets;
    std::vector<int> reg_rows;
    std::vector<Interval> anchors, gts;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = ex[s + i];
      std::copy(e.x.begin(), e.x.end(), x.row(i).begin());
      targets.push_back(e.target);
      if (e.reg) {
        reg_rows.push_back(static_cast<int>(i));
        anchors.push_back(e.anchor);
        gts.push_back(e.gt);
      }
    }
    nn::Var h = nn::relu(nn::linear(ps, t, "fsl.fc1", t.constant(std::move(x))));
    h = nn::relu(nn::linear(ps, t, "fsl.fc2", h));
    // Log-probabilities stand in for p so the Gumbel draws do not swamp them.
    nn::Var logp = nn::log_softmax_rows(nn::linear(ps, t, "fsl.cls", h));
    nn::Var loss = gumbel_cls_loss(logp, targets, tau, theta);
    nn::Var reg = nn::linear(ps, t, "fsl.reg", h);
    if (!reg_rows.empty()) {
      loss = nn::add(loss, iou_loss(nn::gather_rows(reg, reg_rows), anchors, gts));
    } else {
      loss = nn::add(loss, nn::scale(nn::sum(reg), 0.0));  // keeps the head on the tape
    }
    return loss;
  }

  FslConfig cfg_;
  nn::ParamSet ps_;
  bool trained_ = false;
};

// ---- evaluation -----------------------------------------------------------

struct SegmentationScore {
  double mean_jaccard = 0;
  double label_accuracy = 0;
  int sections = 0;
};

/// Per ground-truth section: best Jaccard against any predicted section, and
/// whether that best match carries the right label. Averaged over sections.
inline SegmentationScore score_segmentation(const std::vector<Interval>& truth, const std::vector<int>& truth_labels,
                                            const std::vector<Interval>& pred, const std::vector<int>& pred_labels) {
  SegmentationScore s;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    double best = 0;
    int lab = -1;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double jac = jaccard(truth[i], pred[j]);
      if (jac > best) best = jac, lab = pred_labels[j];
    }
    s.mean_jaccard += best;
    s.label_accuracy += (lab == truth_labels[i]) ? 1.0 : 0.0;
    ++s.sections;
  }
  if (s.sections > 0) {
    s.mean_jaccard /= s.sections;
    s.label_accuracy /= s.sections;
  }
  return s;
}

inline nlohmann::json sections_to_json(const std::vector<Section>& secs,
                                       const std::vector<std::string>& vocab = midi::default_labels()) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : secs)
    arr.push_back({{"label", vocab.at(static_cast<std::size_t>(s.label))},
                   {"start", s.start},
                   {"length", s.length},
                   {"start_bar", s.start_bar},
                   {"bars", s.bars}});
  return arr;
}

}  // namespace hiermusic::fsl
