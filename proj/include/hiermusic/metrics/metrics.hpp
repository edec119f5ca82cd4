#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiermusic/chord/recognize.hpp"
#include "hiermusic/log.hpp"
#include "hiermusic/midi/types.hpp"

namespace hiermusic::metrics {

using Corpus = std::vector<midi::TokenSequence>;

/// Raised when a metric is undefined for a piece (too few notes or bars).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline constexpr std::array<const char*, 12> kMetricNames = {"PPL", "PCU", "ISR", "PRS", "TUP", "PR",
                                                             "APS", "IOI", "PCH", "GS",  "CPI", "SI"};

inline bool is_bounded(const std::string& name) {
  return name == "ISR" || name == "PRS" || name == "GS" || name == "CPI" || name == "SI";
}

// ---------------------------------------------------------------------------
// Per-piece metrics

inline std::set<int> pitch_classes(const midi::TokenSequence& s) {
  std::set<int> pcs;
  for (const auto& t : s.tokens) pcs.insert(((t.pitch % 12) + 12) % 12);
  return pcs;
}

inline double pcu(const midi::TokenSequence& s) { return static_cast<double>(pitch_classes(s).size()); }

/// In-scale (C major) share of the distinct pitch classes used.
inline double isr(const midi::TokenSequence& s) {
  const auto pcs = pitch_classes(s);
  if (pcs.empty()) throw UndefinedMetric("ISR: empty piece");
  static const std::set<int> major = {0, 2, 4, 5, 7, 9, 11};
  double in = 0;
  for (int pc : pcs) in += major.count(pc);
  return in / static_cast<double>(pcs.size());
}

/// Share of time steps in [0, end) with at least `threshold` sounding pitches.
inline double prs(const midi::TokenSequence& s, int threshold = 4) {
  const int end = s.end_step();
  if (end <= 0) throw UndefinedMetric("PRS: empty piece");
  std::vector<std::set<int>> sounding(static_cast<std::size_t>(end));
  for (const auto& t : s.tokens)
    for (int k = t.onset; k < t.onset + t.duration; ++k) sounding[static_cast<std::size_t>(k)].insert(t.pitch);
  double hit = 0;
  for (const auto& p : sounding) hit += static_cast<int>(p.size()) >= threshold;
  return hit / static_cast<double>(end);
}

inline double tup(const midi::TokenSequence& s) {
  std::set<int> p;
  for (const auto& t : s.tokens) p.insert(t.pitch);
  return static_cast<double>(p.size());
}

inline double pr(const midi::TokenSequence& s) {
  if (s.empty()) throw UndefinedMetric("PR: empty piece");
  auto [lo, hi] = std::minmax_element(s.tokens.begin(), s.tokens.end(),
                                      [](const midi::Token& a, const midi::Token& b) { return a.pitch < b.pitch; });
  return hi->pitch - lo->pitch;
}

/// Mean absolute semitone step between consecutive notes in token order.
inline double aps(const midi::TokenSequence& s) {
  if (s.size() < 2) throw UndefinedMetric("APS: fewer than two notes");
  double acc = 0;
  for (std::size_t i = 1; i < s.size(); ++i) acc += std::abs(s.tokens[i].pitch - s.tokens[i - 1].pitch);
  return acc / static_cast<double>(s.size() - 1);
}

/// Mean gap in seconds between consecutive distinct onsets.
inline double ioi(const midi::TokenSequence& s) {
  std::vector<int> on;
  for (const auto& t : s.tokens)
    if (on.empty() || t.onset != on.back()) on.push_back(t.onset);
  if (on.size() < 2) throw UndefinedMetric("IOI: fewer than two onsets");
  return static_cast<double>(on.back() - on.front()) / static_cast<double>(on.size() - 1) * s.seconds_per_step();
}

/// Mean over non-empty bars of the base-2 entropy of the pitch-class
/// histogram of the notes starting in the bar.
inline double pch(const midi::TokenSequence& s) {
  std::map<int, std::array<double, 12>> bars;
  for (const auto& t : s.tokens) {
    auto [it, _] = bars.try_emplace(t.onset / s.bar_length, std::array<double, 12>{});
    it->second[static_cast<std::size_t>(((t.pitch % 12) + 12) % 12)] += 1;
  }
  if (bars.empty()) throw UndefinedMetric("PCH: empty piece");
  double acc = 0;
  for (const auto& [_, h] : bars) {
    double n = 0, e = 0;
    for (double c : h) n += c;
    for (double c : h)
      if (c > 0) e -= c / n * std::log2(c / n);
    acc += e;
  }
  return acc / static_cast<double>(bars.size());
}

inline std::vector<std::vector<char>> onset_vectors(const midi::TokenSequence& s) {
  std::vector<std::vector<char>> v(static_cast<std::size_t>(s.bar_count()),
                                   std::vector<char>(static_cast<std::size_t>(s.bar_length), 0));
  for (const auto& t : s.tokens) v[static_cast<std::size_t>(t.onset / s.bar_length)][static_cast<std::size_t>(t.onset % s.bar_length)] = 1;
  return v;
}

/// Mean over all bar pairs of 1 - Hamming(onset vectors) / steps per bar.
inline double gs(const midi::TokenSequence& s) {
  const auto v = onset_vectors(s);
  if (v.size() < 2) throw UndefinedMetric("GS: fewer than two bars");
  double acc = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j, ++pairs) {
      int h = 0;
      for (std::size_t k = 0; k < v[i].size(); ++k) h += v[i][k] != v[j][k];
      acc += 1.0 - static_cast<double>(h) / static_cast<double>(s.bar_length);
    }
  return acc / static_cast<double>(pairs);
}

/// Distinct chord trigrams over all trigrams of the per-bar chord labels.
inline double cpi(const std::vector<chord::ChordLabel>& chords) {
  if (chords.size() < 3) throw UndefinedMetric("CPI: fewer than three bars");
  std::set<std::array<int, 6>> seen;
  for (std::size_t i = 0; i + 2 < chords.size(); ++i)
    seen.insert({chords[i].type_id, chords[i].root, chords[i + 1].type_id, chords[i + 1].root, chords[i + 2].type_id,
                 chords[i + 2].root});
  return static_cast<double>(seen.size()) / static_cast<double>(chords.size() - 2);
}

/// Without a classifier, bars no template resolves keep the unknown type 0.
inline double cpi(const midi::TokenSequence& s, const chord::ChordClassifier* clf = nullptr) {
  return cpi(clf ? chord::recognize_chords(s, clf).labels : chord::template_pass(s).labels);
}

struct SiOptions {
  int min_lag = 4;
  int max_lag = 32;
  int min_run = 4;
};

/// Per-bar pitch-class count vectors; empty bars get no fingerprint.
inline std::vector<std::array<int, 12>> bar_fingerprints(const midi::TokenSequence& s) {
  std::vector<std::array<int, 12>> f(static_cast<std::size_t>(s.bar_count()), std::array<int, 12>{});
  for (const auto& t : s.tokens) f[static_cast<std::size_t>(t.onset / s.bar_length)][static_cast<std::size_t>(((t.pitch % 12) + 12) % 12)]++;
  return f;
}

/// Share of bars lying on a diagonal run of equal non-empty fingerprints of
/// at least `min_run` bars, at a lag within [min_lag, max_lag].
inline double si(const midi::TokenSequence& s, const SiOptions& o = {}) {
  const auto f = bar_fingerprints(s);
  const int n = static_cast<int>(f.size());
  if (n < o.min_lag + o.min_run) throw UndefinedMetric("SI: fewer than " + std::to_string(o.min_lag + o.min_run) + " bars");
  auto empty = [&](int i) {
    const auto& a = f[static_cast<std::size_t>(i)];
    return std::all_of(a.begin(), a.end(), [](int c) { return c == 0; });
  };
  auto same = [&](int i, int j) { return !empty(i) && f[static_cast<std::size_t>(i)] == f[static_cast<std::size_t>(j)]; };
  std::vector<char> part(static_cast<std::size_t>(n), 0);
  for (int lag = o.min_lag; lag <= std::min(o.max_lag, n - 1); ++lag) {
    int run = 0;
    for (int i = 0; i + lag <= n; ++i) {
      if (i + lag < n && same(i, i + lag)) {
        ++run;
        continue;
      }
      if (run >= o.min_run)
        for (int k = i - run; k < i; ++k) part[static_cast<std::size_t>(k)] = part[static_cast<std::size_t>(k + lag)] = 1;
      run = 0;
    }
  }
  return static_cast<double>(std::count(part.begin(), part.end(), 1)) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Perplexity

/// Per-token log-probabilities of a token sequence under some model.
using TokenScorer = std::function<std::vector<double>(const std::vector<int>&)>;

inline double perplexity(const TokenScorer& score, const std::vector<std::vector<int>>& corpus) {
  double nll = 0;
  std::size_t n = 0;
  for (const auto& ids : corpus) {
    const auto lp = score(ids);
    if (lp.size() != ids.size()) throw std::logic_error("perplexity: scorer must return one value per token");
    for (double x : lp) nll -= x;
    n += ids.size();
  }
  if (n == 0) throw std::invalid_argument("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(n));
}

/// Interpolated n-gram model over token ids with add-k smoothing at each
/// order; used as the evaluation model for corpus perplexity.
class NgramModel {
 public:
  NgramModel(int vocab, int order = 3, double k = 0.1) : vocab_(vocab), order_(order), k_(k) {
    if (vocab < 1 || order < 1 || k <= 0) throw std::invalid_argument("ngram: bad parameters");
  }

  void fit(const std::vector<std::vector<int>>& corpus) {
    for (const auto& ids : corpus)
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int n = 0; n < order_; ++n) {
          if (static_cast<int>(i) < n) break;
          const std::vector<int> ctx(ids.begin() + static_cast<long>(i) - n, ids.begin() + static_cast<long>(i));
          auto& c = counts_[ctx];
          c.total += 1;
          c.next[ids[i]] += 1;
        }
  }

  double prob(const std::vector<int>& ids, std::size_t i) const {
    double p = 1.0 / vocab_;
    for (int n = 0; n < order_ && static_cast<int>(i) >= n; ++n) {
      const std::vector<int> ctx(ids.begin() + static_cast<long>(i) - n, ids.begin() + static_cast<long>(i));
      const auto it = counts_.find(ctx);
      if (it == counts_.end()) break;
      const auto nx = it->second.next.find(ids[i]);
      const double c = nx == it->second.next.end() ? 0.0 : nx->second;
      // Smooth towards the lower-order estimate.
      p = (c + k_ * vocab_ * p) / (it->second.total + k_ * vocab_);
    }
    return p;
  }

  std::vector<double> log_probs(const std::vector<int>& ids) const {
    std::vector<double> out;
    for (std::size_t i = 0; i < ids.size(); ++i) out.push_back(std::log(prob(ids, i)));
    return out;
  }

  TokenScorer scorer() const {
    return [this](const std::vector<int>& ids) { return log_probs(ids); };
  }

 private:
  struct Counts {
    double total = 0;
    std::map<int, double> next;
  };
  int vocab_, order_;
  double k_;
  std::map<std::vector<int>, Counts> counts_;
};

/// Piece tokens for the evaluation model: pitch * 17 + min(gap to next onset, 16).
inline std::vector<int> eval_tokens(const midi::TokenSequence& s) {
  std::vector<int> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int gap = i + 1 < s.size() ? s.tokens[i + 1].onset - s.tokens[i].onset : 0;
    out.push_back(std::clamp(s.tokens[i].pitch, 0, 127) * 17 + std::min(gap, 16));
  }
  return out;
}
inline constexpr int kEvalVocab = 128 * 17;

// ---------------------------------------------------------------------------
// Corpus aggregation

struct MetricValues {
  std::map<std::string, double> v;  // NaN when undefined on every piece

  double operator[](const std::string& k) const { return v.at(k); }
};

struct EvalOptions {
  SiOptions si;
  int prs_threshold = 4;
  int ngram_order = 3;
  const chord::ChordClassifier* chords = nullptr;  // resolves bars no template matches
};

/// Mean of a per-piece metric over the pieces where it is defined.
inline double corpus_mean(const Corpus& c, const std::function<double(const midi::TokenSequence&)>& f, const std::string& name) {
  double acc = 0;
  int n = 0, skipped = 0;
  for (const auto& s : c) {
    try {
      acc += f(s);
      ++n;
    } catch (const UndefinedMetric&) {
      ++skipped;
    }
  }
  if (skipped) log_warn(name + ": undefined on " + std::to_string(skipped) + " piece(s), excluded");
  return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
}

/// Every metric except PPL, which needs an evaluation model.
inline MetricValues corpus_metrics(const Corpus& c, const EvalOptions& o = {}) {
  if (c.empty()) throw std::invalid_argument("metrics: empty corpus");
  MetricValues m;
  m.v["PCU"] = corpus_mean(c, pcu, "PCU");
  m.v["ISR"] = corpus_mean(c, isr, "ISR");
  m.v["PRS"] = corpus_mean(c, [&](const midi::TokenSequence& s) { return prs(s, o.prs_threshold); }, "PRS");
  m.v["TUP"] = corpus_mean(c, tup, "TUP");
  m.v["PR"] = corpus_mean(c, pr, "PR");
  m.v["APS"] = corpus_mean(c, aps, "APS");
  m.v["IOI"] = corpus_mean(c, ioi, "IOI");
  m.v["PCH"] = corpus_mean(c, pch, "PCH");
  m.v["GS"] = corpus_mean(c, gs, "GS");
  m.v["CPI"] = corpus_mean(c, [&](const midi::TokenSequence& s) { return cpi(s, o.chords); }, "CPI");
  m.v["SI"] = corpus_mean(c, [&](const midi::TokenSequence& s) { return si(s, o.si); }, "SI");
  return m;
}

struct MetricsReport {
  MetricValues generated, reference, closeness;
  std::string generated_name = "Generated", reference_name = "Training set";

  nlohmann::json to_json() const {
    auto row = [](const MetricValues& m) {
      nlohmann::json j = nlohmann::json::object();
      for (const char* k : kMetricNames) {
        const double x = m.v.at(k);
        j[k] = std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x);
      }
      return j;
    };
    return {{"schema", "hiermusic.metrics/1"},
            {"columns", kMetricNames},
            {"reference", row(reference)},
            {"generated", row(generated)},
            {"closeness", row(closeness)}};
  }

  /// Aligned text table: one row per corpus plus the absolute differences.
  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(14) << "Model";
    for (const char* k : kMetricNames) os << std::right << std::setw(9) << k;
    os << '\n';
    auto line = [&](const std::string& name, const MetricValues& m) {
      os << std::left << std::setw(14) << name;
      for (const char* k : kMetricNames) {
        const double x = m.v.at(k);
        os << std::right << std::setw(9);
        if (std::isnan(x))
          os << "-";
        else
          os << std::fixed << std::setprecision(3) << x;
      }
      os << '\n';
    };
    line(reference_name, reference);
    line(generated_name, generated);
    line("|diff|", closeness);
    return os.str();
  }
};

/// All twelve metrics on both corpora and their absolute differences. PPL
/// uses an n-gram evaluation model fitted on the reference corpus.
inline MetricsReport closeness_report(const Corpus& generated, const Corpus& reference, const EvalOptions& o = {}) {
  if (generated.empty() || reference.empty()) throw std::invalid_argument("closeness_report: empty corpus");
  MetricsReport r;
  r.generated = corpus_metrics(generated, o);
  r.reference = corpus_metrics(reference, o);
  NgramModel lm(kEvalVocab, o.ngram_order);
  std::vector<std::vector<int>> ref_ids, gen_ids;
  for (const auto& s : reference) ref_ids.push_back(eval_tokens(s));
  for (const auto& s : generated) gen_ids.push_back(eval_tokens(s));
  lm.fit(ref_ids);
  r.reference.v["PPL"] = perplexity(lm.scorer(), ref_ids);
  r.generated.v["PPL"] = perplexity(lm.scorer(), gen_ids);
  for (const char* k : kMetricNames) {
    const double a = r.generated.v.at(k), b = r.reference.v.at(k);
    r.closeness.v[k] = std::isnan(a) && std::isnan(b) ? 0.0 : std::abs(a - b);
  }
  return r;
}

}  // namespace hiermusic::metrics
