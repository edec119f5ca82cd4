#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <future>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiermusic/errors.hpp"
#include "hiermusic/fsl/model.hpp"
#include "hiermusic/log.hpp"
#include "hiermusic/midi/types.hpp"
#include "hiermusic/model/decoder.hpp"
#include "hiermusic/model/vocab.hpp"
#include "hiermusic/nn/checkpoint.hpp"
#include "hiermusic/nn/optim.hpp"

namespace hiermusic::model {

inline const std::vector<int>& fine_buckets() {
  static const std::vector<int> b = {256, 512, 768, 1024};
  return b;
}

/// Carry-up: the smallest bucket holding `length` tokens.
inline int select_fine_decoder(int length, const std::vector<int>& buckets = fine_buckets()) {
  if (length < 1) throw std::invalid_argument("select_fine_decoder: empty section");
  for (int b : buckets)
    if (length <= b) return b;
  throw std::length_error("select_fine_decoder: section of " + std::to_string(length) + " tokens exceeds " +
                          std::to_string(buckets.back()));
}

/// Chunk lengths for a section of bar-indexed tokens, cutting at the last bar
/// start that keeps each chunk within `max_len` (mid-bar only when a single
/// bar is longer than that).
inline std::vector<int> split_at_bars(const std::vector<int>& bars, int max_len) {
  std::vector<int> out;
  std::size_t start = 0;
  while (bars.size() - start > static_cast<std::size_t>(max_len)) {
    std::size_t cut = start + static_cast<std::size_t>(max_len);
    while (cut > start && bars[cut] == bars[cut - 1]) --cut;
    if (cut == start) cut = start + static_cast<std::size_t>(max_len);
    out.push_back(static_cast<int>(cut - start));
    start = cut;
  }
  out.push_back(static_cast<int>(bars.size() - start));
  return out;
}

struct HierSection {
  int label = 0;
  std::vector<int> ids;   // note tokens
  std::vector<int> bars;  // per token, relative to the section start
};

struct HierPiece {
  std::vector<HierSection> sections;
  std::string source;
};

/// Token sections of a normalized sequence. Each section's last advance runs
/// to the section end. Oversize sections are split at bar boundaries.
inline HierPiece make_hier_piece(const midi::TokenSequence& seq, const std::vector<fsl::BarSection>& secs,
                                 const Vocab& v, int max_len = 1024) {
  HierPiece p;
  p.source = seq.source;
  const int bl = seq.bar_length;
  for (const auto& s : secs) {
    const auto a = seq.first_token_of_bar(s.start), b = seq.first_token_of_bar(s.start + s.bars);
    if (a >= b) continue;
    HierSection h;
    h.label = s.label;
    const int base = s.start * bl, end = (s.start + s.bars) * bl;
    for (auto i = a; i < b; ++i) {
      const auto& t = seq.tokens[i];
      const int next = i + 1 < b ? seq.tokens[i + 1].onset : end;
      h.ids.push_back(v.note_token(t.pitch, next - t.onset));
      h.bars.push_back((t.onset - base) / bl);
    }
    const auto chunks = split_at_bars(h.bars, max_len);
    if (chunks.size() == 1) {
      p.sections.push_back(std::move(h));
      continue;
    }
    log_warn("section of " + std::to_string(h.ids.size()) + " tokens split into " + std::to_string(chunks.size()) +
             " parts");
    std::size_t off = 0;
    for (int n : chunks) {
      HierSection c;
      c.label = h.label;
      c.ids.assign(h.ids.begin() + static_cast<long>(off), h.ids.begin() + static_cast<long>(off + n));
      const int b0 = h.bars[off];
      for (std::size_t k = off; k < off + static_cast<std::size_t>(n); ++k) c.bars.push_back(h.bars[k] - b0);
      p.sections.push_back(std::move(c));
      off += static_cast<std::size_t>(n);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Loss pieces

/// Per-channel standardization of h by its own moments, then the affine map
/// gamma * . + beta (rows 1 x D).
inline nn::Var msn(nn::Var h, nn::Var gamma, nn::Var beta, double eps = 1e-5) {
  if (h.value().rows() < 2) throw std::invalid_argument("msn: need at least two rows");
  return nn::add_bias(nn::mul_row(nn::standardize_cols(h, eps), gamma), beta);
}

/// Pitch-level variant: standardize a section's pitches and map them onto
/// the target moments.
inline std::vector<int> msn_pitches(const std::vector<int>& pitches, double mean, double stddev, int lo = 21, int hi = 108) {
  if (pitches.empty()) return {};
  double mu = 0, var = 0;
  for (int p : pitches) mu += p;
  mu /= static_cast<double>(pitches.size());
  for (int p : pitches) var += (p - mu) * (p - mu);
  const double sd = std::max(std::sqrt(var / static_cast<double>(pitches.size())), 1e-5);
  std::vector<int> out;
  for (int p : pitches)
    out.push_back(std::clamp(static_cast<int>(std::lround((p - mu) / sd * stddev + mean)), lo, hi));
  return out;
}

/// Weighted concatenation: section m scaled by weights[m] (1 x 1), with
/// `boundary` (1 x D) between consecutive sections.
inline nn::Var aggregate(const std::vector<nn::Var>& sections, const std::vector<nn::Var>& weights, nn::Var boundary,
                         int max_len = 4096) {
  if (sections.empty()) throw std::invalid_argument("aggregate: no sections");
  if (weights.size() != sections.size()) throw std::invalid_argument("aggregate: one weight per section");
  std::size_t total = sections.size() - 1;
  for (const auto& s : sections) total += s.value().rows();
  if (total > static_cast<std::size_t>(max_len))
    throw std::length_error("aggregate: " + std::to_string(total) + " rows exceed the coarse limit of " +
                            std::to_string(max_len));
  std::vector<nn::Var> parts;
  for (std::size_t m = 0; m < sections.size(); ++m) {
    if (m) parts.push_back(boundary);
    parts.push_back(nn::mul_scalar(sections[m], weights[m]));
  }
  return parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
}

/// Mean negative log-likelihood of the true tokens at the masked positions.
inline nn::Var mlm_loss(nn::Var logits, const std::vector<int>& truth, const std::vector<int>& masked) {
  if (masked.empty()) throw std::invalid_argument("mlm_loss: empty mask set");
  if (truth.size() != logits.value().rows()) throw nn::ShapeError("mlm_loss: one target per row");
  std::vector<int> targets(truth.size(), -1);
  for (int i : masked) {
    if (i < 0 || static_cast<std::size_t>(i) >= truth.size()) throw std::out_of_range("mlm_loss: masked index");
    targets[static_cast<std::size_t>(i)] = truth[static_cast<std::size_t>(i)];
  }
  return nn::cross_entropy(logits, targets);
}

/// Variational bound E[log Q(label | G)] + H(label) for a uniform prior over
/// `labels` classes. log_q holds one row of log-probabilities per section.
inline nn::Var style_bound(nn::Var log_q, const std::vector<int>& labels, int n_labels) {
  return nn::add_scalar(nn::scale(nn::cross_entropy(log_q, labels), -1.0), std::log(static_cast<double>(n_labels)));
}

inline double style_bound_value(const std::vector<std::vector<double>>& log_q, const std::vector<int>& labels,
                                int n_labels, const std::vector<double>* weights = nullptr) {
  double acc = 0, wsum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    acc += w * log_q[i][static_cast<std::size_t>(labels[i])];
    wsum += w;
  }
  return acc / wsum + std::log(static_cast<double>(n_labels));
}

/// MLM minus lambda times the bound, so minimizing raises the bound.
inline nn::Var decoding_loss(nn::Var mlm, nn::Var bound, double lambda) {
  if (!(lambda >= 0)) throw std::invalid_argument("decoding_loss: lambda must be >= 0");
  return lambda == 0 ? mlm : nn::sub(mlm, nn::scale(bound, lambda));
}

// ---------------------------------------------------------------------------
// Generation types

struct Sampling {
  bool greedy = true;
  double temperature = 1.0;
};

struct SectionRequest {
  int label = 0;
  std::vector<int> primer;  // note tokens
  int length = 0;           // total tokens, primer included
};

struct GenerationRequest {
  std::vector<SectionRequest> sections;
  std::uint64_t seed = 1;
  Sampling sampling;
  int refine_rounds = 0;
  double refine_fraction = 0.15;
};

struct GeneratedSection {
  int label = 0;
  int bucket = 0;
  int primer_length = 0;
  long steps = 0;  // sequential positions processed
  std::vector<int> ids;
};

struct GenerationResult {
  std::vector<GeneratedSection> sections;
  long sequential_steps = 0;  // max over concurrently decoded sections
};

/// Sections laid out one after another, each starting on a bar line.
inline midi::TokenSequence to_sequence(const std::vector<std::vector<int>>& sections, const Vocab& v,
                                       int bar_length = 16, std::vector<int>* start_bars = nullptr) {
  midi::TokenSequence out;
  out.bar_length = bar_length;
  int onset = 0;
  for (const auto& ids : sections) {
    if (start_bars) start_bars->push_back(onset / bar_length);
    auto s = v.decode(ids, onset);
    out.tokens.insert(out.tokens.end(), s.tokens.begin(), s.tokens.end());
    const int span = std::max(v.span(ids), 1);
    onset += (span + bar_length - 1) / bar_length * bar_length;
  }
  out.normalize();
  return out;
}

/// Samples the next note token from logits restricted to note ids.
inline int sample_note(const std::vector<double>& logits, const Vocab& v, const Sampling& s, std::mt19937_64& rng) {
  const int lo = v.note_base(), hi = v.size();
  if (s.greedy) {
    int best = lo;
    for (int i = lo; i < hi; ++i)
      if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
    return best;
  }
  if (!(s.temperature > 0)) throw std::invalid_argument("sampling temperature must be > 0");
  double mx = -1e300;
  for (int i = lo; i < hi; ++i) mx = std::max(mx, logits[static_cast<std::size_t>(i)]);
  std::vector<double> w;
  for (int i = lo; i < hi; ++i) w.push_back(std::exp((logits[static_cast<std::size_t>(i)] - mx) / s.temperature));
  std::discrete_distribution<int> d(w.begin(), w.end());
  return lo + d(rng);
}

/// Autoregressive continuation of `primer` to `target` tokens. Row 0 of the
/// decoder input is `control` (a style vector or the start-token embedding);
/// the primer is kept verbatim. One sequential step per output position.
inline GeneratedSection decode_section(const nn::ParamSet& ps, const Decoder& d, const Vocab& v,
                                       const std::vector<double>& control, const std::vector<int>& primer, int target,
                                       const Sampling& s, std::uint64_t seed, int bar_length = 16) {
  if (primer.empty()) throw std::invalid_argument("generate: primer must hold at least one note");
  if (static_cast<int>(primer.size()) > target) throw std::invalid_argument("generate: primer longer than target");
  if (target > d.config().max_len)
    throw std::length_error("generate: " + std::to_string(target) + " tokens exceed decoder " + d.prefix());
  GeneratedSection g;
  g.ids = primer;
  g.primer_length = static_cast<int>(primer.size());
  if (g.primer_length == target) return g;
  std::mt19937_64 rng(seed);
  IncrementalDecoder inc(ps, d);
  inc.step(control, 0);
  int onset = 0;
  for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(target); ++i) {
    const auto h = inc.step_token(g.ids[i], onset / bar_length);
    onset += v.advance_of(g.ids[i]);
    if (g.ids.size() == i + 1) g.ids.push_back(sample_note(inc.logits(h), v, s, rng));
  }
  g.steps = inc.steps();
  return g;
}

inline std::vector<double> embedding_row(const nn::ParamSet& ps, const Decoder& d, int id) {
  const auto r = ps.at(d.prefix() + ".emb").value.row(static_cast<std::size_t>(id));
  return {r.begin(), r.end()};
}

inline std::uint64_t section_seed(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::array<std::uint32_t, 2> w{};
  seq.generate(w.begin(), w.end());
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

// ---------------------------------------------------------------------------

struct HierConfig {
  Vocab vocab;
  std::size_t dim = 32;
  std::size_t ffn = 64;
  int fine_layers = 2;
  int coarse_layers = 2;
  std::array<int, 3> fine_heads = {4, 4, 0};
  std::array<int, 3> coarse_heads = {4, 2, 2};
  std::vector<int> buckets = fine_buckets();
  int coarse_max_len = 4096;
  int note_window = 16;
  int max_offset = 128;
  int bar_length = 16;
  int primer = 16;
  double lambda = 0.1;
  double mask_prob = 0.15;
  double dropout = 0.0;
  std::size_t q_hidden = 32;
  int max_sections = 64;
  int fine_epochs = 10;
  int coarse_epochs = 10;
  int batch = 8;
  int patience = 10;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
};

inline nlohmann::json to_json(const HierConfig& c) {
  return {{"dim", c.dim},
          {"ffn", c.ffn},
          {"fine_layers", c.fine_layers},
          {"coarse_layers", c.coarse_layers},
          {"fine_heads", c.fine_heads},
          {"coarse_heads", c.coarse_heads},
          {"buckets", c.buckets},
          {"coarse_max_len", c.coarse_max_len},
          {"note_window", c.note_window},
          {"max_offset", c.max_offset},
          {"bar_length", c.bar_length},
          {"primer", c.primer},
          {"lambda", c.lambda},
          {"mask_prob", c.mask_prob},
          {"dropout", c.dropout},
          {"q_hidden", c.q_hidden},
          {"max_sections", c.max_sections},
          {"labels", c.vocab.labels},
          {"fine_epochs", c.fine_epochs},
          {"coarse_epochs", c.coarse_epochs},
          {"batch", c.batch},
          {"patience", c.patience},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed}};
}

inline HierConfig hier_config_from_json(const nlohmann::json& j, HierConfig c = {}) {
  c.dim = j.value("dim", c.dim);
  c.ffn = j.value("ffn", c.ffn);
  c.fine_layers = j.value("fine_layers", c.fine_layers);
  c.coarse_layers = j.value("coarse_layers", c.coarse_layers);
  c.fine_heads = j.value("fine_heads", c.fine_heads);
  c.coarse_heads = j.value("coarse_heads", c.coarse_heads);
  c.buckets = j.value("buckets", c.buckets);
  c.coarse_max_len = j.value("coarse_max_len", c.coarse_max_len);
  c.note_window = j.value("note_window", c.note_window);
  c.max_offset = j.value("max_offset", c.max_offset);
  c.bar_length = j.value("bar_length", c.bar_length);
  c.primer = j.value("primer", c.primer);
  c.lambda = j.value("lambda", c.lambda);
  c.mask_prob = j.value("mask_prob", c.mask_prob);
  c.dropout = j.value("dropout", c.dropout);
  c.q_hidden = j.value("q_hidden", c.q_hidden);
  c.max_sections = j.value("max_sections", c.max_sections);
  c.vocab.labels = j.value("labels", c.vocab.labels);
  c.fine_epochs = j.value("fine_epochs", c.fine_epochs);
  c.coarse_epochs = j.value("coarse_epochs", c.coarse_epochs);
  c.batch = j.value("batch", c.batch);
  c.patience = j.value("patience", c.patience);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct EpochLoss {
  std::vector<double> train, val;
};

struct DecodingTerms {
  nn::Var mlm, bound, loss;
  int masked = 0;
};

/// Fine decoders per length bucket, per-label style vectors and MSN
/// parameters, aggregation weights, the coarse decoder and the Q head.
class HierModel {
 public:
  explicit HierModel(HierConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.lambda < 0) throw std::invalid_argument("hier: lambda must be >= 0");
    std::mt19937_64 rng(cfg_.seed);
    const int V = cfg_.vocab.size();
    const auto labels = static_cast<std::size_t>(cfg_.vocab.labels);
    for (int b : cfg_.buckets) {
      DecoderConfig dc;
      dc.dim = cfg_.dim;
      dc.heads = cfg_.fine_heads;
      dc.layers = cfg_.fine_layers;
      dc.ffn = cfg_.ffn;
      dc.max_len = b + 1;
      dc.max_offset = cfg_.max_offset;
      dc.note_window = cfg_.note_window;
      dc.causal = true;
      dc.dropout = cfg_.dropout;
      dc.vocab = V;
      fine_.emplace(b, Decoder("fine" + std::to_string(b), dc));
      fine_.at(b).init(ps_, rng);
    }
    DecoderConfig cc;
    cc.dim = cfg_.dim;
    cc.heads = cfg_.coarse_heads;
    cc.layers = cfg_.coarse_layers;
    cc.ffn = cfg_.ffn;
    cc.max_len = cfg_.coarse_max_len;
    cc.max_offset = cfg_.max_offset;
    cc.note_window = cfg_.note_window;
    cc.causal = false;
    cc.dropout = cfg_.dropout;
    cc.vocab = V;
    coarse_ = Decoder("coarse", cc);
    coarse_.init(ps_, rng);
    ps_.add("style.z", nn::normal_init(labels, cfg_.dim, 0.5, rng));
    ps_.add("msn.gamma", nn::Tensor::matrix(labels, cfg_.dim, 1.0));
    ps_.add("msn.beta", nn::Tensor::matrix(labels, cfg_.dim, 0.0));
    ps_.add("agg.v", nn::Tensor::matrix(static_cast<std::size_t>(cfg_.max_sections), 1, 1.0));
    nn::add_linear(ps_, "q.fc1", cfg_.dim, cfg_.q_hidden, rng);
    nn::add_linear(ps_, "q.fc2", cfg_.q_hidden, labels, rng);
  }

  const HierConfig& config() const { return cfg_; }
  /// Takes the optimisation settings of `c` (rates, epochs, batch, patience,
  /// loss weights); the architecture is left alone.
  void set_schedule(const HierConfig& c) {
    if (c.lambda < 0) throw std::invalid_argument("hier: lambda must be >= 0");
    cfg_.lr = c.lr;
    cfg_.weight_decay = c.weight_decay;
    cfg_.fine_epochs = c.fine_epochs;
    cfg_.coarse_epochs = c.coarse_epochs;
    cfg_.batch = c.batch;
    cfg_.patience = c.patience;
    cfg_.lambda = c.lambda;
    cfg_.mask_prob = c.mask_prob;
    cfg_.seed = c.seed;
  }
  const Vocab& vocab() const { return cfg_.vocab; }
  nn::ParamSet& params() { return ps_; }
  const nn::ParamSet& params() const { return ps_; }
  const Decoder& fine(int bucket) const { return fine_.at(bucket); }
  const Decoder& coarse() const { return coarse_; }
  bool fine_trained() const { return fine_trained_; }
  bool coarse_trained() const { return coarse_trained_; }

  std::vector<double> style_vector(int label) const {
    const auto r = ps_.at("style.z").value.row(static_cast<std::size_t>(label));
    return {r.begin(), r.end()};
  }

  // -- fine decoders --------------------------------------------------------

  /// Next-token loss of one section: input [z, x_0 .. x_{n-2}] predicts x.
  nn::Var fine_loss(nn::Tape& t, const HierSection& s) {
    const auto& d = fine_.at(select_fine_decoder(static_cast<int>(s.ids.size()), cfg_.buckets));
    std::vector<int> in(s.ids.begin(), s.ids.end() - 1);
    std::vector<int> bars = {s.bars.empty() ? 0 : s.bars[0]};
    bars.insert(bars.end(), s.bars.begin(), s.bars.end() - 1);
    std::vector<nn::Var> rows = {nn::gather_rows(ps_.var(t, "style.z"), {s.label})};
    if (!in.empty()) rows.push_back(d.embed(ps_, t, in));
    const nn::Var x = rows.size() == 1 ? rows[0] : nn::concat_rows(rows);
    return nn::cross_entropy(d.logits(ps_, t, d.hidden(ps_, t, x, d.pattern(bars))), s.ids);
  }

  /// Mean per-token negative log-likelihood under the fine decoders.
  double fine_nll(const std::vector<HierSection>& secs) {
    double total = 0;
    std::size_t n = 0;
    for (const auto& s : secs) {
      nn::Tape t;
      total += fine_loss(t, s).value()[0] * static_cast<double>(s.ids.size());
      n += s.ids.size();
    }
    return n ? total / static_cast<double>(n) : 0.0;
  }

  double fine_perplexity(const std::vector<HierSection>& secs) { return std::exp(fine_nll(secs)); }

  /// Next-token training per bucket (and the style vectors). Empty buckets
  /// stay at their initial weights.
  std::map<int, EpochLoss> pretrain_fine(const std::vector<HierSection>& train, const std::vector<HierSection>& val,
                                         int epochs = -1) {
    if (epochs < 0) epochs = cfg_.fine_epochs;
    std::map<int, std::vector<HierSection>> tr, va;
    for (const auto& s : train) tr[select_fine_decoder(static_cast<int>(s.ids.size()), cfg_.buckets)].push_back(s);
    for (const auto& s : val) va[select_fine_decoder(static_cast<int>(s.ids.size()), cfg_.buckets)].push_back(s);
    std::map<int, EpochLoss> hist;
    std::mt19937_64 rng(cfg_.seed + 11);
    for (int b : cfg_.buckets) {
      auto& sections = tr[b];
      if (sections.empty()) {
        log_warn("fine decoder " + std::to_string(b) + ": no training sections, left at init");
        continue;
      }
      std::vector<std::string> frozen = {"coarse", "msn", "agg", "q."};
      for (int o : cfg_.buckets)
        if (o != b) frozen.push_back("fine" + std::to_string(o) + ".");
      nn::OptimizerState opt;
      opt.learning_rate = cfg_.lr;
      opt.weight_decay = cfg_.weight_decay;
      auto& h = hist[b];
      double best = 1e300;
      int stale = 0;
      for (int e = 0; e < epochs; ++e) {
        std::shuffle(sections.begin(), sections.end(), rng);
        double sum = 0;
        for (std::size_t i = 0; i < sections.size(); i += static_cast<std::size_t>(cfg_.batch)) {
          const std::size_t end = std::min(sections.size(), i + static_cast<std::size_t>(cfg_.batch));
          nn::Tape t;
          t.training = true;
          std::vector<nn::Var> losses;
          for (std::size_t k = i; k < end; ++k) losses.push_back(fine_loss(t, sections[k]));
          nn::Var loss = losses[0];
          for (std::size_t k = 1; k < losses.size(); ++k) loss = nn::add(loss, losses[k]);
          loss = nn::scale(loss, 1.0 / static_cast<double>(losses.size()));
          ps_.zero_grad();
          t.backward(loss);
          nn::optimizer_step(opt, ps_, frozen);
          sum += loss.value()[0] * static_cast<double>(end - i);
        }
        h.train.push_back(sum / static_cast<double>(sections.size()));
        if (!va[b].empty()) {
          h.val.push_back(fine_nll(va[b]));
          if (h.val.back() < best - 1e-6) {
            best = h.val.back();
            stale = 0;
          } else if (++stale >= cfg_.patience) {
            log_info("fine decoder " + std::to_string(b) + ": early stop at epoch " + std::to_string(e + 1));
            break;
          }
        }
      }
    }
    fine_trained_ = true;
    return hist;
  }

  /// One section from its primer and label.
  GeneratedSection generate_section(const std::vector<int>& primer, int label, int target, const Sampling& s,
                                    std::uint64_t seed) const {
    if (!fine_trained_) throw UntrainedError("fine decoders");
    const int b = select_fine_decoder(target, cfg_.buckets);
    const auto z = style_vector(label);
    auto g = decode_section(ps_, fine_.at(b), cfg_.vocab, z, primer, target, s, seed, cfg_.bar_length);
    g.label = label;
    g.bucket = b;
    return g;
  }

  /// All sections decoded concurrently; each depends only on its own primer,
  /// label and seed. Optional coarse refinement afterwards.
  GenerationResult generate(const GenerationRequest& req) const {
    if (req.sections.empty()) throw std::invalid_argument("generate: no sections requested");
    std::vector<std::future<GeneratedSection>> jobs;
    for (std::size_t m = 0; m < req.sections.size(); ++m) {
      const auto& r = req.sections[m];
      if (r.label < 0 || r.label >= cfg_.vocab.labels) throw std::out_of_range("generate: label " + std::to_string(r.label));
      jobs.push_back(std::async(std::launch::async, [this, &r, &req, m] {
        return generate_section(r.primer, r.label, r.length, req.sampling, section_seed(req.seed, m));
      }));
    }
    GenerationResult out;
    for (auto& j : jobs) {
      out.sections.push_back(j.get());
      out.sequential_steps = std::max(out.sequential_steps, out.sections.back().steps);
    }
    if (req.refine_rounds > 0 && req.refine_fraction > 0) {
      std::vector<HierSection> secs;
      for (const auto& g : out.sections) secs.push_back(as_section(g.label, g.ids));
      secs = refine(secs, req.refine_rounds, req.refine_fraction, req.seed);
      for (std::size_t m = 0; m < secs.size(); ++m) {
        auto& ids = out.sections[m].ids;
        // The primer stays verbatim.
        std::copy(secs[m].ids.begin() + out.sections[m].primer_length, secs[m].ids.end(),
                  ids.begin() + out.sections[m].primer_length);
      }
    }
    return out;
  }

  HierSection as_section(int label, const std::vector<int>& ids) const {
    return {label, ids, cfg_.vocab.bars(ids, cfg_.bar_length)};
  }

  // -- coarse path ----------------------------------------------------------

  /// Fine-decoder hidden states of a section (frozen, outside the tape).
  nn::Tensor fine_hidden(const std::vector<int>& ids, const std::vector<int>& bars, int label) {
    const auto& d = fine_.at(select_fine_decoder(static_cast<int>(ids.size()), cfg_.buckets));
    nn::Tape t;
    std::vector<int> pb = {bars.front()};
    pb.insert(pb.end(), bars.begin(), bars.end());
    const nn::Var x = nn::concat_rows({nn::gather_rows(ps_.var(t, "style.z"), {label}), d.embed(ps_, t, ids)});
    const nn::Tensor h = d.hidden(ps_, t, x, d.pattern(pb)).value();
    nn::Tensor out = nn::Tensor::matrix(ids.size(), cfg_.dim);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < cfg_.dim; ++c) out(i, c) = h(i + 1, c);
    return out;
  }

  struct CoarsePass {
    nn::Var hidden, logits;
    std::vector<int> tokens;  // combined input ids (SEP between sections)
    std::vector<int> offset;  // first row of each section
  };

  /// Aggregated sequence through the coarse decoder. `inputs` are the
  /// (possibly masked) token ids per section. With `label_affine` the MSN map
  /// uses each section's label; without it only the standardization applies.
  CoarsePass coarse_pass(nn::Tape& t, const std::vector<HierSection>& secs, const std::vector<std::vector<int>>& inputs,
                         bool label_affine) {
    if (static_cast<int>(secs.size()) > cfg_.max_sections)
      throw std::length_error("coarse: more than " + std::to_string(cfg_.max_sections) + " sections");
    const std::size_t D = cfg_.dim;
    CoarsePass cp;
    std::vector<nn::Var> blocks, weights;
    std::vector<int> bars;
    std::vector<attention::SectionSpan> spans;
    const nn::Var gamma = ps_.var(t, "msn.gamma"), beta = ps_.var(t, "msn.beta"), v = ps_.var(t, "agg.v");
    int bar_base = 0;
    for (std::size_t m = 0; m < secs.size(); ++m) {
      const auto& s = secs[m];
      if (s.ids.size() < 2) throw std::invalid_argument("coarse: sections need at least two notes");
      const nn::Var h = t.constant(fine_hidden(inputs[m], s.bars, s.label), "fine_hidden");
      nn::Var n = label_affine ? msn(h, nn::gather_rows(gamma, {s.label}), nn::gather_rows(beta, {s.label}))
                               : nn::standardize_cols(h);
      blocks.push_back(n);
      weights.push_back(nn::gather_rows(v, {static_cast<int>(m)}));
      if (m) {
        cp.tokens.push_back(Vocab::kSep);
        bars.push_back(bars.back());
        spans.back().length += 1;
      }
      cp.offset.push_back(static_cast<int>(cp.tokens.size()));
      spans.push_back({static_cast<int>(cp.tokens.size()), static_cast<int>(s.ids.size())});
      cp.tokens.insert(cp.tokens.end(), inputs[m].begin(), inputs[m].end());
      for (int b : s.bars) bars.push_back(bar_base + b);
      bar_base = bars.back() + 1;
    }
    const nn::Var agg = aggregate(blocks, weights, t.constant(nn::Tensor::matrix(1, D, 0.0)), cfg_.coarse_max_len);
    const nn::Var x = nn::add(agg, coarse_.embed(ps_, t, cp.tokens));
    cp.hidden = coarse_.hidden(ps_, t, x, coarse_.pattern(bars, spans));
    cp.logits = coarse_.logits(ps_, t, cp.hidden);
    return cp;
  }

  /// Q head: label log-probabilities from mean-pooled section rows.
  nn::Var q_log_probs(nn::Tape& t, const CoarsePass& cp, const std::vector<HierSection>& secs) {
    std::vector<nn::Var> pooled;
    for (std::size_t m = 0; m < secs.size(); ++m)
      pooled.push_back(nn::mean_rows(nn::slice_rows(cp.hidden, static_cast<std::size_t>(cp.offset[m]), secs[m].ids.size())));
    const nn::Var p = pooled.size() == 1 ? pooled[0] : nn::concat_rows(pooled);
    return nn::log_softmax_rows(nn::linear(ps_, t, "q.fc2", nn::relu(nn::linear(ps_, t, "q.fc1", p))));
  }

  std::vector<int> mask_positions(const std::vector<HierSection>& secs, double frac, std::mt19937_64& rng) const {
    std::vector<int> all;
    int off = 0;
    for (std::size_t m = 0; m < secs.size(); ++m) {
      for (std::size_t i = 0; i < secs[m].ids.size(); ++i) all.push_back(off + static_cast<int>(i));
      off += static_cast<int>(secs[m].ids.size()) + 1;
    }
    std::vector<int> out;
    std::uniform_real_distribution<double> u(0, 1);
    for (int i : all)
      if (u(rng) < frac) out.push_back(i);
    if (out.empty()) out.push_back(all[rng() % all.size()]);
    return out;
  }

  /// MLM on a masked copy plus the style bound on the clean sections.
  DecodingTerms decoding_terms(nn::Tape& t, const HierPiece& p, std::mt19937_64& rng) {
    const auto& secs = p.sections;
    const auto masked = mask_positions(secs, cfg_.mask_prob, rng);
    std::vector<std::vector<int>> inputs;
    std::vector<int> truth;
    for (std::size_t m = 0; m < secs.size(); ++m) {
      if (m) truth.push_back(Vocab::kSep);
      inputs.push_back(secs[m].ids);
      truth.insert(truth.end(), secs[m].ids.begin(), secs[m].ids.end());
    }
    auto corrupted = inputs;
    for (int pos : masked) {
      auto [m, i] = locate(secs, pos);
      corrupted[m][i] = Vocab::kMask;
    }
    DecodingTerms d;
    d.masked = static_cast<int>(masked.size());
    const auto cp = coarse_pass(t, secs, corrupted, true);
    d.mlm = mlm_loss(cp.logits, truth, masked);
    if (cfg_.lambda > 0) {
      const auto clean = coarse_pass(t, secs, inputs, false);
      std::vector<int> labels;
      for (const auto& s : secs) labels.push_back(s.label);
      d.bound = style_bound(q_log_probs(t, clean, secs), labels, cfg_.vocab.labels);
    } else {
      d.bound = t.constant(nn::Tensor::matrix(1, 1, 0.0));
    }
    d.loss = decoding_loss(d.mlm, d.bound, cfg_.lambda);
    return d;
  }

  /// Joint training of MSN, aggregation weights, coarse decoder and Q with
  /// the fine decoders and style vectors frozen.
  EpochLoss train_coarse(const std::vector<HierPiece>& train, const std::vector<HierPiece>& val, int epochs = -1) {
    if (!fine_trained_) throw UntrainedError("fine decoders");
    if (epochs < 0) epochs = cfg_.coarse_epochs;
    const std::vector<std::string> frozen = {"fine", "style.z"};
    nn::OptimizerState opt;
    opt.learning_rate = cfg_.lr;
    opt.weight_decay = cfg_.weight_decay;
    std::mt19937_64 rng(cfg_.seed + 23);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    EpochLoss h;
    double best = 1e300;
    int stale = 0;
    for (int e = 0; e < epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      double sum = 0;
      for (std::size_t i : order) {
        nn::Tape t;
        t.training = true;
        const auto d = decoding_terms(t, train[i], rng);
        ps_.zero_grad();
        t.backward(d.loss);
        nn::optimizer_step(opt, ps_, frozen);
        sum += d.loss.value()[0];
      }
      h.train.push_back(train.empty() ? 0.0 : sum / static_cast<double>(train.size()));
      if (!val.empty()) {
        h.val.push_back(evaluate_decoding_loss(val));
        if (h.val.back() < best - 1e-6) {
          best = h.val.back();
          stale = 0;
        } else if (++stale >= cfg_.patience) {
          log_info("coarse: early stop at epoch " + std::to_string(e + 1));
          break;
        }
      }
    }
    coarse_trained_ = true;
    return h;
  }

  /// Mean decoding loss with a fixed masking seed.
  double evaluate_decoding_loss(const std::vector<HierPiece>& pieces) {
    std::mt19937_64 rng(cfg_.seed + 97);
    double sum = 0;
    for (const auto& p : pieces) {
      nn::Tape t;
      sum += decoding_terms(t, p, rng).loss.value()[0];
    }
    return pieces.empty() ? 0.0 : sum / static_cast<double>(pieces.size());
  }

  /// Label log-probabilities per section from the tokens alone.
  std::vector<std::vector<double>> q_posterior(const std::vector<HierSection>& secs, bool allow_untrained = false) {
    if (!coarse_trained_ && !allow_untrained) throw UntrainedError("style posterior");
    std::vector<std::vector<int>> inputs;
    for (const auto& s : secs) inputs.push_back(s.ids);
    nn::Tape t;
    const auto cp = coarse_pass(t, secs, inputs, false);
    const auto lq = q_log_probs(t, cp, secs).value();
    std::vector<std::vector<double>> out;
    for (std::size_t m = 0; m < secs.size(); ++m) {
      const auto r = lq.row(m);
      out.emplace_back(r.begin(), r.end());
    }
    return out;
  }

  std::vector<int> classify(const std::vector<HierSection>& secs) {
    std::vector<int> out;
    for (const auto& r : q_posterior(secs)) out.push_back(static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()));
    return out;
  }

  /// Bound averaged over sections of the given pieces.
  double style_bound_of(const std::vector<HierPiece>& pieces, bool allow_untrained = false) {
    std::vector<std::vector<double>> lq;
    std::vector<int> labels;
    for (const auto& p : pieces) {
      const auto r = q_posterior(p.sections, allow_untrained);
      lq.insert(lq.end(), r.begin(), r.end());
      for (const auto& s : p.sections) labels.push_back(s.label);
    }
    return style_bound_value(lq, labels, cfg_.vocab.labels);
  }

  /// K rounds of masked re-prediction over the aggregated sections. A zero
  /// fraction or zero rounds returns the input.
  std::vector<HierSection> refine(std::vector<HierSection> secs, int rounds, double frac, std::uint64_t seed) const {
    if (rounds <= 0 || frac <= 0) return secs;
    if (!coarse_trained_) throw UntrainedError("coarse decoder");
    auto& self = const_cast<HierModel&>(*this);  // tape forward only; weights untouched
    std::mt19937_64 rng(seed);
    for (int r = 0; r < rounds; ++r) {
      const auto masked = mask_positions(secs, frac, rng);
      std::vector<std::vector<int>> inputs;
      for (const auto& s : secs) inputs.push_back(s.ids);
      for (int pos : masked) {
        auto [m, i] = locate(secs, pos);
        inputs[m][i] = Vocab::kMask;
      }
      nn::Tape t;
      const auto lg = self.coarse_pass(t, secs, inputs, true).logits.value();
      for (int pos : masked) {
        auto [m, i] = locate(secs, pos);
        const auto row = lg.row(static_cast<std::size_t>(pos));
        int best = cfg_.vocab.note_base();
        for (int k = best; k < cfg_.vocab.size(); ++k)
          if (row[static_cast<std::size_t>(k)] > row[static_cast<std::size_t>(best)]) best = k;
        secs[m].ids[i] = best;
      }
      for (auto& s : secs) s.bars = cfg_.vocab.bars(s.ids, cfg_.bar_length);
    }
    return secs;
  }

  // -- persistence ----------------------------------------------------------

  void save(const std::string& path) const {
    auto meta = to_json(cfg_);
    meta["fine_trained"] = fine_trained_;
    meta["coarse_trained"] = coarse_trained_;
    nn::save_checkpoint(path, ps_, meta);
  }

  static HierModel load(const std::string& path) {
    nlohmann::json meta;
    nn::ParamSet ps = nn::load_checkpoint(path, &meta);
    HierModel m(hier_config_from_json(meta));
    for (auto& [name, p] : m.ps_) {
      const auto& src = ps.at(name).value;
      if (!src.same_shape(p.value)) throw nn::ShapeError("checkpoint: shape mismatch for " + name);
      p.value = src;
    }
    m.fine_trained_ = meta.value("fine_trained", false);
    m.coarse_trained_ = meta.value("coarse_trained", false);
    return m;
  }

 private:
  static std::pair<std::size_t, std::size_t> locate(const std::vector<HierSection>& secs, int pos) {
    std::size_t m = 0;
    int off = 0;
    while (pos >= off + static_cast<int>(secs[m].ids.size())) {
      off += static_cast<int>(secs[m].ids.size()) + 1;
      ++m;
    }
    return {m, static_cast<std::size_t>(pos - off)};
  }

  HierConfig cfg_;
  nn::ParamSet ps_;
  std::map<int, Decoder> fine_;
  Decoder coarse_;
  bool fine_trained_ = false;
  bool coarse_trained_ = false;
};

// ---------------------------------------------------------------------------
// Probes

struct StepProbe {
  long hierarchical = 0;  // max over concurrently decoded sections
  long monolithic = 0;
  std::vector<long> per_section;
};

/// Decodes sections of the given lengths with concurrent fine decoders and
/// the whole length with a single decoder, counting sequential positions.
/// Weights are random: only the schedule is measured.
inline StepProbe decoding_step_probe(const std::vector<int>& lengths, std::uint64_t seed = 1) {
  if (lengths.empty()) throw std::invalid_argument("step probe: no sections");
  Vocab v;
  DecoderConfig dc;
  dc.dim = 8;
  dc.heads = {2, 2, 0};
  dc.layers = 1;
  dc.ffn = 8;
  dc.max_offset = 16;
  dc.vocab = v.size();
  nn::ParamSet ps;
  std::mt19937_64 rng(seed);
  std::map<int, Decoder> fine;
  int total = 0;
  for (int n : lengths) {
    const int b = select_fine_decoder(n);
    total += n;
    if (fine.count(b)) continue;
    auto c = dc;
    c.max_len = b + 1;
    fine.emplace(b, Decoder("probe" + std::to_string(b), c));
    fine.at(b).init(ps, rng);
  }
  auto mc = dc;
  mc.max_len = total;
  const Decoder mono("mono", mc);
  mono.init(ps, rng);
  const std::vector<double> z(dc.dim, 0.1);
  const std::vector<int> primer = {v.note_token(60, 2)};
  std::vector<std::future<long>> jobs;
  for (std::size_t m = 0; m < lengths.size(); ++m)
    jobs.push_back(std::async(std::launch::async, [&, m] {
      const auto& d = fine.at(select_fine_decoder(lengths[m]));
      return decode_section(ps, d, v, z, primer, lengths[m], {}, section_seed(seed, m)).steps;
    }));
  StepProbe out;
  for (auto& j : jobs) {
    out.per_section.push_back(j.get());
    out.hierarchical = std::max(out.hierarchical, out.per_section.back());
  }
  out.monolithic = decode_section(ps, mono, v, embedding_row(ps, mono, Vocab::kStart), primer, total, {}, seed).steps;
  return out;
}

}  // namespace hiermusic::model
