#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hiermusic/model/hier.hpp"
#include "hiermusic/synth.hpp"

namespace hiermusic::model {

struct ErrorProbeConfig {
  int labels = 4;
  int symbols = 12;
  double floor = 0.005;
  int section_length = 256;
  int sections = 4;  // per piece; lengths probed are multiples of section_length
  int train_pieces = 24;
  int test_pieces = 6;
  int primer = 16;
  std::size_t dim = 16;
  int layers = 1;
  int epochs = 20;
  double lr = 1e-2;
  Sampling sampling{true, 1.0};
  std::uint64_t seed = 1;
};

struct ErrorProbeResult {
  std::vector<int> lengths;
  std::vector<double> hier_ppl, mono_ppl;
  std::size_t hier_params = 0, mono_params = 0;  // excluding unused absolute tables

  double hier_ratio() const { return hier_ppl.back() / hier_ppl.front(); }
  double mono_ratio() const { return mono_ppl.back() / mono_ppl.front(); }
};

namespace detail {

inline std::size_t used_params(const nn::ParamSet& ps, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, p] : ps)
    if (name.rfind(prefix, 0) == 0 && name.find(".abs_") == std::string::npos) n += p.value.size();
  return n;
}

/// Perplexity of the generated (non-primer) positions before `upto`, scored
/// under the grammar with the label of the section each position belongs to.
inline double grammar_ppl(const synth::MarkovGrammar& g, const std::vector<int>& syms, const std::vector<int>& labels,
                          const std::vector<char>& generated, int section_length, int upto) {
  double nll = 0;
  int n = 0;
  for (int i = 1; i < upto; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (!generated[ui]) continue;
    const bool known = syms[ui - 1] >= 0 && syms[ui - 1] < g.symbols && syms[ui] >= 0 && syms[ui] < g.symbols;
    // Symbols outside the alphabet have probability zero; charge the floor.
    nll -= std::log(known ? g.prob(labels[static_cast<std::size_t>(i / section_length)], syms[ui - 1], syms[ui]) : g.floor);
    ++n;
  }
  return std::exp(nll / std::max(n, 1));
}

}  // namespace detail

/// Output-length probe on a per-label Markov grammar: the hierarchical
/// pipeline (label-conditioned fine decoder per section, each from its own
/// primer) against one causal decoder of the same architecture that sees
/// only the first primer.
inline ErrorProbeResult error_accumulation_probe(const ErrorProbeConfig& c) {
  const auto g = synth::make_markov_grammar(c.labels, c.symbols, c.seed, c.floor);
  Vocab v;
  v.labels = c.labels;
  auto tok = [&](int sym) { return v.note_token(60 + sym, 2); };
  auto sym_of = [&](int id) { return v.pitch_of(id) - 60; };
  std::mt19937_64 rng(c.seed + 1);
  struct Piece {
    std::vector<int> labels, syms;
  };
  auto make = [&](int count) {
    std::vector<Piece> out;
    for (int k = 0; k < count; ++k) {
      Piece p;
      for (int s = 0; s < c.sections; ++s) {
        int l;
        do {
          l = static_cast<int>(rng() % static_cast<unsigned>(c.labels));
        } while (!p.labels.empty() && l == p.labels.back());
        p.labels.push_back(l);
        const auto xs = g.sample(l, c.section_length, rng);
        p.syms.insert(p.syms.end(), xs.begin(), xs.end());
      }
      out.push_back(std::move(p));
    }
    return out;
  };
  const auto train = make(c.train_pieces), test = make(c.test_pieces);
  const int L = c.sections * c.section_length;

  HierConfig hc;
  hc.vocab = v;
  hc.dim = c.dim;
  hc.ffn = 2 * c.dim;
  hc.fine_layers = c.layers;
  hc.coarse_layers = 1;
  hc.fine_heads = {2, 2, 0};
  hc.coarse_heads = {2, 1, 1};
  hc.buckets = {c.section_length};
  hc.coarse_max_len = L + c.sections;
  hc.max_offset = 32;
  hc.lr = c.lr;
  hc.seed = c.seed;
  HierModel hier(hc);
  std::vector<HierSection> sections;
  for (const auto& p : train)
    for (int s = 0; s < c.sections; ++s) {
      std::vector<int> ids;
      for (int i = 0; i < c.section_length; ++i) ids.push_back(tok(p.syms[static_cast<std::size_t>(s * c.section_length + i)]));
      sections.push_back(hier.as_section(p.labels[static_cast<std::size_t>(s)], ids));
    }
  hier.pretrain_fine(sections, {}, c.epochs);

  DecoderConfig mc = hier.fine(c.section_length).config();
  mc.max_len = L;
  const Decoder mono("mono", mc);
  nn::ParamSet mps;
  std::mt19937_64 init(c.seed + 2);
  mono.init(mps, init);
  {
    nn::OptimizerState opt;
    opt.learning_rate = c.lr;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int e = 0; e < c.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t k : order) {
        std::vector<int> ids;
        for (int s : train[k].syms) ids.push_back(tok(s));
        std::vector<int> in = {Vocab::kStart};
        in.insert(in.end(), ids.begin(), ids.end() - 1);
        nn::Tape t;
        const auto bars = v.bars(in);
        const auto loss = nn::cross_entropy(mono.logits(mps, t, mono.hidden(mps, t, mono.embed(mps, t, in), mono.pattern(bars))), ids);
        mps.zero_grad();
        t.backward(loss);
        nn::optimizer_step(opt, mps);
      }
    }
  }

  ErrorProbeResult r;
  for (int s = 1; s <= c.sections; ++s) r.lengths.push_back(s * c.section_length);
  r.hier_ppl.assign(r.lengths.size(), 0.0);
  r.mono_ppl.assign(r.lengths.size(), 0.0);
  r.hier_params = detail::used_params(hier.params(), "fine") + static_cast<std::size_t>(c.labels) * c.dim;
  r.mono_params = detail::used_params(mps, "mono.");
  for (std::size_t k = 0; k < test.size(); ++k) {
    const auto& p = test[k];
    GenerationRequest req;
    req.sampling = c.sampling;
    req.seed = c.seed + 100 + k;
    for (int s = 0; s < c.sections; ++s) {
      std::vector<int> primer;
      for (int i = 0; i < c.primer; ++i) primer.push_back(tok(p.syms[static_cast<std::size_t>(s * c.section_length + i)]));
      req.sections.push_back({p.labels[static_cast<std::size_t>(s)], primer, c.section_length});
    }
    const auto out = hier.generate(req);
    std::vector<int> hs;
    std::vector<char> hgen;
    for (const auto& sec : out.sections)
      for (std::size_t i = 0; i < sec.ids.size(); ++i) {
        hs.push_back(sym_of(sec.ids[i]));
        hgen.push_back(static_cast<int>(i) >= sec.primer_length);
      }
    const auto mg = decode_section(mps, mono, v, embedding_row(mps, mono, Vocab::kStart), req.sections[0].primer, L,
                                   c.sampling, req.seed);
    std::vector<int> ms;
    std::vector<char> mgen;
    for (std::size_t i = 0; i < mg.ids.size(); ++i) {
      ms.push_back(sym_of(mg.ids[i]));
      mgen.push_back(static_cast<int>(i) >= mg.primer_length);
    }
    for (std::size_t j = 0; j < r.lengths.size(); ++j) {
      r.hier_ppl[j] += detail::grammar_ppl(g, hs, p.labels, hgen, c.section_length, r.lengths[j]) / static_cast<double>(test.size());
      r.mono_ppl[j] += detail::grammar_ppl(g, ms, p.labels, mgen, c.section_length, r.lengths[j]) / static_cast<double>(test.size());
    }
  }
  return r;
}

}  // namespace hiermusic::model
