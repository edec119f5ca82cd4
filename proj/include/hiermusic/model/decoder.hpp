#pragma once

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hiermusic/attention/encoder.hpp"

namespace hiermusic::model {

struct DecoderConfig {
  std::size_t dim = 32;
  std::array<int, 3> heads = {4, 4, 0};
  int layers = 2;
  std::size_t ffn = 64;
  int max_len = 257;  // positions, control token included
  int max_offset = 128;
  int note_window = 16;
  bool causal = true;
  double dropout = 0.0;
  int vocab = 0;

  attention::EncoderConfig encoder() const {
    attention::EncoderConfig e;
    e.attn.dim = dim;
    e.attn.heads = heads;
    e.attn.max_offset = max_offset;
    e.attn.max_len = max_len;
    e.ffn_hidden = ffn;
    e.layers = layers;
    e.dropout = dropout;
    return e;
  }
};

/// Token embedding, a stack of multiscale attention layers and an output
/// projection onto the vocabulary. Parameters live in a shared ParamSet
/// under `prefix`.
class Decoder {
 public:
  Decoder() = default;
  Decoder(std::string prefix, DecoderConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {}

  const std::string& prefix() const { return prefix_; }
  const DecoderConfig& config() const { return cfg_; }

  void init(nn::ParamSet& ps, std::mt19937_64& rng) const {
    if (cfg_.vocab <= 0) throw std::invalid_argument("decoder: vocabulary size not set");
    ps.add(prefix_ + ".emb", nn::normal_init(static_cast<std::size_t>(cfg_.vocab), cfg_.dim, 0.1, rng));
    attention::add_encoder(ps, prefix_ + ".enc", cfg_.encoder(), rng);
    nn::add_linear(ps, prefix_ + ".out", cfg_.dim, static_cast<std::size_t>(cfg_.vocab), rng);
  }

  attention::ScalePattern pattern(const std::vector<int>& bars, const std::vector<attention::SectionSpan>& sections) const {
    auto p = attention::build_scale_pattern(sections, bars, static_cast<int>(bars.size()), cfg_.note_window, cfg_.causal);
    p.heads = cfg_.heads;
    return p;
  }

  attention::ScalePattern pattern(const std::vector<int>& bars) const {
    return pattern(bars, {{0, static_cast<int>(bars.size())}});
  }

  nn::Var embed(nn::ParamSet& ps, nn::Tape& t, const std::vector<int>& ids) const {
    return nn::gather_rows(ps.var(t, prefix_ + ".emb"), ids);
  }

  nn::Var hidden(nn::ParamSet& ps, nn::Tape& t, nn::Var x, const attention::ScalePattern& p) const {
    if (p.L > cfg_.max_len)
      throw nn::ShapeError(prefix_ + ": input of " + std::to_string(p.L) + " positions exceeds " + std::to_string(cfg_.max_len));
    return attention::encoder_forward(ps, t, prefix_ + ".enc", x, attention::multiscale_layout(p), cfg_.encoder());
  }

  nn::Var logits(nn::ParamSet& ps, nn::Tape& t, nn::Var h) const { return nn::linear(ps, t, prefix_ + ".out", h); }

  std::size_t parameter_count(const nn::ParamSet& ps) const {
    std::size_t n = 0;
    for (const auto& [name, p] : ps)
      if (name.rfind(prefix_ + ".", 0) == 0) n += p.value.size();
    return n;
  }

 private:
  std::string prefix_;
  DecoderConfig cfg_;
};

/// Tape-free, one-position-at-a-time evaluation of a causal Decoder. Keys and
/// values of earlier positions are cached per layer, so each step costs one
/// row through the stack. Matches Decoder::hidden on the same prefix.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const nn::ParamSet& ps, const Decoder& d) : ps_(&ps), d_(&d) {
    if (!d.config().causal) throw std::invalid_argument("incremental decoding needs a causal decoder");
    layers_.resize(static_cast<std::size_t>(d.config().layers));
  }

  int length() const { return static_cast<int>(bar_.size()); }
  long steps() const { return steps_; }

  /// Feeds one input row at the given bar and section index; returns the top
  /// hidden row.
  std::vector<double> step(std::vector<double> x, int bar, int section = 0) {
    const auto& cfg = d_->config();
    const int i = length();
    if (i >= cfg.max_len) throw nn::ShapeError(d_->prefix() + ": incremental decoding past max_len");
    if (i == 0 || bar != bar_raw_.back() || section != sec_.back()) bar_groups_.push_back({});
    bar_groups_.back().push_back(i);
    if (i == 0 || section != sec_.back()) sec_groups_.push_back({});
    sec_groups_.back().push_back(i);
    bar_raw_.push_back(bar);
    bar_.push_back(static_cast<int>(bar_groups_.size()) - 1);
    sec_.push_back(section);
    sec_idx_.push_back(static_cast<int>(sec_groups_.size()) - 1);
    for (int l = 0; l < cfg.layers; ++l) x = layer(l, x);
    ++steps_;
    return x;
  }

  std::vector<double> step_token(int id, int bar, int section = 0) {
    const auto& e = ps_->at(d_->prefix() + ".emb").value;
    const auto r = e.row(static_cast<std::size_t>(id));
    return step(std::vector<double>(r.begin(), r.end()), bar, section);
  }

  std::vector<double> logits(const std::vector<double>& h) const {
    const auto& w = ps_->at(d_->prefix() + ".out.w").value;
    const auto& b = ps_->at(d_->prefix() + ".out.b").value;
    std::vector<double> out(b.data());
    for (std::size_t e = 0; e < h.size(); ++e)
      for (std::size_t v = 0; v < out.size(); ++v) out[v] += h[e] * w(e, v);
    return out;
  }

 private:
  // Per layer: cached keys/values plus running sums per bar and section
  // group (section sums also carry the absolute embeddings).
  struct Cache {
    std::vector<std::vector<double>> k, v;
    std::vector<std::vector<double>> bar_k, bar_v, sec_k, sec_v, sec_ak, sec_av;
  };

  static void accumulate(std::vector<std::vector<double>>& sums, std::size_t g, std::span<const double> x) {
    if (sums.size() <= g) sums.resize(g + 1, std::vector<double>(x.size(), 0.0));
    for (std::size_t e = 0; e < x.size(); ++e) sums[g][e] += x[e];
  }

  std::vector<double> affine(const std::string& p, const std::vector<double>& x) const {
    const auto& w = ps_->at(p + ".w").value;
    const auto& b = ps_->at(p + ".b").value;
    std::vector<double> out(b.data());
    for (std::size_t e = 0; e < x.size(); ++e)
      if (x[e] != 0.0)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += x[e] * w(e, j);
    return out;
  }

  std::vector<double> layer(int l, const std::vector<double>& x) {
    const auto& cfg = d_->config();
    const std::string p = attention::layer_prefix(d_->prefix() + ".enc", l);
    const std::string ap = p + ".attn";
    auto& c = layers_[static_cast<std::size_t>(l)];
    const std::vector<double> q = affine(ap + ".q", x);
    c.k.push_back(affine(ap + ".k", x));
    c.v.push_back(affine(ap + ".v", x));
    const int i = length() - 1;
    const auto ui = static_cast<std::size_t>(i);
    accumulate(c.bar_k, static_cast<std::size_t>(bar_[ui]), c.k.back());
    accumulate(c.bar_v, static_cast<std::size_t>(bar_[ui]), c.v.back());
    accumulate(c.sec_k, static_cast<std::size_t>(sec_idx_[ui]), c.k.back());
    accumulate(c.sec_v, static_cast<std::size_t>(sec_idx_[ui]), c.v.back());
    accumulate(c.sec_ak, static_cast<std::size_t>(sec_idx_[ui]), ps_->at(ap + ".abs_k").value.row(ui));
    accumulate(c.sec_av, static_cast<std::size_t>(sec_idx_[ui]), ps_->at(ap + ".abs_v").value.row(ui));
    const std::size_t D = cfg.dim;
    const std::size_t hd = D / static_cast<std::size_t>(cfg.heads[0] + cfg.heads[1] + cfg.heads[2]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::array<attention::PeMode, 3> pe = {attention::PeMode::relative, attention::PeMode::relative,
                                                 attention::PeMode::absolute};
    std::vector<double> a(D, 0.0);
    std::size_t h = 0;
    for (int s = 0; s < 3; ++s) {
      // Token columns and summary groups this row may see at scale s.
      std::vector<int> cols;
      std::vector<std::size_t> sums;  // group indices
      if (s == 0) {
        for (int j = std::max(0, i - cfg.note_window + 1); j <= i; ++j) cols.push_back(j);
      } else if (s == 1) {
        for (int j : bar_groups_[static_cast<std::size_t>(bar_[static_cast<std::size_t>(i)])]) cols.push_back(j);
        for (std::size_t g = 0; g < bar_groups_.size(); ++g) {
          const auto& grp = bar_groups_[g];
          if (grp.back() < i && sec_idx_[static_cast<std::size_t>(grp.front())] == sec_idx_[static_cast<std::size_t>(i)])
            sums.push_back(g);
        }
      } else {
        for (int j : sec_groups_[static_cast<std::size_t>(sec_idx_[static_cast<std::size_t>(i)])]) cols.push_back(j);
        for (std::size_t g = 0; g < sec_groups_.size(); ++g)
          if (sec_groups_[g].back() < i) sums.push_back(g);
      }
      const auto mode = pe[static_cast<std::size_t>(s)];
      const std::string sn = attention::scale_name(s);
      const nn::Tensor* rk = mode == attention::PeMode::relative ? &ps_->at(ap + ".rel_k." + sn).value : nullptr;
      const nn::Tensor* rv = mode == attention::PeMode::relative ? &ps_->at(ap + ".rel_v." + sn).value : nullptr;
      const nn::Tensor* ak = mode == attention::PeMode::absolute ? &ps_->at(ap + ".abs_k").value : nullptr;
      const nn::Tensor* av = mode == attention::PeMode::absolute ? &ps_->at(ap + ".abs_v").value : nullptr;
      for (int n = 0; n < cfg.heads[static_cast<std::size_t>(s)]; ++n, ++h) {
        const std::size_t o = h * hd;
        std::vector<std::vector<double>> keys, vals;
        auto key_of = [&](int j) {
          std::vector<double> kk(hd), vv(hd);
          for (std::size_t e = 0; e < hd; ++e) {
            kk[e] = c.k[static_cast<std::size_t>(j)][o + e];
            vv[e] = c.v[static_cast<std::size_t>(j)][o + e];
            if (ak) {
              kk[e] += (*ak)(static_cast<std::size_t>(j), e);
              vv[e] += (*av)(static_cast<std::size_t>(j), e);
            }
          }
          return std::make_pair(kk, vv);
        };
        for (int j : cols) {
          auto [kk, vv] = key_of(j);
          if (rk) {
            const auto r = static_cast<std::size_t>(std::clamp(j - i, -cfg.max_offset, cfg.max_offset) + cfg.max_offset);
            for (std::size_t e = 0; e < hd; ++e) kk[e] += (*rk)(r, e), vv[e] += (*rv)(r, e);
          }
          keys.push_back(std::move(kk));
          vals.push_back(std::move(vv));
        }
        for (std::size_t g : sums) {
          const bool sec = s == 2;
          const auto& ks = sec ? c.sec_k[g] : c.bar_k[g];
          const auto& vs = sec ? c.sec_v[g] : c.bar_v[g];
          const double n_g = static_cast<double>(sec ? sec_groups_[g].size() : bar_groups_[g].size());
          std::vector<double> kk(hd), vv(hd);
          for (std::size_t e = 0; e < hd; ++e) {
            kk[e] = ks[o + e] + (ak ? c.sec_ak[g][e] : 0.0);
            vv[e] = vs[o + e] + (av ? c.sec_av[g][e] : 0.0);
            kk[e] /= n_g;
            vv[e] /= n_g;
          }
          keys.push_back(std::move(kk));
          vals.push_back(std::move(vv));
        }
        std::vector<double> w(keys.size());
        double mx = -1e300;
        for (std::size_t n2 = 0; n2 < keys.size(); ++n2) {
          double sd = 0;
          for (std::size_t e = 0; e < hd; ++e) sd += q[o + e] * keys[n2][e];
          w[n2] = sd * scale;
          mx = std::max(mx, w[n2]);
        }
        double z = 0;
        for (double& v : w) z += (v = std::exp(v - mx));
        for (std::size_t n2 = 0; n2 < keys.size(); ++n2)
          for (std::size_t e = 0; e < hd; ++e) a[o + e] += w[n2] / z * vals[n2][e];
      }
    }
    std::vector<double> f = affine(p + ".ffn.fc1", a);
    for (double& v : f) v = std::max(v, 0.0);
    f = affine(p + ".ffn.fc2", f);
    std::vector<double> y(D);
    double mu = 0, var = 0;
    for (std::size_t e = 0; e < D; ++e) mu += (y[e] = x[e] + f[e]);
    mu /= static_cast<double>(D);
    for (double v : y) var += (v - mu) * (v - mu);
    var /= static_cast<double>(D);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    const auto& gain = ps_->at(p + ".ln.gain").value;
    const auto& bias = ps_->at(p + ".ln.bias").value;
    for (std::size_t e = 0; e < D; ++e) y[e] = gain[e] * (y[e] - mu) * inv + bias[e];
    return y;
  }

  const nn::ParamSet* ps_;
  const Decoder* d_;
  std::vector<Cache> layers_;
  std::vector<int> bar_raw_, bar_, sec_, sec_idx_;
  std::vector<std::vector<int>> bar_groups_, sec_groups_;
  long steps_ = 0;
};

}  // namespace hiermusic::model
