#pragma once

#include <random>
#include <string>

#include "hiermusic/attention/ms_attention.hpp"

namespace hiermusic::attention {

struct EncoderConfig {
  AttentionConfig attn;
  std::size_t ffn_hidden = 64;
  int layers = 6;
  double dropout = 0.0;
};

inline std::string layer_prefix(const std::string& prefix, int l) { return prefix + ".layer" + std::to_string(l); }

inline void add_encoder(nn::ParamSet& ps, const std::string& prefix, const EncoderConfig& cfg, std::mt19937_64& rng) {
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(prefix, l);
    add_ms_attention(ps, p + ".attn", cfg.attn, rng);
    nn::add_ffn(ps, p + ".ffn", cfg.attn.dim, cfg.ffn_hidden, rng);
    nn::add_layer_norm(ps, p + ".ln", cfg.attn.dim);
  }
}

/// One post-norm layer: h = LN(x + FFN(attention(x))).
inline nn::Var encoder_layer(nn::ParamSet& ps, nn::Tape& t, const std::string& p, nn::Var x, const HeadLayout& layout,
                             const EncoderConfig& cfg) {
  nn::Var a = ms_attention(ps, t, p + ".attn", x, layout, cfg.attn);
  a = nn::dropout(a, cfg.dropout);
  nn::Var f = nn::dropout(nn::ffn(ps, t, p + ".ffn", a), cfg.dropout);
  return nn::layer_norm(ps, t, p + ".ln", nn::add(x, f));
}

inline nn::Var encoder_forward(nn::ParamSet& ps, nn::Tape& t, const std::string& prefix, nn::Var x,
                               const HeadLayout& layout, const EncoderConfig& cfg) {
  for (int l = 0; l < cfg.layers; ++l) {
    try {
      x = encoder_layer(ps, t, layer_prefix(prefix, l), x, layout, cfg);
    } catch (const nn::NumericError& e) {
      throw nn::NumericError("encoder layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return x;
}

}  // namespace hiermusic::attention
