#pragma once

// Finite-difference checks over every differentiable op and the composites
// built from them. Each case draws its own shapes, inputs and constants from
// the seed; all dims stay at 16 or below.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hiermusic/attention/encoder.hpp"
#include "hiermusic/fsl/losses.hpp"
#include "hiermusic/model/decoder.hpp"
#include "hiermusic/model/hier.hpp"
#include "hiermusic/nn/layers.hpp"
#include "support/gradcheck.hpp"

namespace hiermusic::testing {

using Forward = std::function<nn::Var(nn::ParamSet&, nn::Tape&)>;

struct GradSetup {
  nn::ParamSet ps;
  Forward forward;
  bool training = false;
};

struct GradCase {
  std::string name;
  std::function<GradSetup(std::mt19937_64&)> make;
};

namespace grad_detail {

inline nn::Tensor normal(std::size_t r, std::size_t c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  nn::Tensor t = nn::Tensor::matrix(r, c);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Entries at least `gap` away from zero, for kinked ops.
inline nn::Tensor away_from_zero(std::size_t r, std::size_t c, std::mt19937_64& rng, double gap = 0.05) {
  nn::Tensor t = normal(r, c, rng);
  for (double& v : t.data()) v = v < 0 ? v - gap : v + gap;
  return t;
}

inline nn::Tensor positive(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.3, 3.0);
  nn::Tensor t = nn::Tensor::matrix(r, c);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<int> labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::vector<int> out(n);
  for (int& v : out) v = static_cast<int>(rng() % classes);
  return out;
}

// Shorthand for the many single-input cases.
inline GradCase unary(std::string name, std::function<nn::Tensor(std::mt19937_64&)> input,
                      std::function<nn::Var(nn::Var)> op) {
  return {std::move(name), [input, op](std::mt19937_64& rng) {
            GradSetup s;
            s.ps.add("x", input(rng));
            s.forward = [op](nn::ParamSet& p, nn::Tape& t) { return op(p.var(t, "x")); };
            return s;
          }};
}

inline GradCase binary(std::string name, std::function<std::pair<nn::Tensor, nn::Tensor>(std::mt19937_64&)> inputs,
                       std::function<nn::Var(nn::Var, nn::Var)> op) {
  return {std::move(name), [inputs, op](std::mt19937_64& rng) {
            GradSetup s;
            auto [a, b] = inputs(rng);
            s.ps.add("a", std::move(a));
            s.ps.add("b", std::move(b));
            s.forward = [op](nn::ParamSet& p, nn::Tape& t) { return op(p.var(t, "a"), p.var(t, "b")); };
            return s;
          }};
}

inline attention::AttentionConfig small_attention() {
  attention::AttentionConfig c;
  c.dim = 12;
  c.heads = {2, 1, 1};
  c.max_offset = 4;
  c.max_len = 12;
  return c;
}

// Non-zero positional tables so their gradients are exercised too.
inline void randomize_positional(nn::ParamSet& ps, std::mt19937_64& rng) {
  for (auto& [n, p] : ps)
    if (n.find("rel_") != std::string::npos || n.find("abs_") != std::string::npos)
      p.value = normal(p.value.rows(), p.value.cols(), rng, 0.5);
}

// Anchor, target and offsets for one IoU pair, kept clear of the min/max
// kinks and of the disjoint clamp.
inline void iou_sample(std::mt19937_64& rng, fsl::Interval& anchor, fsl::Interval& target, double& d0, double& d1) {
  std::uniform_real_distribution<double> u(-0.25, 0.25);
  for (;;) {
    anchor = {static_cast<int>(rng() % 20), 4 + static_cast<int>(rng() % 8)};
    target = {anchor.start + static_cast<int>(std::lround(u(rng) * anchor.length)),
              static_cast<int>(std::lround(anchor.length * (1.0 + u(rng))))};
    d0 = u(rng);
    d1 = u(rng);
    const auto [p0, p1] = fsl::apply_offsets(anchor.start, anchor.length, d0, d1);
    if (std::abs(p0 - target.start) > 1e-2 && std::abs(p1 - target.end()) > 1e-2 &&
        fsl::jaccard(p0, p1, target.start, target.end()) > 0.05)
      return;
  }
}

}  // namespace grad_detail

inline std::vector<GradCase> grad_suite() {
  using namespace grad_detail;
  std::vector<GradCase> c;

  // ---- elementary ops
  c.push_back(binary("matmul", [](auto& r) {
    const auto m = dim(r, 1, 6), k = dim(r, 1, 6), n = dim(r, 1, 6);
    return std::pair{normal(m, k, r), normal(k, n, r)};
  }, nn::matmul));
  c.push_back(binary("matmul_nt", [](auto& r) {
    const auto m = dim(r, 1, 6), k = dim(r, 1, 6), n = dim(r, 1, 6);
    return std::pair{normal(m, k, r), normal(n, k, r)};
  }, nn::matmul_nt));
  auto same = [](auto& r) {
    const auto m = dim(r, 1, 6), n = dim(r, 1, 6);
    return std::pair{normal(m, n, r), normal(m, n, r)};
  };
  auto row = [](auto& r) {
    const auto m = dim(r, 1, 6), n = dim(r, 1, 6);
    return std::pair{normal(m, n, r), normal(1, n, r)};
  };
  c.push_back(binary("add", same, nn::add));
  c.push_back(binary("sub", same, nn::sub));
  c.push_back(binary("mul", same, nn::mul));
  c.push_back(binary("add_bias", row, nn::add_bias));
  c.push_back(binary("mul_row", row, nn::mul_row));
  c.push_back(binary("mul_scalar", [](auto& r) { return std::pair{normal(dim(r, 1, 6), dim(r, 1, 6), r), normal(1, 1, r)}; },
                     nn::mul_scalar));
  auto plain = [](auto& r) { return normal(dim(r, 1, 8), dim(r, 1, 8), r); };
  c.push_back(unary("scale", plain, [](nn::Var x) { return nn::scale(x, -1.7); }));
  c.push_back(unary("add_scalar", plain, [](nn::Var x) { return nn::mul(nn::add_scalar(x, 0.3), x); }));
  c.push_back(unary("relu", [](auto& r) { return away_from_zero(dim(r, 1, 8), dim(r, 1, 8), r); }, nn::relu));
  c.push_back(unary("exp", plain, nn::exp));
  c.push_back(unary("log", [](auto& r) { return positive(dim(r, 1, 8), dim(r, 1, 8), r); }, nn::log));
  c.push_back(unary("sum", plain, [](nn::Var x) { return nn::mul(nn::sum(x), nn::sum(x)); }));
  c.push_back(unary("mean", plain, [](nn::Var x) { return nn::mul(nn::mean(x), nn::mean(x)); }));
  c.push_back(unary("transpose", plain, nn::transpose));
  c.push_back(unary("standardize_cols", [](auto& r) { return normal(dim(r, 2, 10), dim(r, 1, 8), r); },
                    [](nn::Var x) { return nn::standardize_cols(x); }));
  c.push_back(unary("softmax_rows", [](auto& r) { return normal(dim(r, 1, 8), dim(r, 2, 10), r); },
                    [](nn::Var x) { return nn::softmax_rows(x); }));
  c.push_back(unary("softmax_rows_masked", [](auto& r) { return normal(dim(r, 1, 8), dim(r, 2, 10), r); },
                    [](nn::Var x) {
                      const std::size_t R = x.value().rows(), C = x.value().cols();
                      std::vector<char> mask(R * C, 0);
                      for (std::size_t i = 0; i < R; ++i)
                        for (std::size_t j = 0; j < C; ++j) mask[i * C + j] = (j <= i % C || (i + j) % 3 == 0);
                      return nn::softmax_rows(x, mask);
                    }));
  c.push_back(unary("log_softmax_rows", [](auto& r) { return normal(dim(r, 1, 8), dim(r, 2, 10), r); },
                    nn::log_softmax_rows));
  c.push_back(unary("slice_cols", [](auto& r) { return normal(dim(r, 1, 6), dim(r, 3, 10), r); },
                    [](nn::Var x) { return nn::slice_cols(x, 1, x.value().cols() - 2); }));
  c.push_back(unary("slice_rows", [](auto& r) { return normal(dim(r, 3, 10), dim(r, 1, 6), r); },
                    [](nn::Var x) { return nn::slice_rows(x, 1, x.value().rows() - 2); }));
  c.push_back(unary("mean_rows", plain, nn::mean_rows));
  c.push_back(unary("gather_rows", [](auto& r) { return normal(dim(r, 2, 10), dim(r, 1, 6), r); }, [](nn::Var x) {
    const int n = static_cast<int>(x.value().rows());
    return nn::gather_rows(x, {0, n - 1, 1, 0, n / 2});
  }));
  c.push_back(unary("group_mean_rows", [](auto& r) { return normal(dim(r, 4, 12), dim(r, 1, 6), r); }, [](nn::Var x) {
    const int n = static_cast<int>(x.value().rows());
    return nn::group_mean_rows(x, {{0, 1}, {2, n - 1}, {n - 1}, {0, 1, 2, 3}});
  }));
  c.push_back(binary("concat_cols", [](auto& r) {
    const auto m = dim(r, 1, 6);
    return std::pair{normal(m, dim(r, 1, 6), r), normal(m, dim(r, 1, 6), r)};
  }, [](nn::Var a, nn::Var b) { return nn::concat_cols({a, b, a}); }));
  c.push_back(binary("concat_rows", [](auto& r) {
    const auto n = dim(r, 1, 6);
    return std::pair{normal(dim(r, 1, 6), n, r), normal(dim(r, 1, 6), n, r)};
  }, [](nn::Var a, nn::Var b) { return nn::concat_rows({b, a, b}); }));
  c.push_back({"dropout", [](std::mt19937_64& r) {
                 GradSetup s;
                 s.ps.add("x", normal(dim(r, 2, 8), dim(r, 2, 8), r));
                 s.forward = [](nn::ParamSet& p, nn::Tape& t) { return nn::dropout(p.var(t, "x"), 0.3); };
                 s.training = true;
                 return s;
               }});
  c.push_back(binary("layer_norm_op", [](auto& r) {
    const auto n = dim(r, 2, 10);
    return std::pair{normal(dim(r, 1, 6), n, r), normal(2, n, r)};
  }, [](nn::Var x, nn::Var gb) { return nn::layer_norm(x, nn::slice_rows(gb, 0, 1), nn::slice_rows(gb, 1, 1)); }));

  // ---- losses
  c.push_back({"cross_entropy", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 1, 8), k = dim(r, 2, 10);
                 s.ps.add("z", normal(n, k, r, 2.0));
                 auto y = labels(n, k, r);
                 y[0] = -1;  // ignored row
                 if (n == 1) y[0] = 0;
                 s.forward = [y](nn::ParamSet& p, nn::Tape& t) { return nn::cross_entropy(p.var(t, "z"), y); };
                 return s;
               }});
  c.push_back({"cross_entropy_weighted", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 1, 8), k = dim(r, 2, 10);
                 s.ps.add("z", normal(n, k, r, 2.0));
                 const auto y = labels(n, k, r);
                 std::vector<double> w(n);
                 for (double& v : w) v = 0.2 + static_cast<double>(r() % 5);
                 s.forward = [y, w](nn::ParamSet& p, nn::Tape& t) { return nn::cross_entropy(p.var(t, "z"), y, &w); };
                 return s;
               }});
  c.push_back({"mlm_loss", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 2, 10), k = dim(r, 2, 12);
                 s.ps.add("z", normal(n, k, r, 2.0));
                 const auto y = labels(n, k, r);
                 std::vector<int> masked;
                 for (std::size_t i = 0; i < n; ++i)
                   if (i == 0 || r() % 3 == 0) masked.push_back(static_cast<int>(i));
                 s.forward = [y, masked](nn::ParamSet& p, nn::Tape& t) { return model::mlm_loss(p.var(t, "z"), y, masked); };
                 return s;
               }});
  c.push_back({"style_bound", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 1, 8), k = dim(r, 2, 6);
                 s.ps.add("z", normal(n, k, r, 2.0));
                 const auto y = labels(n, k, r);
                 s.forward = [y, k](nn::ParamSet& p, nn::Tape& t) {
                   return model::style_bound(nn::log_softmax_rows(p.var(t, "z")), y, static_cast<int>(k));
                 };
                 return s;
               }});
  c.push_back({"decoding_loss", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 2, 8), k = dim(r, 2, 8);
                 s.ps.add("z", normal(n, k, r, 2.0));
                 s.ps.add("q", normal(n, 3, r, 2.0));
                 const auto y = labels(n, k, r), style = labels(n, 3, r);
                 const double lambda = 0.5 + static_cast<double>(r() % 4);
                 s.forward = [=](nn::ParamSet& p, nn::Tape& t) {
                   auto mlm = model::mlm_loss(p.var(t, "z"), y, {0, static_cast<int>(n) - 1});
                   auto bound = model::style_bound(nn::log_softmax_rows(p.var(t, "q")), style, 3);
                   return model::decoding_loss(mlm, bound, lambda);
                 };
                 return s;
               }});
  c.push_back({"gumbel_cls_loss", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 1, 8), k = dim(r, 2, 8);
                 s.ps.add("z", normal(n, k, r));
                 const auto y = labels(n, k, r);
                 const nn::Tensor theta = fsl::sample_gumbel(n, k, r);
                 s.forward = [y, theta](nn::ParamSet& p, nn::Tape& t) {
                   return fsl::gumbel_cls_loss(nn::softmax_rows(p.var(t, "z")), y, 0.5, &theta);
                 };
                 return s;
               }});
  c.push_back({"iou_loss", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto n = dim(r, 1, 8);
                 std::vector<fsl::Interval> anchors(n), targets(n);
                 nn::Tensor d = nn::Tensor::matrix(n, 2);
                 for (std::size_t i = 0; i < n; ++i) iou_sample(r, anchors[i], targets[i], d(i, 0), d(i, 1));
                 s.ps.add("d", d);
                 s.forward = [anchors, targets](nn::ParamSet& p, nn::Tape& t) {
                   return fsl::iou_loss(p.var(t, "d"), anchors, targets);
                 };
                 return s;
               }});

  // ---- layers and composites
  c.push_back({"linear", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto in = dim(r, 1, 8), out = dim(r, 1, 8);
                 nn::add_linear(s.ps, "l", in, out, r);
                 s.ps.at("l.b").value = normal(1, out, r);
                 s.ps.add("x", normal(dim(r, 1, 6), in, r));
                 s.forward = [](nn::ParamSet& p, nn::Tape& t) { return nn::linear(p, t, "l", p.var(t, "x")); };
                 return s;
               }});
  c.push_back({"layer_norm", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto d = dim(r, 2, 16);
                 nn::add_layer_norm(s.ps, "ln", d);
                 s.ps.at("ln.gain").value = normal(1, d, r);
                 s.ps.at("ln.bias").value = normal(1, d, r);
                 s.ps.add("x", normal(dim(r, 1, 6), d, r, 2.0));
                 s.forward = [](nn::ParamSet& p, nn::Tape& t) { return nn::layer_norm(p, t, "ln", p.var(t, "x")); };
                 return s;
               }});
  c.push_back({"ffn", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto d = dim(r, 2, 8);
                 nn::add_ffn(s.ps, "f", d, dim(r, 2, 16), r);
                 s.ps.add("x", normal(dim(r, 1, 6), d, r));
                 s.forward = [](nn::ParamSet& p, nn::Tape& t) { return nn::ffn(p, t, "f", p.var(t, "x")); };
                 return s;
               }});
  c.push_back({"msn", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto L = dim(r, 2, 10), d = dim(r, 1, 8);
                 s.ps.add("h", normal(L, d, r, 2.0));
                 s.ps.add("g", normal(1, d, r));
                 s.ps.add("b", normal(1, d, r));
                 s.forward = [](nn::ParamSet& p, nn::Tape& t) {
                   return model::msn(p.var(t, "h"), p.var(t, "g"), p.var(t, "b"));
                 };
                 return s;
               }});
  c.push_back({"aggregate", [](std::mt19937_64& r) {
                 GradSetup s;
                 const auto d = dim(r, 1, 8);
                 s.ps.add("a", normal(dim(r, 1, 5), d, r));
                 s.ps.add("b", normal(dim(r, 1, 5), d, r));
                 s.ps.add("w", normal(2, 1, r));
                 s.ps.add("sep", normal(1, d, r));
                 s.forward = [](nn::ParamSet& p, nn::Tape& t) {
                   auto w = p.var(t, "w");
                   return model::aggregate({p.var(t, "a"), p.var(t, "b")}, {nn::slice_rows(w, 0, 1), nn::slice_rows(w, 1, 1)},
                                           p.var(t, "sep"));
                 };
                 return s;
               }});
  auto attention_case = [](bool multiscale, bool causal) {
    return [multiscale, causal](std::mt19937_64& r) {
      GradSetup s;
      const auto cfg = small_attention();
      attention::add_ms_attention(s.ps, "a", cfg, r);
      randomize_positional(s.ps, r);
      const int L = static_cast<int>(dim(r, 4, 10));
      attention::HeadLayout layout;
      if (multiscale) {
        const int first = 1 + static_cast<int>(r() % static_cast<unsigned>(L - 1));
        auto pat = attention::build_scale_pattern(std::vector<int>{first, L - first}, 2 + static_cast<int>(r() % 2), 3, causal);
        pat.heads = cfg.heads;
        layout = attention::multiscale_layout(pat);
      } else {
        layout = attention::uniform_layout(attention::build_mask(attention::MaskKind::sparse, {3, 2, causal}, L), cfg.heads);
      }
      s.ps.add("x", normal(static_cast<std::size_t>(L), cfg.dim, r));
      s.forward = [layout, cfg](nn::ParamSet& p, nn::Tape& t) {
        return attention::ms_attention(p, t, "a", p.var(t, "x"), layout, cfg);
      };
      return s;
    };
  };
  c.push_back({"ms_attention_multiscale", attention_case(true, false)});
  c.push_back({"ms_attention_multiscale_causal", attention_case(true, true)});
  c.push_back({"ms_attention_sparse_causal", attention_case(false, true)});
  c.push_back({"encoder_layer", [](std::mt19937_64& r) {
                 GradSetup s;
                 attention::EncoderConfig ec;
                 ec.attn = small_attention();
                 ec.ffn_hidden = 16;
                 ec.layers = 1;
                 attention::add_encoder(s.ps, "e", ec, r);
                 randomize_positional(s.ps, r);
                 const int L = static_cast<int>(dim(r, 4, 8));
                 auto pat = attention::build_scale_pattern(std::vector<int>{L / 2, L - L / 2}, 2, 3, true);
                 pat.heads = ec.attn.heads;
                 const auto layout = attention::multiscale_layout(pat);
                 s.ps.add("x", normal(static_cast<std::size_t>(L), ec.attn.dim, r));
                 s.forward = [layout, ec](nn::ParamSet& p, nn::Tape& t) {
                   return attention::encoder_layer(p, t, attention::layer_prefix("e", 0), p.var(t, "x"), layout, ec);
                 };
                 return s;
               }});
  c.push_back({"decoder_mlm", [](std::mt19937_64& r) {
                 GradSetup s;
                 model::DecoderConfig dc;
                 dc.dim = 8;
                 dc.heads = {1, 1, 0};
                 dc.layers = 1;
                 dc.ffn = 8;
                 dc.max_len = 8;
                 dc.max_offset = 3;
                 dc.note_window = 3;
                 dc.vocab = 6;
                 const model::Decoder dec("d", dc);
                 dec.init(s.ps, r);
                 randomize_positional(s.ps, r);
                 const std::size_t L = dim(r, 3, 7);
                 const auto ids = labels(L, 6, r), truth = labels(L, 6, r);
                 std::vector<int> bars(L);
                 for (std::size_t i = 0; i < L; ++i) bars[i] = static_cast<int>(i / 2);
                 const auto pat = dec.pattern(bars);
                 s.forward = [dec, pat, ids, truth](nn::ParamSet& p, nn::Tape& t) {
                   auto h = dec.hidden(p, t, dec.embed(p, t, ids), pat);
                   return model::mlm_loss(dec.logits(p, t, h), truth, {0, 2});
                 };
                 return s;
               }});
  return c;
}

/// Runs one case for one seed. Matrix outputs are reduced with a fixed random
/// projection so every entry of the output gradient is non-trivial.
inline GradCheckResult run_grad_case(const GradCase& gc, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7919 + 17);
  GradSetup s = gc.make(rng);
  nn::Tensor proj;
  auto loss_fn = [&](nn::ParamSet& p, bool backprop) {
    nn::Tape t;
    t.training = s.training;
    t.rng.seed(seed);
    nn::Var y = s.forward(p, t);
    if (y.value().size() != 1) {
      if (proj.size() == 0) {
        proj = y.value().zeros_like();
        std::normal_distribution<double> n(0.0, 1.0);
        for (double& v : proj.data()) v = n(rng);
      }
      y = nn::sum(nn::mul(y, t.constant(proj)));
    }
    if (backprop) t.backward(y);
    return y.value()[0];
  };
  return check_gradients(s.ps, loss_fn);
}

}  // namespace hiermusic::testing
