#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hiermusic/attention/mask.hpp"
#include "hiermusic/nn/layers.hpp"

namespace hiermusic::attention {

enum class PeMode { none, relative, absolute };

/// Learned relative embeddings for offsets clipped to [-max_offset, max_offset].
struct RelativePe {
  nn::Var key, value;  // [(2 * max_offset + 1) x head_dim]
  int max_offset = 128;

  int index(int i, int j) const { return std::clamp(j - i, -max_offset, max_offset) + max_offset; }
};

/// Scaled dot-product attention over the columns a mask allows. `k` and `v`
/// carry L token rows followed by G summary rows. With `rel`, token columns
/// add the offset embedding to both key and value; summary columns do not.
/// Rows that attend nothing output zeros.
inline nn::Var sparse_attention(nn::Var q, nn::Var k, nn::Var v, const std::vector<std::vector<int>>& cols,
                                const RelativePe* rel = nullptr, double scale = -1.0) {
  const nn::Tensor& Q = q.value();
  const nn::Tensor& K = k.value();
  const nn::Tensor& V = v.value();
  const std::size_t L = Q.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || K.rows() != V.rows() || cols.size() != L)
    throw nn::ShapeError("sparse_attention: shape mismatch q " + nn::shape_str(Q.shape()) + " k " +
                         nn::shape_str(K.shape()) + " v " + nn::shape_str(V.shape()));
  if (scale < 0) scale = 1.0 / std::sqrt(static_cast<double>(d));
  const nn::Tensor* RK = rel ? &rel->key.value() : nullptr;
  const nn::Tensor* RV = rel ? &rel->value.value() : nullptr;
  const int max_off = rel ? rel->max_offset : 0;
  auto rel_index = [&](std::size_t i, int j) -> int {
    if (!rel || j >= static_cast<int>(L)) return -1;
    return std::clamp(j - static_cast<int>(i), -max_off, max_off) + max_off;
  };

  nn::Tensor out = nn::Tensor::matrix(L, d);
  std::vector<std::vector<double>> alpha(L);
  for (std::size_t i = 0; i < L; ++i) {
    const auto& c = cols[i];
    if (c.empty()) continue;
    auto& a = alpha[i];
    a.resize(c.size());
    double mx = -1e300;
    for (std::size_t n = 0; n < c.size(); ++n) {
      const auto j = static_cast<std::size_t>(c[n]);
      const int r = rel_index(i, c[n]);
      double s = 0;
      for (std::size_t e = 0; e < d; ++e) s += Q(i, e) * (K(j, e) + (r >= 0 ? (*RK)(static_cast<std::size_t>(r), e) : 0.0));
      a[n] = s * scale;
      mx = std::max(mx, a[n]);
    }
    double z = 0;
    for (double& x : a) z += (x = std::exp(x - mx));
    for (double& x : a) x /= z;
    for (std::size_t n = 0; n < c.size(); ++n) {
      const auto j = static_cast<std::size_t>(c[n]);
      const int r = rel_index(i, c[n]);
      for (std::size_t e = 0; e < d; ++e)
        out(i, e) += a[n] * (V(j, e) + (r >= 0 ? (*RV)(static_cast<std::size_t>(r), e) : 0.0));
    }
  }

  std::vector<nn::Var> inputs = {q, k, v};
  if (rel) {
    inputs.push_back(rel->key);
    inputs.push_back(rel->value);
  }
  nn::Tape& t = q.tape();
  const int iq = q.id(), ik = k.id(), iv = v.id();
  const int irk = rel ? rel->key.id() : -1, irv = rel ? rel->value.id() : -1;
  return t.record("sparse_attention", std::move(out), std::move(inputs),
                  [&t, iq, ik, iv, irk, irv, cols, alpha = std::move(alpha), scale, L, d, max_off,
                   has_rel = rel != nullptr](const nn::Tensor& g, std::span<nn::Tensor* const> gin) {
                    const nn::Tensor& Q = t.value(iq);
                    const nn::Tensor& K = t.value(ik);
                    const nn::Tensor& V = t.value(iv);
                    const nn::Tensor* RK = has_rel ? &t.value(irk) : nullptr;
                    const nn::Tensor* RV = has_rel ? &t.value(irv) : nullptr;
                    nn::Tensor* dQ = gin[0];
                    nn::Tensor* dK = gin[1];
                    nn::Tensor* dV = gin[2];
                    nn::Tensor* dRK = has_rel ? gin[3] : nullptr;
                    nn::Tensor* dRV = has_rel ? gin[4] : nullptr;
                    std::vector<double> da, ds;
                    for (std::size_t i = 0; i < L; ++i) {
                      const auto& c = cols[i];
                      if (c.empty()) continue;
                      const auto& a = alpha[i];
                      da.assign(c.size(), 0.0);
                      ds.assign(c.size(), 0.0);
                      double dot = 0;
                      for (std::size_t n = 0; n < c.size(); ++n) {
                        const auto j = static_cast<std::size_t>(c[n]);
                        const int r = (has_rel && c[n] < static_cast<int>(L))
                                          ? std::clamp(c[n] - static_cast<int>(i), -max_off, max_off) + max_off
                                          : -1;
                        double s = 0;
                        for (std::size_t e = 0; e < d; ++e) {
                          const double vv = V(j, e) + (r >= 0 ? (*RV)(static_cast<std::size_t>(r), e) : 0.0);
                          s += g(i, e) * vv;
                          const double ge = a[n] * g(i, e);
                          if (dV) (*dV)(j, e) += ge;
                          if (r >= 0 && dRV) (*dRV)(static_cast<std::size_t>(r), e) += ge;
                        }
                        da[n] = s;
                        dot += a[n] * s;
                      }
                      for (std::size_t n = 0; n < c.size(); ++n) ds[n] = a[n] * (da[n] - dot) * scale;
                      for (std::size_t n = 0; n < c.size(); ++n) {
                        const auto j = static_cast<std::size_t>(c[n]);
                        const int r = (has_rel && c[n] < static_cast<int>(L))
                                          ? std::clamp(c[n] - static_cast<int>(i), -max_off, max_off) + max_off
                                          : -1;
                        for (std::size_t e = 0; e < d; ++e) {
                          if (dQ)
                            (*dQ)(i, e) += ds[n] * (K(j, e) + (r >= 0 ? (*RK)(static_cast<std::size_t>(r), e) : 0.0));
                          if (dK) (*dK)(j, e) += ds[n] * Q(i, e);
                          if (r >= 0 && dRK) (*dRK)(static_cast<std::size_t>(r), e) += ds[n] * Q(i, e);
                        }
                      }
                    }
                  });
}

/// Head allocation and per-scale masks for one attention call. All masks
/// share the same summary groups.
struct HeadLayout {
  std::array<int, 3> heads = {4, 2, 2};
  std::array<AttentionMask, 3> masks;
  std::array<PeMode, 3> pe = {PeMode::relative, PeMode::relative, PeMode::absolute};

  int total_heads() const { return heads[0] + heads[1] + heads[2]; }
  const std::vector<std::vector<int>>& groups() const { return masks[0].groups; }
  int L() const { return masks[0].L; }
};

/// Multiscale layout: note, chord and section masks from the pattern.
inline HeadLayout multiscale_layout(const ScalePattern& p) {
  HeadLayout h;
  h.heads = p.heads;
  h.masks = {scale_mask(p, Scale::note), scale_mask(p, Scale::chord), scale_mask(p, Scale::section)};
  return h;
}

/// Every head uses the same mask and relative embeddings.
inline HeadLayout uniform_layout(const AttentionMask& m, std::array<int, 3> heads = {4, 2, 2},
                                 PeMode pe = PeMode::relative) {
  HeadLayout h;
  h.heads = heads;
  h.masks = {m, m, m};
  h.pe = {pe, pe, pe};
  return h;
}

struct AttentionConfig {
  std::size_t dim = 32;
  std::array<int, 3> heads = {4, 2, 2};
  int max_offset = 128;
  int max_len = 4096;

  std::size_t head_dim() const {
    const int n = heads[0] + heads[1] + heads[2];
    if (n <= 0 || dim % static_cast<std::size_t>(n) != 0)
      throw nn::ShapeError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(n) + " heads");
    return dim / static_cast<std::size_t>(n);
  }
};

inline const char* scale_name(int s) {
  static const char* n[] = {"note", "chord", "section"};
  return n[s];
}

inline void add_ms_attention(nn::ParamSet& ps, const std::string& prefix, const AttentionConfig& cfg, std::mt19937_64& rng) {
  const std::size_t hd = cfg.head_dim();
  nn::add_linear(ps, prefix + ".q", cfg.dim, cfg.dim, rng);
  nn::add_linear(ps, prefix + ".k", cfg.dim, cfg.dim, rng);
  nn::add_linear(ps, prefix + ".v", cfg.dim, cfg.dim, rng);
  const auto rel_rows = static_cast<std::size_t>(2 * cfg.max_offset + 1);
  for (int s = 0; s < 3; ++s) {
    ps.add(prefix + ".rel_k." + scale_name(s), nn::normal_init(rel_rows, hd, 0.02, rng));
    ps.add(prefix + ".rel_v." + scale_name(s), nn::normal_init(rel_rows, hd, 0.02, rng));
  }
  ps.add(prefix + ".abs_k", nn::normal_init(static_cast<std::size_t>(cfg.max_len), hd, 0.02, rng));
  ps.add(prefix + ".abs_v", nn::normal_init(static_cast<std::size_t>(cfg.max_len), hd, 0.02, rng));
}

/// Heads grouped by scale (note, chord, section), each attending through its
/// scale's mask, concatenated in that order.
inline nn::Var ms_attention(nn::ParamSet& ps, nn::Tape& t, const std::string& prefix, nn::Var x,
                            const HeadLayout& layout, const AttentionConfig& cfg) {
  const std::size_t L = x.value().rows();
  const std::size_t hd = cfg.head_dim();
  if (x.value().cols() != cfg.dim) throw nn::ShapeError("ms_attention: input width " + std::to_string(x.value().cols()) +
                                                        " != dim " + std::to_string(cfg.dim));
  if (layout.heads != cfg.heads) throw nn::ShapeError("ms_attention: head allocation differs from the layer's");
  if (static_cast<std::size_t>(layout.L()) != L) throw nn::ShapeError("ms_attention: mask length differs from input");
  if (static_cast<int>(L) > cfg.max_len) throw nn::ShapeError("ms_attention: sequence longer than max_len");
  const nn::Var Q = nn::linear(ps, t, prefix + ".q", x);
  const nn::Var K = nn::linear(ps, t, prefix + ".k", x);
  const nn::Var V = nn::linear(ps, t, prefix + ".v", x);
  const auto& groups = layout.groups();
  std::vector<nn::Var> heads;
  std::size_t h = 0;
  for (int s = 0; s < 3; ++s) {
    const int n = layout.heads[static_cast<std::size_t>(s)];
    if (n == 0) continue;
    const auto cols = layout.masks[static_cast<std::size_t>(s)].columns();
    const PeMode pe = layout.pe[static_cast<std::size_t>(s)];
    RelativePe rel;
    if (pe == PeMode::relative) {
      const std::string name = scale_name(s);
      rel = {ps.var(t, prefix + ".rel_k." + name), ps.var(t, prefix + ".rel_v." + name), cfg.max_offset};
    }
    for (int k = 0; k < n; ++k, ++h) {
      const nn::Var q = nn::slice_cols(Q, h * hd, hd);
      nn::Var kk = nn::slice_cols(K, h * hd, hd);
      nn::Var vv = nn::slice_cols(V, h * hd, hd);
      if (pe == PeMode::absolute) {
        kk = nn::add(kk, nn::slice_rows(ps.var(t, prefix + ".abs_k"), 0, L));
        vv = nn::add(vv, nn::slice_rows(ps.var(t, prefix + ".abs_v"), 0, L));
      }
      if (!groups.empty()) {
        kk = nn::concat_rows({kk, nn::group_mean_rows(kk, groups)});
        vv = nn::concat_rows({vv, nn::group_mean_rows(vv, groups)});
      }
      heads.push_back(sparse_attention(q, kk, vv, cols, pe == PeMode::relative ? &rel : nullptr));
    }
  }
  return heads.size() == 1 ? heads[0] : nn::concat_cols(heads);
}

}  // namespace hiermusic::attention
