#pragma once

// Dense reference attention and the layouts the oracle comparisons use.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "hiermusic/attention/ms_attention.hpp"

namespace hiermusic::testing {

using namespace hiermusic::attention;

inline nn::Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  nn::Tensor t = nn::Tensor::matrix(r, c);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Dense reference: full logit matrix, -inf where the mask is false.
inline nn::Tensor dense_attention(const nn::ParamSet& ps, const std::string& prefix, const nn::Tensor& x,
                                  const HeadLayout& layout, const AttentionConfig& cfg) {
  const std::size_t L = x.rows(), D = cfg.dim, hd = cfg.head_dim();
  auto proj = [&](const std::string& n) {
    nn::Tensor out;
    nn::gemm(x, false, ps.at(prefix + n + ".w").value, false, out, false);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < D; ++j) out(i, j) += ps.at(prefix + n + ".b").value[j];
    return out;
  };
  const nn::Tensor Q = proj(".q"), K = proj(".k"), V = proj(".v");
  const auto& groups = layout.groups();
  const std::size_t W = L + groups.size();
  nn::Tensor out = nn::Tensor::matrix(L, D);
  std::size_t h = 0;
  for (int s = 0; s < 3; ++s) {
    const auto& mask = layout.masks[static_cast<std::size_t>(s)];
    const PeMode pe = layout.pe[static_cast<std::size_t>(s)];
    const std::string sn = scale_name(s);
    for (int k = 0; k < layout.heads[static_cast<std::size_t>(s)]; ++k, ++h) {
      nn::Tensor kx = nn::Tensor::matrix(W, hd), vx = nn::Tensor::matrix(W, hd);
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t e = 0; e < hd; ++e) {
          kx(j, e) = K(j, h * hd + e) + (pe == PeMode::absolute ? ps.at(prefix + ".abs_k").value(j, e) : 0.0);
          vx(j, e) = V(j, h * hd + e) + (pe == PeMode::absolute ? ps.at(prefix + ".abs_v").value(j, e) : 0.0);
        }
      for (std::size_t g = 0; g < groups.size(); ++g)
        for (int r : groups[g])
          for (std::size_t e = 0; e < hd; ++e) {
            kx(L + g, e) += kx(static_cast<std::size_t>(r), e) / static_cast<double>(groups[g].size());
            vx(L + g, e) += vx(static_cast<std::size_t>(r), e) / static_cast<double>(groups[g].size());
          }
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<double> logit(W, -std::numeric_limits<double>::infinity());
        for (std::size_t j = 0; j < W; ++j) {
          if (!mask.at(static_cast<int>(i), static_cast<int>(j))) continue;
          double sdot = 0;
          for (std::size_t e = 0; e < hd; ++e) {
            double kk = kx(j, e);
            if (pe == PeMode::relative && j < L) {
              const int o = std::clamp(static_cast<int>(j) - static_cast<int>(i), -cfg.max_offset, cfg.max_offset) + cfg.max_offset;
              kk += ps.at(prefix + ".rel_k." + sn).value(static_cast<std::size_t>(o), e);
            }
            sdot += Q(i, h * hd + e) * kk;
          }
          logit[j] = sdot / std::sqrt(static_cast<double>(hd));
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0;
        for (double& v : logit) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j < W; ++j) {
          const double a = logit[j] / z;
          if (a == 0) continue;
          for (std::size_t e = 0; e < hd; ++e) {
            double vv = vx(j, e);
            if (pe == PeMode::relative && j < L) {
              const int o = std::clamp(static_cast<int>(j) - static_cast<int>(i), -cfg.max_offset, cfg.max_offset) + cfg.max_offset;
              vv += ps.at(prefix + ".rel_v." + sn).value(static_cast<std::size_t>(o), e);
            }
            out(i, h * hd + e) += a * vv;
          }
        }
      }
    }
  }
  return out;
}

inline HeadLayout layout_for(MaskKind kind, int L, bool causal = false) {
  if (kind == MaskKind::multiscale) {
    std::vector<int> lens;
    for (int left = L; left > 0;) {
      const int l = std::min(left, std::max(3, L / 3));
      lens.push_back(l);
      left -= l;
    }
    return multiscale_layout(build_scale_pattern(lens, 4, 5, causal));
  }
  return uniform_layout(build_mask(kind, {3, 1, causal}, L));
}

}  // namespace hiermusic::testing
