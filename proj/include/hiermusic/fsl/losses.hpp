#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "hiermusic/log.hpp"
#include "hiermusic/nn/ops.hpp"

namespace hiermusic::fsl {

/// Half-open interval [start, start + length).
struct Interval {
  int start = 0;
  int length = 0;

  int end() const { return start + length; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Intersection over union of two half-open intervals. Two empty intervals at
/// the same place count as identical.
inline double jaccard(Interval a, Interval b) {
  if (a.length < 0 || b.length < 0) throw std::invalid_argument("jaccard: negative length");
  if (a.length == 0 || b.length == 0) return (a == b) ? 1.0 : 0.0;
  const int inter = std::max(0, std::min(a.end(), b.end()) - std::max(a.start, b.start));
  return static_cast<double>(inter) / static_cast<double>(a.length + b.length - inter);
}

inline double jaccard(double a0, double a1, double b0, double b1) {
  const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
  const double uni = (a1 - a0) + (b1 - b0) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline constexpr double kJaccardFloor = 1e-6;

/// -log Jac, clamped at -log(1e-6) for disjoint pairs.
inline double reg_loss(Interval pred, Interval gt) {
  const double j = jaccard(pred, gt);
  if (j < kJaccardFloor) {
    log_debug("reg_loss: disjoint pair clamped");
    return -std::log(kJaccardFloor);
  }
  return -std::log(j);
}

/// Direct evaluation of the temperature-scaled Gumbel classification loss on a
/// probability vector: -log softmax((p + theta) / tau)[label].
inline double gumbel_cls_loss(std::span<const double> p, int label, double tau, std::span<const double> theta = {}) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_cls_loss: tau must be positive");
  if (label < 0 || static_cast<std::size_t>(label) >= p.size()) throw std::out_of_range("gumbel_cls_loss: label");
  std::vector<double> z(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) z[i] = (p[i] + (theta.empty() ? 0.0 : theta[i])) / tau;
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return -(z[static_cast<std::size_t>(label)] - m - std::log(s));
}

/// Batched form on the tape: `probs` [N x C], optional Gumbel draws `theta`
/// [N x C]. Mean over rows.
inline nn::Var gumbel_cls_loss(nn::Var probs, const std::vector<int>& labels, double tau,
                               const nn::Tensor* theta = nullptr) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_cls_loss: tau must be positive");
  nn::Var z = probs;
  if (theta) z = nn::add(z, probs.tape().constant(*theta, "gumbel_theta"));
  return nn::cross_entropy(nn::scale(z, 1.0 / tau), labels);
}

inline nn::Tensor sample_gumbel(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
  nn::Tensor t = nn::Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = -std::log(-std::log(u(rng)));
  return t;
}

/// Scope from an anchor window and regression offsets: start moves by
/// d_start * width, length scales by exp(d_loglen).
inline std::pair<double, double> apply_offsets(double start, double width, double d_start, double d_loglen) {
  const double s = start + width * d_start;
  return {s, s + width * std::exp(d_loglen)};
}

/// Mean -log Jaccard between regressed scopes and their targets. `deltas` is
/// [N x 2] of (d_start, d_loglen) against `anchors`. Pairs that end up
/// disjoint are clamped and contribute no gradient.
inline nn::Var iou_loss(nn::Var deltas, const std::vector<Interval>& anchors, const std::vector<Interval>& targets) {
  const nn::Tensor& d = deltas.value();
  const std::size_t n = anchors.size();
  if (d.rows() != n || d.cols() != 2 || targets.size() != n)
    throw nn::ShapeError("iou_loss: expected [" + std::to_string(n) + " x 2] offsets");
  if (n == 0) throw std::invalid_argument("iou_loss: empty batch");
  nn::Tensor grad = nn::Tensor::matrix(n, 2);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = anchors[i].length;
    const auto [p0, p1] = apply_offsets(anchors[i].start, w, d(i, 0), d(i, 1));
    const double g0 = targets[i].start, g1 = targets[i].end();
    const double inter = std::max(0.0, std::min(p1, g1) - std::max(p0, g0));
    const double uni = (p1 - p0) + (g1 - g0) - inter;
    const double j = uni > 0 ? inter / uni : 0.0;
    if (j < kJaccardFloor) {
      total += -std::log(kJaccardFloor);
      continue;
    }
    total += -std::log(j);
    const double di_dp1 = p1 < g1 ? 1.0 : 0.0, di_dp0 = p0 > g0 ? -1.0 : 0.0;
    const double du_dp1 = 1.0 - di_dp1, du_dp0 = -1.0 - di_dp0;
    const double dj_dp0 = (di_dp0 * uni - inter * du_dp0) / (uni * uni);
    const double dj_dp1 = (di_dp1 * uni - inter * du_dp1) / (uni * uni);
    const double dl_dj = -1.0 / j / static_cast<double>(n);
    grad(i, 0) = dl_dj * (dj_dp0 * w + dj_dp1 * w);
    grad(i, 1) = dl_dj * dj_dp1 * w * std::exp(d(i, 1));
  }
  nn::Tape& t = deltas.tape();
  return t.record("iou_loss", nn::Tensor::scalar(total / static_cast<double>(n)), {deltas},
                  [grad = std::move(grad)](const nn::Tensor& g, std::span<nn::Tensor* const> gin) {
                    if (!gin[0]) return;
                    for (std::size_t k = 0; k < grad.data().size(); ++k) gin[0]->data()[k] += g[0] * grad.data()[k];
                  });
}

/// Mean classification loss plus mean regression loss.
inline double fsl_loss(const std::vector<double>& cls, const std::vector<double>& reg) {
  if (cls.empty() && reg.empty()) throw std::invalid_argument("fsl_loss: empty batch");
  double c = 0, r = 0;
  for (double v : cls) c += v;
  for (double v : reg) r += v;
  return (cls.empty() ? 0.0 : c / static_cast<double>(cls.size())) +
         (reg.empty() ? 0.0 : r / static_cast<double>(reg.size()));
}

}  // namespace hiermusic::fsl
