#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "hiermusic/nn/params.hpp"

namespace hiermusic::nn {

/// Adam with decoupled weight decay.
struct OptimizerState {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

class MissingGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Applies one update to every parameter in `params`. Every parameter must
/// carry a gradient of matching shape (call ParamSet::zero_grad before the
/// backward pass). Parameters listed in `frozen` are skipped.
inline void optimizer_step(OptimizerState& st, ParamSet& params, const std::vector<std::string>& frozen_prefixes = {}) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : params) {
    bool frozen = false;
    for (const auto& pre : frozen_prefixes) frozen = frozen || name.rfind(pre, 0) == 0;
    if (frozen) continue;
    if (!p.has_grad()) throw MissingGradientError("optimizer_step: parameter '" + name + "' has no gradient");
    auto [mit, mnew] = st.m.try_emplace(name, p.value.zeros_like());
    auto [vit, vnew] = st.v.try_emplace(name, p.value.zeros_like());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (!m.same_shape(p.value)) throw ShapeError("optimizer_step: moment shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= st.learning_rate * (mhat / (std::sqrt(vhat) + st.eps) + st.weight_decay * p.value[i]);
    }
  }
}

}  // namespace hiermusic::nn
