#pragma once

#include <random>
#include <string>

#include "hiermusic/nn/ops.hpp"
#include "hiermusic/nn/params.hpp"

namespace hiermusic::nn {

/// Registers weight `<prefix>.w` [in x out] and bias `<prefix>.b` [out].
inline void add_linear(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out,
                       std::mt19937_64& rng) {
  ps.add(prefix + ".w", fan_in_uniform(in, out, rng));
  ps.add(prefix + ".b", Tensor::vector(std::vector<double>(out, 0.0)));
}

inline Var linear(ParamSet& ps, Tape& t, const std::string& prefix, Var x) {
  return add_bias(matmul(x, ps.var(t, prefix + ".w")), ps.var(t, prefix + ".b"));
}

inline void add_layer_norm(ParamSet& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".gain", Tensor::vector(std::vector<double>(dim, 1.0)));
  ps.add(prefix + ".bias", Tensor::vector(std::vector<double>(dim, 0.0)));
}

inline Var layer_norm(ParamSet& ps, Tape& t, const std::string& prefix, Var x, double eps = 1e-5) {
  return layer_norm(x, ps.var(t, prefix + ".gain"), ps.var(t, prefix + ".bias"), eps);
}

/// Position-wise feed-forward network: relu(x W1 + b1) W2 + b2.
inline void add_ffn(ParamSet& ps, const std::string& prefix, std::size_t dim, std::size_t hidden,
                    std::mt19937_64& rng) {
  add_linear(ps, prefix + ".fc1", dim, hidden, rng);
  add_linear(ps, prefix + ".fc2", hidden, dim, rng);
}

inline Var ffn(ParamSet& ps, Tape& t, const std::string& prefix, Var x, double dropout_p = 0.0) {
  Var h = relu(linear(ps, t, prefix + ".fc1", x));
  h = dropout(h, dropout_p);
  return linear(ps, t, prefix + ".fc2", h);
}

}  // namespace hiermusic::nn
