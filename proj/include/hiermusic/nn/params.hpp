#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hiermusic/nn/tape.hpp"

namespace hiermusic::nn {

/// Named collection of parameters. Ordered by name so iteration (and
/// therefore checkpoints and optimizer updates) is deterministic.
class ParamSet {
 public:
  Parameter& add(const std::string& name, Tensor value) {
    auto [it, inserted] = params_.insert_or_assign(name, Parameter{std::move(value), Tensor()});
    return it->second;
  }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Var var(Tape& tape, const std::string& name) { return tape.param(at(name), name); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  bool operator==(const ParamSet& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (auto a = params_.begin(), b = o.params_.begin(); a != params_.end(); ++a, ++b)
      if (a->first != b->first || !(a->second.value == b->second.value)) return false;
    return true;
  }

 private:
  std::map<std::string, Parameter> params_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline Tensor fan_in_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor normal_init(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace hiermusic::nn
