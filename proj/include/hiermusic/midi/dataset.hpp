#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace hiermusic::midi {

struct DatasetSplit {
  std::vector<std::string> train, validation, test;
};

/// Seeded 80/10/10 partition. Validation and test sizes are round(0.1 * n)
/// (halves away from zero); train takes the remainder.
inline DatasetSplit split_dataset(std::vector<std::string> items, std::uint64_t seed = 0, double val_frac = 0.1,
                                  double test_frac = 0.1) {
  if (items.size() < 3) throw std::invalid_argument("split_dataset: corpus needs at least 3 items");
  std::sort(items.begin(), items.end());
  std::mt19937_64 rng(seed);
  // Fisher-Yates with our own index draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = items.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(items[i], items[j]);
  }
  const auto n = static_cast<double>(items.size());
  const auto nv = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * val_frac)));
  const auto nt = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * test_frac)));
  DatasetSplit s;
  s.validation.assign(items.begin(), items.begin() + static_cast<long>(nv));
  s.test.assign(items.begin() + static_cast<long>(nv), items.begin() + static_cast<long>(nv + nt));
  s.train.assign(items.begin() + static_cast<long>(nv + nt), items.end());
  for (auto* part : {&s.train, &s.validation, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

inline nlohmann::json split_manifest(const DatasetSplit& s, std::uint64_t seed) {
  return {{"format", "hiermusic-manifest"},
          {"version", 1},
          {"seed", seed},
          {"train", s.train},
          {"validation", s.validation},
          {"test", s.test}};
}

}  // namespace hiermusic::midi
