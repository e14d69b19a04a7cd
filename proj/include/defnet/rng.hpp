#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

#include "defnet/tensor.hpp"

namespace defnet {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-seed: every consumer of randomness derives its own stream from
/// the run seed and a stable label, so adding a consumer never shifts another.
inline std::uint64_t sub_seed(std::uint64_t seed, std::string_view name,
                              std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return splitmix64(seed ^ splitmix64(h ^ splitmix64(index)));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

/// Values on a shuffled grid with spacing `gap`, jittered by < gap/4 and
/// never within gap/4 of zero. Max-type ops and relu stay differentiable
/// under perturbations much smaller than gap/4.
inline Tensor tie_free_tensor(Shape shape, Rng& rng, double gap = 0.05) {
  Tensor t(std::move(shape));
  const std::size_t n = t.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const double mid = static_cast<double>(n / 2);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = (static_cast<double>(perm[i]) - mid + 0.5) * gap +
           uniform(rng, -gap / 4.0, gap / 4.0);
  }
  return t;
}

}  // namespace defnet
