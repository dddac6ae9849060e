#pragma once

#include "feddeo/numerics.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>

namespace feddeo {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed of an independent stream for (master, task ids...). Streams depend
/// only on the ids, never on scheduling order.
constexpr std::uint64_t stream_seed(std::uint64_t master, std::initializer_list<std::uint64_t> task) {
  std::uint64_t h = mix64(master);
  for (std::uint64_t v : task) h = mix64(h ^ mix64(v + 0x632be59bd9b4e019ULL));
  return h;
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

}  // namespace feddeo
