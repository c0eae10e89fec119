#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "eqsep/linalg.hpp"
#include "eqsep/rng.hpp"

namespace testsupport {

inline eqsep::Matrix random_matrix(std::size_t rows, std::size_t cols, eqsep::Xoshiro256ss& rng,
                                   double sd = 1.0) {
  eqsep::Matrix m(rows, cols);
  for (auto& v : m.values()) v = sd * rng.normal();
  return m;
}

// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
inline eqsep::Matrix random_orthogonal(std::size_t d, eqsep::Xoshiro256ss& rng) {
  eqsep::Matrix q = random_matrix(d, d, rng);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += q(i, j) * q(i, p);
      for (std::size_t i = 0; i < d; ++i) q(i, j) -= dot * q(i, p);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < d; ++i) q(i, j) /= norm;
  }
  return q;
}

// Labels 0..K-1 with every class present, the rest random.
inline std::vector<int> random_labels(std::size_t n, int k, eqsep::Xoshiro256ss& rng) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = i < std::size_t(k) ? int(i) : int(rng.below(std::uint64_t(k)));
  }
  return labels;
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace testsupport
