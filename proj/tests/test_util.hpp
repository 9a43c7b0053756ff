#pragma once

#include "ttt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ttt::testing {

inline Mat<double> random_mat(Index rows, Index cols, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Vec<double> random_vec(Index n, std::mt19937_64& rng, double stddev = 1.0) {
  return as_vec<double>(random_mat(n, 1, rng, stddev));
}

/// Frobenius-norm relative difference, guarded against a zero reference.
template <typename A, typename B>
double rel_diff(const A& got, const B& want) {
  const double denom = std::max(static_cast<double>(want.norm()), 1e-300);
  return static_cast<double>((got - want).norm()) / denom;
}

template <typename A, typename B>
double max_abs_diff(const A& got, const B& want) {
  if (got.size() == 0) return 0.0;
  return static_cast<double>((got - want).cwiseAbs().maxCoeff());
}

}  // namespace ttt::testing
