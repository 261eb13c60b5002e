#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include <gtest/gtest.h>

#include "cntlora/matrix.hpp"
#include "cntlora/numkit.hpp"

namespace cntlora::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

/// rows x cols matrix of rank at most `rank`.
inline Matrix random_low_rank(std::size_t rows, std::size_t cols, std::size_t rank, std::mt19937_64& rng) {
  if (rank == 0) return Matrix(rows, cols);
  return random_matrix(rows, rank, rng) * random_matrix(rank, cols, rng);
}

/// n x n orthogonal matrix from the QR of a Gaussian matrix.
inline Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng) { return qr(random_matrix(n, n, rng)).Q; }

/// rows x cols matrix U diag(sigma) V^T with random orthogonal U, V. Missing
/// trailing singular values are zero.
inline Matrix with_singular_values(std::size_t rows, std::size_t cols, const std::vector<double>& sigma,
                                   std::mt19937_64& rng) {
  Matrix s(rows, cols);
  for (std::size_t i = 0; i < std::min({rows, cols, sigma.size()}); ++i) s(i, i) = sigma[i];
  return random_orthogonal(rows, rng) * s * random_orthogonal(cols, rng).transpose();
}

inline double rel_err(const Matrix& got, const Matrix& want) {
  return frobenius_norm(got - want) / std::max(1.0, frobenius_norm(want));
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

#define EXPECT_MATRIX_NEAR(got, want, tol)                                                   \
  do {                                                                                       \
    const ::cntlora::Matrix& g_ = (got);                                                     \
    const ::cntlora::Matrix& w_ = (want);                                                    \
    ASSERT_EQ(g_.rows(), w_.rows());                                                         \
    ASSERT_EQ(g_.cols(), w_.cols());                                                         \
    EXPECT_LE(::cntlora::frobenius_norm(g_ - w_), (tol)) << "got " << g_.shape_string();     \
  } while (0)

}  // namespace cntlora::testing
