#pragma once

// Dense linear-algebra kernels: one-sided Jacobi SVD, Householder QR, cyclic
// Jacobi symmetric eigendecomposition and the Moore-Penrose pseudo-inverse.
// All routines are pure functions with a fixed sweep order, so identical
// input bits give identical output bits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "cntlora/error.hpp"
#include "cntlora/matrix.hpp"

namespace cntlora {

/// M = U * diag(S) * V with U (m x q), V (q x n), q = min(m, n).
struct SvdResult {
  Matrix U;
  std::vector<double> S;
  Matrix V;
};

/// M = P * diag(D) * P^T, D descending.
struct EigSymResult {
  Matrix P;
  std::vector<double> D;
};

struct QrResult {
  Matrix Q;
  Matrix R;
};

struct JacobiOptions {
  int max_sweeps = 100;
  double tolerance = 1e-15;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void rotate_rows(Matrix& m, std::size_t p, std::size_t q, double c, double s) {
  auto rp = m.row(p);
  auto rq = m.row(q);
  for (std::size_t i = 0; i < rp.size(); ++i) {
    const double a = rp[i];
    const double b = rq[i];
    rp[i] = c * a - s * b;
    rq[i] = s * a + c * b;
  }
}

/// Replaces the listed rows of `basis` (unit-norm rows, mutually orthogonal
/// elsewhere) with standard basis vectors orthogonalized against every other
/// row. Used to complete singular/eigen vectors attached to zero values.
inline void complete_orthonormal_rows(Matrix& basis, const std::vector<std::size_t>& slots) {
  if (slots.empty()) return;
  const std::size_t dim = basis.cols();
  std::vector<bool> is_slot(basis.rows(), false);
  for (auto s : slots) is_slot[s] = true;
  std::vector<std::size_t> filled;
  for (std::size_t r = 0; r < basis.rows(); ++r)
    if (!is_slot[r]) filled.push_back(r);

  std::size_t candidate = 0;
  for (auto slot : slots) {
    while (candidate < dim) {
      std::vector<double> v(dim, 0.0);
      v[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (auto f : filled) {
          const double proj = dot(v, basis.row(f));
          auto rf = basis.row(f);
          for (std::size_t i = 0; i < dim; ++i) v[i] -= proj * rf[i];
        }
      }
      const double norm = std::sqrt(dot(v, v));
      if (norm > 0.5) {
        auto rs = basis.row(slot);
        for (std::size_t i = 0; i < dim; ++i) rs[i] = v[i] / norm;
        filled.push_back(slot);
        break;
      }
    }
  }
}

/// Flip so the entry of largest magnitude (first on ties) is non-negative.
inline bool needs_flip(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  return !v.empty() && v[best] < 0.0;
}

/// One-sided Jacobi on a matrix stored as columns-in-rows: `cols_t` is n x m
/// (each row is one column of the m x n input, m >= n). On return the rows of
/// `cols_t` are U columns scaled by sigma and `v_t` rows are right singular
/// vectors.
inline void hestenes(Matrix& cols_t, Matrix& v_t, const JacobiOptions& opt) {
  const std::size_t n = cols_t.rows();
  // Dot products carry ~len*eps relative rounding, so a tighter threshold
  // could never be met.
  const double tol = std::max(opt.tolerance, std::numeric_limits<double>::epsilon() *
                                                 static_cast<double>(cols_t.cols()));
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(cols_t.row(p), cols_t.row(p));
        const double beta = dot(cols_t.row(q), cols_t.row(q));
        const double gamma = dot(cols_t.row(p), cols_t.row(q));
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_rows(cols_t, p, q, c, s);
        rotate_rows(v_t, p, q, c, s);
      }
    }
    if (!rotated) return;
  }
  throw Error(ErrorCode::IterationLimit,
              "one-sided Jacobi did not converge in " + std::to_string(opt.max_sweeps) + " sweeps");
}

}  // namespace detail

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw Error(ErrorCode::NonFinite, std::string(what) + ": non-finite input");
}

/// Thin SVD via one-sided Jacobi. Singular values are descending; each left
/// singular vector is signed so its largest-magnitude entry is non-negative.
inline SvdResult svd(const Matrix& m, const JacobiOptions& opt = {}) {
  require_finite(m, "svd");
  if (m.rows() == 0 || m.cols() == 0) throw Error(ErrorCode::ShapeMismatch, "svd of empty matrix");

  const bool wide = m.rows() < m.cols();
  // Work on the tall orientation: A is rows_a x cols_a with rows_a >= cols_a.
  Matrix cols_t = wide ? m : m.transpose();  // cols_a x rows_a
  const std::size_t q = cols_t.rows();
  const std::size_t len = cols_t.cols();
  Matrix v_t = Matrix::identity(q);
  detail::hestenes(cols_t, v_t, opt);

  std::vector<double> sigma(q);
  for (std::size_t j = 0; j < q; ++j) sigma[j] = std::sqrt(detail::dot(cols_t.row(j), cols_t.row(j)));
  std::vector<std::size_t> order(q);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  const double smax = sigma[order[0]];
  const double zero_cut = smax * std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(len, q));

  Matrix left_t(q, len);   // rows: singular vectors of length `len`
  Matrix right_t(q, q);    // rows: singular vectors of length q
  std::vector<double> s_sorted(q);
  std::vector<std::size_t> zero_slots;
  for (std::size_t k = 0; k < q; ++k) {
    const std::size_t j = order[k];
    auto src_v = v_t.row(j);
    std::copy(src_v.begin(), src_v.end(), right_t.row(k).begin());
    if (sigma[j] <= zero_cut || sigma[j] == 0.0) {
      s_sorted[k] = 0.0;
      zero_slots.push_back(k);
      continue;
    }
    s_sorted[k] = sigma[j];
    auto src = cols_t.row(j);
    auto dst = left_t.row(k);
    for (std::size_t i = 0; i < len; ++i) dst[i] = src[i] / sigma[j];
  }
  detail::complete_orthonormal_rows(left_t, zero_slots);

  // For a tall input, left_t holds U^T and right_t holds V. For a wide input
  // the roles swap: we decomposed M^T.
  SvdResult out;
  out.S = std::move(s_sorted);
  if (!wide) {
    out.U = left_t.transpose();
    out.V = std::move(right_t);
  } else {
    out.U = right_t.transpose();
    out.V = std::move(left_t);
  }
  for (std::size_t k = 0; k < q; ++k) {
    std::vector<double> ucol(out.U.rows());
    for (std::size_t i = 0; i < out.U.rows(); ++i) ucol[i] = out.U(i, k);
    if (detail::needs_flip(ucol)) {
      for (std::size_t i = 0; i < out.U.rows(); ++i) out.U(i, k) = -out.U(i, k);
      for (double& v : out.V.row(k)) v = -v;
    }
  }
  return out;
}

inline std::vector<double> singular_values(const Matrix& m) { return svd(m).S; }

inline double spectral_norm(const Matrix& m) {
  if (m.empty()) return 0.0;
  return svd(m).S.front();
}

/// Thin Householder QR: Q (m x q) with orthonormal columns, R (q x n) upper
/// triangular with non-negative diagonal, q = min(m, n).
inline QrResult qr(const Matrix& m) {
  require_finite(m, "qr");
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  const std::size_t q = std::min(rows, cols);
  Matrix r = m;
  std::vector<std::vector<double>> reflectors(q);

  for (std::size_t k = 0; k < q; ++k) {
    const std::size_t len = rows - k;
    std::vector<double> v(len);
    for (std::size_t i = 0; i < len; ++i) v[i] = r(k + i, k);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0 || len == 1) continue;  // identity reflector
    v[0] += std::copysign(norm, v[0]);
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    vnorm = std::sqrt(vnorm);
    for (double& x : v) x /= vnorm;
    for (std::size_t j = k; j < cols; ++j) {
      double proj = 0.0;
      for (std::size_t i = 0; i < len; ++i) proj += v[i] * r(k + i, j);
      for (std::size_t i = 0; i < len; ++i) r(k + i, j) -= 2.0 * proj * v[i];
    }
    reflectors[k] = std::move(v);
  }

  Matrix qm = Matrix::eye(rows, q);
  for (std::size_t kk = q; kk-- > 0;) {
    const auto& v = reflectors[kk];
    if (v.empty()) continue;
    for (std::size_t j = 0; j < q; ++j) {
      double proj = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) proj += v[i] * qm(kk + i, j);
      for (std::size_t i = 0; i < v.size(); ++i) qm(kk + i, j) -= 2.0 * proj * v[i];
    }
  }

  Matrix rt(q, cols);
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = i; j < cols; ++j) rt(i, j) = r(i, j);
  for (std::size_t i = 0; i < q; ++i) {
    if (rt(i, i) < 0.0) {
      for (double& x : rt.row(i)) x = -x;
      for (std::size_t a = 0; a < rows; ++a) qm(a, i) = -qm(a, i);
    }
  }
  return {std::move(qm), std::move(rt)};
}

/// Moore-Penrose pseudo-inverse; singular values <= rcond * sigma_max are
/// treated as zero.
/// `atol` is an extra absolute cutoff for callers that know the noise floor
/// of their input.
inline Matrix pinv(const Matrix& m, double rcond = 1e-12, double atol = 0.0) {
  if (!(rcond > 0.0 && rcond < 1.0)) throw Error(ErrorCode::BadConfig, "rcond must lie in (0, 1)");
  const SvdResult d = svd(m);
  Matrix out(m.cols(), m.rows());
  if (d.S.empty()) return out;
  const double cutoff = std::max(rcond * d.S.front(), atol);
  for (std::size_t k = 0; k < d.S.size(); ++k) {
    const double s = d.S[k];
    if (s == 0.0 || s <= cutoff) continue;
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double vi = d.V(k, i) * inv;
      if (vi == 0.0) continue;
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += vi * d.U(j, k);
    }
  }
  return out;
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations on (M + M^T)/2.
/// Eigenvalues are descending; tiny negative eigenvalues (PSD round-off,
/// magnitude <= 1e-10 * max(1, ||M||_F)) are clamped to zero.
inline EigSymResult eig_sym(const Matrix& m, const JacobiOptions& opt = {}) {
  require_finite(m, "eig_sym");
  if (m.rows() != m.cols()) throw Error(ErrorCode::NotSquare, "eig_sym needs a square matrix, got " + m.shape_string());
  const std::size_t n = m.rows();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));
  Matrix vt = Matrix::identity(n);  // rows are eigenvectors

  const double scale = frobenius_norm(a);
  const double tol = std::max(opt.tolerance, std::numeric_limits<double>::epsilon() * static_cast<double>(n));
  bool converged = n < 2 || scale == 0.0;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= tol * scale) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::hypot(1.0, theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        // A <- J^T A J with J rotating the (p, q) plane.
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        detail::rotate_rows(vt, p, q, c, s);
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) > tol * scale * 1e3) {
      throw Error(ErrorCode::IterationLimit, "Jacobi eigensolver did not converge");
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  const double clamp = 1e-10 * std::max(1.0, frobenius_norm(m));
  EigSymResult out{Matrix(n, n), std::vector<double>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    double lambda = a(j, j);
    if (lambda < 0.0 && lambda >= -clamp) lambda = 0.0;
    out.D[k] = lambda;
    auto v = vt.row(j);
    const double sign = detail::needs_flip(v) ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) out.P(i, k) = sign * v[i];
  }
  return out;
}

}  // namespace cntlora
