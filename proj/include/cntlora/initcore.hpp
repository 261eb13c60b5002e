#pragma once

// Closed-form LoRA initialization from constraint sets relating source and
// target activations. Each mode estimates a target weight W_tar from the
// frozen weight W_src and captured target activations X (d x b):
//
//   Cross:  W_tar = W_src (X X^T)^+
//   Self:   W_tar = W_src (P D^{1/2})^+          with X X^T = P D P^T
//   Shift:  W_tar = C (W_src^T - X X^T W_src^T)^+
//
// Per-batch estimates are averaged with W0, the result is differenced against
// W_src and split into LoRA factors (B, A) by SVD or QR.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cntlora/capture.hpp"
#include "cntlora/error.hpp"
#include "cntlora/matrix.hpp"
#include "cntlora/numkit.hpp"

namespace cntlora {

enum class ModeKind { Cross, Self, Shift };
enum class Decomposition { SVD, QR };

struct ConstraintMode {
  ModeKind kind = ModeKind::Cross;
  /// Shift only: explicit k x k constant. When empty, C = c_scale * I_k.
  Matrix shift_c;
  double c_scale = 1.0;

  static ConstraintMode cross() { return {ModeKind::Cross, {}, 1.0}; }
  static ConstraintMode self() { return {ModeKind::Self, {}, 1.0}; }
  static ConstraintMode shift(double scale = 1.0) { return {ModeKind::Shift, {}, scale}; }
  static ConstraintMode shift(Matrix c) { return {ModeKind::Shift, std::move(c), 1.0}; }

  Matrix c_for(std::size_t k) const {
    if (!shift_c.empty()) return shift_c;
    return Matrix::identity(k) * c_scale;
  }
};

inline const char* to_string(ModeKind m) {
  switch (m) {
    case ModeKind::Cross: return "cross";
    case ModeKind::Self: return "self";
    case ModeKind::Shift: return "shift";
  }
  return "?";
}

struct AdapterInit {
  Matrix B;  // k x r
  Matrix A;  // r x d
  std::size_t rank = 0;
  double alpha = 1.0;
  double p = 0.5;

  double scale() const { return alpha / static_cast<double>(rank); }
  /// (alpha / r) * B * A, the update actually added to W_src at forward time.
  Matrix effective_delta() const { return (B * A) * scale(); }
};

struct EstimatorConfig {
  ConstraintMode mode;
  double rcond = 1e-12;
  std::vector<double> batch_weights;  // empty: every w_j = 1
  std::optional<Matrix> w0;           // empty: W_src
  double p = 0.5;
  Decomposition decomp = Decomposition::SVD;
  /// Divide by 1 + sum(w) instead of B + 1. Off by default.
  bool normalize_weights = false;
};

namespace detail {

inline void require_activation_shape(const Matrix& w_src, const Matrix& x) {
  if (x.rows() != w_src.cols()) {
    throw Error(ErrorCode::ShapeMismatch,
                "activations " + x.shape_string() + " do not match weight " + w_src.shape_string());
  }
}

inline Matrix scale_rows(Matrix m, std::span<const double> s) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (double& v : m.row(i)) v *= s[i];
  return m;
}

inline Matrix scale_cols(Matrix m, std::span<const double> s) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= s[j];
  }
  return m;
}

inline void require_rank(const Matrix& delta, std::size_t r) {
  const std::size_t full = std::min(delta.rows(), delta.cols());
  if (r == 0 || r > full) {
    throw Error(ErrorCode::RankTooLarge,
                "rank " + std::to_string(r) + " outside [1, " + std::to_string(full) + "] for " + delta.shape_string());
  }
}

inline void require_alpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw Error(ErrorCode::BadConfig, "alpha must be positive");
}

}  // namespace detail

inline Matrix estimate_cross(const Matrix& w_src, const Matrix& x, double rcond = 1e-12) {
  detail::require_activation_shape(w_src, x);
  return w_src * pinv(gram(x), rcond);
}

/// Uses the symmetric root P D^1/2 P^T of X X^T. The bare factor P D^1/2
/// depends on how the eigensolver orders and signs P; the symmetric root does
/// not, and it satisfies the same covariance identity.
inline Matrix estimate_self(const Matrix& w_src, const Matrix& x, double rcond = 1e-12) {
  detail::require_activation_shape(w_src, x);
  const EigSymResult e = eig_sym(gram(x));
  std::vector<double> root(e.D.size());
  for (std::size_t i = 0; i < root.size(); ++i) root[i] = std::sqrt(std::max(e.D[i], 0.0));
  return w_src * pinv(detail::scale_cols(e.P, root) * e.P.transpose(), rcond);
}

/// C must be k x k for a k x d weight.
inline Matrix estimate_shift(const Matrix& w_src, const Matrix& x, const Matrix& c, double rcond = 1e-12) {
  detail::require_activation_shape(w_src, x);
  if (c.rows() != w_src.rows() || c.cols() != w_src.rows()) {
    throw Error(ErrorCode::ShapeMismatch,
                "shift constant " + c.shape_string() + " must be k x k for weight " + w_src.shape_string());
  }
  const Matrix wt = w_src.transpose();
  const Matrix g = gram(x);
  // W^T - G W^T cancels when G is close to I; anything at the rounding level
  // of that subtraction is noise, not signal.
  const double floor = std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(w_src.rows(), w_src.cols())) *
                       frobenius_norm(w_src) * (1.0 + frobenius_norm(g));
  return c * pinv(wt - g * wt, rcond, floor);
}

inline Matrix estimate_target(const Matrix& w_src, const Matrix& x, const ConstraintMode& mode, double rcond) {
  switch (mode.kind) {
    case ModeKind::Cross: return estimate_cross(w_src, x, rcond);
    case ModeKind::Self: return estimate_self(w_src, x, rcond);
    case ModeKind::Shift: return estimate_shift(w_src, x, mode.c_for(w_src.rows()), rcond);
  }
  throw Error(ErrorCode::BadConfig, "unknown constraint mode");
}

/// (W0 + sum_j w_j W_j) / (B + 1). With `normalize`, the denominator is
/// 1 + sum_j w_j so the result is a weighted mean.
inline Matrix aggregate_batches(const Matrix& w0, std::span<const Matrix> per_batch, std::span<const double> weights,
                                bool normalize = false) {
  if (per_batch.empty()) throw Error(ErrorCode::BadConfig, "aggregate_batches needs at least one batch");
  if (weights.size() != per_batch.size()) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(weights.size()) + " weights for " +
                                              std::to_string(per_batch.size()) + " batches");
  }
  Matrix sum = w0;
  double weight_total = 0.0;
  for (std::size_t j = 0; j < per_batch.size(); ++j) {
    if (!(weights[j] >= 0.0)) throw Error(ErrorCode::BadConfig, "batch weights must be >= 0");
    sum += per_batch[j] * weights[j];
    weight_total += weights[j];
  }
  const double denom = normalize ? 1.0 + weight_total : static_cast<double>(per_batch.size()) + 1.0;
  return sum * (1.0 / denom);
}

/// SVD split with fractional allocation p of the singular values. The
/// singular values are pre-scaled by r/alpha so that (alpha/r) B A equals the
/// rank-r truncation of delta.
inline AdapterInit decompose_svd(const Matrix& delta, std::size_t r, double p, double alpha) {
  detail::require_rank(delta, r);
  detail::require_alpha(alpha);
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::BadConfig, "p must lie in [0, 1]");
  const SvdResult d = svd(delta);
  const double comp = static_cast<double>(r) / alpha;
  std::vector<double> left(r), right(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double s = comp * d.S[i];
    left[i] = std::pow(s, 1.0 - p);
    right[i] = std::pow(s, p);
  }
  AdapterInit out;
  out.B = detail::scale_cols(d.U.col_block(0, r), left);
  out.A = detail::scale_rows(d.V.row_block(0, r), right);
  out.rank = r;
  out.alpha = alpha;
  out.p = p;
  return out;
}

/// QR split of (r/alpha) delta: B = Q[:, :r], A = R[:r, :].
inline AdapterInit decompose_qr(const Matrix& delta, std::size_t r, double alpha) {
  detail::require_rank(delta, r);
  detail::require_alpha(alpha);
  const QrResult f = qr(delta * (static_cast<double>(r) / alpha));
  AdapterInit out;
  out.B = f.Q.col_block(0, r);
  out.A = f.R.row_block(0, r);
  out.rank = r;
  out.alpha = alpha;
  out.p = 0.5;
  return out;
}

inline AdapterInit decompose(const Matrix& delta, const EstimatorConfig& cfg, std::size_t r, double alpha) {
  return cfg.decomp == Decomposition::QR ? decompose_qr(delta, r, alpha) : decompose_svd(delta, r, cfg.p, alpha);
}

struct DeltaEstimate {
  Matrix w_est;
  Matrix delta;  // w_est - W_src
};

/// Per-batch closed-form estimate, batch averaging, and differencing.
inline DeltaEstimate estimate_delta(const Matrix& w_src, std::span<const ActivationBatch> batches,
                                    const EstimatorConfig& cfg) {
  if (batches.empty()) throw Error(ErrorCode::MissingActivations, "no activation batches supplied");
  std::vector<Matrix> per_batch;
  per_batch.reserve(batches.size());
  for (const auto& b : batches) per_batch.push_back(estimate_target(w_src, b.X, cfg.mode, cfg.rcond));
  std::vector<double> weights = cfg.batch_weights;
  if (weights.empty()) weights.assign(batches.size(), 1.0);
  const Matrix& w0 = cfg.w0 ? *cfg.w0 : w_src;
  if (w0.rows() != w_src.rows() || w0.cols() != w_src.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "W0 " + w0.shape_string() + " vs W_src " + w_src.shape_string());
  }
  DeltaEstimate out;
  out.w_est = aggregate_batches(w0, per_batch, weights, cfg.normalize_weights);
  out.delta = out.w_est - w_src;
  return out;
}

struct CntInit {
  AdapterInit adapter;
  Matrix delta;
};

inline CntInit init_cntlora(const Matrix& w_src, std::span<const ActivationBatch> batches, const EstimatorConfig& cfg,
                            std::size_t r, double alpha) {
  DeltaEstimate est = estimate_delta(w_src, batches, cfg);
  AdapterInit adapter = decompose(est.delta, cfg, r, alpha);
  return {std::move(adapter), std::move(est.delta)};
}

// ---------------------------------------------------------------------------
// Baseline initializers written as constraint sets.

enum class BaselineKind { NativeLoRA, PiSSA, OLoRA, EVA, CORDA };

inline const char* to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::NativeLoRA: return "native";
    case BaselineKind::PiSSA: return "pissa";
    case BaselineKind::OLoRA: return "olora";
    case BaselineKind::EVA: return "eva";
    case BaselineKind::CORDA: return "corda";
  }
  return "?";
}

inline Matrix stack_activations(std::span<const ActivationBatch> batches) {
  std::vector<Matrix> parts;
  for (const auto& b : batches) parts.push_back(b.X);
  return hcat(parts);
}

inline AdapterInit init_baseline(BaselineKind kind, const Matrix& w_src, std::span<const ActivationBatch> batches,
                                 std::size_t r, double alpha, std::uint64_t seed, double rcond = 1e-12) {
  detail::require_rank(w_src, r);
  detail::require_alpha(alpha);
  const std::size_t k = w_src.rows();
  const std::size_t d = w_src.cols();
  const bool needs_data = kind == BaselineKind::EVA || kind == BaselineKind::CORDA;
  if (needs_data && batches.empty()) {
    throw Error(ErrorCode::MissingActivations, std::string(to_string(kind)) + " needs captured activations");
  }
  switch (kind) {
    case BaselineKind::NativeLoRA: {
      auto rng = make_rng(seed, 0x6e6174697665ULL);
      return {Matrix(k, r), gaussian_matrix(r, d, 1.0 / std::sqrt(static_cast<double>(d)), rng), r, alpha, 0.5};
    }
    case BaselineKind::PiSSA: return decompose_svd(w_src, r, 0.5, alpha);
    case BaselineKind::OLoRA: return decompose_qr(w_src, r, alpha);
    case BaselineKind::EVA: {
      for (const auto& b : batches) detail::require_activation_shape(w_src, b.X);
      const EigSymResult e = eig_sym(gram(stack_activations(batches)));
      return {Matrix(k, r), e.P.col_block(0, r).transpose(), r, alpha, 0.5};
    }
    case BaselineKind::CORDA: {
      for (const auto& b : batches) detail::require_activation_shape(w_src, b.X);
      const Matrix cov = gram(stack_activations(batches));
      const SvdResult f = svd(w_src * cov);
      const Matrix v_cinv = f.V.row_block(0, r) * pinv(cov, rcond);
      std::vector<double> root(r);
      for (std::size_t i = 0; i < r; ++i) root[i] = std::sqrt(f.S[i] * static_cast<double>(r) / alpha);
      return {detail::scale_cols(f.U.col_block(0, r), root), detail::scale_rows(v_cinv, root), r, alpha, 0.5};
    }
  }
  throw Error(ErrorCode::BadConfig, "unknown baseline");
}

/// Control initializer: Gaussian B and A rescaled so the effective delta has
/// Frobenius norm `target_norm`, pointing in a direction unrelated to data.
inline AdapterInit init_random_delta(std::size_t k, std::size_t d, std::size_t r, double alpha, double target_norm,
                                     std::uint64_t seed) {
  auto rng = make_rng(seed, 0x72616e646f6dULL);
  AdapterInit out{gaussian_matrix(k, r, 1.0, rng), gaussian_matrix(r, d, 1.0, rng), r, alpha, 0.5};
  const double norm = frobenius_norm(out.effective_delta());
  if (norm > 0.0) {
    const double f = std::sqrt(target_norm / norm);
    out.B *= f;
    out.A *= f;
  }
  return out;
}

}  // namespace cntlora
