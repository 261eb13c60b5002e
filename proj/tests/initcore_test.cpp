#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "cntlora/initcore.hpp"
#include "eigen_oracle.hpp"
#include "test_util.hpp"

namespace cntlora {
namespace {

using testing::pick;
using testing::random_matrix;
using testing::random_orthogonal;
using testing::rel_err;

// X = diag(1, 2) so X X^T = diag(1, 4); W_src = I.
const Matrix kDiagX = Matrix::diag({1.0, 2.0});
const Matrix kI2 = Matrix::identity(2);

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::BadConfig;
}

std::vector<ActivationBatch> one_batch(const Matrix& x) { return {{"p", x, 0}}; }

TEST(EstimateCross, DiagonalExample) {
  EXPECT_MATRIX_NEAR(estimate_cross(kI2, kDiagX), Matrix::diag({1.0, 0.25}), 1e-15);
}

TEST(EstimateCross, IdentityCovarianceLeavesWeightUnchanged) {
  std::mt19937_64 rng(1);
  const Matrix w = random_matrix(3, 5, rng);
  EXPECT_MATRIX_NEAR(estimate_cross(w, random_orthogonal(5, rng)), w, 1e-12);
}

TEST(EstimateCross, ZeroActivationsGiveZero) {
  std::mt19937_64 rng(2);
  EXPECT_EQ(estimate_cross(random_matrix(3, 4, rng), Matrix(4, 6)), Matrix(3, 4));
}

TEST(EstimateCross, RejectsMismatchedActivations) {
  EXPECT_EQ(code_of([] { estimate_cross(kI2, Matrix(3, 1)); }), ErrorCode::ShapeMismatch);
}

TEST(EstimateCross, MinimizesResidualAgainstPerturbations) {
  std::mt19937_64 rng(3);
  const std::size_t k = 4, d = 6;
  const Matrix w = random_matrix(k, d, rng);
  const Matrix x = testing::random_low_rank(d, 5, 3, rng);  // rank-deficient covariance
  const Matrix g = gram(x);
  const Matrix best = estimate_cross(w, x);
  const double base = frobenius_norm(best * g - w);
  for (int t = 0; t < 100; ++t) {
    const Matrix trial = best + random_matrix(k, d, rng) * 1e-3;
    EXPECT_GE(frobenius_norm(trial * g - w), base - 1e-12 * (1.0 + base));
  }
}

TEST(EstimateSelf, DiagonalExample) {
  // The symmetric root of diag(1, 4) is diag(1, 2).
  EXPECT_MATRIX_NEAR(estimate_self(kI2, kDiagX), Matrix::diag({1.0, 0.5}), 1e-15);
}

TEST(EstimateSelf, WhitenedTargetLeavesWeightUnchanged) {
  std::mt19937_64 rng(4);
  const Matrix w = random_matrix(3, 4, rng);
  EXPECT_MATRIX_NEAR(estimate_self(w, random_orthogonal(4, rng)), w, 1e-12);
}

TEST(EstimateSelf, PreservesOutputCovarianceAtFullRank) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = pick(rng, 1, 10);
    const std::size_t k = pick(rng, 1, 10);
    const Matrix w = random_matrix(k, d, rng);
    const Matrix x = random_matrix(d, d + pick(rng, 0, 10), rng);
    const Matrix wt = estimate_self(w, x);
    EXPECT_LE(rel_err(wt * gram(x) * wt.transpose(), w * w.transpose()), 1e-8);
  }
}

TEST(EstimateShift, DiagonalExampleZeroesSingularDirection) {
  // Bracket I - diag(1, 4) = diag(0, -3); its pseudo-inverse is diag(0, -1/3).
  EXPECT_MATRIX_NEAR(estimate_shift(kI2, kDiagX, kI2), Matrix::diag({0.0, -1.0 / 3.0}), 1e-15);
}

TEST(EstimateShift, ZeroActivationsWithOrthogonalWeightAreANoOp) {
  std::mt19937_64 rng(6);
  const Matrix w = random_orthogonal(4, rng);
  EXPECT_MATRIX_NEAR(estimate_shift(w, Matrix(4, 3), Matrix::identity(4)), w, 1e-12);
}

TEST(EstimateShift, ZeroConstantGivesZero) {
  std::mt19937_64 rng(7);
  EXPECT_EQ(estimate_shift(random_matrix(3, 5, rng), random_matrix(5, 2, rng), Matrix(3, 3)), Matrix(3, 5));
}

TEST(EstimateShift, RecoversConstantAtFullColumnRank) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = pick(rng, 2, 10);
    const std::size_t k = pick(rng, 1, d);
    const Matrix w = random_matrix(k, d, rng);
    const Matrix x = random_matrix(d, pick(rng, 1, 12), rng) * 0.1;
    const Matrix c = random_matrix(k, k, rng);
    const Matrix wt = w.transpose();
    const Matrix bracket = wt - gram(x) * wt;
    EXPECT_LE(rel_err(estimate_shift(w, x, c) * bracket, c), 1e-8);
  }
}

TEST(EstimateShift, RejectsNonSquareConstant) {
  EXPECT_EQ(code_of([] { estimate_shift(kI2, kDiagX, Matrix(2, 3)); }), ErrorCode::ShapeMismatch);
}

TEST(AggregateBatches, LiteralDenominator) {
  const std::vector<Matrix> per{Matrix::diag({1.0, 0.25})};
  const std::vector<double> w{1.0};
  EXPECT_MATRIX_NEAR(aggregate_batches(kI2, per, w), Matrix::diag({1.0, 0.625}), 1e-15);
}

TEST(AggregateBatches, FixedPointAndZeroWeights) {
  std::mt19937_64 rng(9);
  const Matrix w0 = random_matrix(3, 2, rng);
  const std::vector<Matrix> per(4, w0);
  const std::vector<double> ones(4, 1.0), zeros(4, 0.0);
  EXPECT_MATRIX_NEAR(aggregate_batches(w0, per, ones), w0, 1e-14);
  EXPECT_MATRIX_NEAR(aggregate_batches(w0, per, zeros), w0 * (1.0 / 5.0), 1e-15);
  // Normalized variant is a weighted mean: zero weights give back W0.
  EXPECT_MATRIX_NEAR(aggregate_batches(w0, per, zeros, true), w0, 1e-15);
}

TEST(AggregateBatches, ValidatesInputs) {
  const std::vector<Matrix> per{kI2};
  const std::vector<double> two{1.0, 1.0}, negative{-1.0};
  EXPECT_EQ(code_of([&] { aggregate_batches(kI2, per, two); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(code_of([&] { aggregate_batches(kI2, per, negative); }), ErrorCode::BadConfig);
  const std::vector<Matrix> wrong{Matrix(3, 3)};
  const std::vector<double> one{1.0};
  EXPECT_EQ(code_of([&] { aggregate_batches(kI2, wrong, one); }), ErrorCode::ShapeMismatch);
}

TEST(DecomposeSvd, FullRankUnitScaleIsExact) {
  const Matrix delta = Matrix::diag({3.0, 1.0});
  const AdapterInit a = decompose_svd(delta, 2, 0.5, 2.0);
  EXPECT_MATRIX_NEAR(a.B * a.A, delta, 1e-14);
  EXPECT_EQ(a.B.rows(), 2u);
  EXPECT_EQ(a.A.cols(), 2u);
}

TEST(DecomposeSvd, RankOneKeepsLeadingDirection) {
  const AdapterInit a = decompose_svd(Matrix::diag({3.0, 1.0}), 1, 0.5, 1.0);
  EXPECT_MATRIX_NEAR(a.B * a.A, Matrix::diag({3.0, 0.0}), 1e-14);
}

TEST(DecomposeSvd, ScaleCompensationAndFractionInvariance) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 30; ++t) {
    const std::size_t k = pick(rng, 1, 12), d = pick(rng, 1, 12);
    const std::size_t r = pick(rng, 1, std::min(k, d));
    const double alpha = std::uniform_real_distribution<double>(0.5, 32.0)(rng);
    const Matrix delta = random_matrix(k, d, rng);
    const Matrix oracle = oracle::truncate(delta, r);
    for (double p : {0.0, 0.1, 0.25, 0.5, 0.75, 1.0}) {
      const AdapterInit a = decompose_svd(delta, r, p, alpha);
      EXPECT_LE(frobenius_norm(a.effective_delta() - oracle), 1e-9 * std::max(1.0, frobenius_norm(delta)));
    }
  }
}

TEST(DecomposeSvd, FractionMovesSpectrumBetweenFactors) {
  const Matrix delta = Matrix::diag({4.0, 1.0});
  const AdapterInit b_heavy = decompose_svd(delta, 2, 0.0, 2.0);
  EXPECT_NEAR(frobenius_norm(b_heavy.A.transpose() * b_heavy.A - Matrix::identity(2)), 0.0, 1e-14);
  const AdapterInit a_heavy = decompose_svd(delta, 2, 1.0, 2.0);
  EXPECT_NEAR(frobenius_norm(a_heavy.B.transpose() * a_heavy.B - Matrix::identity(2)), 0.0, 1e-14);
}

TEST(DecomposeSvd, RejectsBadArguments) {
  EXPECT_EQ(code_of([] { decompose_svd(Matrix(2, 3), 3, 0.5, 1.0); }), ErrorCode::RankTooLarge);
  EXPECT_EQ(code_of([] { decompose_svd(Matrix(2, 3), 0, 0.5, 1.0); }), ErrorCode::RankTooLarge);
  EXPECT_EQ(code_of([] { decompose_svd(Matrix(2, 3), 1, 1.5, 1.0); }), ErrorCode::BadConfig);
  EXPECT_EQ(code_of([] { decompose_svd(Matrix(2, 3), 1, 0.5, 0.0); }), ErrorCode::BadConfig);
}

TEST(DecomposeQr, FullRankReconstructs) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 30; ++t) {
    const std::size_t k = pick(rng, 1, 10), d = pick(rng, 1, 10);
    const std::size_t r = std::min(k, d);
    const double alpha = 3.0;
    const Matrix delta = random_matrix(k, d, rng);
    EXPECT_LE(rel_err(decompose_qr(delta, r, alpha).effective_delta(), delta), 1e-9);
  }
}

TEST(DecomposeQr, UpperTriangularInputGivesIdentityUpMatrix) {
  const Matrix delta{{2.0, 1.0, -1.0}, {0.0, 3.0, 0.5}, {0.0, 0.0, 1.0}};
  const AdapterInit a = decompose_qr(delta, 3, 3.0);
  EXPECT_MATRIX_NEAR(a.B, Matrix::identity(3), 1e-15);
  EXPECT_MATRIX_NEAR(a.A, delta, 1e-15);
}

TEST(DecomposeQr, RankOneMatchesSingleReflectionOracle) {
  // delta = u v^T: one Householder step maps column 0 to |u| e1 * sign, so
  // Q[:, 0] = u / |u| and R[0, :] = |u| v^T when v[0] > 0.
  const std::vector<double> u{1.0, -2.0, 2.0};
  const std::vector<double> v{0.5, 1.0, -1.5, 2.0};
  Matrix delta(3, 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) delta(i, j) = u[i] * v[j];
  const AdapterInit a = decompose_qr(delta, 1, 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.B(i, 0), u[i] / 3.0, 1e-15);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.A(0, j), 3.0 * v[j], 1e-14);
  EXPECT_MATRIX_NEAR(a.B * a.A, delta, 1e-14);
}

TEST(InitCntlora, NoShiftAndWhitenedInputsGiveZeroUpdate) {
  ToyModelConfig cfg;
  cfg.dims = {6, 4};
  cfg.sigma_w = 0.0;
  const ToyModel model = build_toy_model(cfg);
  std::mt19937_64 rng(12);
  const auto batches = one_batch(random_orthogonal(6, rng));
  EstimatorConfig est;
  const CntInit init = init_cntlora(model.points[0].W_src, batches, est, 2, 4.0);
  EXPECT_LE(max_abs(init.delta), 1e-14);
  EXPECT_LE(max_abs(init.adapter.effective_delta()), 1e-14);
}

TEST(InitCntlora, CrossDiagonalChain) {
  const CntInit init = init_cntlora(kI2, one_batch(kDiagX), EstimatorConfig{}, 2, 2.0);
  EXPECT_MATRIX_NEAR(init.delta, Matrix::diag({0.0, -0.375}), 1e-15);
  EXPECT_MATRIX_NEAR(init.adapter.effective_delta(), init.delta, 1e-14);
}

TEST(InitCntlora, ShiftDiagonalChain) {
  EstimatorConfig est;
  est.mode = ConstraintMode::shift();
  const CntInit init = init_cntlora(kI2, one_batch(kDiagX), est, 2, 2.0);
  EXPECT_MATRIX_NEAR(init.delta, Matrix::diag({-0.5, -2.0 / 3.0}), 1e-15);
}

TEST(InitCntlora, QrPathAndCustomW0) {
  EstimatorConfig est;
  est.decomp = Decomposition::QR;
  est.w0 = Matrix(2, 2);
  const CntInit init = init_cntlora(kI2, one_batch(kDiagX), est, 2, 4.0);
  // (0 + diag(1, 0.25)) / 2 - I
  EXPECT_MATRIX_NEAR(init.delta, Matrix::diag({-0.5, -0.875}), 1e-15);
  EXPECT_MATRIX_NEAR(init.adapter.effective_delta(), init.delta, 1e-14);
}

TEST(InitCntlora, WhitenedNoOpPerMode) {
  std::mt19937_64 rng(13);
  const Matrix w = random_matrix(3, 5, rng);
  const auto whitened = one_batch(random_orthogonal(5, rng));
  for (auto mode : {ConstraintMode::cross(), ConstraintMode::self()}) {
    EstimatorConfig est;
    est.mode = mode;
    EXPECT_LE(max_abs(estimate_delta(w, whitened, est).delta), 1e-12) << to_string(mode.kind);
  }
  // Shift is a no-op only for orthonormal-row weights fed zero activations:
  // whitened X makes the bracket vanish instead.
  EstimatorConfig shift;
  shift.mode = ConstraintMode::shift();
  const Matrix orth = random_orthogonal(5, rng).row_block(0, 3);
  EXPECT_LE(max_abs(estimate_delta(orth, one_batch(Matrix(5, 2)), shift).delta), 1e-12);
  EXPECT_MATRIX_NEAR(estimate_delta(orth, whitened, shift).delta, orth * -0.5, 1e-12);
}

TEST(InitCntlora, MultipleBatchesAverage) {
  const std::vector<ActivationBatch> two{{"p", kDiagX, 0}, {"p", Matrix::identity(2), 1}};
  const DeltaEstimate est = estimate_delta(kI2, two, EstimatorConfig{});
  // (I + diag(1, 0.25) + I) / 3 - I
  EXPECT_MATRIX_NEAR(est.delta, Matrix::diag({0.0, -0.25}), 1e-15);
  EXPECT_EQ(code_of([] { estimate_delta(kI2, {}, EstimatorConfig{}); }), ErrorCode::MissingActivations);
}

TEST(Baselines, NativeStartsFromZeroDelta) {
  std::mt19937_64 rng(14);
  const Matrix w = random_matrix(40, 100, rng);
  const AdapterInit a = init_baseline(BaselineKind::NativeLoRA, w, {}, 8, 16.0, 3);
  EXPECT_EQ(a.B, Matrix(40, 8));
  EXPECT_EQ(a.effective_delta(), Matrix(40, 100));
  double ss = 0.0;
  for (double v : a.A.data()) ss += v * v;
  EXPECT_NEAR(ss / static_cast<double>(a.A.size()), 1.0 / 100.0, 0.15 / 100.0);
  EXPECT_EQ(a.A, init_baseline(BaselineKind::NativeLoRA, w, {}, 8, 16.0, 3).A);
}

TEST(Baselines, PissaTruncatesPretrainedWeight) {
  const AdapterInit a = init_baseline(BaselineKind::PiSSA, Matrix::diag({5.0, 2.0}), {}, 1, 2.0, 0);
  EXPECT_MATRIX_NEAR(a.effective_delta(), Matrix::diag({5.0, 0.0}), 1e-14);
  // B = U S^0.5 and A = S^0.5 V share the spectrum evenly.
  EXPECT_NEAR(frobenius_norm(a.B), frobenius_norm(a.A), 1e-14);
}

TEST(Baselines, OloraUsesQrOfPretrainedWeight) {
  std::mt19937_64 rng(15);
  const Matrix w = random_matrix(6, 5, rng);
  const AdapterInit a = init_baseline(BaselineKind::OLoRA, w, {}, 2, 4.0, 0);
  const QrResult f = qr(w);
  EXPECT_MATRIX_NEAR(a.effective_delta(), f.Q.col_block(0, 2) * f.R.row_block(0, 2), 1e-12);
  EXPECT_LE(frobenius_norm(gram(a.B.transpose()) - Matrix::identity(2)), 1e-12);
}

TEST(Baselines, EvaHasOrthonormalDownMatrixAndZeroUpMatrix) {
  std::mt19937_64 rng(16);
  const Matrix w = random_matrix(5, 7, rng);
  const auto batches = one_batch(random_matrix(7, 3, rng));  // fewer samples than rank
  const AdapterInit a = init_baseline(BaselineKind::EVA, w, batches, 4, 8.0, 0);
  EXPECT_EQ(a.B, Matrix(5, 4));
  EXPECT_LE(frobenius_norm(gram(a.A) - Matrix::identity(4)), 1e-12);
  // The leading rows span the activations' principal directions.
  const Matrix proj = oracle::range_projector(batches[0].X);
  EXPECT_LE(frobenius_norm(a.A.row_block(0, 3) * proj - a.A.row_block(0, 3)), 1e-10);
}

TEST(Baselines, CordaMatchesCovarianceWeightedTruncation) {
  std::mt19937_64 rng(17);
  const Matrix w = random_matrix(4, 6, rng);
  const auto batches = one_batch(random_matrix(6, 10, rng));
  const Matrix cov = gram(batches[0].X);
  const AdapterInit a = init_baseline(BaselineKind::CORDA, w, batches, 2, 4.0, 0);
  const Matrix expected = oracle::truncate(w * cov, 2) * oracle::pinv(cov);
  EXPECT_LE(rel_err(a.effective_delta(), expected), 1e-9);
}

TEST(Baselines, DataDrivenKindsNeedActivations) {
  EXPECT_EQ(code_of([] { init_baseline(BaselineKind::EVA, kI2, {}, 1, 1.0, 0); }), ErrorCode::MissingActivations);
  EXPECT_EQ(code_of([] { init_baseline(BaselineKind::CORDA, kI2, {}, 1, 1.0, 0); }), ErrorCode::MissingActivations);
}

TEST(RandomDelta, MatchesRequestedNorm) {
  const AdapterInit a = init_random_delta(6, 5, 3, 6.0, 2.5, 1);
  EXPECT_NEAR(frobenius_norm(a.effective_delta()), 2.5, 1e-12);
}

}  // namespace
}  // namespace cntlora
