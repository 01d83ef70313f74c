#pragma once

// Weighted chordal quaternion mean: the unit q maximizing qᵀMq with
// M = Σ w_i q_i q_iᵀ, plus its analytic gradient.

#include <span>
#include <vector>

#include "qec/linalg.hpp"
#include "qec/quat.hpp"

namespace qec {

struct QuatSet {
  std::vector<UnitQuaternion> quats;
  std::vector<double> weights;

  static QuatSet uniform(std::vector<UnitQuaternion> quats);
};

/// Symmetric PSD 4x4 accumulator Σ w_i q_i q_iᵀ.
using AccumulatorM = Mat4;

AccumulatorM build_m(const QuatSet& set);
/// Raw form used by the differentiable engine; quaternions need not be unit.
/// Throws EmptyInput / AllZeroWeights / ShapeMismatch.
AccumulatorM build_m(std::span<const Vec4> quats, std::span<const double> weights);

/// Relative eigen-gap below which the top eigenvector is considered unstable.
inline constexpr double kDegenerateGap = 1e-9;

struct DominantEigen {
  double value = 0.0;
  UnitQuaternion vector;  // hemisphere-canonicalized
  bool degenerate = false;
  double sign = 1.0;      // vector == sign * raw Jacobi column
  SymEigen<4> full;
};

DominantEigen eig_sym4_max(const Mat4& m);

UnitQuaternion weighted_mean(const QuatSet& set);
DominantEigen weighted_mean_eigen(std::span<const Vec4> quats, std::span<const double> weights);

struct MeanGradient {
  std::vector<Vec4> d_quats;
  std::vector<double> d_weights;
};

/// Gradient of the canonicalized mean against `upstream` (dL/dmean).
/// Throws Error{DegenerateSpectrum} when the top eigen-gap is <= 1e-9 λ1.
MeanGradient weighted_mean_grad(const QuatSet& set, const Vec4& upstream);

/// Accumulating backward kernel shared with the tape: adds dL/dq_i into
/// `d_quats` and dL/dw_i into `d_weights` (either may be empty to skip).
/// Uses the deflated resolvent (λ1 I − M)⁺ expressed in the eigenbasis.
void weighted_mean_backward(std::span<const Vec4> quats, std::span<const double> weights,
                            const DominantEigen& eig, const Vec4& upstream,
                            std::span<Vec4> d_quats, std::span<double> d_weights);

}  // namespace qec
