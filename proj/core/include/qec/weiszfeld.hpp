#pragma once

// L_q Weiszfeld iterations on quaternion subspaces. Each quaternion q_i spans
// a line through the origin of R^4; the residual of a unit x to it is
// ||(I − q_i q_iᵀ) x|| = sin(δ(x, q_i) / 2), so minimizing Σ residual^q on the
// unit sphere is a robust (L_q) rotation average. q = 2 reduces to the
// chordal mean of quat_mean.

#include <cstdint>
#include <vector>

#include "qec/linalg.hpp"
#include "qec/quat.hpp"

namespace qec {

struct QuatSubspace {
  UnitQuaternion q;

  /// Projector A = I − q qᵀ.
  Mat4 projector() const;
};

/// (I − q qᵀ) p.
Vec4 project_affine(const QuatSubspace& s, const Vec4& p);

struct WeiszfeldProblem {
  std::vector<QuatSubspace> subspaces;  // K > 2
  double q_norm = 1.0;                  // in [1, 2]
  int max_iters = 100;
  double tol = 1e-9;                    // radians

  /// Throws Error{InvalidArgument} on K <= 2 or q_norm outside [1, 2].
  void validate() const;
};

/// Σ_i ||x − q_i q_iᵀ x||^q, the distance of x to each subspace's line.
double cost_lq(const Vec4& x, const WeiszfeldProblem& prob);

/// IRLS weight ||(I − q qᵀ) x||^(q−2), capped at `kWeightCap`.
inline constexpr double kWeightCap = 1e12;
inline constexpr double kExactHitResidual = 1e-12;

struct WeiszfeldResult {
  UnitQuaternion solution;
  std::vector<double> trace;           // cost at x0 followed by the cost after every iteration
  std::vector<UnitQuaternion> iterates;  // x1, x2, ... (x0 excluded)
  int iterations = 0;
  bool converged = false;
  bool perturbed_start = false;        // x0 lay on a subspace and was nudged
  int exact_hits = 0;                  // weights that were capped
};

/// `seed` drives the 1e-6 rad nudge applied when x0 lies on a subspace.
WeiszfeldResult weiszfeld_solve(const WeiszfeldProblem& prob, const Vec4& x0,
                                std::uint64_t seed = 0);

}  // namespace qec
