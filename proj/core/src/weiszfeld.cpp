#include "qec/weiszfeld.hpp"

#include <cmath>
#include <random>

#include "qec/error.hpp"
#include "qec/quat_mean.hpp"

namespace qec {

Mat4 QuatSubspace::projector() const {
  auto a = identity_matrix<4>();
  const Vec4& v = q.vec();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) a[i][j] -= v[i] * v[j];
  return a;
}

Vec4 project_affine(const QuatSubspace& s, const Vec4& p) {
  const Vec4& q = s.q.vec();
  const double d = dot(q, p);
  return {p[0] - d * q[0], p[1] - d * q[1], p[2] - d * q[2], p[3] - d * q[3]};
}

void WeiszfeldProblem::validate() const {
  if (subspaces.size() <= 2)
    throw Error(ErrorCode::InvalidArgument, "Weiszfeld needs more than two subspaces");
  if (!(q_norm >= 1.0 && q_norm <= 2.0))
    throw Error(ErrorCode::InvalidArgument, "q_norm must lie in [1, 2]");
}

namespace {

double residual(const QuatSubspace& s, const Vec4& x) { return norm(project_affine(s, x)); }

}  // namespace

double cost_lq(const Vec4& x, const WeiszfeldProblem& prob) {
  double c = 0.0;
  for (const auto& s : prob.subspaces) c += std::pow(residual(s, x), prob.q_norm);
  return c;
}

WeiszfeldResult weiszfeld_solve(const WeiszfeldProblem& prob, const Vec4& x0, std::uint64_t seed) {
  prob.validate();
  WeiszfeldResult out;

  UnitQuaternion x = UnitQuaternion::from_vec4(x0);
  bool on_subspace = false;
  for (const auto& s : prob.subspaces)
    if (residual(s, x.vec()) < kExactHitResidual) on_subspace = true;
  if (on_subspace) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    const Vec3 axis{n01(rng), n01(rng), n01(rng)};
    x = hamilton_product(UnitQuaternion::from_axis_angle(axis, 1e-6), x);
    out.perturbed_start = true;
  }

  const std::size_t k = prob.subspaces.size();
  std::vector<Vec4> quats(k);
  for (std::size_t i = 0; i < k; ++i) quats[i] = prob.subspaces[i].q.vec();
  std::vector<double> weights(k);

  out.trace.push_back(cost_lq(x.vec(), prob));
  for (int it = 0; it < prob.max_iters; ++it) {
    for (std::size_t i = 0; i < k; ++i) {
      const double r = residual(prob.subspaces[i], x.vec());
      if (prob.q_norm == 2.0) {
        weights[i] = 1.0;
      } else if (r < kExactHitResidual) {
        weights[i] = kWeightCap;
        ++out.exact_hits;
      } else {
        weights[i] = std::min(std::pow(r, prob.q_norm - 2.0), kWeightCap);
      }
    }
    const UnitQuaternion next = weighted_mean_eigen(quats, weights).vector;
    const double step = geodesic_distance(next, x);
    x = next;
    out.iterates.push_back(x);
    out.trace.push_back(cost_lq(x.vec(), prob));
    out.iterations = it + 1;
    if (step < prob.tol) {
      out.converged = true;
      break;
    }
  }
  out.solution = x;
  return out;
}

}  // namespace qec
