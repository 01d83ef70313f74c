#include "qec/quat_mean.hpp"

#include <cmath>

#include "qec/error.hpp"

namespace qec {

QuatSet QuatSet::uniform(std::vector<UnitQuaternion> quats) {
  QuatSet s;
  s.weights.assign(quats.size(), 1.0);
  s.quats = std::move(quats);
  return s;
}

namespace {

std::vector<Vec4> raw(const QuatSet& set) {
  std::vector<Vec4> out;
  out.reserve(set.quats.size());
  for (const auto& q : set.quats) out.push_back(q.vec());
  return out;
}

}  // namespace

AccumulatorM build_m(std::span<const Vec4> quats, std::span<const double> weights) {
  if (quats.empty()) throw Error(ErrorCode::EmptyInput, "quaternion set is empty");
  if (quats.size() != weights.size())
    throw Error(ErrorCode::ShapeMismatch, "quaternion and weight counts differ");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw Error(ErrorCode::InvalidArgument, "weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::AllZeroWeights, "all weights are zero");

  auto m = zero_matrix<4>();
  for (std::size_t i = 0; i < quats.size(); ++i) {
    const Vec4& q = quats[i];
    const double w = weights[i];
    for (int a = 0; a < 4; ++a) {
      const double wa = w * q[a];
      for (int b = a; b < 4; ++b) m[a][b] += wa * q[b];
    }
  }
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < a; ++b) m[a][b] = m[b][a];
  return m;
}

AccumulatorM build_m(const QuatSet& set) {
  const auto q = raw(set);
  return build_m(q, set.weights);
}

DominantEigen eig_sym4_max(const Mat4& m) {
  DominantEigen out;
  out.full = jacobi_eigen<4>(m);
  out.value = out.full.values[0];
  const Vec4 v = out.full.vector(0);
  out.sign = hemisphere_sign(v);
  out.vector = UnitQuaternion::from_components(out.sign * v[0], out.sign * v[1], out.sign * v[2],
                                               out.sign * v[3]);
  const double gap = out.full.values[0] - out.full.values[1];
  out.degenerate = !(gap > kDegenerateGap * std::abs(out.full.values[0]));
  return out;
}

DominantEigen weighted_mean_eigen(std::span<const Vec4> quats, std::span<const double> weights) {
  return eig_sym4_max(build_m(quats, weights));
}

UnitQuaternion weighted_mean(const QuatSet& set) { return eig_sym4_max(build_m(set)).vector; }

void weighted_mean_backward(std::span<const Vec4> quats, std::span<const double> weights,
                            const DominantEigen& eig, const Vec4& upstream,
                            std::span<Vec4> d_quats, std::span<double> d_weights) {
  const auto& e = eig.full;
  const Vec4 v = e.vector(0);
  // dL/dv for the raw Jacobi vector; the canonical output is sign * v.
  const Vec4 g{eig.sign * upstream[0], eig.sign * upstream[1], eig.sign * upstream[2],
               eig.sign * upstream[3]};

  // h = (λ1 I − M)⁺ g with the v-direction removed.
  Vec4 h{0.0, 0.0, 0.0, 0.0};
  for (int k = 1; k < 4; ++k) {
    const Vec4 u = e.vector(k);
    const double coeff = dot(u, g) / (e.values[0] - e.values[k]);
    for (int a = 0; a < 4; ++a) h[a] += coeff * u[a];
  }

  for (std::size_t i = 0; i < quats.size(); ++i) {
    const Vec4& q = quats[i];
    const double qv = dot(q, v);
    const double hq = dot(h, q);
    if (!d_quats.empty()) {
      const double w = weights[i];
      for (int a = 0; a < 4; ++a) d_quats[i][a] += w * (qv * h[a] + hq * v[a]);
    }
    if (!d_weights.empty()) d_weights[i] += hq * qv;
  }
}

MeanGradient weighted_mean_grad(const QuatSet& set, const Vec4& upstream) {
  const auto q = raw(set);
  const DominantEigen eig = weighted_mean_eigen(q, set.weights);
  if (eig.degenerate)
    throw Error(ErrorCode::DegenerateSpectrum, "top eigenvalue is not simple; gradient undefined");
  MeanGradient g;
  g.d_quats.assign(q.size(), Vec4{0.0, 0.0, 0.0, 0.0});
  g.d_weights.assign(q.size(), 0.0);
  weighted_mean_backward(q, set.weights, eig, upstream, g.d_quats, g.d_weights);
  return g;
}

}  // namespace qec
