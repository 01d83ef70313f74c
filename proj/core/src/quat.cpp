#include "qec/quat.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "qec/error.hpp"

namespace qec {

UnitQuaternion UnitQuaternion::from_components(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 1e-300)) throw Error(ErrorCode::ZeroNormVector, "cannot normalize a zero quaternion");
  return UnitQuaternion(Vec4{w / n, x / n, y / n, z / n});
}

UnitQuaternion UnitQuaternion::from_vec4(const Vec4& v) {
  return from_components(v[0], v[1], v[2], v[3]);
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis, double angle) {
  const double n = norm(axis);
  if (!(n > 1e-300)) throw Error(ErrorCode::ZeroNormVector, "rotation axis has zero length");
  const double s = std::sin(0.5 * angle) / n;
  return from_components(std::cos(0.5 * angle), axis[0] * s, axis[1] * s, axis[2] * s);
}

UnitQuaternion UnitQuaternion::operator-() const {
  return UnitQuaternion(Vec4{-c_[0], -c_[1], -c_[2], -c_[3]});
}

double UnitQuaternion::angle() const {
  return 2.0 * std::atan2(std::sqrt(c_[1] * c_[1] + c_[2] * c_[2] + c_[3] * c_[3]), c_[0]);
}

std::ostream& operator<<(std::ostream& os, const UnitQuaternion& q) {
  return os << '(' << q.w() << ", " << q.x() << ", " << q.y() << ", " << q.z() << ')';
}

Vec4 hamilton(const Vec4& p, const Vec4& r) {
  // [p1 r1 - vp.vr ; p1 vr + r1 vp + vp x vr]
  return {
      p[0] * r[0] - p[1] * r[1] - p[2] * r[2] - p[3] * r[3],
      p[0] * r[1] + r[0] * p[1] + p[2] * r[3] - p[3] * r[2],
      p[0] * r[2] + r[0] * p[2] + p[3] * r[1] - p[1] * r[3],
      p[0] * r[3] + r[0] * p[3] + p[1] * r[2] - p[2] * r[1],
  };
}

Vec4 conjugate(const Vec4& q) { return {q[0], -q[1], -q[2], -q[3]}; }

UnitQuaternion hamilton_product(const UnitQuaternion& p, const UnitQuaternion& r) {
  return UnitQuaternion::from_vec4(hamilton(p.vec(), r.vec()));
}

QuatMatrix4 to_matrix(const Vec4& q) {
  const double a = q[0], b = q[1], c = q[2], d = q[3];
  return {{
      {a, -b, -c, -d},
      {b, a, -d, c},
      {c, d, a, -b},
      {d, -c, b, a},
  }};
}

QuatMatrix4 to_matrix(const UnitQuaternion& q) { return to_matrix(q.vec()); }

UnitQuaternion conjugate(const UnitQuaternion& q) {
  return UnitQuaternion::from_vec4(conjugate(q.vec()));
}

UnitQuaternion inverse(const UnitQuaternion& q) { return conjugate(q); }

// Same value as 2 acos|<q1,q2>| for unit inputs, via the shorter chord
// ||q1 -+ q2|| = 2 sin(delta/4). acos loses half the digits near zero.
double geodesic_distance(const Vec4& q1, const Vec4& q2) {
  double minus = 0.0, plus = 0.0;
  for (int i = 0; i < 4; ++i) {
    minus += (q1[i] - q2[i]) * (q1[i] - q2[i]);
    plus += (q1[i] + q2[i]) * (q1[i] + q2[i]);
  }
  const double chord = std::sqrt(std::min(minus, plus));
  return 4.0 * std::asin(std::min(0.5 * chord, std::sqrt(0.5)));
}

double geodesic_distance(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  return geodesic_distance(q1.vec(), q2.vec());
}

Vec3 rotate_point(const UnitQuaternion& q, const Vec3& x) {
  const Vec4 p{0.0, x[0], x[1], x[2]};
  const Vec4 r = hamilton(hamilton(q.vec(), p), conjugate(q.vec()));
  return {r[1], r[2], r[3]};
}

double hemisphere_sign(const Vec4& q) {
  for (double c : q) {
    if (c > 0.0) return 1.0;
    if (c < 0.0) return -1.0;
  }
  return 1.0;
}

UnitQuaternion canonicalize_hemisphere(const UnitQuaternion& q) {
  return hemisphere_sign(q.vec()) < 0.0 ? -q : q;
}

UnitQuaternion relative_rotation(const UnitQuaternion& qa, const UnitQuaternion& qb) {
  return hamilton_product(qb, inverse(qa));
}

double rae(const UnitQuaternion& estimate, const UnitQuaternion& truth) {
  return geodesic_distance(estimate, truth) / std::numbers::pi;
}

Rotation3 rotation3_from_quat(const UnitQuaternion& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  return {{
      {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
      {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
      {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)},
  }};
}

UnitQuaternion quat_from_rotation3(const Rotation3& r) {
  const Rotation3 rtr = matmul(transpose(r), r);
  double worst = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      worst = std::max(worst, std::abs(rtr[i][j] - (i == j ? 1.0 : 0.0)));
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  if (worst > 1e-6 || det <= 0.0)
    throw Error(ErrorCode::NonOrthonormalInput, "rotation matrix is not proper orthonormal");

  // Shepperd: pivot on the largest of (trace, diagonal) for stability.
  const double tr = r[0][0] + r[1][1] + r[2][2];
  Vec4 q{};
  if (tr >= r[0][0] && tr >= r[1][1] && tr >= r[2][2]) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    q = {0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s};
  } else if (r[0][0] >= r[1][1] && r[0][0] >= r[2][2]) {
    const double s = 2.0 * std::sqrt(1.0 + r[0][0] - r[1][1] - r[2][2]);
    q = {(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s};
  } else if (r[1][1] >= r[2][2]) {
    const double s = 2.0 * std::sqrt(1.0 + r[1][1] - r[0][0] - r[2][2]);
    q = {(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r[2][2] - r[0][0] - r[1][1]);
    q = {(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s};
  }
  return canonicalize_hemisphere(UnitQuaternion::from_vec4(q));
}

}  // namespace qec
