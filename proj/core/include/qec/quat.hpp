#pragma once

// Quaternion algebra on the unit sphere S^3 (Hamilton convention, scalar first).

#include <iosfwd>

#include "qec/linalg.hpp"

namespace qec {

/// A unit quaternion (w, x, y, z). Every factory normalizes, so the unit-norm
/// invariant holds for all live values. The sign is preserved unless
/// `canonicalize_hemisphere` is applied.
class UnitQuaternion {
 public:
  /// Identity rotation.
  constexpr UnitQuaternion() = default;

  /// Normalizes (w, x, y, z). Throws Error{ZeroNormVector} when the norm is below 1e-300.
  static UnitQuaternion from_components(double w, double x, double y, double z);
  static UnitQuaternion from_vec4(const Vec4& v);
  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle);
  static constexpr UnitQuaternion identity() { return {}; }

  constexpr double w() const { return c_[0]; }
  constexpr double x() const { return c_[1]; }
  constexpr double y() const { return c_[2]; }
  constexpr double z() const { return c_[3]; }
  constexpr const Vec4& vec() const { return c_; }
  constexpr double operator[](std::size_t i) const { return c_[i]; }

  UnitQuaternion operator-() const;

  /// Rotation angle in [0, 2*pi).
  double angle() const;

 private:
  explicit constexpr UnitQuaternion(const Vec4& c) : c_(c) {}

  Vec4 c_{1.0, 0.0, 0.0, 0.0};
};

std::ostream& operator<<(std::ostream& os, const UnitQuaternion& q);

/// 4x4 left-multiplication matrix T(q): T(p) r == p ∘ r.
using QuatMatrix4 = Mat4;

/// Proper orthonormal 3x3 rotation matrix.
using Rotation3 = Mat3;

/// Raw (non-normalizing) Hamilton product of arbitrary 4-vectors.
Vec4 hamilton(const Vec4& p, const Vec4& r);
Vec4 conjugate(const Vec4& q);

UnitQuaternion hamilton_product(const UnitQuaternion& p, const UnitQuaternion& r);
inline UnitQuaternion operator*(const UnitQuaternion& p, const UnitQuaternion& r) {
  return hamilton_product(p, r);
}

QuatMatrix4 to_matrix(const UnitQuaternion& q);
QuatMatrix4 to_matrix(const Vec4& q);

UnitQuaternion conjugate(const UnitQuaternion& q);
UnitQuaternion inverse(const UnitQuaternion& q);

/// 2 acos(|<q1,q2>|), radians in [0, pi]. Antipodal-invariant; evaluated in
/// chord form so tiny angles keep full precision.
double geodesic_distance(const UnitQuaternion& q1, const UnitQuaternion& q2);
double geodesic_distance(const Vec4& q1, const Vec4& q2);

/// Vector part of q ∘ (0, x) ∘ q̄.
Vec3 rotate_point(const UnitQuaternion& q, const Vec3& x);

/// Maps q to the northern hemisphere w > 0. At w == 0 the first nonzero of
/// (x, y, z) is made positive.
UnitQuaternion canonicalize_hemisphere(const UnitQuaternion& q);
/// Sign (+1 or -1) that `canonicalize_hemisphere` would apply.
double hemisphere_sign(const Vec4& q);

/// qB ∘ qA⁻¹: the rotation that takes frame A onto frame B.
UnitQuaternion relative_rotation(const UnitQuaternion& qa, const UnitQuaternion& qb);

/// Relative angular error: geodesic distance / pi, in [0, 1].
double rae(const UnitQuaternion& estimate, const UnitQuaternion& truth);

/// Throws Error{NonOrthonormalInput} when ||RᵀR − I||_inf > 1e-6 or det(R) <= 0.
UnitQuaternion quat_from_rotation3(const Rotation3& r);
Rotation3 rotation3_from_quat(const UnitQuaternion& q);

}  // namespace qec
