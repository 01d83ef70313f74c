#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "qec/quat.hpp"

namespace qec::test {

inline UnitQuaternion random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return UnitQuaternion::from_components(n(rng), n(rng), n(rng), n(rng));
}

inline Vec3 random_vec3(std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  return {n(rng), n(rng), n(rng)};
}

/// Quaternion rotated by `angle` about a random axis away from q.
inline UnitQuaternion perturb(const UnitQuaternion& q, double angle, std::mt19937_64& rng) {
  Vec3 axis = random_vec3(rng);
  axis = (1.0 / norm(axis)) * axis;
  return UnitQuaternion::from_axis_angle(axis, angle) * q;
}

inline double max_abs_diff(const Vec4& a, const Vec4& b) {
  double m = 0.0;
  for (int i = 0; i < 4; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Sign-invariant chordal distance, usable below the acos resolution floor.
inline double chordal(const UnitQuaternion& a, const UnitQuaternion& b) {
  double m = 0.0, p = 0.0;
  for (int i = 0; i < 4; ++i) {
    m += (a.vec()[i] - b.vec()[i]) * (a.vec()[i] - b.vec()[i]);
    p += (a.vec()[i] + b.vec()[i]) * (a.vec()[i] + b.vec()[i]);
  }
  return std::sqrt(std::min(m, p));
}

/// ||a − n|| / max(||a||, ||n||, floor) over whole gradient vectors.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-10) {
  double d = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

}  // namespace qec::test
