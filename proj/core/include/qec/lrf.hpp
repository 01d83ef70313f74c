#pragma once

// Local reference frames: plane-fit normal as the first axis, FLARE-style
// tangent direction towards the farthest support point as the second.
//
// Convention: the frame's rotation matrix has columns (d1, d2, d3), i.e. the
// LRF quaternion rotates the canonical basis (e1, e2, e3) onto (d1, d2, d3),
// so q⁻¹ ∘ x expresses a world vector x in local coordinates.

#include <cstddef>
#include <vector>

#include "qec/linalg.hpp"
#include "qec/pointcloud.hpp"
#include "qec/quat.hpp"

namespace qec {

struct Patch {
  Vec3 center{0.0, 0.0, 0.0};
  std::vector<Vec3> points;  // world coordinates, K >= 3
  double radius = 0.0;
  /// Centroid of the whole cloud; orients the normal outwards.
  Vec3 cloud_centroid{0.0, 0.0, 0.0};
};

struct LrfFrame {
  Vec3 d1{1.0, 0.0, 0.0};
  Vec3 d2{0.0, 1.0, 0.0};
  Vec3 d3{0.0, 0.0, 1.0};
  UnitQuaternion q;
};

struct LrfDiagnostics {
  bool ambiguous_farthest = false;
  /// Distance gap between the chosen farthest point and the runner-up.
  double farthest_margin = 0.0;
  int tangent_fallbacks = 0;
  std::size_t farthest_index = 0;
  std::size_t points_outside_radius = 0;
};

/// Smallest-eigenvalue eigenvector of the centered covariance, oriented to
/// have nonnegative dot with (center − cloud_centroid); exact ties go to +z.
/// Throws Error{DegeneratePatch} when the two smallest eigenvalues coincide
/// within 1e-9 of the largest (line-like or point-like support).
Vec3 fit_normal(const Patch& patch);

/// Tangent-plane projection of (p_max − center), normalized. Falls back to the
/// next-farthest point when the projection is shorter than 1e-9. Throws
/// Error{DegenerateTangent} when no candidate has a tangential component.
Vec3 flare_axis2(const Patch& patch, const Vec3& normal, LrfDiagnostics* diag = nullptr);

LrfFrame build_lrf(const Patch& patch, LrfDiagnostics* diag = nullptr);

struct CloudLrfResult {
  /// Input points that produced a frame, with `frames` filled in.
  PointCloud cloud;
  /// Indices into the input cloud of the points kept.
  std::vector<std::size_t> kept;
  std::size_t degenerate = 0;
  std::size_t ambiguous = 0;
};

/// One LRF per point from its k nearest neighbors (self included).
/// Points whose patch is degenerate are dropped and counted.
CloudLrfResult compute_cloud_lrfs(const PointCloud& cloud, std::size_t k);

}  // namespace qec
