#include "qec/lrf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qec/error.hpp"

namespace qec {

Vec3 fit_normal(const Patch& patch) {
  if (patch.points.size() < 3) throw Error(ErrorCode::DegeneratePatch, "patch needs at least 3 points");
  const Vec3 mean = centroid(patch.points);
  auto cov = zero_matrix<3>();
  for (const auto& p : patch.points) {
    const Vec3 d = p - mean;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) cov[a][b] += d[a] * d[b];
  }
  const auto eig = jacobi_eigen<3>(cov);
  if (eig.values[1] - eig.values[2] <= 1e-9 * eig.values[0])
    throw Error(ErrorCode::DegeneratePatch, "plane is undefined for this patch");

  Vec3 n = eig.vector(2);
  n = (1.0 / norm(n)) * n;
  const double s = dot(n, patch.center - patch.cloud_centroid);
  if (s < 0.0 || (s == 0.0 && n[2] < 0.0)) n = -1.0 * n;
  return n;
}

Vec3 flare_axis2(const Patch& patch, const Vec3& normal, LrfDiagnostics* diag) {
  const std::size_t k = patch.points.size();
  std::vector<double> dist(k);
  for (std::size_t i = 0; i < k; ++i) dist[i] = norm(patch.points[i] - patch.center);
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });

  if (diag) {
    diag->farthest_margin = k > 1 ? dist[order[0]] - dist[order[1]] : dist[order[0]];
    diag->ambiguous_farthest = k > 1 && diag->farthest_margin <= 1e-9;
    diag->tangent_fallbacks = 0;
    diag->points_outside_radius = 0;
    if (patch.radius > 0.0)
      for (double d : dist)
        if (d > patch.radius) ++diag->points_outside_radius;
  }

  for (std::size_t rank = 0; rank < k; ++rank) {
    const std::size_t idx = order[rank];
    Vec3 v = patch.points[idx] - patch.center;
    v = v - dot(v, normal) * normal;
    const double len = norm(v);
    if (len >= 1e-9) {
      if (diag) diag->farthest_index = idx;
      return (1.0 / len) * v;
    }
    if (diag) ++diag->tangent_fallbacks;
  }
  throw Error(ErrorCode::DegenerateTangent, "no support point has a tangential component");
}

LrfFrame build_lrf(const Patch& patch, LrfDiagnostics* diag) {
  LrfFrame f;
  f.d1 = fit_normal(patch);
  f.d2 = flare_axis2(patch, f.d1, diag);
  f.d3 = cross(f.d1, f.d2);
  const Rotation3 r{{
      {f.d1[0], f.d2[0], f.d3[0]},
      {f.d1[1], f.d2[1], f.d3[1]},
      {f.d1[2], f.d2[2], f.d3[2]},
  }};
  f.q = quat_from_rotation3(r);
  return f;
}

CloudLrfResult compute_cloud_lrfs(const PointCloud& cloud, std::size_t k) {
  if (k < 3) throw Error(ErrorCode::InvalidArgument, "LRF support needs k >= 3");
  if (cloud.size() < k) throw Error(ErrorCode::InsufficientPoints, "cloud has fewer points than k");

  std::vector<std::size_t> all(cloud.size());
  std::iota(all.begin(), all.end(), 0);
  const Grouping groups = group_knn(cloud.points, all, k);
  const Vec3 cc = centroid(cloud.points);

  CloudLrfResult out;
  out.cloud.label = cloud.label;
  out.cloud.source = cloud.source;
  Patch patch;
  patch.cloud_centroid = cc;
  patch.points.resize(k);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    patch.center = cloud.points[i];
    double radius = 0.0;
    for (std::size_t m = 0; m < k; ++m) {
      patch.points[m] = cloud.points[groups.patches[i][m]];
      radius = std::max(radius, norm(patch.points[m] - patch.center));
    }
    patch.radius = radius;
    LrfDiagnostics diag;
    try {
      const LrfFrame f = build_lrf(patch, &diag);
      out.cloud.points.push_back(cloud.points[i]);
      out.cloud.frames.push_back(f.q);
      out.kept.push_back(i);
      if (diag.ambiguous_farthest) ++out.ambiguous;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegeneratePatch && e.code() != ErrorCode::DegenerateTangent) throw;
      ++out.degenerate;
    }
  }
  return out;
}

}  // namespace qec
