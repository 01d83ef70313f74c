#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qec/linalg.hpp"
#include "qec/quat.hpp"

namespace qec {

struct PointCloud {
  std::vector<Vec3> points;
  /// Per-point LRF quaternions; empty or one per point.
  std::vector<UnitQuaternion> frames;
  std::optional<int> label;
  std::string source;

  std::size_t size() const { return points.size(); }
  bool has_frames() const { return !frames.empty() && frames.size() == points.size(); }
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;
  /// Zero-area faces dropped while loading.
  std::size_t dropped_faces = 0;
};

/// Accepts both the "OFF\nV F E" and the fused "OFFV F E" headers. Polygons
/// are fan-triangulated. Throws Error{ParseError} (message carries the line
/// number) or Error{EmptyGeometry}.
TriMesh load_off(const std::filesystem::path& path);
TriMesh parse_off(const std::string& text);
/// ASCII PLY only; reads x/y/z of the vertex element and, when present, a
/// face list property.
TriMesh load_ply_ascii(const std::filesystem::path& path);
TriMesh parse_ply_ascii(const std::string& text);
/// One "x y z" triple per line; blank lines and '#' comments are skipped.
PointCloud load_xyz(const std::filesystem::path& path);
PointCloud parse_xyz(const std::string& text);

/// Writers print 17 significant digits so a read reproduces every double.
void write_xyz(const std::filesystem::path& path, const PointCloud& cloud);
void write_off(const std::filesystem::path& path, const TriMesh& mesh);
void write_ply_ascii(const std::filesystem::path& path, const TriMesh& mesh);

/// Loads by extension: .off, .ply (mesh, sampled by the caller) or .xyz.
bool is_mesh_path(const std::filesystem::path& path);

/// Writes through a sibling temporary file and renames it into place.
void atomic_write(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c);

/// Area-uniform surface sample. Throws Error{ZeroArea}.
PointCloud sample_surface(const TriMesh& mesh, std::size_t n, std::uint64_t seed);

/// Greedy farthest point sampling starting at a seed-chosen index; ties go to
/// the lowest index. Throws Error{TooManyRequested} when n > N.
std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& points, std::size_t n,
                                                 std::uint64_t seed);
/// Same, with an explicit start index.
std::vector<std::size_t> farthest_point_sampling_from(const std::vector<Vec3>& points,
                                                      std::size_t n, std::size_t start);

struct Grouping {
  std::vector<std::size_t> centers;
  /// patches[c] holds exactly K indices ordered by (distance, index); the center itself comes first.
  std::vector<std::vector<std::size_t>> patches;
};

/// Exact brute-force K nearest neighbors. Throws Error{TooManyRequested} when K > N.
Grouping group_knn(const std::vector<Vec3>& points, const std::vector<std::size_t>& centers,
                   std::size_t k);

/// Removes whole neighborhoods around random seed points until
/// round(fraction * N) points are gone. Frames stay aligned with points.
PointCloud patch_dropout(const PointCloud& cloud, double fraction, std::uint64_t seed);

PointCloud transform_cloud(const PointCloud& cloud, const UnitQuaternion& g,
                           const Vec3& translation = {0.0, 0.0, 0.0});
Vec3 centroid(const std::vector<Vec3>& points);

// ---------------------------------------------------------------------------
// Procedural toy shapes

enum class ToyClass { ElongatedBox, LShape, Cone, TetraFlag };

const std::vector<std::string>& toy_class_names();
ToyClass toy_class_from_name(const std::string& name);

/// Deterministic template mesh of a class; none has a rotational symmetry.
TriMesh toy_template(ToyClass cls);

struct ToySample {
  PointCloud cloud;
  TriMesh mesh;  // jittered instance mesh, kept for resampling
  int label = 0;
  UnitQuaternion orientation;  // identity for NR samples
};

struct ToyDatasetConfig {
  std::vector<ToyClass> classes;
  std::size_t per_class = 10;
  double noise_sigma = 0.0;
  std::size_t points_per_cloud = 1024;
  std::uint64_t seed = 0;
};

/// Class-major order: sample i belongs to class i / per_class.
std::vector<ToySample> make_toy_dataset(const ToyDatasetConfig& cfg);

/// AR copy: the same points rotated by g, orientation set to g.
ToySample rotate_sample(const ToySample& sample, const UnitQuaternion& g);

UnitQuaternion random_rotation(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset manifest (JSON):
// { "version": 1, "classes": [names...],
//   "samples": [ { "path": "...", "label": 0, "split": "train",
//                  "pose": [w,x,y,z] (optional), "pair": "path" (optional) } ] }

struct ManifestEntry {
  std::filesystem::path path;
  int label = -1;
  std::string split;
  std::optional<UnitQuaternion> pose;
  std::optional<std::filesystem::path> pair;
};

struct Manifest {
  std::vector<std::string> classes;
  std::vector<ManifestEntry> samples;

  std::vector<ManifestEntry> split(const std::string& name) const;
};

/// Relative sample paths are resolved against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

}  // namespace qec
