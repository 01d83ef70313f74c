#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "qec/error.hpp"
#include "qec/pointcloud.hpp"
#include "test_support.hpp"

using namespace qec;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("qec_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n) {
  std::vector<Vec3> p(n);
  for (auto& x : p) x = qec::test::random_vec3(rng);
  return p;
}

double min_pairwise(const std::vector<Vec3>& pts, const std::vector<std::size_t>& idx) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) m = std::min(m, norm(pts[idx[a]] - pts[idx[b]]));
  return m;
}

TriMesh unit_square() {
  TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

}  // namespace

TEST_CASE("OFF parsing") {
  const TriMesh m = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n");
  CHECK(m.vertices.size() == 3);
  CHECK(m.faces.size() == 1);

  const TriMesh fused = parse_off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n");
  CHECK(fused.vertices.size() == 4);
  CHECK(fused.faces.size() == 2);

  const TriMesh comments = parse_off("OFF\n# comment\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n\n3 0 1 2\n");
  CHECK(comments.faces.size() == 1);

  const TriMesh degenerate = parse_off("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n3 0 0 1\n");
  CHECK(degenerate.faces.size() == 1);
  CHECK(degenerate.dropped_faces == 1);

  try {
    parse_off("OFF\n3 x 0\n0 0 0\n");
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"), Error);
  CHECK_THROWS_AS(parse_off("PLY\n"), Error);
  try {
    parse_off("OFF\n0 0 0\n");
    FAIL("expected EmptyGeometry");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyGeometry);
  }
}

TEST_CASE("PLY and XYZ parsing") {
  const TriMesh m = parse_ply_ascii(
      "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
      "element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n");
  CHECK(m.vertices.size() == 3);
  CHECK(m.faces.size() == 1);
  CHECK_THROWS_AS(parse_ply_ascii("ply\nformat binary_little_endian 1.0\nend_header\n"), Error);

  const PointCloud c = parse_xyz("0 0 0\n1 2 3\n");
  CHECK(c.size() == 2);
  CHECK(c.points[1][2] == 3.0);
  CHECK(parse_xyz("# header\n\n1 1 1\n").size() == 1);
  CHECK_THROWS_AS(parse_xyz("1 2\n"), Error);
}

TEST_CASE("writers round-trip exactly") {
  const fs::path dir = temp_dir("io");
  std::mt19937_64 rng(1);
  PointCloud cloud;
  cloud.points = random_points(rng, 50);
  write_xyz(dir / "a.xyz", cloud);
  const PointCloud back = load_xyz(dir / "a.xyz");
  REQUIRE(back.size() == cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(back.points[i] == cloud.points[i]);

  TriMesh mesh = unit_square();
  mesh.vertices[2] = {1.0 / 3.0, std::numbers::pi, -1e-17};
  write_off(dir / "m.off", mesh);
  write_ply_ascii(dir / "m.ply", mesh);
  for (const TriMesh& m : {load_off(dir / "m.off"), load_ply_ascii(dir / "m.ply")}) {
    REQUIRE(m.vertices.size() == mesh.vertices.size());
    for (std::size_t i = 0; i < m.vertices.size(); ++i) CHECK(m.vertices[i] == mesh.vertices[i]);
    CHECK(m.faces == mesh.faces);
  }
  CHECK(is_mesh_path("x.off"));
  CHECK(is_mesh_path("x.PLY"));
  CHECK_FALSE(is_mesh_path("x.xyz"));
  fs::remove_all(dir);
}

TEST_CASE("surface sampling") {
  const PointCloud s = sample_surface(unit_square(), 10000, 3);
  std::size_t lower = 0;
  for (const auto& p : s.points) {
    CHECK(p[2] == 0.0);
    if (p[0] > p[1]) ++lower;
  }
  CHECK(std::abs(static_cast<double>(lower) / 10000.0 - 0.5) <= 0.025);

  TriMesh tri;
  tri.vertices = {{0, 0, 0}, {2, 0, 0}, {0, 1, 0}};
  tri.faces = {{0, 1, 2}};
  for (const auto& p : sample_surface(tri, 500, 4).points) {
    CHECK(p[0] >= -1e-15);
    CHECK(p[1] >= -1e-15);
    CHECK(p[0] / 2.0 + p[1] <= 1.0 + 1e-12);
  }

  const PointCloud a = sample_surface(unit_square(), 100, 9), b = sample_surface(unit_square(), 100, 9);
  CHECK(a.points == b.points);

  TriMesh flat;
  flat.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  flat.faces = {{0, 1, 2}};
  try {
    sample_surface(flat, 10, 1);
    FAIL("expected ZeroArea");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroArea);
  }
}

TEST_CASE("farthest point sampling") {
  const std::vector<Vec3> square{{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  const auto two = farthest_point_sampling_from(square, 2, 0);
  CHECK(two == std::vector<std::size_t>{0, 2});

  std::mt19937_64 rng(2);
  const auto pts = random_points(rng, 40);
  auto all = farthest_point_sampling(pts, 40, 5);
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 40; ++i) CHECK(all[i] == i);
  CHECK_THROWS_AS(farthest_point_sampling(pts, 41, 0), Error);
  CHECK(farthest_point_sampling(pts, 10, 5) == farthest_point_sampling(pts, 10, 5));

  for (int t = 0; t < 20; ++t) {
    const auto cloud = random_points(rng, 200);
    const auto fps = farthest_point_sampling(cloud, 16, t);
    std::vector<std::size_t> rnd(200);
    std::iota(rnd.begin(), rnd.end(), 0);
    std::shuffle(rnd.begin(), rnd.end(), rng);
    rnd.resize(16);
    CHECK(min_pairwise(cloud, fps) >= min_pairwise(cloud, rnd));
  }
}

TEST_CASE("knn grouping") {
  std::vector<Vec3> grid;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y) grid.push_back({double(x), double(y), 0.0});
  std::vector<std::size_t> centers{0, 12, 24};

  const Grouping one = group_knn(grid, centers, 1);
  for (std::size_t c = 0; c < centers.size(); ++c) CHECK(one.patches[c] == std::vector<std::size_t>{centers[c]});

  // Center (2,2) = index 12: itself, then the four axis neighbors by index.
  const Grouping g = group_knn(grid, centers, 5);
  CHECK(g.patches[1] == std::vector<std::size_t>{12, 7, 11, 13, 17});

  std::mt19937_64 rng(3);
  const auto pts = random_points(rng, 100);
  const std::vector<std::size_t> cs{3, 50, 97};
  const Grouping knn = group_knn(pts, cs, 9);
  for (std::size_t c = 0; c < cs.size(); ++c) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < pts.size(); ++i) d.push_back({norm(pts[i] - pts[cs[c]]), i});
    std::sort(d.begin(), d.end());
    for (std::size_t k = 0; k < 9; ++k) CHECK(knn.patches[c][k] == d[k].second);
  }

  const UnitQuaternion g2 = qec::test::random_quat(rng);
  PointCloud cloud;
  cloud.points = pts;
  const PointCloud moved = transform_cloud(cloud, g2, {1, -2, 3});
  CHECK(group_knn(moved.points, cs, 9).patches == knn.patches);
  CHECK(farthest_point_sampling(moved.points, 12, 4) == farthest_point_sampling(pts, 12, 4));
  CHECK_THROWS_AS(group_knn(pts, cs, 101), Error);
}

TEST_CASE("patch dropout") {
  std::mt19937_64 rng(4);
  PointCloud cloud;
  cloud.points = random_points(rng, 1000);
  CHECK(patch_dropout(cloud, 0.0, 1).points == cloud.points);
  const PointCloud half = patch_dropout(cloud, 0.5, 1);
  CHECK(half.size() >= 450);
  CHECK(half.size() <= 550);
  CHECK(patch_dropout(cloud, 0.5, 1).points == half.points);
  CHECK_THROWS_AS(patch_dropout(cloud, 1.0, 1), Error);
}

TEST_CASE("toy dataset") {
  ToyDatasetConfig cfg;
  cfg.classes = {ToyClass::ElongatedBox, ToyClass::LShape, ToyClass::Cone};
  cfg.per_class = 10;
  cfg.noise_sigma = 0.005;
  cfg.points_per_cloud = 256;
  cfg.seed = 11;
  const auto data = make_toy_dataset(cfg);
  REQUIRE(data.size() == 30);
  CHECK(data[0].label == 0);
  CHECK(data[29].label == 2);
  CHECK(data[5].cloud.size() == 256);
  const auto again = make_toy_dataset(cfg);
  CHECK(again[17].cloud.points == data[17].cloud.points);

  const UnitQuaternion g = random_rotation(3);
  const ToySample ar = rotate_sample(data[4], g);
  CHECK(qec::test::chordal(ar.orientation, g) <= 1e-12);
  for (std::size_t i = 0; i < ar.cloud.size(); ++i) {
    const Vec3 expect = rotate_point(g, data[4].cloud.points[i]);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(ar.cloud.points[i][k] - expect[k]) <= 1e-12);
  }
  for (const auto& name : toy_class_names()) CHECK(toy_class_names()[static_cast<int>(toy_class_from_name(name))] == name);
  CHECK_THROWS_AS(toy_class_from_name("sphere"), Error);
}

TEST_CASE("manifest round trip") {
  const fs::path dir = temp_dir("manifest");
  Manifest m;
  m.classes = {"a", "b"};
  m.samples.push_back({dir / "clouds" / "x.xyz", 0, "train", std::nullopt, std::nullopt});
  m.samples.push_back({dir / "clouds" / "y.xyz", 1, "test", random_rotation(2), dir / "clouds" / "y_pair.xyz"});
  save_manifest(dir / "manifest.json", m);
  const Manifest back = load_manifest(dir / "manifest.json");
  CHECK(back.classes == m.classes);
  REQUIRE(back.samples.size() == 2);
  CHECK(fs::weakly_canonical(back.samples[0].path) == fs::weakly_canonical(m.samples[0].path));
  CHECK(back.split("test").size() == 1);
  CHECK(back.samples[1].pose.has_value());
  CHECK(qec::test::chordal(*back.samples[1].pose, *m.samples[1].pose) <= 1e-12);
  CHECK(back.samples[1].pair.has_value());

  atomic_write(dir / "bad.json", R"({"version":1,"classes":["a"],"samples":[{"path":"x","label":3,"split":"train"}]})");
  CHECK_THROWS_AS(load_manifest(dir / "bad.json"), Error);
  fs::remove_all(dir);
}
