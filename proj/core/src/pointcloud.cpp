#include "qec/pointcloud.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "qec/error.hpp"

namespace qec {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// File helpers

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void atomic_write(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot rename into " + path.string() + ": " + ec.message());
}

namespace {

struct LineReader {
  std::istringstream in;
  int line_no = 0;

  explicit LineReader(const std::string& text) : in(text) {}

  // Next line that is neither blank nor a '#' comment.
  bool next(std::string& line) {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": " + what);
  }
};

std::vector<double> parse_numbers(const std::string& line, const LineReader& r) {
  std::istringstream ss(line);
  std::vector<double> out;
  std::string tok;
  while (ss >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') r.fail("not a number: '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

std::size_t as_count(double v, const LineReader& r) {
  if (v < 0.0 || v != std::floor(v)) r.fail("expected a non-negative integer");
  return static_cast<std::size_t>(v);
}

void add_polygon(TriMesh& mesh, const std::vector<std::uint32_t>& poly) {
  for (std::size_t k = 1; k + 1 < poly.size(); ++k) {
    const std::array<std::uint32_t, 3> f{poly[0], poly[k], poly[k + 1]};
    if (triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]) > 0.0)
      mesh.faces.push_back(f);
    else
      ++mesh.dropped_faces;
  }
}

std::string fmt17(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

}  // namespace

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * norm(cross(b - a, c - a));
}

TriMesh parse_off(const std::string& text) {
  LineReader r(text);
  std::string line;
  if (!r.next(line)) throw Error(ErrorCode::EmptyGeometry, "empty OFF file");
  const auto start = line.find_first_not_of(" \t");
  if (line.compare(start, 3, "OFF") != 0) r.fail("missing OFF header");
  std::string rest = line.substr(start + 3);
  if (rest.find_first_not_of(" \t") == std::string::npos) {
    if (!r.next(rest)) r.fail("missing count line");
  }
  const auto counts = parse_numbers(rest, r);
  if (counts.size() < 2) r.fail("count line needs V F [E]");
  const std::size_t nv = as_count(counts[0], r);
  const std::size_t nf = as_count(counts[1], r);

  TriMesh mesh;
  mesh.vertices.reserve(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    if (!r.next(line)) r.fail("unexpected end of file in vertex block");
    const auto v = parse_numbers(line, r);
    if (v.size() < 3) r.fail("vertex needs three coordinates");
    mesh.vertices.push_back({v[0], v[1], v[2]});
  }
  std::vector<std::uint32_t> poly;
  for (std::size_t i = 0; i < nf; ++i) {
    if (!r.next(line)) r.fail("unexpected end of file in face block");
    const auto f = parse_numbers(line, r);
    if (f.empty()) r.fail("empty face");
    const std::size_t n = as_count(f[0], r);
    if (n < 3 || f.size() < n + 1) r.fail("face index count mismatch");
    poly.clear();
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = as_count(f[k + 1], r);
      if (idx >= nv) r.fail("face index out of range");
      poly.push_back(static_cast<std::uint32_t>(idx));
    }
    add_polygon(mesh, poly);
  }
  if (mesh.vertices.empty()) throw Error(ErrorCode::EmptyGeometry, "OFF file has no vertices");
  return mesh;
}

TriMesh load_off(const fs::path& path) { return parse_off(read_file(path)); }

TriMesh parse_ply_ascii(const std::string& text) {
  LineReader r(text);
  std::string line;
  if (!r.next(line) || line.rfind("ply", 0) != 0) r.fail("missing ply magic");

  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
    int list_prop = -1;
  };
  std::vector<Element> elements;
  bool ascii = false;
  while (true) {
    if (!r.next(line)) r.fail("header not terminated");
    std::istringstream ss(line);
    std::string kw;
    ss >> kw;
    if (kw == "end_header") break;
    if (kw == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") r.fail("binary PLY is not supported");
      ascii = true;
    } else if (kw == "element") {
      Element e;
      double count = 0;
      ss >> e.name >> count;
      e.count = as_count(count, r);
      elements.push_back(e);
    } else if (kw == "property") {
      if (elements.empty()) r.fail("property before element");
      std::string type;
      ss >> type;
      std::string name;
      if (type == "list") {
        std::string ct, it;
        ss >> ct >> it >> name;
        elements.back().list_prop = static_cast<int>(elements.back().props.size());
      } else {
        ss >> name;
      }
      elements.back().props.push_back(name);
    } else if (kw != "comment" && kw != "obj_info") {
      r.fail("unknown header keyword '" + kw + "'");
    }
  }
  if (!ascii) r.fail("missing format line");

  TriMesh mesh;
  std::vector<std::uint32_t> poly;
  for (const auto& e : elements) {
    int ix = -1, iy = -1, iz = -1;
    for (int k = 0; k < static_cast<int>(e.props.size()); ++k) {
      if (e.props[k] == "x") ix = k;
      if (e.props[k] == "y") iy = k;
      if (e.props[k] == "z") iz = k;
    }
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!r.next(line)) r.fail("unexpected end of file in element '" + e.name + "'");
      const auto v = parse_numbers(line, r);
      if (e.name == "vertex") {
        if (ix < 0 || iy < 0 || iz < 0) r.fail("vertex element lacks x/y/z");
        if (e.list_prop >= 0) r.fail("list properties on vertices are not supported");
        if (v.size() < e.props.size()) r.fail("too few vertex properties");
        mesh.vertices.push_back({v[ix], v[iy], v[iz]});
      } else if (e.name == "face" && e.list_prop == 0) {
        if (v.empty()) r.fail("empty face");
        const std::size_t n = as_count(v[0], r);
        if (n < 3 || v.size() < n + 1) r.fail("face index count mismatch");
        poly.clear();
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = as_count(v[k + 1], r);
          if (idx >= mesh.vertices.size()) r.fail("face index out of range");
          poly.push_back(static_cast<std::uint32_t>(idx));
        }
        add_polygon(mesh, poly);
      }
    }
  }
  if (mesh.vertices.empty()) throw Error(ErrorCode::EmptyGeometry, "PLY file has no vertices");
  return mesh;
}

TriMesh load_ply_ascii(const fs::path& path) { return parse_ply_ascii(read_file(path)); }

PointCloud parse_xyz(const std::string& text) {
  LineReader r(text);
  std::string line;
  PointCloud cloud;
  while (r.next(line)) {
    const auto v = parse_numbers(line, r);
    if (v.size() < 3) r.fail("expected 'x y z'");
    if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || !std::isfinite(v[2])) r.fail("non-finite coordinate");
    cloud.points.push_back({v[0], v[1], v[2]});
  }
  if (cloud.points.empty()) throw Error(ErrorCode::EmptyGeometry, "XYZ file has no points");
  return cloud;
}

PointCloud load_xyz(const fs::path& path) {
  PointCloud c = parse_xyz(read_file(path));
  c.source = path.string();
  return c;
}

void write_xyz(const fs::path& path, const PointCloud& cloud) {
  std::ostringstream ss;
  for (const auto& p : cloud.points) ss << fmt17(p[0]) << ' ' << fmt17(p[1]) << ' ' << fmt17(p[2]) << '\n';
  atomic_write(path, ss.str());
}

void write_off(const fs::path& path, const TriMesh& mesh) {
  std::ostringstream ss;
  ss << "OFF\n" << mesh.vertices.size() << ' ' << mesh.faces.size() << " 0\n";
  for (const auto& p : mesh.vertices) ss << fmt17(p[0]) << ' ' << fmt17(p[1]) << ' ' << fmt17(p[2]) << '\n';
  for (const auto& f : mesh.faces) ss << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  atomic_write(path, ss.str());
}

void write_ply_ascii(const fs::path& path, const TriMesh& mesh) {
  std::ostringstream ss;
  ss << "ply\nformat ascii 1.0\nelement vertex " << mesh.vertices.size()
     << "\nproperty double x\nproperty double y\nproperty double z\nelement face " << mesh.faces.size()
     << "\nproperty list uchar int vertex_indices\nend_header\n";
  for (const auto& p : mesh.vertices) ss << fmt17(p[0]) << ' ' << fmt17(p[1]) << ' ' << fmt17(p[2]) << '\n';
  for (const auto& f : mesh.faces) ss << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  atomic_write(path, ss.str());
}

bool is_mesh_path(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".off" || ext == ".ply";
}

// ---------------------------------------------------------------------------
// Sampling and grouping

PointCloud sample_surface(const TriMesh& mesh, std::size_t n, std::uint64_t seed) {
  std::vector<double> cdf;
  cdf.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cdf.push_back(total);
  }
  if (!(total > 0.0)) throw Error(ErrorCode::ZeroArea, "mesh has no surface area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = u01(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), pick);
    if (it == cdf.end()) --it;
    const auto& f = mesh.faces[static_cast<std::size_t>(it - cdf.begin())];
    const double r1 = std::sqrt(u01(rng));
    const double r2 = u01(rng);
    const double a = 1.0 - r1, b = r1 * (1.0 - r2), c = r1 * r2;
    const Vec3& p0 = mesh.vertices[f[0]];
    const Vec3& p1 = mesh.vertices[f[1]];
    const Vec3& p2 = mesh.vertices[f[2]];
    cloud.points.push_back({a * p0[0] + b * p1[0] + c * p2[0], a * p0[1] + b * p1[1] + c * p2[1],
                            a * p0[2] + b * p1[2] + c * p2[2]});
  }
  return cloud;
}

namespace {

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

std::vector<std::size_t> farthest_point_sampling_from(const std::vector<Vec3>& points,
                                                      std::size_t n, std::size_t start) {
  const std::size_t total = points.size();
  if (n > total) throw Error(ErrorCode::TooManyRequested, "FPS asked for more points than available");
  std::vector<std::size_t> chosen;
  if (n == 0) return chosen;
  chosen.reserve(n);
  std::vector<double> mind(total, std::numeric_limits<double>::infinity());
  std::size_t cur = start;
  for (std::size_t s = 0; s < n; ++s) {
    chosen.push_back(cur);
    mind[cur] = -1.0;
    std::size_t best = 0;
    double best_d = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < total; ++i) {
      if (mind[i] < 0.0) continue;
      mind[i] = std::min(mind[i], dist2(points[i], points[cur]));
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  return chosen;
}

std::vector<std::size_t> farthest_point_sampling(const std::vector<Vec3>& points, std::size_t n,
                                                 std::uint64_t seed) {
  if (n > points.size()) throw Error(ErrorCode::TooManyRequested, "FPS asked for more points than available");
  if (points.empty()) return {};
  std::mt19937_64 rng(seed);
  const std::size_t start = static_cast<std::size_t>(rng() % points.size());
  return farthest_point_sampling_from(points, n, start);
}

Grouping group_knn(const std::vector<Vec3>& points, const std::vector<std::size_t>& centers,
                   std::size_t k) {
  if (k > points.size()) throw Error(ErrorCode::TooManyRequested, "K exceeds the number of points");
  Grouping g;
  g.centers = centers;
  g.patches.reserve(centers.size());
  std::vector<std::pair<double, std::size_t>> d(points.size());
  for (std::size_t c : centers) {
    for (std::size_t i = 0; i < points.size(); ++i) d[i] = {dist2(points[i], points[c]), i};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    std::vector<std::size_t> patch(k);
    for (std::size_t i = 0; i < k; ++i) patch[i] = d[i].second;
    g.patches.push_back(std::move(patch));
  }
  return g;
}

PointCloud patch_dropout(const PointCloud& cloud, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0))
    throw Error(ErrorCode::InvalidArgument, "dropout fraction must lie in [0, 1)");
  const std::size_t n = cloud.size();
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (target == 0) return cloud;

  // Neighborhoods of ~5% of the cloud each.
  const std::size_t region = std::max<std::size_t>(1, n / 20);
  std::vector<bool> removed(n, false);
  std::size_t count = 0;
  std::mt19937_64 rng(seed);
  std::vector<std::pair<double, std::size_t>> d(n);
  while (count < target) {
    std::size_t s = static_cast<std::size_t>(rng() % n);
    while (removed[s]) s = (s + 1) % n;
    for (std::size_t i = 0; i < n; ++i) d[i] = {dist2(cloud.points[i], cloud.points[s]), i};
    std::sort(d.begin(), d.end());
    std::size_t taken = 0;
    for (const auto& [dd, i] : d) {
      if (taken == region || count == target) break;
      if (removed[i]) continue;
      removed[i] = true;
      ++taken;
      ++count;
    }
  }

  PointCloud out;
  out.label = cloud.label;
  out.source = cloud.source;
  for (std::size_t i = 0; i < n; ++i) {
    if (removed[i]) continue;
    out.points.push_back(cloud.points[i]);
    if (cloud.has_frames()) out.frames.push_back(cloud.frames[i]);
  }
  return out;
}

PointCloud transform_cloud(const PointCloud& cloud, const UnitQuaternion& g, const Vec3& translation) {
  PointCloud out = cloud;
  for (auto& p : out.points) p = rotate_point(g, p) + translation;
  for (auto& f : out.frames) f = canonicalize_hemisphere(hamilton_product(g, f));
  return out;
}

Vec3 centroid(const std::vector<Vec3>& points) {
  Vec3 c{0.0, 0.0, 0.0};
  if (points.empty()) return c;
  for (const auto& p : points) c = c + p;
  return (1.0 / static_cast<double>(points.size())) * c;
}

UnitQuaternion random_rotation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  while (true) {
    const Vec4 v{n01(rng), n01(rng), n01(rng), n01(rng)};
    if (norm(v) > 1e-6) return canonicalize_hemisphere(UnitQuaternion::from_vec4(v));
  }
}

// ---------------------------------------------------------------------------
// Toy shapes

const std::vector<std::string>& toy_class_names() {
  static const std::vector<std::string> names{"elongated_box", "l_shape", "cone", "tetra_flag"};
  return names;
}

ToyClass toy_class_from_name(const std::string& name) {
  const auto& names = toy_class_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw Error(ErrorCode::InvalidArgument, "unknown toy class '" + name + "'");
  return static_cast<ToyClass>(it - names.begin());
}

namespace {

void add_box(TriMesh& m, const Vec3& lo, const Vec3& hi) {
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  for (int i = 0; i < 8; ++i)
    m.vertices.push_back({(i & 1) ? hi[0] : lo[0], (i & 2) ? hi[1] : lo[1], (i & 4) ? hi[2] : lo[2]});
  static constexpr std::array<std::array<std::uint32_t, 4>, 6> quads{{
      {0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5},
  }};
  for (const auto& q : quads) {
    m.faces.push_back({base + q[0], base + q[1], base + q[2]});
    m.faces.push_back({base + q[0], base + q[2], base + q[3]});
  }
}

void add_triangle(TriMesh& m, const Vec3& a, const Vec3& b, const Vec3& c) {
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  m.vertices.push_back(a);
  m.vertices.push_back(b);
  m.vertices.push_back(c);
  m.faces.push_back({base, base + 1, base + 2});
}

}  // namespace

TriMesh toy_template(ToyClass cls) {
  TriMesh m;
  switch (cls) {
    case ToyClass::ElongatedBox:
      add_box(m, {-1.0, -0.35, -0.25}, {1.0, 0.35, 0.25});
      // Off-center knob removes the box's 180° symmetries.
      add_box(m, {0.45, 0.0, 0.25}, {0.95, 0.35, 0.5});
      break;
    case ToyClass::LShape:
      add_box(m, {0.0, 0.0, 0.0}, {1.6, 0.4, 0.4});
      add_box(m, {0.0, 0.4, 0.0}, {0.4, 1.0, 0.4});
      break;
    case ToyClass::Cone: {
      // Elliptic base with an off-axis apex.
      constexpr int segments = 32;
      const Vec3 apex{0.35, 0.0, 1.4};
      const Vec3 center{0.0, 0.0, 0.0};
      const auto base = static_cast<std::uint32_t>(m.vertices.size());
      m.vertices.push_back(apex);
      m.vertices.push_back(center);
      for (int s = 0; s < segments; ++s) {
        const double t = 2.0 * std::numbers::pi * s / segments;
        m.vertices.push_back({0.8 * std::cos(t), 0.5 * std::sin(t), 0.0});
      }
      for (std::uint32_t s = 0; s < segments; ++s) {
        const std::uint32_t a = base + 2 + s;
        const std::uint32_t b = base + 2 + (s + 1) % segments;
        m.faces.push_back({base, a, b});
        m.faces.push_back({base + 1, b, a});
      }
      break;
    }
    case ToyClass::TetraFlag:
      add_triangle(m, {0.0, 0.0, 0.0}, {1.2, 0.0, 0.0}, {0.3, 0.9, 0.0});
      add_triangle(m, {0.0, 0.0, 0.0}, {1.2, 0.0, 0.0}, {0.4, 0.3, 0.8});
      add_triangle(m, {1.2, 0.0, 0.0}, {0.3, 0.9, 0.0}, {0.4, 0.3, 0.8});
      add_triangle(m, {0.3, 0.9, 0.0}, {0.0, 0.0, 0.0}, {0.4, 0.3, 0.8});
      add_box(m, {0.36, 0.26, 0.8}, {0.44, 0.34, 1.5});
      add_triangle(m, {0.44, 0.3, 1.5}, {0.44, 0.3, 1.1}, {1.0, 0.3, 1.35});
      break;
  }
  return m;
}

std::vector<ToySample> make_toy_dataset(const ToyDatasetConfig& cfg) {
  std::vector<ToySample> out;
  out.reserve(cfg.classes.size() * cfg.per_class);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < cfg.classes.size(); ++c) {
    const TriMesh tmpl = toy_template(cfg.classes[c]);
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
      ToySample s;
      s.label = static_cast<int>(c);
      s.mesh = tmpl;
      const Vec3 scale{jitter(rng), jitter(rng), jitter(rng)};
      for (auto& v : s.mesh.vertices) {
        for (int a = 0; a < 3; ++a) v[a] = v[a] * scale[a] + cfg.noise_sigma * noise(rng);
      }
      s.cloud = sample_surface(s.mesh, cfg.points_per_cloud, rng());
      s.cloud.label = s.label;
      s.cloud.source = toy_class_names()[static_cast<std::size_t>(cfg.classes[c])];
      out.push_back(std::move(s));
    }
  }
  return out;
}

ToySample rotate_sample(const ToySample& sample, const UnitQuaternion& g) {
  ToySample out = sample;
  out.cloud = transform_cloud(sample.cloud, g);
  for (auto& v : out.mesh.vertices) v = rotate_point(g, v);
  out.orientation = canonicalize_hemisphere(hamilton_product(g, sample.orientation));
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<ManifestEntry> Manifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const auto& s : samples)
    if (s.split == name) out.push_back(s);
  return out;
}

Manifest load_manifest(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  const fs::path dir = path.parent_path();
  Manifest m;
  try {
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::ParseError, "unsupported manifest version");
    m.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& e : j.at("samples")) {
      ManifestEntry me;
      const fs::path p = e.at("path").get<std::string>();
      me.path = p.is_absolute() ? p : dir / p;
      me.label = e.value("label", -1);
      if (me.label < -1 || me.label >= static_cast<int>(m.classes.size()))
        throw Error(ErrorCode::ParseError, path.string() + ": label " + std::to_string(me.label) + " out of range");
      me.split = e.value("split", std::string("train"));
      if (e.contains("pose")) {
        const auto q = e.at("pose").get<std::vector<double>>();
        if (q.size() != 4) throw Error(ErrorCode::ParseError, "pose must have 4 components");
        me.pose = UnitQuaternion::from_components(q[0], q[1], q[2], q[3]);
      }
      if (e.contains("pair")) {
        const fs::path pp = e.at("pair").get<std::string>();
        me.pair = pp.is_absolute() ? pp : dir / pp;
      }
      m.samples.push_back(std::move(me));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return m;
}

void save_manifest(const fs::path& path, const Manifest& manifest) {
  nlohmann::json j;
  j["version"] = 1;
  j["classes"] = manifest.classes;
  j["samples"] = nlohmann::json::array();
  const fs::path dir = path.parent_path();
  for (const auto& s : manifest.samples) {
    nlohmann::json e;
    e["path"] = s.path.lexically_relative(dir.empty() ? fs::path(".") : dir).generic_string();
    e["label"] = s.label;
    e["split"] = s.split;
    if (s.pose) e["pose"] = {s.pose->w(), s.pose->x(), s.pose->y(), s.pose->z()};
    if (s.pair) e["pair"] = s.pair->lexically_relative(dir.empty() ? fs::path(".") : dir).generic_string();
    j["samples"].push_back(e);
  }
  atomic_write(path, j.dump(2) + "\n");
}

}  // namespace qec
