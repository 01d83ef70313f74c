#include "qec/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "qec/error.hpp"

namespace qec {

namespace {

using json = nlohmann::json;

// Independent stream per (seed, sample, purpose).
std::uint64_t mix(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index * 0xBF58476D1CE4E5B9ULL + purpose * 0x94D049BB133111EBULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum Purpose : std::uint64_t { kSample = 1, kPrepare, kArRotation, kPartnerRotation, kPartnerSample, kPartnerPrepare, kDropA, kDropB, kDropAr, kView };

PointCloud maybe_drop(const PointCloud& c, double fraction, std::uint64_t seed) {
  return fraction > 0.0 ? patch_dropout(c, fraction, seed) : c;
}

PointCloud make_partner(const RawSample& s, std::size_t points, std::uint64_t seed, std::size_t i,
                        UnitQuaternion& g) {
  g = random_rotation(mix(seed, i, kPartnerRotation));
  const PointCloud base = s.mesh ? sample_surface(*s.mesh, points, mix(seed, i, kPartnerSample)) : s.cloud;
  return transform_cloud(base, g);
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) {
  json j{{"network", json::parse(network_config_to_json(cfg.network))},
         {"training", json::parse(train_config_to_json(cfg.training))},
         {"points_per_cloud", cfg.points_per_cloud},
         {"seed", cfg.seed},
         {"eval_dropout", cfg.eval_dropout}};
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "run config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (k != "network" && k != "training" && k != "points_per_cloud" && k != "seed" && k != "eval_dropout")
      throw Error(ErrorCode::InvalidArgument, "unknown key '" + k + "' in run config");
  }
  RunConfig c;
  try {
    if (j.contains("network")) {
      c.network = network_config_from_json(j.at("network").dump());
      c.network.validate();
      c.has_network = true;
    }
    if (j.contains("training")) c.training = train_config_from_json(j.at("training").dump());
    if (j.contains("points_per_cloud")) c.points_per_cloud = j.at("points_per_cloud").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("eval_dropout")) c.eval_dropout = j.at("eval_dropout").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad run config value: ") + e.what());
  }
  if (c.points_per_cloud == 0) throw Error(ErrorCode::InvalidArgument, "points_per_cloud must be positive");
  if (!(c.eval_dropout >= 0.0 && c.eval_dropout < 1.0))
    throw Error(ErrorCode::InvalidArgument, "eval_dropout must lie in [0, 1)");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from_json(read_file(path)); }

PointCloud load_cloud(const std::filesystem::path& path, std::size_t points, std::uint64_t seed) {
  if (!is_mesh_path(path)) return load_xyz(path);
  const auto ext = path.extension().string();
  const TriMesh mesh = (ext == ".off" || ext == ".OFF") ? load_off(path) : load_ply_ascii(path);
  PointCloud c = sample_surface(mesh, points, seed);
  c.source = path.string();
  return c;
}

std::vector<RawSample> load_split(const Manifest& manifest, const std::string& split, std::size_t points,
                                  std::uint64_t seed) {
  std::vector<RawSample> out;
  const auto entries = manifest.split(split);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const ManifestEntry& e = entries[i];
    RawSample s;
    s.label = e.label;
    if (is_mesh_path(e.path)) {
      const auto ext = e.path.extension().string();
      s.mesh = (ext == ".off" || ext == ".OFF") ? load_off(e.path) : load_ply_ascii(e.path);
      s.cloud = sample_surface(*s.mesh, points, mix(seed, i, kSample));
      s.cloud.source = e.path.string();
    } else {
      s.cloud = load_xyz(e.path);
    }
    if (e.pair) {
      if (!e.pose) throw Error(ErrorCode::ParseError, e.path.string() + ": pair given without pose");
      s.partner = load_cloud(*e.pair, points, mix(seed, i, kPartnerSample));
      s.relative = *e.pose;
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TrainSample> prepare_training(const std::vector<RawSample>& raw, const NetworkConfig& net,
                                          std::uint64_t seed, bool siamese, std::size_t points, std::size_t views) {
  if (views == 0) throw Error(ErrorCode::InvalidArgument, "views must be positive");
  std::vector<TrainSample> out;
  out.reserve(raw.size() * views);
  for (std::size_t v = 0; v < views; ++v) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const RawSample& s = raw[i];
      if (v > 0 && !s.mesh) continue;
      // Stream index unique per (view, sample).
      const std::size_t id = v * raw.size() + i;
      const PointCloud a = v == 0 ? s.cloud : sample_surface(*s.mesh, points, mix(seed, id, kView));
      TrainSample t;
      t.cloud = prepare_cloud(a, net, mix(seed, id, kPrepare));
      t.label = s.label;
      if (siamese) {
        UnitQuaternion g;
        const PointCloud b = s.partner ? *s.partner : make_partner(s, points, seed, id, g);
        t.relative = s.partner ? s.relative : g;
        t.partner = prepare_cloud(b, net, mix(seed, id, kPartnerPrepare));
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::vector<EvalSample> prepare_evaluation(const std::vector<RawSample>& raw, const NetworkConfig& net,
                                           const EvalOptions& opt) {
  std::vector<EvalSample> out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const RawSample& s = raw[i];
    EvalSample e;
    e.label = s.label;
    const PointCloud a = maybe_drop(s.cloud, opt.dropout, mix(opt.seed, i, kDropA));
    e.nr = prepare_cloud(a, net, mix(opt.seed, i, kPrepare));
    if (opt.rotate) {
      const PointCloud ar = transform_cloud(s.cloud, random_rotation(mix(opt.seed, i, kArRotation)));
      e.ar = prepare_cloud(maybe_drop(ar, opt.dropout, mix(opt.seed, i, kDropAr)), net, mix(opt.seed, i, kPrepare));
    }
    std::optional<PointCloud> b;
    if (s.partner) {
      b = *s.partner;
      e.relative = s.relative;
    } else if (opt.synthesize_partners) {
      UnitQuaternion g;
      b = make_partner(s, opt.points, opt.seed, i, g);
      e.relative = g;
    }
    if (b) e.partner = prepare_cloud(maybe_drop(*b, opt.dropout, mix(opt.seed, i, kDropB)), net, mix(opt.seed, i, kPartnerPrepare));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<HistogramBin> rae_histogram(const std::vector<double>& rae, const std::vector<double>& degrees) {
  std::vector<HistogramBin> out;
  for (double d : degrees) {
    const double limit = d / 180.0;  // RAE is the angle over pi
    const auto n = std::count_if(rae.begin(), rae.end(), [&](double r) { return r < limit; });
    out.push_back({d, rae.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(rae.size())});
  }
  return out;
}

ToySplits make_toy_splits(const ToyProtocol& p) {
  if (p.classes.empty() || p.train_per_class + p.test_per_class == 0)
    throw Error(ErrorCode::InvalidArgument, "toy protocol needs classes and samples");
  ToyDatasetConfig dc;
  dc.classes = p.classes;
  dc.per_class = p.train_per_class + p.test_per_class;
  dc.points_per_cloud = p.points_per_cloud;
  dc.noise_sigma = p.noise_sigma;
  dc.seed = p.seed;
  const auto data = make_toy_dataset(dc);
  ToySplits out;
  for (ToyClass c : p.classes) out.class_names.push_back(toy_class_names()[static_cast<int>(c)]);
  for (std::size_t i = 0; i < data.size(); ++i) {
    RawSample s;
    s.cloud = data[i].cloud;
    s.mesh = data[i].mesh;
    s.label = data[i].label;
    (i % dc.per_class < p.train_per_class ? out.train : out.test).push_back(std::move(s));
  }
  return out;
}

void write_toy_dataset(const std::filesystem::path& dir, const ToyProtocol& protocol) {
  const ToySplits splits = make_toy_splits(protocol);
  std::filesystem::create_directories(dir / "meshes");
  Manifest m;
  m.classes = splits.class_names;
  auto emit = [&](const std::vector<RawSample>& items, const std::string& split) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto name = split + "_" + std::to_string(i) + ".off";
      write_off(dir / "meshes" / name, *items[i].mesh);
      m.samples.push_back({dir / "meshes" / name, items[i].label, split, std::nullopt, std::nullopt});
    }
  };
  emit(splits.train, "train");
  emit(splits.test, "test");
  save_manifest(dir / "manifest.json", m);
}

}  // namespace qec
