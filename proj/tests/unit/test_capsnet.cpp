#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "qec/capsnet.hpp"
#include "qec/error.hpp"
#include "qec/quat_mean.hpp"
#include "test_support.hpp"

using namespace qec;
using qec::test::random_quat;

namespace {

NetworkConfig tiny_network() {
  NetworkConfig cfg;
  cfg.class_count = 3;
  cfg.lrf_k = 12;
  cfg.num_lrf_points = 64;
  cfg.num_points = 8;
  cfg.hidden = 8;
  cfg.kernel_init_scale = 0.5;
  cfg.seed = 4;
  cfg.layers = {QecLayerConfig{9, 1, 4, {}}, QecLayerConfig{8, 4, 3, {}}};
  return cfg;
}

PointCloud toy_cloud(ToyClass cls, std::size_t n, std::uint64_t seed) {
  return sample_surface(toy_template(cls), n, seed);
}

struct Patch1 {
  std::vector<Vec3> points;
  std::vector<Capsule> caps;
};

Patch1 random_patch(std::mt19937_64& rng, std::size_t K, std::size_t Nc) {
  std::uniform_real_distribution<double> a(0.2, 1.0);
  Patch1 p;
  for (std::size_t k = 0; k < K; ++k) p.points.push_back(qec::test::random_vec3(rng));
  for (std::size_t i = 0; i < K * Nc; ++i) p.caps.push_back({canonicalize_hemisphere(random_quat(rng)), a(rng)});
  return p;
}

std::vector<Capsule> tape_layer(const Patch1& p, const MlpParams& mlp, const QecLayerConfig& cfg) {
  diff::Tape t;
  std::vector<double> poses, acts;
  for (const auto& c : p.caps) {
    for (int k = 0; k < 4; ++k) poses.push_back(c.pose[k]);
    acts.push_back(c.activation);
  }
  const diff::Var pv = t.constant({p.caps.size(), 4}, poses);
  const diff::Var av = t.constant({p.caps.size()}, acts);
  const QecTapeOutput out = qec_forward_tape(t, p.points, pv, av, mlp_on_tape(t, mlp, false), cfg, 1, true);
  std::vector<Capsule> caps;
  for (std::size_t j = 0; j < cfg.M; ++j) {
    const auto& v = t.value(out.poses);
    caps.push_back({UnitQuaternion::from_components(v[4 * j], v[4 * j + 1], v[4 * j + 2], v[4 * j + 3]),
                    t.value(out.activations)[j]});
  }
  return caps;
}

}  // namespace

TEST_CASE("classification and canonical pose") {
  LatentCapsules l;
  l.capsules = {{UnitQuaternion::identity(), 0.1}, {random_rotation(1), 0.4}, {UnitQuaternion::identity(), 0.2}};
  CHECK(classify(l) == 1);
  CHECK(qec::test::chordal(canonical_pose(l), random_rotation(1)) <= 1e-12);
  LatentCapsules scaled = l;
  for (auto& c : scaled.capsules) c.activation *= 1.7;
  CHECK(classify(scaled) == 1);

  LatentCapsules uniform;
  uniform.capsules.assign(3, {UnitQuaternion::identity(), 0.3});
  CHECK(classify(uniform) == 0);
  LatentCapsules one;
  one.capsules = {{random_rotation(2), 0.2}};
  CHECK(classify(one) == 0);
  CHECK(qec::test::chordal(canonical_pose(one), random_rotation(2)) <= 1e-12);
}

TEST_CASE("siamese relative pose") {
  LatentCapsules a;
  a.capsules = {{random_rotation(3), 0.4}, {random_rotation(4), 0.1}};
  const RelativePose same = siamese_relative_pose(a, a);
  CHECK(geodesic_distance(same.rotation, UnitQuaternion::identity()) <= 1e-7);
  CHECK_FALSE(same.class_mismatch);

  const UnitQuaternion g = random_rotation(5);
  LatentCapsules b = a;
  for (auto& c : b.capsules) c.pose = g * c.pose;
  CHECK(geodesic_distance(siamese_relative_pose(a, b).rotation, g) <= 1e-7);
  b.capsules[1].activation = 0.9;
  CHECK(siamese_relative_pose(a, b).class_mismatch);
}

TEST_CASE("identity kernel passes the pose through") {
  const QecLayerConfig cfg{1, 1, 1, {}};
  const MlpParams mlp = init_mlp(cfg, 8, 0.0, 1);
  const UnitQuaternion q = canonicalize_hemisphere(random_rotation(6));
  const auto out = qec_forward(std::vector<Vec3>{{0.3, -0.1, 0.2}}, {{q, 1.0}}, mlp, cfg);
  REQUIRE(out.size() == 1);
  CHECK(geodesic_distance(out[0].pose, q) <= 1e-7);
  CHECK(out[0].activation == doctest::Approx(0.5));
}

TEST_CASE("tape layer matches the reference layer") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 10; ++t) {
    const QecLayerConfig cfg{5, 2, 3, {}};
    const MlpParams mlp = init_mlp(cfg, 8, 0.5, t);
    const Patch1 p = random_patch(rng, cfg.K, cfg.Nc);
    const auto ref = qec_forward(p.points, p.caps, mlp, cfg, true);
    const auto tape = tape_layer(p, mlp, cfg);
    for (std::size_t j = 0; j < cfg.M; ++j) {
      CHECK(geodesic_distance(ref[j].pose, tape[j].pose) <= 1e-7);
      CHECK(std::abs(ref[j].activation - tape[j].activation) <= 1e-12);
    }
  }
}

TEST_CASE("QEC layer equivariance and permutation invariance") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const QecLayerConfig cfg{9, 2, 4, {}};
    const MlpParams mlp = init_mlp(cfg, 16, 0.5, 100 + t);
    const Patch1 p = random_patch(rng, cfg.K, cfg.Nc);
    const auto base = qec_forward(p.points, p.caps, mlp, cfg);

    const UnitQuaternion g = random_quat(rng);
    Patch1 r = p;
    for (auto& x : r.points) x = rotate_point(g, x);
    for (auto& c : r.caps) c.pose = g * c.pose;
    const auto rot = qec_forward(r.points, r.caps, mlp, cfg);
    for (std::size_t j = 0; j < cfg.M; ++j) {
      CHECK(geodesic_distance(g * base[j].pose, rot[j].pose) <= 1e-5);
      CHECK(std::abs(base[j].activation - rot[j].activation) <= 1e-7);
    }

    Patch1 perm;
    for (std::size_t k = cfg.K; k-- > 0;) {
      perm.points.push_back(p.points[k]);
      for (std::size_t c = 0; c < cfg.Nc; ++c) perm.caps.push_back(p.caps[k * cfg.Nc + c]);
    }
    const auto pr = qec_forward(perm.points, perm.caps, mlp, cfg);
    for (std::size_t j = 0; j < cfg.M; ++j) {
      CHECK(qec::test::max_abs_diff(pr[j].pose.vec(), base[j].pose.vec()) <= 1e-9);
      CHECK(std::abs(pr[j].activation - base[j].activation) <= 1e-9);
    }
  }
}

TEST_CASE("skipping canonicalization breaks equivariance") {
  std::mt19937_64 rng(9);
  QecLayerConfig cfg{9, 1, 3, {}};
  cfg.skip_canonicalization = true;
  const MlpParams mlp = init_mlp(cfg, 16, 0.5, 3);
  const Patch1 p = random_patch(rng, cfg.K, cfg.Nc);
  const UnitQuaternion g = random_quat(rng);
  Patch1 r = p;
  for (auto& x : r.points) x = rotate_point(g, x);
  for (auto& c : r.caps) c.pose = g * c.pose;
  const auto a = qec_forward(p.points, p.caps, mlp, cfg), b = qec_forward(r.points, r.caps, mlp, cfg);
  double worst = 0.0;
  for (std::size_t j = 0; j < cfg.M; ++j) worst = std::max(worst, geodesic_distance(g * a[j].pose, b[j].pose));
  CHECK(worst > 1e-3);
}

TEST_CASE("end-to-end gradient of a tiny QEC layer") {
  // K=4, N^c=1, M=2, k=2 against central differences over every MLP entry.
  std::mt19937_64 rng(10);
  QecLayerConfig cfg{4, 1, 2, {}};
  cfg.routing.iterations = 2;
  MlpParams mlp = init_mlp(cfg, 6, 0.5, 11);
  const Patch1 p = random_patch(rng, cfg.K, cfg.Nc);
  const Vec4 u{0.4, -0.3, 0.8, 0.1};

  auto loss_of = [&](const MlpParams& m, std::vector<std::vector<double>>* grads) {
    diff::Tape t;
    std::vector<double> poses, acts;
    for (const auto& c : p.caps) {
      for (int k = 0; k < 4; ++k) poses.push_back(c.pose[k]);
      acts.push_back(c.activation);
    }
    const MlpVars vars = mlp_on_tape(t, m, true);
    const QecTapeOutput out = qec_forward_tape(t, p.points, t.constant({cfg.K, 4}, poses),
                                               t.constant({cfg.K}, acts), vars, cfg, 1, true);
    const diff::Var w = t.constant({cfg.M, 4}, {u[0], u[1], u[2], u[3], -u[1], u[0], u[3], -u[2]});
    const diff::Var loss = diff::add(t, diff::sum(t, diff::mul(t, out.poses, w)),
                                     diff::spread_loss(t, out.activations, 1, 0.2));
    if (grads) {
      t.backward(loss);
      for (diff::Var v : {vars.W1, vars.b1, vars.W2, vars.b2}) grads->push_back(t.grad(v));
    }
    return t.value(loss)[0];
  };

  std::vector<std::vector<double>> parts;
  loss_of(mlp, &parts);
  std::vector<double> analytic, numeric;
  diff::Parameter* ps[4] = {&mlp.W1, &mlp.b1, &mlp.W2, &mlp.b2};
  const double h = 1e-6;
  for (int k = 0; k < 4; ++k) {
    for (std::size_t e = 0; e < ps[k]->value.size(); ++e) {
      const double orig = ps[k]->value[e];
      ps[k]->value[e] = orig + h;
      const double lp = loss_of(mlp, nullptr);
      ps[k]->value[e] = orig - h;
      const double lm = loss_of(mlp, nullptr);
      ps[k]->value[e] = orig;
      numeric.push_back((lp - lm) / (2 * h));
      analytic.push_back(parts[k][e]);
    }
  }
  CHECK(qec::test::rel_err(analytic, numeric) <= 1e-3);
}

TEST_CASE("network equivariance and translation invariance") {
  const NetworkConfig cfg = tiny_network();
  const NetworkParams params = init_network(cfg);
  std::mt19937_64 rng(12);
  for (int t = 0; t < 5; ++t) {
    const PointCloud cloud = toy_cloud(static_cast<ToyClass>(t % 4), 160, t);
    const LatentCapsules base = network_forward(cloud, params, cfg);
    REQUIRE(base.capsules.size() == 3);
    for (const auto& c : base.capsules) {
      CHECK(c.activation > 0.0);
      CHECK(c.activation <= 0.5);
    }
    const UnitQuaternion g = random_quat(rng);
    const LatentCapsules rot = network_forward(transform_cloud(cloud, g, qec::test::random_vec3(rng, 3.0)), params, cfg);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(geodesic_distance(g * base.capsules[j].pose, rot.capsules[j].pose) <= 1e-4);
      CHECK(std::abs(base.capsules[j].activation - rot.capsules[j].activation) <= 1e-6);
    }
    CHECK(geodesic_distance(g * canonical_pose(base), canonical_pose(rot)) <= 1e-4);

    const LatentCapsules moved = network_forward(transform_cloud(cloud, UnitQuaternion::identity(), {5, 1, -2}), params, cfg);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(geodesic_distance(base.capsules[j].pose, moved.capsules[j].pose) <= 1e-6);
      CHECK(std::abs(base.capsules[j].activation - moved.capsules[j].activation) <= 1e-9);
    }
  }
}

TEST_CASE("identity kernels reduce the network to nested routing") {
  NetworkConfig cfg = tiny_network();
  cfg.kernel_init_scale = 0.0;
  const NetworkParams params = init_network(cfg);
  const PreparedCloud prep = prepare_cloud(toy_cloud(ToyClass::LShape, 160, 1), cfg, 2);
  const LatentCapsules latent = network_forward(prep, params, cfg);

  const std::size_t P = prep.center_points.size(), K = cfg.layers[0].K;
  std::vector<Capsule> layer1;
  for (std::size_t p = 0; p < P; ++p) {
    VoteTensor v{K, 1, {}};
    for (std::size_t k = 0; k < K; ++k)
      v.votes.push_back(canonicalize_hemisphere(UnitQuaternion::from_vec4(prep.patch_frames[p * K + k])));
    const Capsule c = dynamic_route(v, std::vector<double>(K, 1.0)).capsules[0];
    for (std::size_t m = 0; m < cfg.layers[0].M; ++m) layer1.push_back(c);
  }
  std::vector<double> alpha;
  VoteTensor v2{layer1.size(), 1, {}};
  for (const auto& c : layer1) {
    v2.votes.push_back(canonicalize_hemisphere(c.pose));
    alpha.push_back(c.activation);
  }
  const Capsule expect = dynamic_route(v2, alpha).capsules[0];
  for (const auto& c : latent.capsules) {
    CHECK(geodesic_distance(c.pose, expect.pose) <= 1e-6);
    CHECK(std::abs(c.activation - expect.activation) <= 1e-9);
  }

}

TEST_CASE("configuration") {
  const NetworkConfig d = NetworkConfig::defaults(10);
  CHECK(d.layers[0].K == 9);
  CHECK(d.layers[0].M == 64);
  CHECK(d.layers[1].K == 64);
  CHECK(d.layers[1].Nc == 64);
  CHECK(d.layers[1].M == 10);
  d.validate();

  NetworkConfig bad = d;
  bad.layers[1].Nc = 32;
  CHECK_THROWS_AS(bad.validate(), Error);

  const NetworkConfig tiny = tiny_network();
  const NetworkConfig back = network_config_from_json(network_config_to_json(tiny));
  CHECK(network_config_to_json(back) == network_config_to_json(tiny));
  CHECK_THROWS_AS(network_config_from_json(R"({"class_count": 3, "bogus": 1})"), Error);

  TrainConfig tc;
  tc.epochs = 7;
  tc.siamese = true;
  const TrainConfig tb = train_config_from_json(train_config_to_json(tc));
  CHECK(tb.epochs == 7);
  CHECK(tb.siamese);
  CHECK_THROWS_AS(train_config_from_json(R"({"learning_rate_typo": 1})"), Error);

  // (3N^c·H + H) + (H·N^c·M·4 + N^c·M·4) per layer.
  CHECK(mlp_parameter_count(1, 64, 64) == (3 * 64 + 64) + (64 * 256 + 256));
  std::size_t total = 0;
  for (const auto& l : d.layers) total += mlp_parameter_count(l.Nc, l.M, d.hidden);
  CHECK(parameter_count(d) == total);
  std::size_t counted = 0;
  const NetworkParams p = init_network(tiny);
  for (const auto* a : p.all()) counted += a->value.size();
  CHECK(counted == parameter_count(tiny));
}

TEST_CASE("model save and load") {
  const NetworkConfig cfg = tiny_network();
  Model m{cfg, init_network(cfg), {"a", "b", "c"}};
  const auto path = std::filesystem::temp_directory_path() / "qec_test_model.ckpt";
  save_model(path, m);
  const Model back = load_model(path);
  CHECK(back.class_names == m.class_names);
  const PointCloud cloud = toy_cloud(ToyClass::Cone, 160, 3);
  const LatentCapsules a = network_forward(cloud, m.params, cfg), b = network_forward(cloud, back.params, back.config);
  for (std::size_t j = 0; j < a.capsules.size(); ++j) {
    CHECK(a.capsules[j].pose.vec() == b.capsules[j].pose.vec());
    CHECK(a.capsules[j].activation == b.capsules[j].activation);
  }
  std::filesystem::remove(path);
}

TEST_CASE("training smoke, determinism and non-finite guard") {
  const NetworkConfig cfg = tiny_network();
  std::vector<TrainSample> data;
  for (int c = 0; c < 3; ++c) {
    TrainSample s;
    s.cloud = prepare_cloud(toy_cloud(static_cast<ToyClass>(c), 160, 20 + c), cfg, 1);
    s.label = c;
    data.push_back(std::move(s));
  }
  TrainConfig tc;
  tc.epochs = 6;
  tc.learning_rate = 0.01;
  tc.seed = 3;
  std::ostringstream log;
  const TrainResult a = train(data, {}, cfg, tc, &log);
  REQUIRE(a.history.size() == 6);
  CHECK(a.history.back().loss < a.history.front().loss);
  CHECK(log.str().find("\"epoch\":6") != std::string::npos);

  const TrainResult b = train(data, {}, cfg, tc);
  const auto pa = a.params.all(), pb = b.params.all();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);

  NetworkParams broken = init_network(cfg);
  broken.layers[1].b2.value[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(data, {}, cfg, tc, nullptr, &broken);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteLoss);
  }
}
