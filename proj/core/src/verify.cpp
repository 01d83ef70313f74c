#include "qec/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "qec/capsnet.hpp"
#include "qec/lrf.hpp"
#include "qec/quat_mean.hpp"
#include "qec/routing.hpp"
#include "qec/weiszfeld.hpp"

namespace qec {

namespace {

class Tracker {
 public:
  Tracker(std::string name, double tol) {
    r_.name = std::move(name);
    r_.tolerance = tol;
  }

  void record(double err, std::uint64_t seed) {
    ++trials_seen_;
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    r_.max_error = std::max(r_.max_error, err);
    if (err > r_.tolerance && !r_.failing_seed) r_.failing_seed = seed;
  }

  CheckResult result() {
    r_.trials = trials_seen_;
    return r_;
  }

 private:
  CheckResult r_;
  std::size_t trials_seen_ = 0;
};

std::uint64_t trial_seed(const SuiteOptions& opt, std::uint64_t salt, std::size_t t) {
  return opt.seed * 1000003ULL + salt * 7919ULL + t;
}

UnitQuaternion rand_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return UnitQuaternion::from_components(n(rng), n(rng), n(rng), n(rng));
}

Vec3 rand_vec3(std::mt19937_64& rng, double s) {
  std::normal_distribution<double> n(0.0, s);
  return {n(rng), n(rng), n(rng)};
}

double pose_error(const UnitQuaternion& a, const UnitQuaternion& b) { return geodesic_distance(a, b); }

double max_abs(const Vec4& a, const Vec4& b) {
  double m = 0.0;
  for (int i = 0; i < 4; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

double compare_capsules(const std::vector<Capsule>& a, const std::vector<Capsule>& b, bool poses) {
  double e = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j)
    e = std::max(e, poses ? max_abs(canonicalize_hemisphere(a[j].pose).vec(),
                                    canonicalize_hemisphere(b[j].pose).vec())
                          : std::abs(a[j].activation - b[j].activation));
  return e;
}

void record_capsules(Tracker& pose, Tracker& act, const std::vector<Capsule>& base,
                     const std::vector<Capsule>& rotated, const UnitQuaternion& g, std::uint64_t seed) {
  double pe = 0.0, ae = 0.0;
  for (std::size_t j = 0; j < base.size(); ++j) {
    pe = std::max(pe, pose_error(g * base[j].pose, rotated[j].pose));
    ae = std::max(ae, std::abs(base[j].activation - rotated[j].activation));
  }
  pose.record(pe, seed);
  act.record(ae, seed);
}

QecLayerConfig small_layer(const SuiteOptions& opt) {
  QecLayerConfig l{9, 2, 4, {}};
  l.skip_canonicalization = opt.skip_canonicalization;
  return l;
}

NetworkConfig small_network(const SuiteOptions& opt) {
  NetworkConfig cfg;
  cfg.class_count = 3;
  cfg.lrf_k = 12;
  cfg.num_lrf_points = 96;
  cfg.num_points = 12;
  cfg.hidden = 16;
  cfg.kernel_init_scale = 0.5;
  cfg.layers = {QecLayerConfig{9, 1, 6, {}}, QecLayerConfig{12, 6, 3, {}}};
  for (auto& l : cfg.layers) l.skip_canonicalization = opt.skip_canonicalization;
  return cfg;
}

}  // namespace

std::vector<CheckResult> check_mean(const SuiteOptions& opt) {
  Tracker pose("weighted_mean pose equivariance", kPoseTolerance);
  Tracker perm("weighted_mean permutation invariance", kPermutationTolerance);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = trial_seed(opt, 1, t);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> w(0.05, 1.0);
    QuatSet s;
    const std::size_t n = 2 + t % 15;
    for (std::size_t i = 0; i < n; ++i) {
      s.quats.push_back(rand_quat(rng));
      s.weights.push_back(w(rng));
    }
    const UnitQuaternion m = weighted_mean(s);
    const UnitQuaternion g = rand_quat(rng);
    QuatSet r = s;
    for (auto& q : r.quats) q = g * q;
    pose.record(pose_error(g * m, weighted_mean(r)), seed);

    QuatSet p = s;
    const auto idx = shuffled(n, rng);
    for (std::size_t i = 0; i < n; ++i) {
      p.quats[i] = s.quats[idx[i]];
      p.weights[i] = s.weights[idx[i]];
    }
    perm.record(max_abs(m.vec(), weighted_mean(p).vec()), seed);
  }
  return {pose.result(), perm.result()};
}

std::vector<CheckResult> check_routing(const SuiteOptions& opt) {
  Tracker pose("dynamic_route pose equivariance", kPoseTolerance);
  Tracker act("dynamic_route activation invariance", kActivationTolerance);
  Tracker perm("dynamic_route permutation invariance", kPermutationTolerance);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = trial_seed(opt, 2, t);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> a(0.05, 1.0);
    const std::size_t L = 3 + t % 12, M = 1 + t % 5;
    VoteTensor v{L, M, {}};
    std::vector<double> alpha(L);
    for (std::size_t i = 0; i < L * M; ++i) v.votes.push_back(rand_quat(rng));
    for (auto& x : alpha) x = a(rng);
    RoutingConfig cfg;
    cfg.iterations = 1 + static_cast<int>(t % 4);
    const RoutingOutput base = dynamic_route(v, alpha, cfg);

    const UnitQuaternion g = rand_quat(rng);
    VoteTensor rv = v;
    for (auto& q : rv.votes) q = g * q;
    record_capsules(pose, act, base.capsules, dynamic_route(rv, alpha, cfg).capsules, g, seed);

    const auto idx = shuffled(L, rng);
    VoteTensor pv = v;
    std::vector<double> pa(L);
    for (std::size_t i = 0; i < L; ++i) {
      pa[i] = alpha[idx[i]];
      for (std::size_t j = 0; j < M; ++j) pv.votes[i * M + j] = v.at(idx[i], j);
    }
    const RoutingOutput po = dynamic_route(pv, pa, cfg);
    perm.record(std::max(compare_capsules(base.capsules, po.capsules, true),
                         compare_capsules(base.capsules, po.capsules, false)),
                seed);
  }
  return {pose.result(), act.result(), perm.result()};
}

std::vector<CheckResult> check_qec_layer(const SuiteOptions& opt) {
  Tracker pose("qec_forward pose equivariance", kPoseTolerance);
  Tracker act("qec_forward activation invariance", kActivationTolerance);
  Tracker perm("qec_forward permutation invariance", kPermutationTolerance);
  const QecLayerConfig layer = small_layer(opt);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = trial_seed(opt, 3, t);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> a(0.05, 1.0);
    const MlpParams mlp = init_mlp(layer, 16, 0.5, seed);
    std::vector<Vec3> pts(layer.K);
    std::vector<Capsule> caps(layer.K * layer.Nc);
    for (auto& p : pts) p = rand_vec3(rng, 1.0);
    for (auto& c : caps) c = Capsule{rand_quat(rng), a(rng)};
    const auto base = qec_forward(pts, caps, mlp, layer, true);

    const UnitQuaternion g = rand_quat(rng);
    auto rpts = pts;
    auto rcaps = caps;
    for (auto& p : rpts) p = rotate_point(g, p);
    for (auto& c : rcaps) c.pose = g * c.pose;
    record_capsules(pose, act, base, qec_forward(rpts, rcaps, mlp, layer, true), g, seed);

    // The kernel acts per point, so reordering only changes summation order.
    const auto idx = shuffled(layer.K, rng);
    std::vector<Vec3> ppts(layer.K);
    std::vector<Capsule> pcaps(caps.size());
    for (std::size_t k = 0; k < layer.K; ++k) {
      ppts[k] = pts[idx[k]];
      for (std::size_t c = 0; c < layer.Nc; ++c) pcaps[k * layer.Nc + c] = caps[idx[k] * layer.Nc + c];
    }
    const auto po = qec_forward(ppts, pcaps, mlp, layer, true);
    perm.record(std::max(compare_capsules(base, po, true), compare_capsules(base, po, false)), seed);
  }
  return {pose.result(), act.result(), perm.result()};
}

std::vector<CheckResult> check_network(const SuiteOptions& opt) {
  Tracker pose("network_forward pose equivariance", kPoseTolerance);
  Tracker act("network_forward activation invariance", kActivationTolerance);
  Tracker perm("network_forward permutation invariance", kPermutationTolerance);
  NetworkConfig cfg = small_network(opt);
  const auto templates = toy_class_names();
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = trial_seed(opt, 4, t);
    std::mt19937_64 rng(seed);
    cfg.seed = seed;
    const NetworkParams params = init_network(cfg);
    const TriMesh mesh = toy_template(toy_class_from_name(templates[t % templates.size()]));
    const PointCloud cloud = sample_surface(mesh, 192, seed);

    const PreparedCloud prep = prepare_cloud(cloud, cfg, seed);
    const LatentCapsules base = network_forward(prep, params, cfg);

    const UnitQuaternion g = rand_quat(rng);
    const Vec3 shift = rand_vec3(rng, 2.0);
    const PreparedCloud rprep = prepare_cloud(transform_cloud(cloud, g, shift), cfg, seed);
    record_capsules(pose, act, base.capsules, network_forward(rprep, params, cfg).capsules, g, seed);

    // Reorder pooling patches and the neighbors inside each patch.
    const std::size_t P = prep.center_points.size(), K = cfg.layers[0].K;
    const auto pidx = shuffled(P, rng);
    PreparedCloud pp;
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t src = pidx[p];
      pp.center_points.push_back(prep.center_points[src]);
      const auto kidx = shuffled(K, rng);
      for (std::size_t k = 0; k < K; ++k) {
        pp.patch_points.push_back(prep.patch_points[src * K + kidx[k]]);
        pp.patch_frames.push_back(prep.patch_frames[src * K + kidx[k]]);
      }
    }
    const LatentCapsules po = network_forward(pp, params, cfg);
    perm.record(std::max(compare_capsules(base.capsules, po.capsules, true),
                         compare_capsules(base.capsules, po.capsules, false)),
                seed);
  }
  return {pose.result(), act.result(), perm.result()};
}

std::vector<CheckResult> check_lrf(const SuiteOptions& opt) {
  Tracker frame("lrf frame equivariance", kPoseTolerance);
  const auto names = toy_class_names();
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = trial_seed(opt, 5, t);
    std::mt19937_64 rng(seed);
    const PointCloud cloud = sample_surface(toy_template(toy_class_from_name(names[t % names.size()])), 128, seed);
    const UnitQuaternion g = rand_quat(rng);
    const CloudLrfResult a = compute_cloud_lrfs(cloud, 10);
    const CloudLrfResult b = compute_cloud_lrfs(transform_cloud(cloud, g, rand_vec3(rng, 1.0)), 10);
    double err = a.kept == b.kept ? 0.0 : std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.cloud.frames.size() && std::isfinite(err); ++i)
      err = std::max(err, pose_error(g * a.cloud.frames[i], b.cloud.frames[i]));
    frame.record(err, seed);
  }
  return {frame.result()};
}

std::vector<CheckResult> check_algebra(const SuiteOptions& opt) {
  Tracker hom("T(p∘r) = T(p)T(r)", kAlgebraTolerance);
  Tracker inv("geodesic distance left-invariance", kAlgebraTolerance);
  const std::size_t pairs = opt.trials * 10;
  for (std::size_t t = 0; t < pairs; ++t) {
    const std::uint64_t seed = trial_seed(opt, 6, t);
    std::mt19937_64 rng(seed);
    const UnitQuaternion p = rand_quat(rng), r = rand_quat(rng), g = rand_quat(rng);
    const Mat4 lhs = to_matrix(p * r);
    const Mat4 rhs = matmul(to_matrix(p), to_matrix(r));
    double e = 0.0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) e = std::max(e, std::abs(lhs[i][j] - rhs[i][j]));
    hom.record(e, seed);
    inv.record(std::abs(geodesic_distance(g * p, g * r) - geodesic_distance(p, r)), seed);
  }
  return {hom.result(), inv.result()};
}

std::vector<CheckResult> check_weiszfeld(const SuiteOptions& opt) {
  std::vector<CheckResult> out;
  for (double qn : {1.0, 1.5, 2.0}) {
    Tracker mono("weiszfeld monotone trace q=" + std::string(qn == 1.0 ? "1" : qn == 1.5 ? "1.5" : "2"),
                 kMonotoneTolerance);
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::uint64_t seed = trial_seed(opt, 7, t);
      std::mt19937_64 rng(seed);
      WeiszfeldProblem prob;
      prob.q_norm = qn;
      // Independent random rotations are almost surely off a single geodesic.
      for (std::size_t i = 0; i < 3 + t % 10; ++i) prob.subspaces.push_back({rand_quat(rng)});
      const WeiszfeldResult r = weiszfeld_solve(prob, rand_quat(rng).vec(), seed);
      double worst = 0.0;
      for (std::size_t i = 1; i < r.trace.size(); ++i) worst = std::max(worst, r.trace[i] - r.trace[i - 1]);
      mono.record(worst, seed);
    }
    out.push_back(mono.result());
  }
  return out;
}

std::vector<CheckResult> run_invariant_suite(const SuiteOptions& opt) {
  std::vector<CheckResult> all;
  for (auto* fn : {&check_algebra, &check_mean, &check_routing, &check_lrf, &check_qec_layer, &check_network,
                   &check_weiszfeld}) {
    auto part = fn(opt);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

}  // namespace qec
