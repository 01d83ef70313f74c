#include "qec/capsnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "qec/error.hpp"
#include "qec/lrf.hpp"
#include "qec/quat_mean.hpp"

namespace qec {

using diff::Tape;
using diff::Var;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

NetworkConfig NetworkConfig::defaults(std::size_t class_count) {
  NetworkConfig cfg;
  cfg.class_count = class_count;
  cfg.layers = {QecLayerConfig{9, 1, 64, {}}, QecLayerConfig{cfg.num_points, 64, class_count, {}}};
  return cfg;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, m); };
  if (class_count == 0) fail("class_count must be positive");
  if (lrf_k < 3) fail("lrf_k must be at least 3");
  if (num_points == 0 || num_lrf_points < num_points) fail("need num_lrf_points >= num_points > 0");
  if (hidden == 0) fail("hidden must be positive");
  if (layers.size() != 2) fail("the network has exactly two QEC layers");
  for (const auto& l : layers) {
    if (l.K == 0 || l.Nc == 0 || l.M == 0) fail("layer sizes must be positive");
    if (l.routing.iterations < 1) fail("routing iterations must be >= 1");
  }
  if (layers[0].Nc != 1) fail("layer 1 takes one LRF channel per point");
  if (layers[0].K > num_lrf_points) fail("layer 1 patch size exceeds num_lrf_points");
  if (layers[1].K != num_points) fail("layer 2 patch size must equal num_points");
  if (layers[1].Nc != layers[0].M) fail("layer 2 channels must equal layer 1 outputs");
  if (layers[1].M != class_count) fail("layer 2 outputs must equal class_count");
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* s) { return k == s; }) == keys.end())
      throw Error(ErrorCode::InvalidArgument, "unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad value for '") + key + "': " + e.what());
  }
}

json routing_to_json(const RoutingConfig& r) {
  return {{"iterations", r.iterations},
          {"activation_norm", r.activation_norm == ActivationNorm::PerVote ? "per_vote" : "paper_literal"}};
}

RoutingConfig routing_from_json(const json& j) {
  reject_unknown(j, {"iterations", "activation_norm"}, "routing");
  RoutingConfig r;
  read_opt(j, "iterations", r.iterations);
  std::string norm = "per_vote";
  read_opt(j, "activation_norm", norm);
  if (norm == "per_vote") r.activation_norm = ActivationNorm::PerVote;
  else if (norm == "paper_literal") r.activation_norm = ActivationNorm::PaperLiteral;
  else throw Error(ErrorCode::InvalidArgument, "activation_norm must be per_vote or paper_literal");
  return r;
}

json network_json(const NetworkConfig& c) {
  json layers = json::array();
  for (const auto& l : c.layers)
    layers.push_back({{"K", l.K}, {"Nc", l.Nc}, {"M", l.M}, {"routing", routing_to_json(l.routing)}});
  return {{"class_count", c.class_count},
          {"lrf_k", c.lrf_k},
          {"num_lrf_points", c.num_lrf_points},
          {"num_points", c.num_points},
          {"hidden", c.hidden},
          {"weighted_channel_mean", c.weighted_channel_mean},
          {"kernel_init_scale", c.kernel_init_scale},
          {"seed", c.seed},
          {"layers", layers}};
}

NetworkConfig network_from_json(const json& j) {
  reject_unknown(j,
                 {"class_count", "lrf_k", "num_lrf_points", "num_points", "hidden", "weighted_channel_mean",
                  "kernel_init_scale", "seed", "layers"},
                 "network");
  NetworkConfig c;
  read_opt(j, "class_count", c.class_count);
  c = NetworkConfig::defaults(c.class_count);
  read_opt(j, "num_points", c.num_points);
  c.layers[1].K = c.num_points;
  read_opt(j, "lrf_k", c.lrf_k);
  read_opt(j, "num_lrf_points", c.num_lrf_points);
  read_opt(j, "hidden", c.hidden);
  read_opt(j, "weighted_channel_mean", c.weighted_channel_mean);
  read_opt(j, "kernel_init_scale", c.kernel_init_scale);
  read_opt(j, "seed", c.seed);
  if (j.contains("layers")) {
    const json& ls = j.at("layers");
    if (!ls.is_array()) throw Error(ErrorCode::InvalidArgument, "layers must be an array");
    c.layers.clear();
    for (const auto& lj : ls) {
      reject_unknown(lj, {"K", "Nc", "M", "routing"}, "layer");
      QecLayerConfig l;
      read_opt(lj, "K", l.K);
      read_opt(lj, "Nc", l.Nc);
      read_opt(lj, "M", l.M);
      if (lj.contains("routing")) l.routing = routing_from_json(lj.at("routing"));
      c.layers.push_back(l);
    }
  }
  return c;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
}

}  // namespace

std::string network_config_to_json(const NetworkConfig& cfg) { return network_json(cfg).dump(2); }

NetworkConfig network_config_from_json(const std::string& text) { return network_from_json(parse_json(text)); }

std::string train_config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"margin", c.margin},
              {"margin_ramp", c.margin_ramp},
              {"margin_max", c.margin_max},
              {"siamese", c.siamese},
              {"rotation_loss_weight", c.rotation_loss_weight},
              {"early_stop_accuracy", c.early_stop_accuracy},
              {"early_stop_patience", c.early_stop_patience},
              {"eval_every", c.eval_every},
              {"seed", c.seed}}
      .dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = parse_json(text);
  reject_unknown(j,
                 {"epochs", "learning_rate", "batch_size", "margin", "margin_ramp", "margin_max", "siamese",
                  "rotation_loss_weight", "early_stop_accuracy", "early_stop_patience", "eval_every", "seed"},
                 "train");
  TrainConfig c;
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "margin", c.margin);
  read_opt(j, "margin_ramp", c.margin_ramp);
  read_opt(j, "margin_max", c.margin_max);
  read_opt(j, "siamese", c.siamese);
  read_opt(j, "rotation_loss_weight", c.rotation_loss_weight);
  read_opt(j, "early_stop_accuracy", c.early_stop_accuracy);
  read_opt(j, "early_stop_patience", c.early_stop_patience);
  read_opt(j, "eval_every", c.eval_every);
  read_opt(j, "seed", c.seed);
  if (c.batch_size == 0 || c.eval_every == 0) throw Error(ErrorCode::InvalidArgument, "batch_size and eval_every must be positive");
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

std::vector<diff::Parameter*> NetworkParams::all() {
  std::vector<diff::Parameter*> out;
  for (auto& l : layers)
    for (auto* p : {&l.W1, &l.b1, &l.W2, &l.b2}) out.push_back(p);
  return out;
}

std::vector<const diff::Parameter*> NetworkParams::all() const {
  std::vector<const diff::Parameter*> out;
  for (const auto& l : layers)
    for (const auto* p : {&l.W1, &l.b1, &l.W2, &l.b2}) out.push_back(p);
  return out;
}

MlpParams init_mlp(const QecLayerConfig& layer, std::size_t hidden, double init_scale, std::uint64_t seed,
                   const std::string& prefix) {
  const std::size_t in = 3 * layer.Nc;
  const std::size_t out = layer.Nc * layer.M * 4;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> he(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  std::normal_distribution<double> small(0.0, init_scale);

  MlpParams p;
  p.W1 = {prefix + "W1", {in, hidden}, std::vector<double>(in * hidden)};
  p.b1 = {prefix + "b1", {hidden}, std::vector<double>(hidden, 0.0)};
  p.W2 = {prefix + "W2", {hidden, out}, std::vector<double>(hidden * out)};
  p.b2 = {prefix + "b2", {out}, std::vector<double>(out, 0.0)};
  for (double& v : p.W1.value) v = he(rng);
  for (double& v : p.W2.value) v = init_scale > 0.0 ? small(rng) : 0.0;
  for (std::size_t i = 0; i < out; i += 4) p.b2.value[i] = 1.0;
  return p;
}

NetworkParams init_network(const NetworkConfig& cfg) {
  cfg.validate();
  NetworkParams p;
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    const std::uint64_t seed = cfg.seed ^ (0x9E3779B97F4A7C15ULL * (l + 1));
    p.layers.push_back(init_mlp(cfg.layers[l], cfg.hidden, cfg.kernel_init_scale, seed,
                                "layer" + std::to_string(l) + "."));
  }
  return p;
}

std::size_t mlp_parameter_count(std::size_t Nc, std::size_t M, std::size_t hidden) {
  const std::size_t in = 3 * Nc, out = Nc * M * 4;
  return in * hidden + hidden + hidden * out + out;
}

std::size_t parameter_count(const NetworkConfig& cfg) {
  std::size_t n = 0;
  for (const auto& l : cfg.layers) n += mlp_parameter_count(l.Nc, l.M, cfg.hidden);
  return n;
}

// ---------------------------------------------------------------------------
// Reference single-patch layer

namespace {

std::vector<double> mlp_eval(const MlpParams& p, std::span<const double> x) {
  const std::size_t in = p.W1.shape[0], hidden = p.W1.shape[1], out = p.W2.shape[1];
  std::vector<double> h(p.b1.value);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < hidden; ++j) h[j] += x[i] * p.W1.value[i * hidden + j];
  for (double& v : h) v = std::max(v, 0.0);
  std::vector<double> o(p.b2.value);
  for (std::size_t i = 0; i < hidden; ++i) {
    if (h[i] == 0.0) continue;
    for (std::size_t j = 0; j < out; ++j) o[j] += h[i] * p.W2.value[i * out + j];
  }
  return o;
}

UnitQuaternion unit_or_identity(const Vec4& v) {
  return norm(v) < 1e-12 ? UnitQuaternion::identity() : UnitQuaternion::from_vec4(v);
}

}  // namespace

std::vector<Capsule> qec_forward(std::span<const Vec3> points, const std::vector<Capsule>& caps_in,
                                 const MlpParams& params, const QecLayerConfig& cfg, bool weighted) {
  const std::size_t K = cfg.K, Nc = cfg.Nc, M = cfg.M;
  if (points.size() != K || caps_in.size() != K * Nc)
    throw Error(ErrorCode::ShapeMismatch, "qec_forward expects K points and K x N^c capsules");
  if (params.W1.shape != diff::Shape{3 * Nc, params.W1.shape[1]} || params.W2.shape[1] != Nc * M * 4)
    throw Error(ErrorCode::ShapeMismatch, "kernel parameters do not match the layer shape");

  std::vector<UnitQuaternion> mu_inv(Nc);
  for (std::size_t c = 0; c < Nc; ++c) {
    QuatSet set;
    for (std::size_t k = 0; k < K; ++k) {
      set.quats.push_back(caps_in[k * Nc + c].pose);
      set.weights.push_back(weighted ? caps_in[k * Nc + c].activation : 1.0);
    }
    mu_inv[c] = inverse(weighted_mean(set));
  }

  std::vector<UnitQuaternion> transforms(K * Nc * M);
  std::vector<double> feat(3 * Nc);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t c = 0; c < Nc; ++c) {
      const Vec3 x = cfg.skip_canonicalization ? points[k] : rotate_point(mu_inv[c], points[k]);
      std::copy(x.begin(), x.end(), &feat[3 * c]);
    }
    const std::vector<double> o = mlp_eval(params, feat);
    for (std::size_t c = 0; c < Nc; ++c)
      for (std::size_t j = 0; j < M; ++j) {
        const std::size_t r = c * M + j;
        transforms[(k * Nc + c) * M + j] =
            unit_or_identity({o[4 * r], o[4 * r + 1], o[4 * r + 2], o[4 * r + 3]});
      }
  }

  const VoteTensor votes = compute_votes(caps_in, transforms, M);
  std::vector<double> alpha(caps_in.size());
  for (std::size_t i = 0; i < caps_in.size(); ++i) alpha[i] = caps_in[i].activation;
  RoutingConfig rc = cfg.routing;
  if (rc.patch_size == 0) rc.patch_size = K;
  return dynamic_route(votes, alpha, rc).capsules;
}

// ---------------------------------------------------------------------------
// Differentiable batched layer

MlpVars mlp_on_tape(Tape& t, const MlpParams& p, bool trainable) {
  auto leaf = [&](const diff::Parameter& q) {
    return trainable ? t.parameter(q.shape, q.value) : t.constant(q.shape, q.value);
  };
  return {leaf(p.W1), leaf(p.b1), leaf(p.W2), leaf(p.b2)};
}

QecTapeOutput qec_forward_tape(Tape& t, std::span<const Vec3> points, Var poses, Var activations,
                               const MlpVars& mlp, const QecLayerConfig& cfg, std::size_t P,
                               bool weighted) {
  const std::size_t K = cfg.K, Nc = cfg.Nc, M = cfg.M;
  const std::size_t rows = P * K * Nc;
  if (points.size() != P * K || t.value(poses).size() != 4 * rows || t.value(activations).size() != rows)
    throw Error(ErrorCode::ShapeMismatch, "qec_forward_tape input sizes");

  // Channel means over each patch.
  std::vector<std::size_t> idx(rows);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t c = 0; c < Nc; ++c)
      for (std::size_t k = 0; k < K; ++k) idx[(p * Nc + c) * K + k] = (p * K + k) * Nc + c;
  const Var sets = diff::reshape(t, diff::gather_rows(t, poses, idx), {P * Nc, K, 4});
  const Var set_w = weighted
                        ? diff::reshape(t, diff::gather_rows(t, activations, idx), {P * Nc, K})
                        : t.constant({P * Nc, K}, std::vector<double>(rows, 1.0));
  const Var mu = diff::quat_mean_node(t, sets, set_w);

  // Canonical coordinates x' = μ⁻¹ x per (patch, point, channel).
  std::vector<double> xs(3 * rows);
  std::vector<std::size_t> mu_idx(rows);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < Nc; ++c) {
        const std::size_t r = (p * K + k) * Nc + c;
        mu_idx[r] = p * Nc + c;
        std::copy_n(points[p * K + k].begin(), 3, &xs[3 * r]);
      }
  Var x = t.constant({rows, 3}, std::move(xs));
  if (!cfg.skip_canonicalization)
    x = diff::rotate_batch(t, diff::conjugate_last4(t, diff::gather_rows(t, mu, mu_idx)), x);

  // Kernel.
  const Var feat = diff::reshape(t, x, {P * K, 3 * Nc});
  const Var h = diff::relu(t, diff::add_bias(t, diff::matmul(t, feat, mlp.W1), mlp.b1));
  const Var o = diff::add_bias(t, diff::matmul(t, h, mlp.W2), mlp.b2);
  const Var tq = diff::normalize_last4(t, diff::reshape(t, o, {rows * M, 4}));

  // Votes v = q ∘ t.
  std::vector<std::size_t> q_idx(rows * M);
  for (std::size_t r = 0; r < q_idx.size(); ++r) q_idx[r] = r / M;
  const Var votes =
      diff::canonicalize_last4(t, diff::hamilton_batch(t, diff::gather_rows(t, poses, q_idx), tq));

  // Routing: one set per (patch, output) over L = K*N^c votes.
  const std::size_t L = K * Nc, S = P * M;
  std::vector<std::size_t> v_idx(S * L), a_idx(S * L), s_idx(S * L);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t j = 0; j < M; ++j)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < Nc; ++c) {
          const std::size_t s = p * M + j;
          const std::size_t e = s * L + k * Nc + c;
          const std::size_t in = (p * K + k) * Nc + c;
          v_idx[e] = in * M + j;
          a_idx[e] = in;
          s_idx[e] = s;
        }
  const Var vflat = diff::gather_rows(t, votes, v_idx);
  const Var V = diff::reshape(t, vflat, {S, L, 4});
  const Var a = diff::gather_rows(t, activations, a_idx);
  Var qhat = diff::quat_mean_node(t, V, diff::reshape(t, a, {S, L}));
  for (int it = 0; it < cfg.routing.iterations; ++it) {
    const Var d = diff::geodesic_batch(t, diff::gather_rows(t, qhat, s_idx), vflat);
    const Var w = diff::mul(t, diff::sigmoid(t, diff::scale(t, d, -1.0)), a);
    qhat = diff::quat_mean_node(t, V, diff::reshape(t, w, {S, L}));
  }
  const Var d = diff::geodesic_batch(t, diff::gather_rows(t, qhat, s_idx), vflat);
  const double z = cfg.routing.activation_norm == ActivationNorm::PaperLiteral
                       ? static_cast<double>(cfg.routing.patch_size ? cfg.routing.patch_size : K)
                       : static_cast<double>(L);
  const Var act = diff::sigmoid(t, diff::scale(t, diff::sum_groups(t, d, L), -1.0 / z));
  return {qhat, act};
}

// ---------------------------------------------------------------------------
// Network

PreparedCloud prepare_cloud(const PointCloud& cloud, const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t K1 = cfg.layers[0].K;
  PreparedCloud out;
  PointCloud framed;
  if (cloud.has_frames()) {
    framed = cloud;
  } else {
    CloudLrfResult r = compute_cloud_lrfs(cloud, cfg.lrf_k);
    out.degenerate_lrfs = r.degenerate;
    framed = std::move(r.cloud);
  }
  if (framed.size() < std::max(cfg.num_points, K1))
    throw Error(ErrorCode::InsufficientPoints,
                "cloud has " + std::to_string(framed.size()) + " usable points, need " +
                    std::to_string(std::max(cfg.num_points, K1)));

  const std::size_t keep = std::min(cfg.num_lrf_points, framed.size());
  const auto sub_idx = farthest_point_sampling(framed.points, keep, seed);
  std::vector<Vec3> pts(keep);
  std::vector<Vec4> frames(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    pts[i] = framed.points[sub_idx[i]];
    frames[i] = framed.frames[sub_idx[i]].vec();
  }
  const auto centers = farthest_point_sampling(pts, cfg.num_points, seed + 1);
  const Grouping g = group_knn(pts, centers, K1);

  std::vector<Vec3> cpts;
  for (std::size_t c : centers) cpts.push_back(pts[c]);
  const Vec3 cc = centroid(cpts);
  for (std::size_t p = 0; p < centers.size(); ++p) {
    out.center_points.push_back(cpts[p] - cc);
    for (std::size_t m : g.patches[p]) {
      out.patch_points.push_back(pts[m] - cpts[p]);
      out.patch_frames.push_back(frames[m]);
    }
  }
  return out;
}

NetworkTapeOutput network_forward_tape(Tape& t, const PreparedCloud& in, const std::vector<MlpVars>& mlps,
                                       const NetworkConfig& cfg) {
  const auto& l1 = cfg.layers[0];
  const auto& l2 = cfg.layers[1];
  const std::size_t P = in.center_points.size();
  if (P != l2.K || in.patch_points.size() != P * l1.K || in.patch_frames.size() != P * l1.K)
    throw Error(ErrorCode::ShapeMismatch, "prepared cloud does not match the network config");

  std::vector<double> q(4 * P * l1.K);
  for (std::size_t i = 0; i < in.patch_frames.size(); ++i) std::copy_n(in.patch_frames[i].begin(), 4, &q[4 * i]);
  const Var poses = t.constant({P * l1.K, 4}, std::move(q));
  const Var ones = t.constant({P * l1.K}, std::vector<double>(P * l1.K, 1.0));

  const QecTapeOutput h1 = qec_forward_tape(t, in.patch_points, poses, ones, mlps[0], l1, P, cfg.weighted_channel_mean);
  const QecTapeOutput h2 =
      qec_forward_tape(t, in.center_points, h1.poses, h1.activations, mlps[1], l2, 1, cfg.weighted_channel_mean);
  return {h2.poses, h2.activations};
}

namespace {

LatentCapsules read_latent(const Tape& t, const NetworkTapeOutput& out) {
  LatentCapsules lat;
  const auto& p = t.value(out.poses);
  const auto& a = t.value(out.activations);
  for (std::size_t j = 0; j < a.size(); ++j)
    lat.capsules.push_back(
        {UnitQuaternion::from_vec4({p[4 * j], p[4 * j + 1], p[4 * j + 2], p[4 * j + 3]}), a[j]});
  lat.degenerate_means = t.degenerate_means;
  lat.zero_norm_events = t.zero_norm_events;
  return lat;
}

}  // namespace

LatentCapsules network_forward(const PreparedCloud& in, const NetworkParams& params, const NetworkConfig& cfg) {
  Tape t;
  std::vector<MlpVars> mlps;
  for (const auto& l : params.layers) mlps.push_back(mlp_on_tape(t, l, false));
  return read_latent(t, network_forward_tape(t, in, mlps, cfg));
}

LatentCapsules network_forward(const PointCloud& cloud, const NetworkParams& params, const NetworkConfig& cfg) {
  return network_forward(prepare_cloud(cloud, cfg, cfg.seed), params, cfg);
}

std::size_t classify(const LatentCapsules& latent) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < latent.capsules.size(); ++j)
    if (latent.capsules[j].activation > latent.capsules[best].activation) best = j;
  return best;
}

UnitQuaternion canonical_pose(const LatentCapsules& latent) {
  return canonicalize_hemisphere(latent.capsules.at(classify(latent)).pose);
}

RelativePose siamese_relative_pose(const LatentCapsules& a, const LatentCapsules& b) {
  const std::size_t ia = classify(a), ib = classify(b);
  return {canonicalize_hemisphere(relative_rotation(a.capsules.at(ia).pose, b.capsules.at(ib).pose)), ia != ib};
}

// ---------------------------------------------------------------------------
// Training

std::size_t thread_count() {
  if (const char* env = std::getenv("QEC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

/// Runs fn(i) for i in [0, n) on up to thread_count() threads.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct StepResult {
  std::vector<std::vector<double>> grads;
  double loss = 0.0, spread = 0.0, rotation = 0.0;
  bool correct = false;
  std::size_t degenerate = 0, zero_norm = 0;
};

StepResult sample_step(const TrainSample& s, const NetworkParams& params, const NetworkConfig& net,
                       const TrainConfig& cfg, double margin) {
  Tape t;
  std::vector<MlpVars> mlps;
  for (const auto& l : params.layers) mlps.push_back(mlp_on_tape(t, l, true));

  StepResult r;
  const NetworkTapeOutput a = network_forward_tape(t, s.cloud, mlps, net);
  const auto label = static_cast<std::size_t>(s.label);
  Var loss = diff::spread_loss(t, a.activations, label, margin);
  r.spread = t.value(loss)[0];
  r.correct = classify(read_latent(t, a)) == label;

  if (cfg.siamese && s.partner) {
    const NetworkTapeOutput b = network_forward_tape(t, *s.partner, mlps, net);
    const std::size_t row[1] = {label};
    const Var pa = diff::gather_rows(t, a.poses, row);
    const Var pb = diff::gather_rows(t, b.poses, row);
    const Var rel = diff::hamilton_batch(t, pb, diff::conjugate_last4(t, pa));
    const Vec4& g = s.relative.vec();
    const Var truth = t.constant({1, 4}, {g[0], g[1], g[2], g[3]});
    const Var rl = diff::rotation_loss(t, rel, truth);
    r.rotation = t.value(rl)[0];
    loss = diff::add(t, loss, diff::scale(t, rl, cfg.rotation_loss_weight));
  }
  r.loss = t.value(loss)[0];
  r.degenerate = t.degenerate_means;
  r.zero_norm = t.zero_norm_events;
  if (!std::isfinite(r.loss)) return r;

  t.backward(loss);
  for (const auto& m : mlps)
    for (Var v : {m.W1, m.b1, m.W2, m.b2}) r.grads.push_back(t.grad(v));
  return r;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json metrics_json(const EvalMetrics& m) {
  return {{"count", m.count},
          {"nr_accuracy", m.nr_accuracy},
          {"ar_accuracy", m.ar_accuracy},
          {"rae_median", m.rae_median},
          {"rae_mean", m.rae_mean},
          {"class_mismatches", m.class_mismatches}};
}

}  // namespace

EvalMetrics evaluate(const std::vector<EvalSample>& samples, const NetworkParams& params,
                     const NetworkConfig& cfg) {
  struct One {
    bool nr = false, ar = false, has_ar = false, has_rae = false, mismatch = false;
    double rae = 0.0;
  };
  std::vector<One> res(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const EvalSample& s = samples[i];
    One& o = res[i];
    const LatentCapsules a = network_forward(s.nr, params, cfg);
    o.nr = classify(a) == static_cast<std::size_t>(s.label);
    if (s.ar) {
      o.has_ar = true;
      o.ar = classify(network_forward(*s.ar, params, cfg)) == static_cast<std::size_t>(s.label);
    }
    if (s.partner) {
      const RelativePose rp = siamese_relative_pose(a, network_forward(*s.partner, params, cfg));
      o.has_rae = true;
      o.mismatch = rp.class_mismatch;
      o.rae = rae(rp.rotation, s.relative);
    }
  });

  EvalMetrics m;
  m.count = samples.size();
  std::size_t nr = 0, ar = 0, ar_n = 0;
  for (const One& o : res) {
    nr += o.nr;
    if (o.has_ar) {
      ++ar_n;
      ar += o.ar;
    }
    if (o.has_rae) {
      m.rae.push_back(o.rae);
      m.class_mismatches += o.mismatch;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.nr_accuracy = m.count ? static_cast<double>(nr) / static_cast<double>(m.count) : nan;
  m.ar_accuracy = ar_n ? static_cast<double>(ar) / static_cast<double>(ar_n) : nan;
  m.rae_median = median_of(m.rae);
  m.rae_mean = m.rae.empty() ? nan : std::accumulate(m.rae.begin(), m.rae.end(), 0.0) / static_cast<double>(m.rae.size());
  return m;
}

std::string epoch_record_to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"loss", r.loss},
         {"spread_loss", r.spread_loss},
         {"rotation_loss", r.rotation_loss},
         {"train_accuracy", r.train_accuracy},
         {"degenerate_means", r.degenerate_means},
         {"zero_norm_events", r.zero_norm_events},
         {"seconds", r.seconds}};
  if (r.validation) j["validation"] = metrics_json(*r.validation);
  return j.dump();
}

TrainResult train(const std::vector<TrainSample>& data, const std::vector<EvalSample>& validation,
                  const NetworkConfig& net, const TrainConfig& cfg, std::ostream* log, NetworkParams* initial) {
  net.validate();
  if (data.empty()) throw Error(ErrorCode::EmptyInput, "no training samples");
  if (cfg.batch_size == 0 || cfg.eval_every == 0)
    throw Error(ErrorCode::InvalidArgument, "batch_size and eval_every must be positive");
  for (const auto& s : data)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= net.class_count)
      throw Error(ErrorCode::BadTarget, "training label out of range");

  TrainResult out;
  out.params = initial ? *initial : init_network(net);
  auto params = out.params.all();
  diff::Adam adam(cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t streak = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    const double margin =
        cfg.margin_ramp && cfg.epochs > 1
            ? cfg.margin + (cfg.margin_max - cfg.margin) * static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1)
            : cfg.margin;

    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, order.size() - b0);
      for (const auto* prm : params)
        for (double x : prm->value)
          if (!std::isfinite(x))
            throw Error(ErrorCode::NonFiniteLoss, "non-finite parameter " + prm->name + " at epoch " +
                                                      std::to_string(epoch + 1) + ", batch offset " + std::to_string(b0));
      std::vector<StepResult> res(nb);
      parallel_for(nb, [&](std::size_t i) { res[i] = sample_step(data[order[b0 + i]], out.params, net, cfg, margin); });

      std::vector<std::vector<double>> grads;
      for (std::size_t i = 0; i < nb; ++i) {
        const StepResult& r = res[i];
        if (!std::isfinite(r.loss)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch + 1 << ", sample " << order[b0 + i] << " (spread "
              << r.spread << ", rotation " << r.rotation << ", degenerate means " << r.degenerate
              << ", zero-norm kernels " << r.zero_norm << ")";
          throw Error(ErrorCode::NonFiniteLoss, msg.str());
        }
        if (grads.empty()) grads.assign(r.grads.size(), {});
        for (std::size_t k = 0; k < r.grads.size(); ++k) {
          if (grads[k].empty()) grads[k].assign(r.grads[k].size(), 0.0);
          for (std::size_t e = 0; e < r.grads[k].size(); ++e) grads[k][e] += r.grads[k][e];
        }
        rec.loss += r.loss;
        rec.spread_loss += r.spread;
        rec.rotation_loss += r.rotation;
        rec.degenerate_means += r.degenerate;
        rec.zero_norm_events += r.zero_norm;
        correct += r.correct;
      }
      const double inv = 1.0 / static_cast<double>(nb);
      for (auto& g : grads)
        for (double& v : g) v *= inv;
      adam.step(params, grads);
    }
    const double n = static_cast<double>(data.size());
    rec.loss /= n;
    rec.spread_loss /= n;
    rec.rotation_loss /= n;
    rec.train_accuracy = static_cast<double>(correct) / n;

    const bool last = epoch + 1 == cfg.epochs;
    streak = rec.train_accuracy >= cfg.early_stop_accuracy ? streak + 1 : 0;
    const bool stop = streak >= cfg.early_stop_patience;
    if (!validation.empty() && ((epoch + 1) % cfg.eval_every == 0 || last || stop))
      rec.validation = evaluate(validation, out.params, net);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) *log << epoch_record_to_json(rec) << '\n' << std::flush;
    out.history.push_back(std::move(rec));
    if (stop) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_model(const std::filesystem::path& path, const Model& model) {
  model.config.validate();
  diff::Checkpoint ckpt;
  ckpt.manifest = json{{"format", "qec-model"},
                       {"network", network_json(model.config)},
                       {"classes", model.class_names}}
                      .dump();
  for (const auto* p : model.params.all()) ckpt.arrays.push_back({p->name, p->shape, p->value});
  diff::save_checkpoint(path, ckpt);
}

Model load_model(const std::filesystem::path& path) {
  const diff::Checkpoint ckpt = diff::load_checkpoint(path);
  const json man = parse_json(ckpt.manifest);
  if (!man.is_object() || man.value("format", "") != "qec-model" || !man.contains("network"))
    throw Error(ErrorCode::ParseError, "checkpoint manifest is not a qec model");
  Model m;
  m.config = network_from_json(man.at("network"));
  if (man.contains("classes")) m.class_names = man.at("classes").get<std::vector<std::string>>();
  m.params = init_network(m.config);
  for (auto* p : m.params.all()) {
    const diff::NamedArray& a = ckpt.at(p->name);
    if (a.shape != p->shape) throw Error(ErrorCode::ParseError, "array '" + p->name + "' has the wrong shape");
    p->value = a.data;
  }
  return m;
}

}  // namespace qec
