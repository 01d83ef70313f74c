// qec: command-line front end for the quaternion capsule library.
//
// Exit codes: 0 success, 1 input or runtime error, 2 invariant failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qec/capsnet.hpp"
#include "qec/error.hpp"
#include "qec/experiment.hpp"
#include "qec/lrf.hpp"
#include "qec/pointcloud.hpp"
#include "qec/routing.hpp"
#include "qec/verify.hpp"

namespace fs = std::filesystem;
using namespace qec;

namespace {

constexpr int kOk = 0;
constexpr int kInputError = 1;
constexpr int kInvariantFailure = 2;

std::string fmt(double v, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string quat_text(const UnitQuaternion& q, int digits = 17) {
  return fmt(q.w(), digits) + " " + fmt(q.x(), digits) + " " + fmt(q.y(), digits) + " " + fmt(q.z(), digits);
}

// Writes to `path`, or stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) std::cout << text;
  else atomic_write(path, text);
}

int cmd_lrf(const std::string& input, std::size_t k, std::size_t points, std::uint64_t seed, const std::string& out) {
  const PointCloud cloud = load_cloud(input, points, seed);
  const CloudLrfResult r = compute_cloud_lrfs(cloud, k);
  std::cerr << "degenerate patches: " << r.degenerate << " of " << cloud.size() << "\n";
  if (r.cloud.points.empty()) throw Error(ErrorCode::DegeneratePatch, "every patch is degenerate");
  std::ostringstream s;
  for (std::size_t i = 0; i < r.cloud.points.size(); ++i) {
    const Vec3& p = r.cloud.points[i];
    s << fmt(p[0]) << ' ' << fmt(p[1]) << ' ' << fmt(p[2]) << ' ' << quat_text(r.cloud.frames[i]) << '\n';
  }
  emit(out, s.str());
  return kOk;
}

int cmd_verify(std::size_t trials, std::uint64_t seed, bool skip_canonicalization) {
  SuiteOptions opt;
  opt.trials = trials;
  opt.seed = seed;
  opt.skip_canonicalization = skip_canonicalization;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const CheckResult& r : run_invariant_suite(opt)) {
    std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << ": max error " << fmt(r.max_error, 3) << " (tolerance "
              << fmt(r.tolerance, 3) << ", " << r.trials << " trials)";
    if (!r.passed() && r.failing_seed) std::cout << ", failing seed " << *r.failing_seed;
    std::cout << '\n';
    ok = ok && r.passed();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (ok ? "all invariants hold" : "invariant violation") << " (" << fmt(secs, 3) << " s)\n";
  return ok ? kOk : kInvariantFailure;
}

NetworkConfig network_for(const RunConfig& cfg, std::size_t classes) {
  NetworkConfig net = cfg.has_network ? cfg.network : NetworkConfig::defaults(classes);
  if (net.class_count != classes)
    throw Error(ErrorCode::InvalidArgument, "config has " + std::to_string(net.class_count) + " classes, manifest has " +
                                                std::to_string(classes));
  return net;
}

int cmd_train(const std::string& manifest_path, const std::string& config_path, const std::string& out,
              std::string log_path) {
  const RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  const Manifest manifest = load_manifest(manifest_path);
  const NetworkConfig net = network_for(cfg, manifest.classes.size());
  const auto train_raw = load_split(manifest, "train", cfg.points_per_cloud, cfg.seed);
  if (train_raw.empty()) throw Error(ErrorCode::EmptyInput, "manifest has no train split");
  const auto data = prepare_training(train_raw, net, cfg.seed, cfg.training.siamese, cfg.points_per_cloud);
  std::vector<EvalSample> validation;
  if (!manifest.split("val").empty()) {
    EvalOptions eo;
    eo.points = cfg.points_per_cloud;
    eo.seed = cfg.seed + 1;
    validation = prepare_evaluation(load_split(manifest, "val", cfg.points_per_cloud, cfg.seed + 1), net, eo);
  }
  std::ostringstream log;
  const TrainResult r = train(data, validation, net, cfg.training, &log);
  save_model(out, {net, r.params, manifest.classes});
  if (log_path.empty()) log_path = out + ".log.jsonl";
  atomic_write(log_path, log.str());
  const EpochRecord& last = r.history.back();
  std::cout << "epochs " << r.history.size() << ", loss " << fmt(last.loss, 6) << ", train accuracy "
            << fmt(last.train_accuracy, 4) << "\n";
  return kOk;
}

int cmd_eval(const std::string& manifest_path, const std::string& ckpt, const std::string& split, bool rotate,
             double dropout, std::size_t points, std::uint64_t seed) {
  const Model model = load_model(ckpt);
  const Manifest manifest = load_manifest(manifest_path);
  const auto raw = load_split(manifest, split, points, seed);
  if (raw.empty()) throw Error(ErrorCode::EmptyInput, "manifest has no '" + split + "' split");
  EvalOptions opt;
  opt.rotate = rotate;
  opt.synthesize_partners = rotate;
  opt.dropout = dropout;
  opt.points = points;
  opt.seed = seed;
  const EvalMetrics m = evaluate(prepare_evaluation(raw, model.config, opt), model.params, model.config);
  std::cout << "samples " << m.count << "\n";
  std::cout << "accuracy NR " << fmt(m.nr_accuracy, 4) << "\n";
  if (rotate) std::cout << "accuracy AR " << fmt(m.ar_accuracy, 4) << "\n";
  if (!m.rae.empty()) {
    std::cout << "RAE mean " << fmt(m.rae_mean, 4) << ", median " << fmt(m.rae_median, 4) << ", class mismatches "
              << m.class_mismatches << "\n";
    for (const HistogramBin& b : rae_histogram(m.rae)) std::cout << "  <" << b.degrees << " deg " << fmt(b.fraction, 4) << "\n";
  }
  return kOk;
}

int cmd_pose(const std::string& input, const std::string& ckpt, std::size_t points, std::uint64_t seed) {
  const Model model = load_model(ckpt);
  const LatentCapsules latent = network_forward(prepare_cloud(load_cloud(input, points, seed), model.config, seed),
                                                model.params, model.config);
  const std::size_t c = classify(latent);
  std::cout << "class " << (c < model.class_names.size() ? model.class_names[c] : std::to_string(c)) << "\n";
  std::cout << "pose " << quat_text(canonical_pose(latent)) << "\n";
  return kOk;
}

int cmd_align(const std::string& a, const std::string& b, const std::string& ckpt, const std::vector<double>& truth,
              std::size_t points, std::uint64_t seed) {
  const Model model = load_model(ckpt);
  auto latent = [&](const std::string& path) {
    return network_forward(prepare_cloud(load_cloud(path, points, seed), model.config, seed), model.params, model.config);
  };
  const RelativePose rp = siamese_relative_pose(latent(a), latent(b));
  std::cout << "relative " << quat_text(rp.rotation) << "\n";
  if (rp.class_mismatch) std::cout << "warning: clouds classify differently\n";
  if (!truth.empty()) {
    if (truth.size() != 4) throw Error(ErrorCode::InvalidArgument, "--truth takes four components");
    std::cout << "RAE " << fmt(rae(rp.rotation, UnitQuaternion::from_components(truth[0], truth[1], truth[2], truth[3])), 6)
              << "\n";
  }
  return kOk;
}

int cmd_bench(const std::vector<std::size_t>& Ls, const std::vector<std::size_t>& Ms, const std::vector<int>& ks,
              std::size_t K, std::size_t repeats, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::cout << "L M k seconds count\n";
  for (std::size_t L : Ls)
    for (std::size_t M : Ms)
      for (int k : ks) {
        VoteTensor v{L, M, {}};
        for (std::size_t i = 0; i < L * M; ++i)
          v.votes.push_back(canonicalize_hemisphere(UnitQuaternion::from_components(n(rng), n(rng), n(rng), n(rng))));
        const std::vector<double> alpha(L, 1.0);
        RoutingConfig rc;
        rc.iterations = k;
        std::vector<double> times;
        for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          const RoutingOutput out = dynamic_route(v, alpha, rc);
          times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
          if (out.capsules.size() != M) throw Error(ErrorCode::ShapeMismatch, "routing output size");
        }
        std::sort(times.begin(), times.end());
        std::cout << L << ' ' << M << ' ' << k << ' ' << fmt(times[times.size() / 2], 4) << ' '
                  << routing_complexity(L, M, K, static_cast<std::uint64_t>(k)) << "\n";
      }
  return kOk;
}

int cmd_params(const std::string& config_path, std::size_t classes) {
  NetworkConfig net = NetworkConfig::defaults(classes);
  if (!config_path.empty()) {
    const RunConfig cfg = load_run_config(config_path);
    if (cfg.has_network) net = cfg.network;
  }
  net.validate();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    std::cout << "layer " << i + 1 << ": K " << l.K << ", Nc " << l.Nc << ", M " << l.M << ", parameters "
              << mlp_parameter_count(l.Nc, l.M, net.hidden) << "\n";
  }
  std::cout << "total parameters " << parameter_count(net) << "\n";
  return kOk;
}

int cmd_make_toy(const std::string& dir, std::size_t train_n, std::size_t test_n, std::size_t points,
                 std::uint64_t seed) {
  ToyProtocol p;
  p.train_per_class = train_n;
  p.test_per_class = test_n;
  p.points_per_cloud = points;
  p.seed = seed;
  write_toy_dataset(dir, p);
  std::cout << "wrote " << (fs::path(dir) / "manifest.json").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quaternion equivariant capsule networks for point clouds"};
  app.require_subcommand(1);
  int code = kOk;

  std::string input, input_b, out, config, ckpt, manifest, log_path, split = "test";
  std::size_t k = 9, points = 2048, trials = 100, repeats = 5, classes = 10, K = 9;
  std::size_t train_n = 50, test_n = 20;
  std::uint64_t seed = 0;
  bool skip_canon = false, rotate = false;
  double dropout = 0.0;
  std::vector<double> truth;
  std::vector<std::size_t> Ls{64}, Ms{64};
  std::vector<int> ks{3};

  auto* lrf = app.add_subcommand("lrf", "Per-point local reference frames as 'x y z qw qx qy qz' lines");
  lrf->add_option("cloud", input, "Point cloud (.xyz) or mesh (.off, .ply)")->required();
  lrf->add_option("--k", k, "Neighbors per plane fit")->capture_default_str();
  lrf->add_option("--points", points, "Samples drawn from mesh inputs")->capture_default_str();
  lrf->add_option("--seed", seed, "Sampling seed")->capture_default_str();
  lrf->add_option("--out", out, "Output file (default stdout)");
  lrf->callback([&] { code = cmd_lrf(input, k, points, seed, out); });

  auto* ver = app.add_subcommand("verify-equivariance", "Run the invariant suite");
  ver->add_option("--trials", trials, "Random trials per property")->capture_default_str();
  ver->add_option("--seed", seed, "Base seed")->capture_default_str();
  ver->add_flag("--inject-skip-canonicalization", skip_canon)->group("");
  ver->callback([&] { code = cmd_verify(trials, seed, skip_canon); });

  auto* tr = app.add_subcommand("train", "Train on a manifest's train split");
  tr->add_option("manifest", manifest, "Dataset manifest")->required();
  tr->add_option("--config", config, "Run configuration (JSON)");
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_option("--log", log_path, "Per-epoch JSONL log (default <out>.log.jsonl)");
  tr->callback([&] { code = cmd_train(manifest, config, out, log_path); });

  auto* ev = app.add_subcommand("eval", "Accuracy and relative-pose error on a split");
  ev->add_option("manifest", manifest, "Dataset manifest")->required();
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--split", split, "Split name")->capture_default_str();
  ev->add_flag("--rotate", rotate, "Also test arbitrarily rotated copies and rotated partners");
  ev->add_option("--dropout", dropout, "Patch dropout fraction")->check(CLI::Range(0.0, 0.99));
  ev->add_option("--points", points, "Samples drawn from mesh inputs")->capture_default_str();
  ev->add_option("--seed", seed, "Sampling and rotation seed")->capture_default_str();
  ev->callback([&] { code = cmd_eval(manifest, ckpt, split, rotate, dropout, points, seed); });

  auto* po = app.add_subcommand("pose", "Class and canonical pose of one cloud");
  po->add_option("cloud", input, "Point cloud or mesh")->required();
  po->add_option("--ckpt", ckpt, "Checkpoint")->required();
  po->add_option("--points", points, "Samples drawn from mesh inputs")->capture_default_str();
  po->add_option("--seed", seed, "Sampling seed")->capture_default_str();
  po->callback([&] { code = cmd_pose(input, ckpt, points, seed); });

  auto* al = app.add_subcommand("align", "Relative rotation taking cloud A onto cloud B");
  al->add_option("cloudA", input, "First cloud")->required();
  al->add_option("cloudB", input_b, "Second cloud")->required();
  al->add_option("--ckpt", ckpt, "Checkpoint")->required();
  al->add_option("--truth", truth, "Ground-truth rotation w x y z")->expected(4);
  al->add_option("--points", points, "Samples drawn from mesh inputs")->capture_default_str();
  al->add_option("--seed", seed, "Sampling seed")->capture_default_str();
  al->callback([&] { code = cmd_align(input, input_b, ckpt, truth, points, seed); });

  auto* be = app.add_subcommand("bench-routing", "Time dynamic routing over L, M and k");
  be->add_option("--L", Ls, "Input capsule counts")->delimiter(',');
  be->add_option("--M", Ms, "Output capsule counts")->delimiter(',');
  be->add_option("--k", ks, "Routing iterations")->delimiter(',');
  be->add_option("--K", K, "Patch size for the operation count")->capture_default_str();
  be->add_option("--repeats", repeats, "Timed runs per point (median reported)")->capture_default_str();
  be->add_option("--seed", seed, "Vote seed")->capture_default_str();
  be->callback([&] { code = cmd_bench(Ls, Ms, ks, K, repeats, seed); });

  auto* pa = app.add_subcommand("params", "Parameter count of a configuration");
  pa->add_option("--config", config, "Run configuration (JSON)");
  pa->add_option("--classes", classes, "Class count when the config has no network")->capture_default_str();
  pa->callback([&] { code = cmd_params(config, classes); });

  auto* mt = app.add_subcommand("make-toy", "Write the procedural toy dataset and manifest");
  mt->add_option("dir", out, "Output directory")->required();
  mt->add_option("--train-per-class", train_n)->capture_default_str();
  mt->add_option("--test-per-class", test_n)->capture_default_str();
  mt->add_option("--points", points, "Points per cloud")->capture_default_str();
  mt->add_option("--seed", seed)->capture_default_str();
  mt->callback([&] { code = cmd_make_toy(out, train_n, test_n, points, seed); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  }
  return code;
}
