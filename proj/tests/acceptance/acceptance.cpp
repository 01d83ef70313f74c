// Acceptance harness: `qec_acceptance --criterion N [--work DIR]` prints one
// PASS/FAIL line for criterion N (or all of them with --criterion 0).
// Exit status is 0 when every requested criterion passes and 2 otherwise.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qec/capsnet.hpp"
#include "qec/experiment.hpp"
#include "qec/routing.hpp"
#include "qec/verify.hpp"

namespace fs = std::filesystem;
using namespace qec;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// Folds check results into one outcome naming the worst offender. A zero
// budget means untimed.
Outcome summarize(const std::vector<CheckResult>& results, double secs, double budget) {
  Outcome o{true, ""};
  std::ostringstream s;
  for (const auto& r : results) {
    if (!r.passed()) {
      o.pass = false;
      s << r.name << " max error " << num(r.max_error) << " > " << num(r.tolerance) << " (seed "
        << *r.failing_seed << "); ";
    }
  }
  double worst_ratio = 0.0;
  const CheckResult* worst = nullptr;
  for (const auto& r : results)
    if (r.tolerance > 0 && r.max_error / r.tolerance >= worst_ratio) {
      worst_ratio = r.max_error / r.tolerance;
      worst = &r;
    }
  if (worst) s << "closest to tolerance: " << worst->name << " " << num(worst->max_error) << " vs " << num(worst->tolerance) << "; ";
  s << results.size() << " checks in " << num(secs) << " s";
  if (budget > 0) s << " (budget " << budget << " s)";
  if (budget > 0 && secs > budget) o.pass = false;
  o.detail = s.str();
  return o;
}

Outcome equivariance_suite() {
  const auto t0 = Clock::now();
  SuiteOptions opt;
  opt.trials = 100;
  std::vector<CheckResult> all;
  for (auto* fn : {&check_mean, &check_routing, &check_qec_layer, &check_network}) {
    auto part = fn(opt);
    all.insert(all.end(), part.begin(), part.end());
  }
  return summarize(all, seconds_since(t0), 60);
}

Outcome algebra() {
  const auto t0 = Clock::now();
  SuiteOptions opt;
  opt.trials = 100;  // ten pairs per trial
  const auto results = check_algebra(opt);
  return summarize(results, seconds_since(t0), 5);
}

Outcome weiszfeld() {
  const auto t0 = Clock::now();
  SuiteOptions opt;
  opt.trials = 100;
  auto all = check_weiszfeld(opt);
  auto oracle = check_weiszfeld_oracle(opt, 20);
  all.insert(all.end(), oracle.begin(), oracle.end());
  return summarize(all, seconds_since(t0), 0);
}

Outcome gradients() {
  const auto t0 = Clock::now();
  SuiteOptions opt;
  opt.trials = 5;
  const auto results = check_gradients(opt);
  return summarize(results, seconds_since(t0), 120);
}

Outcome mean_optimality() {
  const auto t0 = Clock::now();
  const CheckResult r = check_mean_optimality(200, 100000, 0);
  return summarize({r}, seconds_since(t0), 0);
}

// --- toy protocol -----------------------------------------------------------

// Pinned configuration of the toy experiment.
struct ToyRun {
  ToyProtocol protocol;
  NetworkConfig network;
  TrainConfig training;
  std::size_t views = 4;  // surface resamplings per training mesh
  std::uint64_t prepare_seed = 11;
  std::uint64_t eval_seed = 12;
};

ToyRun toy_run() {
  ToyRun r;
  r.protocol.points_per_cloud = 1024;
  r.network = NetworkConfig::defaults(3);
  r.network.lrf_k = 16;
  r.network.num_lrf_points = 256;
  r.network.num_points = 32;
  r.network.layers[0].M = 16;
  r.network.layers[1].K = 32;
  r.network.layers[1].Nc = 16;
  r.training.epochs = 40;
  r.training.learning_rate = 0.003;
  r.training.early_stop_accuracy = 0.98;
  r.training.early_stop_patience = 3;
  return r;
}

fs::path model_path(const fs::path& work) { return work / "toy_model.qec"; }

EvalMetrics toy_metrics(const ToyRun& run, const ToySplits& splits, const NetworkParams& params, double dropout) {
  EvalOptions eo;
  eo.rotate = true;
  eo.synthesize_partners = true;
  eo.points = run.protocol.points_per_cloud;
  eo.seed = run.eval_seed;
  eo.dropout = dropout;
  return evaluate(prepare_evaluation(splits.test, run.network, eo), params, run.network);
}

Outcome toy_end_to_end(const fs::path& work) {
  const auto t0 = Clock::now();
  const ToyRun run = toy_run();
  const ToySplits splits = make_toy_splits(run.protocol);
  const auto data = prepare_training(splits.train, run.network, run.prepare_seed, run.training.siamese,
                                     run.protocol.points_per_cloud, run.views);
  fs::create_directories(work);
  std::ostringstream log;
  const TrainResult tr = train(data, {}, run.network, run.training, &log);
  save_model(model_path(work), {run.network, tr.params, splits.class_names});
  atomic_write(work / "toy_train.jsonl", log.str());

  const EvalMetrics m = toy_metrics(run, splits, tr.params, 0.0);
  const double secs = seconds_since(t0);
  nlohmann::json summary{{"epochs", tr.history.size()},     {"nr_accuracy", m.nr_accuracy},
                         {"ar_accuracy", m.ar_accuracy},    {"rae_median", m.rae_median},
                         {"rae_mean", m.rae_mean},          {"class_mismatches", m.class_mismatches},
                         {"seconds", secs}};
  atomic_write(work / "toy_metrics.json", summary.dump(2) + "\n");

  const bool acc = m.nr_accuracy >= 0.90;
  const bool gap = std::abs(m.nr_accuracy - m.ar_accuracy) <= 0.02 + 1e-12;
  const bool pose = m.rae_median <= 0.1;
  const bool time = secs < 1800;
  std::ostringstream s;
  s << "NR " << num(100 * m.nr_accuracy) << "% (>= 90: " << (acc ? "ok" : "no") << "), AR " << num(100 * m.ar_accuracy)
    << "% (gap <= 2 points: " << (gap ? "ok" : "no") << "), siamese RAE median " << num(m.rae_median)
    << " (<= 0.1: " << (pose ? "ok" : "no") << "), " << tr.history.size() << " epochs in " << num(secs, 4)
    << " s (< 1800: " << (time ? "ok" : "no") << ")";
  return {acc && gap && pose && time, s.str()};
}

Outcome dropout_robustness(const fs::path& work) {
  if (!fs::exists(model_path(work))) return {false, "no toy model in " + work.string() + " (criterion 6 writes it)"};
  const ToyRun run = toy_run();
  const Model model = load_model(model_path(work));
  const ToySplits splits = make_toy_splits(run.protocol);
  const EvalMetrics base = toy_metrics(run, splits, model.params, 0.0);
  const EvalMetrics dropped = toy_metrics(run, splits, model.params, 0.5);
  const double factor = dropped.rae_median / std::max(base.rae_median, 1e-12);
  std::ostringstream s;
  s << "siamese RAE median " << num(base.rae_median) << " -> " << num(dropped.rae_median) << " under 50% patch dropout, factor "
    << num(factor) << " (<= 4)";
  return {factor <= 4.0, s.str()};
}

// Median wall time of one routing call, timed in batches of at least 50 ms.
double route_time(std::size_t L, std::size_t M) {
  std::mt19937_64 rng(L * 131 + M);
  std::normal_distribution<double> n;
  VoteTensor v{L, M, {}};
  for (std::size_t i = 0; i < L * M; ++i)
    v.votes.push_back(canonicalize_hemisphere(UnitQuaternion::from_components(n(rng), n(rng), n(rng), n(rng))));
  const std::vector<double> alpha(L, 1.0);
  std::size_t reps = 1;
  for (;;) {
    const auto t0 = Clock::now();
    for (std::size_t r = 0; r < reps; ++r) dynamic_route(v, alpha);
    if (seconds_since(t0) >= 0.05) break;
    reps *= 2;
  }
  std::vector<double> batches;
  for (int b = 0; b < 7; ++b) {
    const auto t0 = Clock::now();
    for (std::size_t r = 0; r < reps; ++r) dynamic_route(v, alpha);
    batches.push_back(seconds_since(t0) / static_cast<double>(reps));
  }
  std::sort(batches.begin(), batches.end());
  return batches[batches.size() / 2];
}

Outcome routing_scaling() {
  const double l1 = route_time(1024, 16), l2 = route_time(2048, 16);
  const double m1 = route_time(256, 32), m2 = route_time(256, 64);
  const double rl = l2 / l1, rm = m2 / m1;
  auto ok = [](double r) { return r >= 1.4 && r <= 2.6; };
  std::ostringstream s;
  s << "time ratio doubling L (1024 -> 2048, M=16) " << num(rl) << ", doubling M (32 -> 64, L=256) " << num(rm)
    << " (both within 2 +- 0.6); operation count ratios "
    << num(static_cast<double>(routing_complexity(2048, 16, 9, 3)) / static_cast<double>(routing_complexity(1024, 16, 9, 3)))
    << " and "
    << num(static_cast<double>(routing_complexity(256, 64, 9, 3)) / static_cast<double>(routing_complexity(256, 32, 9, 3)));
  return {ok(rl) && ok(rm), s.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int criterion = 0;
  std::string work = "acceptance_work";
  app.add_option("--criterion", criterion, "Criterion 1-8, or 0 for all")->check(CLI::Range(0, 8));
  app.add_option("--work", work, "Directory for the toy model and logs");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"equivariance suite", equivariance_suite},
      {"homomorphism and metric", algebra},
      {"Weiszfeld oracle", weiszfeld},
      {"gradient checks", gradients},
      {"mean optimality", mean_optimality},
      {"toy end-to-end", [&] { return toy_end_to_end(work); }},
      {"dropout robustness", [&] { return dropout_robustness(work); }},
      {"routing complexity", routing_scaling},
  };

  bool all = true;
  for (int i = 1; i <= 8; ++i) {
    if (criterion != 0 && criterion != i) continue;
    Outcome o;
    try {
      o = criteria[i - 1].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i << " (" << criteria[i - 1].first << "): " << o.detail
              << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 2;
}
