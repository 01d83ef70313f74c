#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "qec/capsnet.hpp"
#include "qec/diff.hpp"
#include "qec/quat_mean.hpp"
#include "qec/routing.hpp"
#include "qec/verify.hpp"
#include "qec/weiszfeld.hpp"

namespace qec {

namespace {

using namespace diff;

struct Worst {
  CheckResult r;

  Worst(std::string name, double tol) {
    r.name = std::move(name);
    r.tolerance = tol;
  }

  void record(double err, std::uint64_t seed) {
    ++r.trials;
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    r.max_error = std::max(r.max_error, err);
    if (err > r.tolerance && !r.failing_seed) r.failing_seed = seed;
  }
};

UnitQuaternion rand_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return UnitQuaternion::from_components(n(rng), n(rng), n(rng), n(rng));
}

UnitQuaternion near(const UnitQuaternion& c, double angle, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vec3 axis{n(rng), n(rng), n(rng)};
  axis = (1.0 / norm(axis)) * axis;
  return canonicalize_hemisphere(UnitQuaternion::from_axis_angle(axis, angle) * c);
}

// ---------------------------------------------------------------------------
// Central-difference harness: loss = Σ r ⊙ f(inputs) with a fixed random r.

struct Input {
  Shape shape;
  std::vector<double> values;
};

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double rel_err(const std::vector<double>& a, const std::vector<double>& n) {
  double d = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
}

double grad_check(const std::vector<Input>& inputs, const Builder& f, std::uint64_t seed) {
  constexpr double h = 1e-6;
  std::vector<double> weights;
  auto loss_of = [&](const std::vector<Input>& in, std::vector<std::vector<double>>* grads) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& x : in) vars.push_back(t.parameter(x.shape, x.values));
    const Var out = f(t, vars);
    if (weights.empty()) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> n;
      weights.resize(t.value(out).size());
      for (auto& w : weights) w = n(rng);
    }
    const Var loss = sum(t, mul(t, out, t.constant(t.shape(out), weights)));
    if (grads) {
      t.backward(loss);
      for (const auto& v : vars) grads->push_back(t.grad(v));
    }
    return t.value(loss)[0];
  };

  std::vector<std::vector<double>> parts;
  loss_of(inputs, &parts);
  std::vector<double> analytic, numeric;
  for (std::size_t a = 0; a < inputs.size(); ++a)
    for (std::size_t i = 0; i < inputs[a].values.size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[a].values[i] += h;
      minus[a].values[i] -= h;
      numeric.push_back((loss_of(plus, nullptr) - loss_of(minus, nullptr)) / (2 * h));
      analytic.push_back(parts[a][i]);
    }
  return rel_err(analytic, numeric);
}

std::vector<double> randn(std::mt19937_64& rng, std::size_t n, double s = 1.0) {
  std::normal_distribution<double> d(0.0, s);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Keeps relu inputs off the kink.
std::vector<double> away_from_zero(std::mt19937_64& rng, std::size_t n) {
  auto v = randn(rng, n);
  for (auto& x : v) x = x >= 0 ? x + 0.1 : x - 0.1;
  return v;
}

std::vector<double> quats(std::mt19937_64& rng, std::size_t n, bool unit) {
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) {
    const UnitQuaternion q = rand_quat(rng);
    const double s = unit ? 1.0 : 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
    for (int c = 0; c < 4; ++c) v.push_back(s * q[c]);
  }
  return v;
}

// Rows well inside the w > 0 hemisphere so the sign flip is never straddled.
std::vector<double> positive_quats(std::mt19937_64& rng, std::size_t n) {
  auto v = quats(rng, n, false);
  for (std::size_t i = 0; i < n; ++i) v[4 * i] = std::abs(v[4 * i]) + 0.3;
  return v;
}

struct OpCase {
  std::string name;
  std::function<std::vector<Input>(std::mt19937_64&)> inputs;
  Builder f;
};

std::vector<OpCase> op_cases() {
  using R = std::mt19937_64;
  using V = const std::vector<Var>&;
  static const std::vector<std::size_t> rows{2, 0, 2, 1};
  return {
      {"matmul", [](R& g) { return std::vector<Input>{{{2, 3}, randn(g, 6)}, {{3, 4}, randn(g, 12)}}; },
       [](Tape& t, V v) { return matmul(t, v[0], v[1]); }},
      {"add_bias", [](R& g) { return std::vector<Input>{{{3, 2}, randn(g, 6)}, {{2}, randn(g, 2)}}; },
       [](Tape& t, V v) { return add_bias(t, v[0], v[1]); }},
      {"add", [](R& g) { return std::vector<Input>{{{5}, randn(g, 5)}, {{5}, randn(g, 5)}}; },
       [](Tape& t, V v) { return add(t, v[0], v[1]); }},
      {"mul", [](R& g) { return std::vector<Input>{{{5}, randn(g, 5)}, {{5}, randn(g, 5)}}; },
       [](Tape& t, V v) { return mul(t, v[0], v[1]); }},
      {"scale", [](R& g) { return std::vector<Input>{{{5}, randn(g, 5)}}; },
       [](Tape& t, V v) { return scale(t, v[0], -1.7); }},
      {"relu", [](R& g) { return std::vector<Input>{{{8}, away_from_zero(g, 8)}}; },
       [](Tape& t, V v) { return relu(t, v[0]); }},
      {"sigmoid", [](R& g) { return std::vector<Input>{{{8}, randn(g, 8, 2.0)}}; },
       [](Tape& t, V v) { return sigmoid(t, v[0]); }},
      {"sum", [](R& g) { return std::vector<Input>{{{4}, randn(g, 4)}}; },
       [](Tape& t, V v) { return sum(t, v[0]); }},
      {"sum_groups", [](R& g) { return std::vector<Input>{{{6}, randn(g, 6)}}; },
       [](Tape& t, V v) { return sum_groups(t, v[0], 2); }},
      {"reshape", [](R& g) { return std::vector<Input>{{{2, 3}, randn(g, 6)}}; },
       [](Tape& t, V v) { return reshape(t, v[0], {3, 2}); }},
      {"gather_rows", [](R& g) { return std::vector<Input>{{{3, 2}, randn(g, 6)}}; },
       [](Tape& t, V v) { return gather_rows(t, v[0], rows); }},
      {"slice_cols", [](R& g) { return std::vector<Input>{{{2, 5}, randn(g, 10)}}; },
       [](Tape& t, V v) { return slice_cols(t, v[0], 1, 3); }},
      {"normalize_last4", [](R& g) { return std::vector<Input>{{{3, 4}, quats(g, 3, false)}}; },
       [](Tape& t, V v) { return normalize_last4(t, v[0]); }},
      {"canonicalize_last4", [](R& g) { return std::vector<Input>{{{3, 4}, positive_quats(g, 3)}}; },
       [](Tape& t, V v) { return canonicalize_last4(t, v[0]); }},
      {"conjugate_last4", [](R& g) { return std::vector<Input>{{{3, 4}, quats(g, 3, false)}}; },
       [](Tape& t, V v) { return conjugate_last4(t, v[0]); }},
      {"hamilton_batch",
       [](R& g) { return std::vector<Input>{{{3, 4}, quats(g, 3, false)}, {{3, 4}, quats(g, 3, false)}}; },
       [](Tape& t, V v) { return hamilton_batch(t, v[0], v[1]); }},
      {"embed_pure", [](R& g) { return std::vector<Input>{{{2, 3}, randn(g, 6)}}; },
       [](Tape& t, V v) { return embed_pure(t, v[0]); }},
      {"vector_part", [](R& g) { return std::vector<Input>{{{2, 4}, randn(g, 8)}}; },
       [](Tape& t, V v) { return vector_part(t, v[0]); }},
      {"rotate_batch", [](R& g) { return std::vector<Input>{{{3, 4}, quats(g, 3, true)}, {{3, 3}, randn(g, 9)}}; },
       [](Tape& t, V v) { return rotate_batch(t, v[0], v[1]); }},
      {"geodesic_batch",
       [](R& g) { return std::vector<Input>{{{3, 4}, quats(g, 3, true)}, {{3, 4}, quats(g, 3, true)}}; },
       [](Tape& t, V v) { return geodesic_batch(t, v[0], v[1]); }},
      {"quat_mean_node",
       [](R& g) {
         const UnitQuaternion c = rand_quat(g);
         std::vector<double> sets;
         for (int i = 0; i < 10; ++i) {
           const UnitQuaternion q = near(c, 0.7, g);
           for (int k = 0; k < 4; ++k) sets.push_back(q[k]);
         }
         std::vector<double> w(10);
         for (auto& x : w) x = std::uniform_real_distribution<double>(0.2, 1.0)(g);
         return std::vector<Input>{{{2, 5, 4}, sets}, {{2, 5}, w}};
       },
       [](Tape& t, V v) { return quat_mean_node(t, v[0], v[1]); }},
      {"spread_loss",
       [](R& g) {
         // Gaps kept clear of every hinge.
         const double s = std::uniform_real_distribution<double>(-0.02, 0.02)(g);
         return std::vector<Input>{{{4}, {0.30 + s, 0.45 + s, 0.05 + s, 0.33 + s}}};
       },
       [](Tape& t, V v) { return spread_loss(t, v[0], 0, 0.2); }},
      {"rotation_loss",
       [](R& g) {
         const UnitQuaternion a = rand_quat(g);
         const UnitQuaternion b = near(a, std::uniform_real_distribution<double>(0.3, 2.5)(g), g);
         return std::vector<Input>{{{4}, {a[0], a[1], a[2], a[3]}}, {{4}, {b[0], b[1], b[2], b[3]}}};
       },
       [](Tape& t, V v) { return rotation_loss(t, v[0], v[1]); }},
  };
}

double end_to_end_gradient(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  QecLayerConfig cfg{4, 1, 2, {}};
  cfg.routing.iterations = 2;
  MlpParams mlp = init_mlp(cfg, 6, 0.5, seed + 1);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> a(0.2, 1.0);
  std::vector<Vec3> points;
  std::vector<double> poses, acts;
  for (std::size_t k = 0; k < cfg.K; ++k) {
    points.push_back({n(rng), n(rng), n(rng)});
    const UnitQuaternion q = canonicalize_hemisphere(rand_quat(rng));
    for (int c = 0; c < 4; ++c) poses.push_back(q[c]);
    acts.push_back(a(rng));
  }
  std::vector<double> w(cfg.M * 4);
  for (auto& x : w) x = n(rng);

  auto loss_of = [&](const MlpParams& m, std::vector<std::vector<double>>* grads) {
    Tape t;
    const MlpVars vars = mlp_on_tape(t, m, true);
    const QecTapeOutput out = qec_forward_tape(t, points, t.constant({cfg.K, 4}, poses), t.constant({cfg.K}, acts),
                                               vars, cfg, 1, true);
    const Var loss = add(t, sum(t, mul(t, out.poses, t.constant({cfg.M, 4}, w))),
                         spread_loss(t, out.activations, 1, 0.2));
    if (grads) {
      t.backward(loss);
      for (Var v : {vars.W1, vars.b1, vars.W2, vars.b2}) grads->push_back(t.grad(v));
    }
    return t.value(loss)[0];
  };

  std::vector<std::vector<double>> parts;
  loss_of(mlp, &parts);
  std::vector<double> analytic, numeric;
  Parameter* ps[4] = {&mlp.W1, &mlp.b1, &mlp.W2, &mlp.b2};
  constexpr double h = 1e-6;
  for (int k = 0; k < 4; ++k)
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
  return rel_err(analytic, numeric);
}

}  // namespace

std::vector<CheckResult> check_weiszfeld_oracle(const SuiteOptions& opt, std::size_t routing_instances) {
  Worst closed("weiszfeld q=2 solve vs eigen mean", kClosedFormTolerance);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = opt.seed * 1000003ULL + 11 * 7919ULL + t;
    std::mt19937_64 rng(seed);
    std::vector<UnitQuaternion> qs;
    for (std::size_t i = 0; i < 3 + t % 10; ++i) qs.push_back(rand_quat(rng));
    WeiszfeldProblem prob;
    for (const auto& q : qs) prob.subspaces.push_back({q});
    prob.q_norm = 2.0;
    const WeiszfeldResult r = weiszfeld_solve(prob, rand_quat(rng).vec(), seed);
    closed.record(geodesic_distance(r.solution, weighted_mean(QuatSet::uniform(qs))), seed);
  }

  std::vector<CheckResult> out{closed.r};
  for (double qn : {1.0, 1.5}) {
    Worst it(std::string("power-weight routing vs weiszfeld iterates q=") + (qn == 1.0 ? "1" : "1.5"),
             kIterateTolerance);
    for (std::size_t t = 0; t < routing_instances; ++t) {
      const std::uint64_t seed = opt.seed * 1000003ULL + 12 * 7919ULL + t + (qn == 1.0 ? 0 : 100000);
      std::mt19937_64 rng(seed);
      const std::size_t L = 4 + t % 6;
      const UnitQuaternion center = rand_quat(rng);
      VoteTensor v{L, 1, {}};
      for (std::size_t i = 0; i < L; ++i) v.votes.push_back(near(center, 0.8, rng));

      RoutingConfig cfg;
      cfg.iterations = 5;
      std::vector<UnitQuaternion> poses;
      detail::RoutingHooks hooks;
      hooks.weight = [qn](double d) { return std::pow(std::sin(d / 2.0), qn - 2.0); };
      hooks.on_pose = [&](std::size_t, int, const UnitQuaternion& p) { poses.push_back(p); };
      detail::dynamic_route(v, std::vector<double>(L, 1.0), cfg, hooks);

      WeiszfeldProblem prob;
      for (const auto& q : v.votes) prob.subspaces.push_back({q});
      prob.q_norm = qn;
      prob.max_iters = cfg.iterations;
      prob.tol = 0.0;
      const WeiszfeldResult w = weiszfeld_solve(prob, poses.front().vec());
      double worst = w.iterates.size() == static_cast<std::size_t>(cfg.iterations)
                         ? 0.0
                         : std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < w.iterates.size() && i + 1 < poses.size(); ++i)
        worst = std::max(worst, geodesic_distance(w.iterates[i], poses[i + 1]));
      it.record(worst, seed);
    }
    out.push_back(it.r);
  }
  return out;
}

std::vector<CheckResult> check_gradients(const SuiteOptions& opt) {
  std::vector<CheckResult> out;
  std::uint64_t salt = 0;
  for (const OpCase& c : op_cases()) {
    ++salt;
    Worst w("gradient " + c.name, kOpGradientTolerance);
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::uint64_t seed = opt.seed * 1000003ULL + (100 + salt) * 7919ULL + t;
      std::mt19937_64 rng(seed);
      w.record(grad_check(c.inputs(rng), c.f, seed), seed);
    }
    out.push_back(w.r);
  }
  Worst e2e("gradient end-to-end QEC layer", kEndToEndGradientTolerance);
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const std::uint64_t seed = opt.seed * 1000003ULL + 200 * 7919ULL + t;
    e2e.record(end_to_end_gradient(seed), seed);
  }
  out.push_back(e2e.r);
  return out;
}

CheckResult check_mean_optimality(std::size_t sets, std::size_t samples, std::uint64_t seed) {
  Worst w("eigen mean maximizes qᵀMq", kOptimalityTolerance);
  for (std::size_t s = 0; s < sets; ++s) {
    const std::uint64_t trial = seed * 1000003ULL + 13 * 7919ULL + s;
    std::mt19937_64 rng(trial);
    QuatSet set;
    std::uniform_real_distribution<double> u(0.05, 1.0);
    const std::size_t n = 2 + s % 20;
    const UnitQuaternion c = rand_quat(rng);
    const double spread = 0.2 + 2.8 * static_cast<double>(s % 7) / 6.0;
    for (std::size_t i = 0; i < n; ++i) {
      set.quats.push_back(near(c, std::uniform_real_distribution<double>(0.0, spread)(rng), rng));
      set.weights.push_back(u(rng));
    }
    const Mat4 M = build_m(set);
    auto quad = [&](const Vec4& q) {
      double v = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) v += q[i] * M[i][j] * q[j];
      return v;
    };
    const double at_mean = quad(weighted_mean(set).vec());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < samples; ++k) best = std::max(best, quad(rand_quat(rng).vec()));
    w.record(std::max(0.0, best - at_mean), trial);
  }
  return w.r;
}

}  // namespace qec
