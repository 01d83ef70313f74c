#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "qec/error.hpp"
#include "qec/quat_mean.hpp"
#include "qec/routing.hpp"
#include "qec/weiszfeld.hpp"
#include "test_support.hpp"

using namespace qec;
using qec::test::perturb;
using qec::test::random_quat;

namespace {

VoteTensor random_votes(std::mt19937_64& rng, std::size_t L, std::size_t M) {
  VoteTensor v{L, M, {}};
  for (std::size_t i = 0; i < L * M; ++i) v.votes.push_back(canonicalize_hemisphere(random_quat(rng)));
  return v;
}

std::vector<double> random_alpha(std::mt19937_64& rng, std::size_t L) {
  std::uniform_real_distribution<double> a(0.1, 1.0);
  std::vector<double> out(L);
  for (auto& x : out) x = a(rng);
  return out;
}

}  // namespace

TEST_CASE("compute_votes examples") {
  std::mt19937_64 rng(1);
  std::vector<Capsule> caps;
  for (int i = 0; i < 3; ++i) caps.push_back({canonicalize_hemisphere(random_quat(rng)), 1.0});
  const VoteTensor v = compute_votes(caps, std::vector<UnitQuaternion>(6), 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(qec::test::max_abs_diff(v.at(i, j).vec(), caps[i].pose.vec()) <= 1e-15);

  const UnitQuaternion q = random_quat(rng), t = random_quat(rng);
  const VoteTensor one = compute_votes({{q, 1.0}}, {t}, 1);
  CHECK(geodesic_distance(one.at(0, 0), q * t) <= 1e-7);
  CHECK(one.at(0, 0).w() >= 0.0);

  const UnitQuaternion g = random_quat(rng);
  auto rotated = caps;
  for (auto& c : rotated) c.pose = g * c.pose;
  std::vector<UnitQuaternion> ts;
  for (int i = 0; i < 6; ++i) ts.push_back(random_quat(rng));
  const VoteTensor a = compute_votes(caps, ts, 2), b = compute_votes(rotated, ts, 2);
  for (std::size_t i = 0; i < a.votes.size(); ++i) CHECK(geodesic_distance(g * a.votes[i], b.votes[i]) <= 1e-7);

  CHECK_THROWS_AS(compute_votes(caps, ts, 3), Error);
}

TEST_CASE("dynamic_route trivial cases") {
  std::mt19937_64 rng(2);
  const UnitQuaternion q = canonicalize_hemisphere(random_quat(rng));
  const RoutingOutput one = dynamic_route(VoteTensor{1, 1, {q}}, {1.0});
  CHECK(geodesic_distance(one.capsules[0].pose, q) <= 1e-7);
  CHECK(one.capsules[0].activation == doctest::Approx(0.5));

  const RoutingOutput same = dynamic_route(VoteTensor{4, 1, {q, q, q, q}}, {0.2, 0.5, 1.0, 0.7});
  CHECK(geodesic_distance(same.capsules[0].pose, q) <= 1e-7);
  CHECK(same.capsules[0].activation == doctest::Approx(0.5).epsilon(1e-7));
}

TEST_CASE("dynamic_route errors") {
  const VoteTensor v{2, 1, {UnitQuaternion::identity(), UnitQuaternion::identity()}};
  auto code = [&](std::vector<double> alpha, RoutingConfig cfg) {
    try {
      dynamic_route(v, alpha, cfg);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::EmptyInput;
  };
  CHECK(code({0.0, 0.0}, {}) == ErrorCode::AllZeroActivations);
  CHECK(code({1.0}, {}) == ErrorCode::ShapeMismatch);
  CHECK(code({1.5, 0.5}, {}) == ErrorCode::InvalidArgument);
  RoutingConfig zero;
  zero.iterations = 0;
  CHECK(code({1.0, 1.0}, zero) == ErrorCode::InvalidArgument);
  RoutingConfig literal;
  literal.activation_norm = ActivationNorm::PaperLiteral;
  CHECK(code({1.0, 1.0}, literal) == ErrorCode::InvalidArgument);
}

TEST_CASE("outliers are down-weighted") {
  std::mt19937_64 rng(3);
  const UnitQuaternion id = UnitQuaternion::identity();
  VoteTensor v{10, 1, {}};
  for (int i = 0; i < 8; ++i) v.votes.push_back(canonicalize_hemisphere(perturb(id, 0.05 * (i + 1) / 8.0, rng)));
  for (int i = 0; i < 2; ++i)
    v.votes.push_back(canonicalize_hemisphere(perturb(id, 150.0 * std::numbers::pi / 180.0, rng)));
  const std::vector<double> alpha(10, 1.0);

  std::vector<UnitQuaternion> poses;
  detail::RoutingHooks hooks;
  hooks.on_pose = [&](std::size_t, int, const UnitQuaternion& p) { poses.push_back(p); };
  const RoutingOutput out = detail::dynamic_route(v, alpha, {}, hooks);
  CHECK(geodesic_distance(out.capsules[0].pose, id) <= 0.05);

  // Hand-unrolled reference with the same mean oracle.
  std::vector<Vec4> col;
  for (const auto& q : v.votes) col.push_back(q.vec());
  UnitQuaternion ref = weighted_mean_eigen(col, alpha).vector;
  std::vector<double> w(10);
  for (int it = 0; it < 3; ++it) {
    for (int i = 0; i < 10; ++i) w[i] = sigmoid(-geodesic_distance(ref, v.votes[i]));
    ref = weighted_mean_eigen(col, w).vector;
  }
  REQUIRE(poses.size() == 4);
  CHECK(qec::test::chordal(poses.back(), ref) <= 1e-12);
  const double max_outlier = std::max(w[8], w[9]);
  CHECK(max_outlier < *std::min_element(w.begin(), w.begin() + 8));
}

TEST_CASE("activation normalization modes") {
  std::mt19937_64 rng(4);
  const VoteTensor v = random_votes(rng, 6, 1);
  const std::vector<double> alpha(6, 1.0);
  const RoutingOutput per_vote = dynamic_route(v, alpha);
  RoutingConfig lit;
  lit.activation_norm = ActivationNorm::PaperLiteral;
  lit.patch_size = 3;
  const RoutingOutput literal = dynamic_route(v, alpha, lit);
  CHECK(geodesic_distance(per_vote.capsules[0].pose, literal.capsules[0].pose) <= 1e-12);
  double total = 0.0;
  for (const auto& q : v.votes) total += geodesic_distance(per_vote.capsules[0].pose, q);
  CHECK(per_vote.capsules[0].activation == doctest::Approx(sigmoid(-total / 6.0)).epsilon(1e-12));
  CHECK(literal.capsules[0].activation == doctest::Approx(sigmoid(-total / 3.0)).epsilon(1e-12));
}

TEST_CASE("routing equivariance, permutation invariance and activation bounds") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const std::size_t L = 2 + t % 13, M = 1 + t % 4;
    const VoteTensor v = random_votes(rng, L, M);
    const auto alpha = random_alpha(rng, L);
    const RoutingOutput base = dynamic_route(v, alpha);
    for (const auto& c : base.capsules) {
      CHECK(c.activation > 0.0);
      CHECK(c.activation <= 0.5);
    }

    const UnitQuaternion g = random_quat(rng);
    VoteTensor rv = v;
    for (auto& q : rv.votes) q = g * q;
    const RoutingOutput rot = dynamic_route(rv, alpha);
    for (std::size_t j = 0; j < M; ++j) {
      CHECK(geodesic_distance(g * base.capsules[j].pose, rot.capsules[j].pose) <= 1e-6);
      CHECK(std::abs(base.capsules[j].activation - rot.capsules[j].activation) <= 1e-9);
    }

    std::vector<std::size_t> idx(L);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    VoteTensor pv = v;
    std::vector<double> pa(L);
    for (std::size_t i = 0; i < L; ++i) {
      pa[i] = alpha[idx[i]];
      for (std::size_t j = 0; j < M; ++j) pv.votes[i * M + j] = v.at(idx[i], j);
    }
    const RoutingOutput perm = dynamic_route(pv, pa);
    for (std::size_t j = 0; j < M; ++j) {
      CHECK(qec::test::max_abs_diff(perm.capsules[j].pose.vec(), base.capsules[j].pose.vec()) <= 1e-9);
      CHECK(std::abs(perm.capsules[j].activation - base.capsules[j].activation) <= 1e-9);
    }
  }
}

TEST_CASE("routing weights decrease with distance") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    const double a = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    const double b = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    if (a == b) continue;
    CHECK((a < b) == (sigmoid(-a) > sigmoid(-b)));
  }
}

TEST_CASE("power-weight routing reproduces the Weiszfeld iterates") {
  std::mt19937_64 rng(7);
  for (double qn : {1.0, 1.5}) {
    for (int t = 0; t < 20; ++t) {
      const std::size_t L = 4 + t % 6;
      const UnitQuaternion center = random_quat(rng);
      VoteTensor v{L, 1, {}};
      for (std::size_t i = 0; i < L; ++i) v.votes.push_back(canonicalize_hemisphere(perturb(center, 0.8, rng)));

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
      REQUIRE(w.iterates.size() == static_cast<std::size_t>(cfg.iterations));
      for (int i = 0; i < cfg.iterations; ++i) CHECK(qec::test::chordal(w.iterates[i], poses[i + 1]) <= 1e-9);
    }
  }
}

TEST_CASE("routing complexity formulas") {
  CHECK(routing_complexity(1, 1, 1, 1) == 5);
  CHECK(routing_complexity(10, 0, 3, 3) == 0);
  for (std::uint64_t L : {1, 7, 64}) {
    for (std::uint64_t M : {1, 4, 64}) {
      for (std::uint64_t k : {1, 3}) CHECK(routing_complexity(L, M, 9, k) == routing_complexity_expanded(L, M, 9, k));
    }
  }
}
