#include "qec/routing.hpp"

#include <cmath>

#include "qec/error.hpp"
#include "qec/quat_mean.hpp"

namespace qec {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

VoteTensor compute_votes(const std::vector<Capsule>& caps_in,
                         const std::vector<UnitQuaternion>& transforms, std::size_t outputs) {
  if (transforms.size() != caps_in.size() * outputs)
    throw Error(ErrorCode::ShapeMismatch, "transform tensor must be L x M");
  VoteTensor v;
  v.inputs = caps_in.size();
  v.outputs = outputs;
  v.votes.reserve(transforms.size());
  for (std::size_t i = 0; i < caps_in.size(); ++i)
    for (std::size_t j = 0; j < outputs; ++j)
      v.votes.push_back(
          canonicalize_hemisphere(hamilton_product(caps_in[i].pose, transforms[i * outputs + j])));
  return v;
}

RoutingOutput dynamic_route(const VoteTensor& votes, const std::vector<double>& alpha_in,
                            const RoutingConfig& cfg) {
  return detail::dynamic_route(votes, alpha_in, cfg, {});
}

namespace detail {

RoutingOutput dynamic_route(const VoteTensor& votes, const std::vector<double>& alpha_in,
                            const RoutingConfig& cfg, const RoutingHooks& hooks) {
  const std::size_t L = votes.inputs;
  const std::size_t M = votes.outputs;
  if (alpha_in.size() != L) throw Error(ErrorCode::ShapeMismatch, "alpha_in must have L entries");
  if (votes.votes.size() != L * M) throw Error(ErrorCode::ShapeMismatch, "vote tensor size");
  if (cfg.iterations < 1) throw Error(ErrorCode::InvalidArgument, "routing needs k >= 1");
  bool any = false;
  for (double a : alpha_in) {
    if (!(a >= 0.0 && a <= 1.0)) throw Error(ErrorCode::InvalidArgument, "activation outside [0, 1]");
    any = any || a > 0.0;
  }
  if (!any) throw Error(ErrorCode::AllZeroActivations, "every input activation is zero");

  double z = static_cast<double>(L);
  if (cfg.activation_norm == ActivationNorm::PaperLiteral) {
    if (cfg.patch_size == 0) throw Error(ErrorCode::InvalidArgument, "paper_literal needs patch_size");
    z = static_cast<double>(cfg.patch_size);
  }

  RoutingOutput out;
  out.capsules.resize(M);
  std::vector<Vec4> column(L);
  std::vector<double> w(L);
  for (std::size_t j = 0; j < M; ++j) {
    for (std::size_t i = 0; i < L; ++i) column[i] = votes.at(i, j).vec();
    bool degenerate = false;

    DominantEigen eig = weighted_mean_eigen(column, alpha_in);
    degenerate = degenerate || eig.degenerate;
    UnitQuaternion pose = eig.vector;
    if (hooks.on_pose) hooks.on_pose(j, 0, pose);

    for (int it = 0; it < cfg.iterations; ++it) {
      for (std::size_t i = 0; i < L; ++i) {
        const double d = geodesic_distance(pose.vec(), column[i]);
        w[i] = alpha_in[i] * (hooks.weight ? hooks.weight(d) : sigmoid(-d));
      }
      eig = weighted_mean_eigen(column, w);
      degenerate = degenerate || eig.degenerate;
      pose = eig.vector;
      if (hooks.on_pose) hooks.on_pose(j, it + 1, pose);
    }

    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) total += geodesic_distance(pose.vec(), column[i]);
    out.capsules[j] = Capsule{pose, sigmoid(-total / z)};
    if (degenerate) out.degenerate_outputs.push_back(j);
  }
  return out;
}

}  // namespace detail

std::uint64_t routing_complexity(std::uint64_t L, std::uint64_t M, std::uint64_t K, std::uint64_t k) {
  return M * (K + 2 * (k + 1) * L);
}

std::uint64_t routing_complexity_expanded(std::uint64_t L, std::uint64_t M, std::uint64_t K,
                                          std::uint64_t k) {
  return L * M + M * (K + k * (2 * L) + L);
}

}  // namespace qec
