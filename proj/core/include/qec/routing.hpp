#pragma once

// Quaternion equivariant dynamic routing: votes v_ij = q_i ∘ t_ij are
// clustered per output capsule by iteratively re-weighted quaternion means.

#include <cstdint>
#include <functional>
#include <vector>

#include "qec/quat.hpp"

namespace qec {

struct Capsule {
  UnitQuaternion pose;
  double activation = 0.0;
};

/// L x M votes, row-major (input i, output j).
struct VoteTensor {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<UnitQuaternion> votes;

  const UnitQuaternion& at(std::size_t i, std::size_t j) const { return votes[i * outputs + j]; }
};

enum class ActivationNorm {
  PerVote,       // divide the summed distance by the number of votes L
  PaperLiteral,  // divide by the patch size K
};

struct RoutingConfig {
  int iterations = 3;
  ActivationNorm activation_norm = ActivationNorm::PerVote;
  /// Patch size K, only read under ActivationNorm::PaperLiteral.
  std::size_t patch_size = 0;
};

/// `transforms` is L x M row-major. Votes are hemisphere-canonicalized.
/// Throws Error{ShapeMismatch}.
VoteTensor compute_votes(const std::vector<Capsule>& caps_in,
                         const std::vector<UnitQuaternion>& transforms, std::size_t outputs);

struct RoutingOutput {
  std::vector<Capsule> capsules;
  /// Output indices whose mean hit a degenerate top eigenspace at any step.
  std::vector<std::size_t> degenerate_outputs;
};

/// Throws Error{AllZeroActivations} when every alpha is zero, Error{ShapeMismatch}
/// when alpha_in does not match the vote rows, Error{InvalidArgument} when an
/// activation lies outside [0, 1].
RoutingOutput dynamic_route(const VoteTensor& votes, const std::vector<double>& alpha_in,
                            const RoutingConfig& cfg = {});

/// Operation count M(K + 2(k+1)L) of one routing call.
std::uint64_t routing_complexity(std::uint64_t L, std::uint64_t M, std::uint64_t K, std::uint64_t k);
/// The same count written as LM + M(K + k(2L) + L); algebraically identical.
std::uint64_t routing_complexity_expanded(std::uint64_t L, std::uint64_t M, std::uint64_t K,
                                          std::uint64_t k);

double sigmoid(double x);

namespace detail {

/// Test-only injection points.
struct RoutingHooks {
  /// Replaces sigmoid(−δ) in the per-vote weight α_i · σ(δ).
  std::function<double(double)> weight;
  /// Receives the pose estimate of output j after initialization and after each iteration.
  std::function<void(std::size_t j, int step, const UnitQuaternion& pose)> on_pose;
};

RoutingOutput dynamic_route(const VoteTensor& votes, const std::vector<double>& alpha_in,
                            const RoutingConfig& cfg, const RoutingHooks& hooks);

}  // namespace detail

}  // namespace qec
