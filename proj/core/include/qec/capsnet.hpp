#pragma once

// Quaternion equivariant capsule layers and the two-level point-cloud network.
//
// A QEC layer takes K points per patch, each carrying N^c input capsules. Per
// channel it averages the input poses, rotates the patch points into that
// mean frame, feeds the flattened canonical coordinates through a two-layer
// kernel MLP that emits K x N^c x M unit quaternions, forms votes q ∘ t and
// routes them into M output capsules.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qec/diff.hpp"
#include "qec/pointcloud.hpp"
#include "qec/quat.hpp"
#include "qec/routing.hpp"

namespace qec {

struct QecLayerConfig {
  std::size_t K = 9;
  std::size_t Nc = 1;
  std::size_t M = 64;
  RoutingConfig routing;
  /// Test hook: feed raw (uncanonicalized) coordinates to the kernel. Breaks
  /// equivariance on purpose; never serialized.
  bool skip_canonicalization = false;
};

struct NetworkConfig {
  std::size_t class_count = 10;
  /// Neighbors used for each LRF plane fit.
  std::size_t lrf_k = 16;
  /// Points kept (by FPS) after LRF extraction.
  std::size_t num_lrf_points = 512;
  /// Pooling centers N.
  std::size_t num_points = 64;
  std::size_t hidden = 64;
  /// Deeper layers weight their channel means by incoming activations.
  bool weighted_channel_mean = true;
  /// Std-dev of the final kernel layer's weights.
  double kernel_init_scale = 0.05;
  std::uint64_t seed = 0;
  std::vector<QecLayerConfig> layers;

  /// Layer 1: K=9, N^c=1, M=64; layer 2: K=num_points, N^c=64, M=C.
  static NetworkConfig defaults(std::size_t class_count);
  /// Throws Error{InvalidArgument} on non-chaining or non-positive sizes.
  void validate() const;
};

std::string network_config_to_json(const NetworkConfig& cfg);
/// Rejects unknown keys with Error{InvalidArgument}. Missing keys keep defaults.
NetworkConfig network_config_from_json(const std::string& text);

// --- parameters -------------------------------------------------------------

/// Kernel t(·): 3·N^c -> hidden (ReLU) -> N^c·M·4.
struct MlpParams {
  diff::Parameter W1, b1, W2, b2;
};

struct NetworkParams {
  std::vector<MlpParams> layers;

  std::vector<diff::Parameter*> all();
  std::vector<const diff::Parameter*> all() const;
};

/// He-normal first layer, zero first bias, N(0, init_scale²) second layer
/// weights and an identity-quaternion second bias.
MlpParams init_mlp(const QecLayerConfig& layer, std::size_t hidden, double init_scale,
                   std::uint64_t seed, const std::string& prefix = "");
NetworkParams init_network(const NetworkConfig& cfg);

std::size_t mlp_parameter_count(std::size_t Nc, std::size_t M, std::size_t hidden);
std::size_t parameter_count(const NetworkConfig& cfg);

// --- one QEC layer ----------------------------------------------------------

/// Reference implementation over a single patch. `points` are K center-relative
/// positions; `caps_in` is K x N^c row-major (point k, channel c). Channel
/// means are weighted by the input activations when `weighted_mean` is set.
std::vector<Capsule> qec_forward(std::span<const Vec3> points, const std::vector<Capsule>& caps_in,
                                 const MlpParams& params, const QecLayerConfig& cfg,
                                 bool weighted_mean = true);

struct MlpVars {
  diff::Var W1, b1, W2, b2;
};

struct QecTapeOutput {
  diff::Var poses;        // [P*M, 4], rows (patch, output)
  diff::Var activations;  // [P*M]
};

/// Batched differentiable layer over P patches. `points` holds P*K
/// center-relative positions; `poses` is [P*K*N^c, 4] and `activations`
/// [P*K*N^c], both ordered (patch, point, channel).
QecTapeOutput qec_forward_tape(diff::Tape& t, std::span<const Vec3> points, diff::Var poses,
                               diff::Var activations, const MlpVars& mlp, const QecLayerConfig& cfg,
                               std::size_t patches, bool weighted_mean);

MlpVars mlp_on_tape(diff::Tape& t, const MlpParams& p, bool trainable);

// --- network ----------------------------------------------------------------

/// Input of the network after the parameter-free preprocessing.
struct PreparedCloud {
  /// P*K1 neighbor positions relative to their pooling center.
  std::vector<Vec3> patch_points;
  /// P*K1 LRF quaternions matching `patch_points`.
  std::vector<Vec4> patch_frames;
  /// P pooling centers relative to their centroid.
  std::vector<Vec3> center_points;
  std::size_t degenerate_lrfs = 0;
};

/// LRFs (unless the cloud already carries frames), FPS to num_lrf_points,
/// FPS to num_points pooling centers, K1-nearest grouping. Throws
/// Error{InsufficientPoints}.
PreparedCloud prepare_cloud(const PointCloud& cloud, const NetworkConfig& cfg, std::uint64_t seed);

struct LatentCapsules {
  std::vector<Capsule> capsules;
  std::size_t degenerate_means = 0;
  std::size_t zero_norm_events = 0;
};

struct NetworkTapeOutput {
  diff::Var poses;        // [C, 4]
  diff::Var activations;  // [C]
};

NetworkTapeOutput network_forward_tape(diff::Tape& t, const PreparedCloud& in,
                                       const std::vector<MlpVars>& mlps, const NetworkConfig& cfg);

LatentCapsules network_forward(const PreparedCloud& in, const NetworkParams& params,
                               const NetworkConfig& cfg);
/// Prepares with cfg.seed, then runs the network.
LatentCapsules network_forward(const PointCloud& cloud, const NetworkParams& params,
                               const NetworkConfig& cfg);

/// Argmax activation, lowest index on ties.
std::size_t classify(const LatentCapsules& latent);
UnitQuaternion canonical_pose(const LatentCapsules& latent);

struct RelativePose {
  UnitQuaternion rotation;
  bool class_mismatch = false;
};

/// relative_rotation between the most active capsules of A and B.
RelativePose siamese_relative_pose(const LatentCapsules& a, const LatentCapsules& b);

// --- training ---------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 200;
  double learning_rate = 0.001;
  std::size_t batch_size = 1;
  double margin = 0.2;
  /// Linear margin ramp from `margin` to `margin_max` over the epochs.
  bool margin_ramp = false;
  double margin_max = 0.9;
  bool siamese = false;
  double rotation_loss_weight = 1.0;
  /// Stop once training accuracy stays >= this for `early_stop_patience` epochs.
  double early_stop_accuracy = 2.0;
  std::size_t early_stop_patience = 3;
  std::size_t eval_every = 1;
  std::uint64_t seed = 0;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct TrainSample {
  PreparedCloud cloud;
  int label = 0;
  /// Siamese partner: a rotated and resampled copy, with `relative` = g.
  std::optional<PreparedCloud> partner;
  UnitQuaternion relative;
};

struct EvalSample {
  PreparedCloud nr;
  std::optional<PreparedCloud> ar;
  int label = 0;
  /// Rotated and resampled partner with its relative rotation.
  std::optional<PreparedCloud> partner;
  UnitQuaternion relative;
};

struct EvalMetrics {
  std::size_t count = 0;
  double nr_accuracy = 0.0;
  double ar_accuracy = 0.0;  // NaN without AR copies
  std::vector<double> rae;   // one per sample with a partner
  double rae_median = 0.0;   // NaN without partners
  double rae_mean = 0.0;
  std::size_t class_mismatches = 0;
};

EvalMetrics evaluate(const std::vector<EvalSample>& samples, const NetworkParams& params,
                     const NetworkConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double spread_loss = 0.0;
  double rotation_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<EvalMetrics> validation;
  std::size_t degenerate_means = 0;
  std::size_t zero_norm_events = 0;
  double seconds = 0.0;
};

std::string epoch_record_to_json(const EpochRecord& r);

struct TrainResult {
  NetworkParams params;
  std::vector<EpochRecord> history;
};

/// ADAM on spread loss plus, in siamese mode, the rotation loss between the
/// predicted relative pose (label capsule) and the true one. Batch members
/// run on up to thread_count() threads; gradients are reduced in batch order.
/// One JSON record per epoch goes to `log` when given. Throws
/// Error{NonFiniteLoss}.
TrainResult train(const std::vector<TrainSample>& data, const std::vector<EvalSample>& validation,
                  const NetworkConfig& net, const TrainConfig& cfg, std::ostream* log = nullptr,
                  NetworkParams* initial = nullptr);

/// QEC_THREADS if set and positive, else hardware concurrency (at least 1).
std::size_t thread_count();

// --- persistence ------------------------------------------------------------

struct Model {
  NetworkConfig config;
  NetworkParams params;
  std::vector<std::string> class_names;
};

void save_model(const std::filesystem::path& path, const Model& model);
/// Throws Error{ParseError} on malformed files or missing arrays.
Model load_model(const std::filesystem::path& path);

}  // namespace qec
