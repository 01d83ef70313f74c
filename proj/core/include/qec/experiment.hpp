#pragma once

// Dataset plumbing shared by the CLI and the acceptance harness: run
// configuration files, manifest loading and the procedural toy protocol.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qec/capsnet.hpp"
#include "qec/pointcloud.hpp"

namespace qec {

/// Everything a `train`/`eval` run needs. JSON layout:
/// { "network": {...}, "training": {...}, "points_per_cloud": 1024,
///   "seed": 0, "eval_dropout": 0.0 }
/// Missing sections keep their defaults; unknown keys are rejected.
struct RunConfig {
  NetworkConfig network = NetworkConfig::defaults(10);
  TrainConfig training;
  /// Surface samples drawn from mesh inputs.
  std::size_t points_per_cloud = 1024;
  /// Drives mesh sampling, preprocessing and evaluation rotations.
  std::uint64_t seed = 0;
  /// Fraction removed by patch_dropout from every evaluated cloud.
  double eval_dropout = 0.0;
  bool has_network = false;
};

std::string run_config_to_json(const RunConfig& cfg);
/// Throws Error{ParseError} on malformed text and Error{InvalidArgument} on
/// unknown keys or out-of-range values.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Loads a point cloud, surface-sampling meshes with `points` samples.
PointCloud load_cloud(const std::filesystem::path& path, std::size_t points, std::uint64_t seed);

/// A loaded evaluation item before preprocessing.
struct RawSample {
  PointCloud cloud;
  int label = 0;
  /// Mesh kept for resampling, when the input was one.
  std::optional<TriMesh> mesh;
  /// Partner cloud with the rotation taking `cloud` onto it.
  std::optional<PointCloud> partner;
  UnitQuaternion relative;
};

/// Reads one manifest split. A sample's `pose` is the rotation taking it onto
/// its `pair`; both are optional.
std::vector<RawSample> load_split(const Manifest& manifest, const std::string& split,
                                  std::size_t points, std::uint64_t seed);

/// With `siamese`, every sample gets a rotated partner (see EvalOptions).
/// `views` > 1 adds fresh surface resamplings of samples that carry a mesh,
/// all in their original pose.
std::vector<TrainSample> prepare_training(const std::vector<RawSample>& raw, const NetworkConfig& net,
                                          std::uint64_t seed, bool siamese = false, std::size_t points = 1024,
                                          std::size_t views = 1);

struct EvalOptions {
  /// Adds an arbitrarily rotated copy of every sample.
  bool rotate = false;
  /// Builds rotated partners for samples without one: resampled when the mesh
  /// is known, the same points otherwise.
  bool synthesize_partners = false;
  double dropout = 0.0;
  std::size_t points = 1024;
  std::uint64_t seed = 0;
};

std::vector<EvalSample> prepare_evaluation(const std::vector<RawSample>& raw, const NetworkConfig& net,
                                           const EvalOptions& opt);

/// Fraction of RAE values (as angles) below each threshold in degrees.
struct HistogramBin {
  double degrees = 0.0;
  double fraction = 0.0;
};
std::vector<HistogramBin> rae_histogram(const std::vector<double>& rae,
                                        const std::vector<double>& degrees = {5, 10, 15, 20, 30, 60});

// --- procedural toy protocol -------------------------------------------------

struct ToyProtocol {
  std::vector<ToyClass> classes{ToyClass::ElongatedBox, ToyClass::LShape, ToyClass::Cone};
  std::size_t train_per_class = 50;
  std::size_t test_per_class = 20;
  std::size_t points_per_cloud = 1024;
  double noise_sigma = 0.005;
  std::uint64_t seed = 1;
};

/// Canonically posed training clouds and test items with meshes kept, split
/// per class in generation order.
struct ToySplits {
  std::vector<RawSample> train;
  std::vector<RawSample> test;
  std::vector<std::string> class_names;
};

ToySplits make_toy_splits(const ToyProtocol& protocol);

/// Writes meshes under `dir` plus a manifest.json with train/test splits.
void write_toy_dataset(const std::filesystem::path& dir, const ToyProtocol& protocol);

}  // namespace qec
