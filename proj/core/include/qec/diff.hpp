#pragma once

// Minimal reverse-mode differentiation over dense float64 tensors. A Tape
// records every operation with a closure that pushes its output gradient
// back to its parents; `backward` replays the closures in reverse order.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace qec::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);

/// Handle to a tape node.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape;
using BackwardFn = std::function<void(Tape&, std::size_t self)>;

class Tape {
 public:
  /// Leaf that receives a gradient.
  Var parameter(Shape shape, std::vector<double> values);
  /// Leaf without gradient.
  Var constant(Shape shape, std::vector<double> values);

  /// Appends an op node. `requires_grad` is inferred from the parents.
  Var push(Shape shape, std::vector<double> values, std::initializer_list<Var> parents,
           BackwardFn backward);

  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  const std::vector<double>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient buffer, zero-initialized on first access.
  std::vector<double>& grad(Var v);
  std::vector<double>& grad(std::size_t id) { return grad(Var{id}); }
  const std::vector<double>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Seeds d(loss)/d(loss) = 1 for a scalar loss and runs every closure in reverse order.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  /// Events recorded during the forward pass.
  std::size_t zero_norm_events = 0;
  std::size_t degenerate_means = 0;

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// --- dense ops -------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b);          // [m,k] x [k,n]
Var add_bias(Tape& t, Var a, Var bias);     // [m,n] + [n]
Var add(Tape& t, Var a, Var b);             // same shape
Var mul(Tape& t, Var a, Var b);             // elementwise, same shape
Var scale(Tape& t, Var a, double s);
Var relu(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var sum(Tape& t, Var a);                    // -> [1]
/// Sums consecutive groups of `group` entries: [n * group] -> [n].
Var sum_groups(Tape& t, Var a, std::size_t group);
Var reshape(Tape& t, Var a, Shape shape);
/// Rows of `a` (first axis) picked by index; backward scatter-adds.
Var gather_rows(Tape& t, Var a, std::span<const std::size_t> rows);
/// Column block [begin, begin + count) of every row of a 2-D tensor.
Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t count);

// --- quaternion ops (trailing dimension 4) ----------------------------------

/// v / ||v||; vectors shorter than 1e-12 become (1,0,0,0) with zero gradient.
Var normalize_last4(Tape& t, Var a);
/// Flips each quaternion onto the northern hemisphere.
Var canonicalize_last4(Tape& t, Var a);
Var conjugate_last4(Tape& t, Var a);
/// Row-wise Hamilton product of two [n,4] tensors.
Var hamilton_batch(Tape& t, Var p, Var r);
/// [n,3] -> [n,4] pure quaternions (0, x).
Var embed_pure(Tape& t, Var x);
/// [n,4] -> [n,3] vector parts.
Var vector_part(Tape& t, Var q);
/// Row-wise q ∘ (0,x) ∘ q̄ for q [n,4] and x [n,3].
Var rotate_batch(Tape& t, Var q, Var x);
/// Row-wise 2 acos(|<a,b>|) -> [n]. The derivative clamps |<a,b>| at 1 − 1e-7.
Var geodesic_batch(Tape& t, Var a, Var b);
/// Weighted chordal means of `sets` [B,n,4] with weights [B,n] -> [B,4],
/// hemisphere-canonicalized. Degenerate sets are counted on the tape and get
/// no gradient.
Var quat_mean_node(Tape& t, Var sets, Var weights);

// --- losses -----------------------------------------------------------------

inline constexpr double kAcosClamp = 1.0 - 1e-7;

/// Σ_{i≠target} max(0, margin − (a_target − a_i))². Throws Error{BadTarget}.
Var spread_loss(Tape& t, Var activations, std::size_t target, double margin);
double spread_loss_value(std::span<const double> activations, std::size_t target, double margin);
/// Geodesic distance between two 4-vectors ([4] each).
Var rotation_loss(Tape& t, Var pred, Var truth);

// --- optimizer --------------------------------------------------------------

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
};

class Adam {
 public:
  explicit Adam(double lr = 0.001, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One bias-corrected update; `grads[i]` pairs with `params[i]`.
  void step(std::vector<Parameter*>& params, const std::vector<std::vector<double>>& grads);
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// --- checkpoints ------------------------------------------------------------

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// Binary layout (all integers little-endian, doubles IEEE-754 little-endian):
///   8 bytes  magic "QECCKPT\0"
///   u32      version (1)
///   u64      manifest byte length, then the manifest (UTF-8 JSON)
///   u32      array count, then per array:
///            u32 name length, name bytes, u32 rank, rank x u64 dims, f64 data
struct Checkpoint {
  std::string manifest;
  std::vector<NamedArray> arrays;

  const NamedArray& at(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace qec::diff
