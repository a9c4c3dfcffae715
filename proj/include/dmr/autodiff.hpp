#pragma once

// Tape-based reverse-mode automatic differentiation over dense 64-bit tensors.
//
// A Tape records every op in execution order, so the node vector is already a
// topological order and backward() is a single reverse sweep. Nodes that never
// receive gradient are skipped in that sweep, which is what makes
// stop_gradient() and frozen (constant) parameters free on the backward pass.

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dmr/rng.hpp"
#include "dmr/tensor.hpp"

namespace dmr::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
  // d(loss)/d(this) after Tape::backward; zeros when no gradient arrived.
  Tensor grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var variable(Tensor value) { return leaf(std::move(value), true); }

  // Appends an op result. The backward function is kept only when some input
  // requires grad; otherwise the result is a constant.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  // Populates gradients of every requires-grad node reachable from `loss`.
  // Earlier gradients on this tape are discarded first.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, or nullptr when it received none.
  const Tensor* grad_if_any(std::size_t id) const;

  // For op implementations during backward: upstream gradient of `id`, and
  // the accumulation buffer of input `id` (nullptr if it needs no grad).
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }
  Tensor* accumulator(std::size_t id);
  std::size_t input(std::size_t id, std::size_t k) const {
    return nodes_[id].inputs[k];
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool touched = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var leaf(Tensor value, bool requires_grad);

  std::vector<Node> nodes_;
};

inline constexpr std::size_t kNoRow = std::numeric_limits<std::size_t>::max();

// --- elementwise / broadcasting -------------------------------------------
// Binary ops accept b with the same shape as a, or a shape equal to a
// trailing suffix of a's shape (including a scalar); b is then repeated.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
// Natural log with the input clamped to at least kLogFloor.
Var log(Var a);
inline constexpr double kLogFloor = 1e-12;
Var pow(Var a, int exponent);
Var abs(Var a);

// --- linear algebra ---------------------------------------------------------
// a: [..., K], b: [K, M] -> [..., M].
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat_last(Var a, Var b);
// Columns [begin, end) of the last axis.
Var slice_last(Var a, std::size_t begin, std::size_t end);
// Multiplies every last-axis row of x by the matching entry of s, where
// s.shape == x.shape without its last axis.
Var scale_rows(Var x, Var s);

// --- reductions -------------------------------------------------------------
Var sum(Var a);
Var sum(Var a, std::size_t axis);
Var mean(Var a);
Var mean(Var a, std::size_t axis);
// Euclidean norm over all entries; the gradient at the origin is taken as 0.
Var l2_norm(Var a);

// --- structured ops ---------------------------------------------------------
// Softmax along the last axis, max-subtracted.
Var softmax(Var a);
// Row lookup: ids index rows of table [V, E]; result is lead_shape + [E].
// Gradient is not accumulated into `frozen_row` (use kNoRow for none).
Var gather_rows(Var table, std::span<const std::int32_t> ids, Shape lead_shape,
                std::size_t frozen_row = kNoRow);
// x: [B, L, H], valid: [B, L] of 0/1. Invalid positions are ignored (max
// treats them as -inf, mean divides by the valid count). Every row must have
// at least one valid position.
Var masked_max_pool(Var x, const Tensor& valid);
Var masked_mean_pool(Var x, const Tensor& valid);
// out[b] = x[b, index[b]] for x: [B, C].
Var pick(Var x, std::span<const int> index);
// out[i, j] = ||x_i - y_j||^2 for x: [N, d], y: [M, d].
Var pairwise_sq_dist(Var x, Var y);

// --- gradient routing -------------------------------------------------------
// Same value, no gradient flows back through it.
Var stop_gradient(Var a);

// Forward: z = 1 where p >= threshold, else 0. Backward: identity.
Var straight_through(Var p, double threshold = 0.5);
// Forward: z ~ Bernoulli(p) drawn from rng in row-major order. Backward:
// identity.
Var straight_through_sample(Var p, Rng& rng);

}  // namespace dmr::ad
