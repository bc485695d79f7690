#pragma once

// Reverse-mode differentiation over dense tensors. A Tape records primitive
// applications; backward() walks them in reverse and accumulates gradients
// into per-node buffers or into caller-owned parameter gradient sinks.

#include <functional>
#include <span>
#include <vector>

#include "fbdebias/tensor.hpp"

namespace fbd::ad {

class Tape;

class Var {
 public:
  Var() = default;
  int id() const { return id_; }
  bool valid() const { return id_ >= 0; }

 private:
  explicit Var(int id) : id_(id) {}
  int id_ = -1;
  friend class Tape;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  /// Input that never receives a gradient.
  Var constant(Tensor value);
  /// Borrowed leaf: `value` must outlive the tape; gradients are added into
  /// `*grad_sink` (same shape) during backward().
  Var leaf(const Tensor& value, Tensor* grad_sink);
  /// Owned leaf whose gradient is read back with grad().
  Var variable(Tensor value);

  Var record(Tensor value, std::vector<int> inputs, Backward backward);

  const Tensor& value(Var v) const { return value(v.id()); }
  const Tensor& value(int id) const;
  /// Gradient of an owned node after backward(); empty if unreached.
  const Tensor& grad(Var v) const;

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  /// Gradient accumulator for node `id`, allocated on first use.
  Tensor& grad_ref(int id);

  /// Requires a scalar root; throws otherwise.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    Tensor* sink = nullptr;
    std::vector<int> inputs;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

// Elementwise, equal shapes.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var exp(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var tanh(Tape& t, Var a);
/// max(exp(a), floor); the floor keeps variances strictly positive.
Var exp_floor(Tape& t, Var a, double floor);

/// W [out,in] times x [in].
Var matvec(Tape& t, Var W, Var x);
/// W x + b.
Var affine(Tape& t, Var x, Var W, Var b);
Var concat(Tape& t, std::span<const Var> parts);
Var sum(Tape& t, Var a);
/// Row `index` of a rank-2 tensor as a vector.
Var row(Tape& t, Var matrix, std::size_t index);

/// log softmax(logits)[index], max-shifted.
Var softmax_logprob(Tape& t, Var logits, std::size_t index);

/// KL(N(mu_q, diag var_q) || N(mu_p, diag var_p)) summed over dimensions.
Var gaussian_kl(Tape& t, Var mu_q, Var var_q, Var mu_p, Var var_p);

/// mu + sqrt(var) * noise.
Var reparam_sample(Tape& t, Var mu, Var var, const Tensor& noise);

/// Standard GRU weights: gates z (update) and r (reset), candidate n.
///   z = sigmoid(Wz x + Uz h + bz)
///   r = sigmoid(Wr x + Ur h + br)
///   n = tanh(Wn x + Un (r * h) + bn)
///   h' = n + z * (h - n)
struct GruWeights {
  Var Wz, Uz, bz;
  Var Wr, Ur, br;
  Var Wn, Un, bn;
};

Var gru_cell(Tape& t, Var x, Var h_prev, const GruWeights& w);

// Forward-only helpers sharing the same arithmetic as the taped ops.
void softmax_inplace(std::span<double> logits);
double gaussian_kl_value(std::span<const double> mu_q, std::span<const double> var_q,
                         std::span<const double> mu_p, std::span<const double> var_p);

}  // namespace fbd::ad
