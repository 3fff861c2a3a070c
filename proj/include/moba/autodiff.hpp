#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moba/attention.hpp"
#include "moba/gating.hpp"
#include "moba/tensor.hpp"

namespace moba::ad {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

// Receives the gradient of the node's output and accumulates into inputs.
using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

// Single-owner record of a forward computation. Nodes are appended in
// evaluation order, so reverse insertion order is a reverse topological
// order and backward visits each node exactly once.
class Tape {
 public:
  Var leaf(Tensor value);
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  // Zeros of the value's shape until backward reaches the node.
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& op(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Gradients of the scalar `root` with respect to every node. Previous
  // gradients are discarded. Non-scalar roots raise ContractError.
  void backward(Var root);

  // For op implementations.
  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);
  void accumulate(Var v, const Tensor& g);
  void accumulate_at(Var v, std::size_t flat_index, double g);

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    mutable Tensor grad;  // allocated lazily
    bool requires_grad = false;
    BackwardFn backward;
  };
  Node& node(Var v);
  const Node& node(Var v) const;
  void ensure_grad(Node& n) const;

  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// x [m, n] + bias [n] broadcast over rows.
Var add_bias(Var x, Var bias);
Var scale(Var x, double factor);
// Rows of `table` picked by `ids` (embedding lookup).
Var gather_rows(Var table, std::span<const std::size_t> ids);
// Per-row normalization with learned gain and bias, both [d].
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// tanh approximation.
Var gelu(Var x);
Var sum(Var x);
Var sum_squares(Var x);
// sum(x * weights) with constant weights.
Var weighted_sum(Var x, const Tensor& weights);
// Mean token cross-entropy over positions with mask[i] != 0.
Var cross_entropy(Var logits, std::span<const std::size_t> targets,
                  std::span<const std::uint8_t> mask);

// q, k, v are [N, h * d]; heads are contiguous column groups. Softmax over
// the keys `visible(head, i, j)` admits, with the full probability matrix
// kept for backward.
Var masked_attention(Var q, Var k, Var v, std::size_t num_heads, const KeyMask& visible,
                     bool scale = true);
Var causal_attention(Var q, Var k, Var v, std::size_t num_heads, bool scale = true);

// MoBA attention under a frozen routing table. Forward merges per-block
// partials by online softmax and keeps only each row's log-sum-exp;
// backward recomputes probabilities block by block. No gradient reaches
// the gate scores.
Var moba_attention(Var q, Var k, Var v, const RoutingTable& routing, bool scale = true);

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double eps = 1e-5);

}  // namespace moba::ad
