#pragma once

// Reverse-mode automatic differentiation over float64 vectors.
//
// A Graph is a tape of nodes in creation (hence topological) order. Each node
// holds a value vector and, when it depends on something that needs a
// gradient, a backward closure. Parameters are not nodes: ops read them
// through a ParamRef and accumulate their gradients into the ParamRef's grad
// span (left empty for frozen parameters). This keeps per-thread graphs
// independent while parameters stay shared and read-only.
//
// Nodes are vector-level, so one transformer position contributes a constant
// number of nodes; tracked_nodes() is therefore proportional to the number of
// positions whose activations are retained for backward.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace semivar::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

struct ParamRef {
  std::span<const double> value;
  std::span<double> grad;  // empty: no gradient wanted
  bool trainable() const { return !grad.empty(); }
};

class Graph {
 public:
  // With track=false every op computes its value only; nothing is retained for
  // backward (the equivalent of running under a no-grad guard).
  explicit Graph(bool track = true) : track_(track) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return track_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t tracked_nodes() const { return tracked_; }
  // Bytes of values held by tracked nodes.
  std::size_t retained_bytes() const { return retained_bytes_; }

  std::span<const double> value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value.at(0); }
  // Gradient of the last backward() root w.r.t. v; empty if none reached v.
  std::span<const double> grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  Var constant(std::vector<double> value);
  // Leaf whose gradient is recorded (for tests and input sensitivity probes).
  Var leaf(std::vector<double> value);
  Var one_hot(int index, int size);

  // Row `row` of a (rows x dim) table.
  Var embedding(ParamRef table, int row, int dim);
  // table^T * weights, i.e. a weight-averaged embedding for a relaxed row.
  Var relaxed_embedding(ParamRef table, Var weights, int dim);
  // w (out x in) * x + b; bias may be an empty ParamRef.
  Var affine(ParamRef w, ParamRef b, Var x, int out_dim);
  Var add(Var a, Var b);
  Var add_param(Var a, ParamRef p);
  Var scale(Var a, double c);
  // Elementwise product.
  Var mul(Var a, Var b);
  Var layer_norm(Var x, ParamRef gain, ParamRef bias, double eps = 1e-5);
  Var gelu(Var x);
  // Multi-head scaled dot-product attention of one query over `keys`/`values`
  // (all of width d = heads * head_dim).
  Var attention(Var query, std::span<const Var> keys, std::span<const Var> values, int heads);
  Var log_softmax(Var logits);
  Var exp(Var x);
  // Forward value onehot(token); backward passes the incoming gradient to
  // `probs` unchanged: z + pi - stop_gradient(pi).
  Var straight_through(int token, Var probs);
  Var pick(Var v, int index);
  // sum_v exp(log_q[v]) * (max(log_p[v], log_floor) - log_q[v]).
  // log_floor = -inf disables flooring.
  Var kl_term(Var log_q, Var log_p, double log_floor);
  Var sum(std::span<const Var> scalars);

  // Seeds d(root) = seed and propagates to every tracked node and ParamRef.
  void backward(Var root, double seed = 1.0);

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void(Graph&, const std::vector<double>&)> backward;
    bool requires_grad = false;
  };

  Var push(std::vector<double> value, bool requires_grad,
           std::function<void(Graph&, const std::vector<double>&)> backward);
  std::vector<double>& grad_buffer(Var v);
  bool needs(Var v) const { return track_ && nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  bool needs(const ParamRef& p) const { return track_ && p.trainable(); }

  bool track_;
  std::deque<Node> nodes_;
  std::size_t tracked_ = 0;
  std::size_t retained_bytes_ = 0;
};

}  // namespace semivar::ad
