#pragma once

// Reverse-mode differentiation over a dynamically recorded graph. The op set
// is exactly what the toy transformer needs; every op has a hand-written
// backward that is checked against finite differences in the tests.

#include <functional>
#include <span>
#include <vector>

#include "layertracer/numerics.hpp"

namespace layertracer::autodiff {

using numerics::Tensor;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  // With record_gradients == false no backward closures are kept (inference).
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf referencing caller-owned storage; the tensor must outlive the tape.
  // Frozen leaves take part in the forward pass but never receive gradients.
  Var parameter(const Tensor& value, bool trainable = true);
  // Leaf owning a copy of the value.
  Var variable(Tensor value);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() w.r.t. v; zeros if v did not influence the loss.
  Tensor gradient(Var v) const;

  // Runs reverse accumulation from a scalar loss. Non-scalar → InvalidInput.
  void backward(Var loss);

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }

  using BackwardFn = std::function<void(Tape&, int self)>;

  // Used by op implementations.
  Var push(Tensor value, std::span<const Var> parents, BackwardFn backward);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Tensor& grad_of(int id) const { return nodes_[id].grad; }
  Tensor& grad_accumulator(int id);

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Tensor& node_value(int id) const {
    return nodes_[id].external != nullptr ? *nodes_[id].external : nodes_[id].owned;
  }

  std::vector<Node> nodes_;
  bool recording_;
};

// Computes ∂loss/∂θ for every listed parameter.
std::vector<Tensor> grad(Var loss, std::span<const Var> parameters);

// ---- ops ----
Var add(Var a, Var b);
Var add_row(Var a, Var bias);  // a[m,n] + bias[n] broadcast over rows
Var mul(Var a, Var b);         // elementwise
Var scale(Var a, double c);
Var sum(Var a);                // scalar [1]
Var matmul(Var a, Var b);      // [m,k]·[k,n]
Var matmul_nt(Var a, Var b);   // [m,k]·[n,k]^T
Var rmsnorm(Var x, Var weight, double eps = numerics::kRmsNormEps);
Var silu(Var x);
Var elu_plus_one(Var x);
// Row t: softmax over columns s <= t of c·scores, zeros for s > t.
Var causal_softmax(Var scores, double c);
// Row t: a[t,s] / sum_{s'<=t} a[t,s'] for s <= t, zeros for s > t. Entries must be positive.
Var causal_row_normalize(Var a);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var embedding(Var table, std::span<const int> ids);
// Mean token cross-entropy (nats) of logits[T,V] against targets[T].
Var cross_entropy(Var logits, std::span<const int> targets);

}  // namespace layertracer::autodiff
