#pragma once

#include <functional>
#include <span>
#include <vector>

#include "onda/tensor.hpp"

namespace onda {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Tape of operator records in creation order.
///
/// Node ids increase monotonically and every operator consumes only earlier
/// nodes, so the tape is topologically sorted by construction and backward()
/// walks it in exact reverse order. Parameters are bound by pointer: their
/// gradients accumulate into Tensor::grad() of the bound tensor, which must
/// outlive the graph's backward().
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `value`; no gradient flows into it.
  Var constant(Tensor value);
  /// Leaf bound to an external tensor. Gradients land in `param.grad()` when
  /// `param.requires_grad()` is set.
  Var parameter(Tensor& param);

  /// Records an operator output. `backward` may be empty when no input needs
  /// a gradient.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  bool any_requires_grad(std::initializer_list<Var> vars) const;

  /// Adjoint buffer of a node during backward(); zero-initialized on first use.
  Tensor::Array& adjoint(int id);
  /// Adjoint of a node after backward(), or empty if none reached it.
  const Tensor::Array* adjoint_if(int id) const;
  const std::vector<int>& inputs(int id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }

  /// Reverse sweep from a scalar loss. Bound parameter gradients accumulate
  /// across calls; intermediate adjoints are recomputed each call.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    Tensor* bound = nullptr;
    bool requires_grad = false;
    Tensor::Array adj;
    bool has_adj = false;
  };

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

enum class BNMode {
  TrainUpdate,  ///< batch statistics, running statistics updated
  TrainFrozen,  ///< batch statistics, running statistics untouched
  Eval,         ///< running statistics
};

/// Running statistics of a batch-norm layer.
struct BNState {
  Eigen::ArrayXd running_mean;
  Eigen::ArrayXd running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BNState() = default;
  explicit BNState(Index channels)
      : running_mean(Eigen::ArrayXd::Zero(channels)), running_var(Eigen::ArrayXd::Ones(channels)) {}

  bool operator==(const BNState& o) const {
    return running_mean.size() == o.running_mean.size() && (running_mean == o.running_mean).all() &&
           (running_var == o.running_var).all() && momentum == o.momentum && eps == o.eps;
  }
};

namespace ops {

/// Same-size cross-correlation: input [N,Cin,H,W], kernel [Cout,Cin,k,k],
/// bias [Cout]; `padding` must equal (k-1)/2.
Var conv2d(Var input, Var kernel, Var bias, int padding);

/// Per-channel batch normalization with learnable scale/shift.
/// In TrainUpdate the running statistics of `state` are updated in place.
Var batchnorm2d(Var input, Var gamma, Var beta, BNState& state, BNMode mode);
/// Read-only overload; TrainUpdate is rejected.
Var batchnorm2d(Var input, Var gamma, Var beta, const BNState& state, BNMode mode);

Var relu(Var x);
/// Softmax over dimension 1 of an NCHW tensor, max-subtracted.
Var softmax_channel(Var x);
/// log(max(x, floor)); the gradient is zero where the floor is active.
Var log(Var x, double floor = 0.0);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var sum(Var x);
Var mean(Var x);

}  // namespace ops

/// p <- p - lr * grad for every tensor, then zero the gradients.
void sgd_step(std::span<Tensor* const> params, double lr);

}  // namespace onda
