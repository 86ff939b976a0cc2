#pragma once

// Minimal dense reverse-mode automatic differentiation.
//
// A Graph is a tape: every operation appends a node holding its output
// tensor, so node ids are already in topological order and backward() is a
// single reverse sweep. Storage is 32-bit float throughout.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "metalth/error.hpp"

namespace metalth {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float tensor with a gradient buffer of the same shape.
struct Tensor {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<float> v);

  std::size_t size() const noexcept { return values.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  void zero_grad();
  bool all_finite() const noexcept;
};

/// Thrown when a forward or backward pass produces NaN/Inf.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Divergence, what) {}
};

using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  MatMul,
  AddRowBias,
  Conv2d,
  Relu,
  MaxPool2,
  Reshape,
  SoftmaxCrossEntropy,
  Mse,
  Sum,
  Add,
  Mul,
  Scale,
};

class Graph {
 public:
  /// Adds an input tensor. Gradients are only tracked when `requires_grad`.
  NodeId leaf(Tensor t, bool requires_grad = true);
  NodeId constant(Tensor t) { return leaf(std::move(t), false); }

  NodeId matmul(NodeId a, NodeId b);
  /// x[n x m] + bias[m], broadcast over rows.
  NodeId add_row_bias(NodeId x, NodeId bias);
  /// 3x3 same-padded stride-1 cross-correlation. x is [c x h x w] or
  /// [n x c x h x w]; kernels [c_out x c_in x 3 x 3]; bias [c_out].
  NodeId conv2d(NodeId x, NodeId kernels, NodeId bias);
  NodeId relu(NodeId x);
  /// 2x2 stride-2 max pool over the two trailing axes, ceil mode.
  NodeId maxpool2(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  /// Mean softmax cross-entropy of logits [n x C] against class indices.
  NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels);
  /// 0.5 * mean((pred - target)^2); target is not differentiated.
  NodeId mse(NodeId pred, const Tensor& target);
  NodeId sum(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, float factor);

  /// Reverse sweep from a scalar node. Leaf gradients accumulate across
  /// calls until zero_grads(); intermediate gradients are recomputed.
  void backward(NodeId loss);
  void zero_grads();

  const Tensor& tensor(NodeId id) const { return nodes_.at(id).out; }
  Tensor& tensor(NodeId id) { return nodes_.at(id).out; }
  OpKind kind(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<NodeId> inputs;
    Tensor out;
    bool requires_grad = false;
    std::vector<std::size_t> index;  // maxpool argmax positions
    std::vector<float> aux;          // softmax probabilities / mse target
    std::vector<int> labels;
    float factor = 1.0f;
  };

  NodeId push(Node node);
  bool needs(NodeId id) const { return nodes_[id].requires_grad; }
  void backward_node(Node& node);

  std::vector<Node> nodes_;
};

}  // namespace metalth
