#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "edgs/tensor.hpp"

namespace edgs::ad {

class Graph;

/// Handle to a node in a ParamGraph. Cheap to copy; data/grad live in the graph.
class Value {
 public:
  Value() = default;
  const Tensor& data() const;
  const Tensor& grad() const;
  const std::vector<std::size_t>& shape() const { return data().shape(); }
  std::size_t numel() const { return data().numel(); }
  std::uint32_t id() const { return id_; }
  Graph* graph() const { return g_; }
  bool valid() const { return g_ != nullptr; }

 private:
  friend class Graph;
  Value(Graph* g, std::uint32_t id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kDiv,
  kConcat,
  kRelu,
  kSigmoid,
  kExp,
  kSqrt,
  kNegate,
  kAbs,
  kScale,
  kSum,
  kMean,
  kSquaredNorm,
  kSumLast,
  kBroadcast,
  kReshape,
  kNormalizeLast,
  kCustom,
};

const char* op_name(OpKind k);

/// Backward hook for composite ops (rasterization, SSIM). Receives the output
/// gradient and must accumulate (+=) into the input gradient tensors. Entries
/// for inputs that do not require grad are nullptr and must be skipped.
using CustomBackward =
    std::function<void(const Tensor& out_grad, std::span<const Tensor* const> input_data,
                       std::span<Tensor* const> input_grads)>;

/// Reverse-mode tape over dense tensors. Nodes are append-only; a node's
/// inputs always have smaller ids, so backward walks ids in reverse.
/// Graphs are rebuilt per training step and must not outlive their use.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that participates in gradient computation.
  Value leaf(Tensor t);
  /// Leaf excluded from gradient computation (frozen data, encodings).
  Value constant(Tensor t);

  Value matmul(Value a, Value b);
  Value add(Value a, Value b);
  Value mul(Value a, Value b);
  Value div(Value a, Value b);
  /// Concatenates along the last axis; leading dims must match.
  Value concat(Value a, Value b);
  Value relu(Value a);
  Value sigmoid(Value a);
  /// exp with the input clamped at +40 so finite inputs never overflow;
  /// the clamped region has zero derivative.
  Value exp(Value a);
  Value sqrt(Value a);
  Value negate(Value a);
  Value abs(Value a);
  Value scale(Value a, double c);
  Value sum(Value a);
  Value mean(Value a);
  Value squared_norm(Value a);
  /// Sum over the innermost axis: (..., n) -> (...).
  Value sum_last(Value a);
  /// Expands to target shape; source dims must be 1 or equal, aligned at the
  /// trailing axes. Backward sums over the expanded axes.
  Value broadcast(Value a, std::vector<std::size_t> target);
  Value reshape(Value a, std::vector<std::size_t> target);
  /// L2-normalizes each vector along the last axis (quaternion composition).
  Value normalize_last(Value a);
  Value custom(const std::string& label, std::vector<Value> inputs, Tensor out,
               CustomBackward backward);

  /// Populates grads of every node reachable from root with d(root)/d(node).
  /// Gradients accumulate additively across fan-out. root must be scalar.
  void backward(Value root);

  const Tensor& data(std::uint32_t id) const { return nodes_[id].out; }
  Tensor& mutable_data(std::uint32_t id) { return nodes_[id].out; }
  const Tensor& grad(std::uint32_t id);
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    Tensor out;
    Tensor grad;  // lazily materialized; empty until first accumulation
    double scalar_arg = 0.0;
    std::vector<std::size_t> shape_arg;  // source shape / split point metadata
    CustomBackward custom_backward;
    std::string label;
  };

  Value push(Node n);
  Tensor& grad_buffer(std::uint32_t id);
  void backward_node(Node& n);

  std::vector<Node> nodes_;
};

// Operator sugar for graph expressions.
inline Value operator+(Value a, Value b) { return a.graph()->add(a, b); }
inline Value operator*(Value a, Value b) { return a.graph()->mul(a, b); }
inline Value operator/(Value a, Value b) { return a.graph()->div(a, b); }
inline Value operator-(Value a) { return a.graph()->negate(a); }
inline Value operator-(Value a, Value b) { return a.graph()->add(a, a.graph()->negate(b)); }

}  // namespace edgs::ad
