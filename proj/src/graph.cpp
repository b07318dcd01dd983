#include "edgs/graph.hpp"

#include <algorithm>
#include <cmath>

namespace edgs::ad {

namespace {

constexpr double kExpClamp = 40.0;

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

// Strides of `src` aligned to the trailing axes of `target`, with 0 stride on
// broadcast axes. Throws if the shapes are incompatible.
std::vector<std::size_t> broadcast_strides(const char* op, const std::vector<std::size_t>& src,
                                           const std::vector<std::size_t>& target) {
  if (src.size() > target.size())
    throw ShapeError(std::string(op) + ": source rank exceeds target, " +
                     Tensor::shape_str(src) + " vs " + Tensor::shape_str(target));
  std::vector<std::size_t> strides(target.size(), 0);
  std::size_t stride = 1;
  // Walk trailing axes of src, building row-major strides.
  std::vector<std::size_t> src_strides(src.size());
  for (std::size_t i = src.size(); i-- > 0;) {
    src_strides[i] = stride;
    stride *= src[i];
  }
  std::size_t offset = target.size() - src.size();
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (i < offset) {
      strides[i] = 0;
      continue;
    }
    std::size_t s = src[i - offset];
    if (s == target[i])
      strides[i] = src_strides[i - offset];
    else if (s == 1)
      strides[i] = 0;
    else
      throw ShapeError(std::string(op) + ": cannot broadcast " + Tensor::shape_str(src) +
                       " to " + Tensor::shape_str(target));
  }
  return strides;
}

// Maps every linear index of `target_shape` to a linear index of the source
// described by `strides`, applying `fn(target_idx, src_idx)`.
template <typename Fn>
void for_each_broadcast(const std::vector<std::size_t>& target_shape,
                        const std::vector<std::size_t>& strides, Fn&& fn) {
  const std::size_t rank = target_shape.size();
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = Tensor::count(target_shape);
  std::size_t src = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    fn(lin, src);
    // Odometer increment.
    for (std::size_t ax = rank; ax-- > 0;) {
      idx[ax]++;
      src += strides[ax];
      if (idx[ax] < target_shape[ax]) break;
      src -= strides[ax] * target_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kConcat: return "concat";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kNegate: return "negate";
    case OpKind::kAbs: return "abs";
    case OpKind::kScale: return "scale";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSquaredNorm: return "squared-norm";
    case OpKind::kSumLast: return "sum-last";
    case OpKind::kBroadcast: return "broadcast";
    case OpKind::kReshape: return "reshape";
    case OpKind::kNormalizeLast: return "normalize-last";
    case OpKind::kCustom: return "custom";
  }
  return "?";
}

const Tensor& Value::data() const { return g_->data(id_); }
const Tensor& Value::grad() const { return g_->grad(id_); }

Value Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Value Graph::leaf(Tensor t) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.requires_grad = true;
  n.out = std::move(t);
  return push(std::move(n));
}

Value Graph::constant(Tensor t) {
  Node n;
  n.kind = OpKind::kConstant;
  n.requires_grad = false;
  n.out = std::move(t);
  return push(std::move(n));
}

Value Graph::matmul(Value a, Value b) {
  const Tensor& A = data(a.id());
  const Tensor& B = data(b.id());
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError(std::string("matmul: shape mismatch ") + A.shape_str() + " vs " +
                     B.shape_str());
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  // ikj order keeps B row-contiguous in the inner loop.
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A.data() + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = B.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Node node;
  node.kind = OpKind::kMatMul;
  node.requires_grad = requires_grad(a.id()) || requires_grad(b.id());
  node.inputs = {a.id(), b.id()};
  node.out = std::move(out);
  return push(std::move(node));
}

Value Graph::add(Value a, Value b) {
  const Tensor& A = data(a.id());
  const Tensor& B = data(b.id());
  check_same_shape("add", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  Node node;
  node.kind = OpKind::kAdd;
  node.requires_grad = requires_grad(a.id()) || requires_grad(b.id());
  node.inputs = {a.id(), b.id()};
  node.out = std::move(out);
  return push(std::move(node));
}

Value Graph::mul(Value a, Value b) {
  const Tensor& A = data(a.id());
  const Tensor& B = data(b.id());
  check_same_shape("elementwise-multiply", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  Node node;
  node.kind = OpKind::kMul;
  node.requires_grad = requires_grad(a.id()) || requires_grad(b.id());
  node.inputs = {a.id(), b.id()};
  node.out = std::move(out);
  return push(std::move(node));
}

Value Graph::div(Value a, Value b) {
  const Tensor& A = data(a.id());
  const Tensor& B = data(b.id());
  check_same_shape("div", A, B);
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= B[i];
  Node node;
  node.kind = OpKind::kDiv;
  node.requires_grad = requires_grad(a.id()) || requires_grad(b.id());
  node.inputs = {a.id(), b.id()};
  node.out = std::move(out);
  return push(std::move(node));
}

Value Graph::concat(Value a, Value b) {
  const Tensor& A = data(a.id());
  const Tensor& B = data(b.id());
  if (A.rank() != B.rank() || A.rank() == 0)
    throw ShapeError(std::string("concatenate: rank mismatch ") + A.shape_str() + " vs " +
                     B.shape_str());
  for (std::size_t i = 0; i + 1 < A.rank(); ++i)
    if (A.dim(i) != B.dim(i))
      throw ShapeError(std::string("concatenate: shape mismatch ") + A.shape_str() + " vs " +
                       B.shape_str());
  const std::size_t wa = A.dim(A.rank() - 1), wb = B.dim(B.rank() - 1);
  const std::size_t rows = A.numel() / wa;
  std::vector<std::size_t> shape = A.shape();
  shape.back() = wa + wb;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(A.data() + r * wa, wa, out.data() + r * (wa + wb));
    std::copy_n(B.data() + r * wb, wb, out.data() + r * (wa + wb) + wa);
  }
  Node node;
  node.kind = OpKind::kConcat;
  node.requires_grad = requires_grad(a.id()) || requires_grad(b.id());
  node.inputs = {a.id(), b.id()};
  node.out = std::move(out);
  node.shape_arg = {wa, wb};
  return push(std::move(node));
}

namespace {
template <typename Fn>
Tensor map_unary(const Tensor& a, Fn&& fn) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fn(a[i]);
  return out;
}
}  // namespace

Value Graph::relu(Value a) {
  Node n;
  n.kind = OpKind::kRelu;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = map_unary(data(a.id()), [](double x) { return x > 0.0 ? x : 0.0; });
  return push(std::move(n));
}

Value Graph::sigmoid(Value a) {
  Node n;
  n.kind = OpKind::kSigmoid;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = map_unary(data(a.id()), [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return push(std::move(n));
}

Value Graph::exp(Value a) {
  Node n;
  n.kind = OpKind::kExp;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = map_unary(data(a.id()),
                    [](double x) { return std::exp(std::min(x, kExpClamp)); });
  return push(std::move(n));
}

Value Graph::sqrt(Value a) {
  Node n;
  n.kind = OpKind::kSqrt;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = map_unary(data(a.id()), [](double x) { return std::sqrt(x); });
  return push(std::move(n));
}

Value Graph::negate(Value a) {
  Node n;
  n.kind = OpKind::kNegate;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = map_unary(data(a.id()), [](double x) { return -x; });
  return push(std::move(n));
}

Value Graph::abs(Value a) {
  Node n;
  n.kind = OpKind::kAbs;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = map_unary(data(a.id()), [](double x) { return std::abs(x); });
  return push(std::move(n));
}

Value Graph::scale(Value a, double c) {
  Node n;
  n.kind = OpKind::kScale;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.scalar_arg = c;
  n.out = map_unary(data(a.id()), [c](double x) { return c * x; });
  return push(std::move(n));
}

Value Graph::sum(Value a) {
  const Tensor& A = data(a.id());
  double s = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) s += A[i];
  Node n;
  n.kind = OpKind::kSum;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = Tensor::scalar(s);
  return push(std::move(n));
}

Value Graph::mean(Value a) {
  const Tensor& A = data(a.id());
  double s = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) s += A[i];
  Node n;
  n.kind = OpKind::kMean;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = Tensor::scalar(s / static_cast<double>(A.numel()));
  return push(std::move(n));
}

Value Graph::squared_norm(Value a) {
  const Tensor& A = data(a.id());
  double s = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) s += A[i] * A[i];
  Node n;
  n.kind = OpKind::kSquaredNorm;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = Tensor::scalar(s);
  return push(std::move(n));
}

Value Graph::sum_last(Value a) {
  const Tensor& A = data(a.id());
  if (A.rank() == 0) throw ShapeError("sum-last: rank-0 input");
  const std::size_t w = A.dim(A.rank() - 1);
  const std::size_t rows = A.numel() / w;
  std::vector<std::size_t> shape(A.shape().begin(), A.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* p = A.data() + r * w;
    for (std::size_t i = 0; i < w; ++i) s += p[i];
    out[r] = s;
  }
  Node n;
  n.kind = OpKind::kSumLast;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = std::move(out);
  return push(std::move(n));
}

Value Graph::broadcast(Value a, std::vector<std::size_t> target) {
  const Tensor& A = data(a.id());
  auto strides = broadcast_strides("broadcast", A.shape(), target);
  Tensor out(target);
  for_each_broadcast(target, strides,
                     [&](std::size_t dst, std::size_t src) { out[dst] = A[src]; });
  Node n;
  n.kind = OpKind::kBroadcast;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = std::move(out);
  n.shape_arg = A.shape();
  return push(std::move(n));
}

Value Graph::reshape(Value a, std::vector<std::size_t> target) {
  const Tensor& A = data(a.id());
  if (Tensor::count(target) != A.numel())
    throw ShapeError("reshape: element count mismatch " + A.shape_str() + " vs " +
                     Tensor::shape_str(target));
  Tensor out(target);
  std::copy_n(A.data(), A.numel(), out.data());
  Node n;
  n.kind = OpKind::kReshape;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = std::move(out);
  n.shape_arg = A.shape();
  return push(std::move(n));
}

Value Graph::normalize_last(Value a) {
  const Tensor& A = data(a.id());
  if (A.rank() == 0) throw ShapeError("normalize-last: rank-0 input");
  const std::size_t w = A.dim(A.rank() - 1);
  const std::size_t rows = A.numel() / w;
  Tensor out = A;
  for (std::size_t r = 0; r < rows; ++r) {
    double* p = out.data() + r * w;
    double s = 0.0;
    for (std::size_t i = 0; i < w; ++i) s += p[i] * p[i];
    const double norm = std::max(std::sqrt(s), 1e-12);
    for (std::size_t i = 0; i < w; ++i) p[i] /= norm;
  }
  Node n;
  n.kind = OpKind::kNormalizeLast;
  n.requires_grad = requires_grad(a.id());
  n.inputs = {a.id()};
  n.out = std::move(out);
  return push(std::move(n));
}

Value Graph::custom(const std::string& label, std::vector<Value> inputs, Tensor out,
                    CustomBackward backward) {
  Node n;
  n.kind = OpKind::kCustom;
  for (const Value& v : inputs) {
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || requires_grad(v.id());
  }
  n.out = std::move(out);
  n.custom_backward = std::move(backward);
  n.label = label;
  return push(std::move(n));
}

Tensor& Graph::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.out.shape());
  return n.grad;
}

const Tensor& Graph::grad(std::uint32_t id) { return grad_buffer(id); }

void Graph::backward(Value root) {
  if (root.graph() != this) throw std::runtime_error("backward: root from another graph");
  if (data(root.id()).numel() != 1)
    throw ShapeError("backward: root must be scalar, got " + data(root.id()).shape_str());
  grad_buffer(root.id())[0] = 1.0;
  for (std::uint32_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.numel() == 0) continue;
    backward_node(n);
  }
}

void Graph::backward_node(Node& n) {
  const Tensor& g = n.grad;
  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return;
    case OpKind::kMatMul: {
      const Tensor& A = data(n.inputs[0]);
      const Tensor& B = data(n.inputs[1]);
      const std::size_t m = A.dim(0), k = A.dim(1), nn = B.dim(1);
      if (requires_grad(n.inputs[0])) {
        Tensor& dA = grad_buffer(n.inputs[0]);
        // dA = g · Bᵀ
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) {
            const double gv = g[i * nn + j];
            if (gv == 0.0) continue;
            const double* brow = B.data() + j;  // column j of B, stride nn
            double* darow = dA.data() + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) darow[kk] += gv * brow[kk * nn];
          }
      }
      if (requires_grad(n.inputs[1])) {
        Tensor& dB = grad_buffer(n.inputs[1]);
        // dB = Aᵀ · g
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = A.data() + i * k;
          const double* grow = g.data() + i * nn;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* dbrow = dB.data() + kk * nn;
            for (std::size_t j = 0; j < nn; ++j) dbrow[j] += av * grow[j];
          }
        }
      }
      return;
    }
    case OpKind::kAdd: {
      for (int side = 0; side < 2; ++side) {
        if (!requires_grad(n.inputs[side])) continue;
        Tensor& d = grad_buffer(n.inputs[side]);
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      }
      return;
    }
    case OpKind::kMul: {
      const Tensor& A = data(n.inputs[0]);
      const Tensor& B = data(n.inputs[1]);
      if (requires_grad(n.inputs[0])) {
        Tensor& d = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * B[i];
      }
      if (requires_grad(n.inputs[1])) {
        Tensor& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * A[i];
      }
      return;
    }
    case OpKind::kDiv: {
      const Tensor& A = data(n.inputs[0]);
      const Tensor& B = data(n.inputs[1]);
      if (requires_grad(n.inputs[0])) {
        Tensor& d = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] / B[i];
      }
      if (requires_grad(n.inputs[1])) {
        Tensor& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] -= g[i] * A[i] / (B[i] * B[i]);
      }
      return;
    }
    case OpKind::kConcat: {
      const std::size_t wa = n.shape_arg[0], wb = n.shape_arg[1];
      const std::size_t rows = g.numel() / (wa + wb);
      if (requires_grad(n.inputs[0])) {
        Tensor& d = grad_buffer(n.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < wa; ++i) d[r * wa + i] += g[r * (wa + wb) + i];
      }
      if (requires_grad(n.inputs[1])) {
        Tensor& d = grad_buffer(n.inputs[1]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < wb; ++i) d[r * wb + i] += g[r * (wa + wb) + wa + i];
      }
      return;
    }
    case OpKind::kRelu: {
      const Tensor& A = data(n.inputs[0]);
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (A[i] > 0.0) d[i] += g[i];
      return;
    }
    case OpKind::kSigmoid: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double y = n.out[i];
        d[i] += g[i] * y * (1.0 - y);
      }
      return;
    }
    case OpKind::kExp: {
      const Tensor& A = data(n.inputs[0]);
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (A[i] < kExpClamp) d[i] += g[i] * n.out[i];
      return;
    }
    case OpKind::kSqrt: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * 0.5 / n.out[i];
      return;
    }
    case OpKind::kNegate: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] -= g[i];
      return;
    }
    case OpKind::kAbs: {
      const Tensor& A = data(n.inputs[0]);
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i)
        d[i] += g[i] * (A[i] > 0.0 ? 1.0 : (A[i] < 0.0 ? -1.0 : 0.0));
      return;
    }
    case OpKind::kScale: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * n.scalar_arg;
      return;
    }
    case OpKind::kSum: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[0];
      return;
    }
    case OpKind::kMean: {
      Tensor& d = grad_buffer(n.inputs[0]);
      const double s = g[0] / static_cast<double>(d.numel());
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += s;
      return;
    }
    case OpKind::kSquaredNorm: {
      const Tensor& A = data(n.inputs[0]);
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[0] * 2.0 * A[i];
      return;
    }
    case OpKind::kSumLast: {
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t w = d.numel() / g.numel();
      for (std::size_t r = 0; r < g.numel(); ++r)
        for (std::size_t i = 0; i < w; ++i) d[r * w + i] += g[r];
      return;
    }
    case OpKind::kBroadcast: {
      Tensor& d = grad_buffer(n.inputs[0]);
      auto strides = broadcast_strides("broadcast", n.shape_arg, n.out.shape());
      for_each_broadcast(n.out.shape(), strides,
                         [&](std::size_t dst, std::size_t src) { d[src] += g[dst]; });
      return;
    }
    case OpKind::kReshape: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      return;
    }
    case OpKind::kNormalizeLast: {
      const Tensor& A = data(n.inputs[0]);
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t rank = A.rank();
      const std::size_t w = A.dim(rank - 1);
      const std::size_t rows = A.numel() / w;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* x = A.data() + r * w;
        const double* y = n.out.data() + r * w;
        const double* gr = g.data() + r * w;
        double* dr = d.data() + r * w;
        double s = 0.0;
        for (std::size_t i = 0; i < w; ++i) s += x[i] * x[i];
        const double norm = std::max(std::sqrt(s), 1e-12);
        double ydotg = 0.0;
        for (std::size_t i = 0; i < w; ++i) ydotg += y[i] * gr[i];
        for (std::size_t i = 0; i < w; ++i) dr[i] += (gr[i] - y[i] * ydotg) / norm;
      }
      return;
    }
    case OpKind::kCustom: {
      std::vector<const Tensor*> in_data;
      std::vector<Tensor*> in_grads;
      in_data.reserve(n.inputs.size());
      in_grads.reserve(n.inputs.size());
      for (std::uint32_t id : n.inputs) {
        in_data.push_back(&data(id));
        in_grads.push_back(requires_grad(id) ? &grad_buffer(id) : nullptr);
      }
      n.custom_backward(g, in_data, in_grads);
      return;
    }
  }
}

}  // namespace edgs::ad
