#include "metalth/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace metalth {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)) {
  values.assign(shape_size(shape), 0.0f);
  grad.assign(values.size(), 0.0f);
}

Tensor::Tensor(Shape s, std::vector<float> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  grad.assign(values.size(), 0.0f);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

namespace {

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
}

}  // namespace

NodeId Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Graph::leaf(Tensor t, bool requires_grad) {
  Node n;
  n.op = OpKind::Leaf;
  if (t.grad.size() != t.values.size()) t.grad.assign(t.values.size(), 0.0f);
  n.out = std::move(t);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& A = tensor(a);
  const Tensor& B = tensor(b);
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(A.shape) + " and " +
                         shape_to_string(B.shape));
  }
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    float* row = &out.values[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const float a_ip = A.values[i * k + p];
      const float* brow = &B.values[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += a_ip * brow[j];
    }
  }
  Node node;
  node.op = OpKind::MatMul;
  node.inputs = {a, b};
  node.requires_grad = needs(a) || needs(b);
  node.out = std::move(out);
  return push(std::move(node));
}

NodeId Graph::add_row_bias(NodeId x, NodeId bias) {
  const Tensor& X = tensor(x);
  const Tensor& B = tensor(bias);
  if (X.rank() != 2 || B.rank() != 1 || X.shape[1] != B.shape[0]) {
    throw DimensionError("add_row_bias: incompatible shapes " + shape_to_string(X.shape) +
                         " and " + shape_to_string(B.shape));
  }
  Tensor out(X.shape, X.values);
  const std::size_t n = X.shape[1];
  for (std::size_t i = 0; i < X.shape[0]; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values[i * n + j] += B.values[j];
  Node node;
  node.op = OpKind::AddRowBias;
  node.inputs = {x, bias};
  node.requires_grad = needs(x) || needs(bias);
  node.out = std::move(out);
  return push(std::move(node));
}

namespace {

struct ConvDims {
  std::size_t batch, c_in, c_out, h, w;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, const Tensor& b) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("conv2d: input must be [c x h x w] or [n x c x h x w], got " +
                         shape_to_string(x.shape));
  }
  if (k.rank() != 4 || k.shape[2] != 3 || k.shape[3] != 3) {
    throw DimensionError("conv2d: kernels must be [c_out x c_in x 3 x 3], got " +
                         shape_to_string(k.shape));
  }
  const std::size_t off = x.rank() == 4 ? 1 : 0;
  ConvDims d{off ? x.shape[0] : 1, x.shape[off], k.shape[0], x.shape[off + 1], x.shape[off + 2]};
  if (k.shape[1] != d.c_in) {
    throw DimensionError("conv2d: channel mismatch between input " + shape_to_string(x.shape) +
                         " and kernels " + shape_to_string(k.shape));
  }
  if (b.rank() != 1 || b.shape[0] != d.c_out) {
    throw DimensionError("conv2d: bias " + shape_to_string(b.shape) + " does not match " +
                         std::to_string(d.c_out) + " output channels");
  }
  return d;
}

// Valid output range along one axis for kernel tap `t` (0..2) with padding 1.
inline void tap_range(std::size_t extent, std::size_t t, std::size_t& lo, std::size_t& hi) {
  lo = t == 0 ? 1 : 0;
  hi = t == 2 ? extent - 1 : extent;
}

}  // namespace

NodeId Graph::conv2d(NodeId x, NodeId kernels, NodeId bias) {
  const Tensor& X = tensor(x);
  const Tensor& K = tensor(kernels);
  const Tensor& B = tensor(bias);
  const ConvDims d = conv_dims(X, K, B);
  Shape out_shape = X.rank() == 4 ? Shape{d.batch, d.c_out, d.h, d.w} : Shape{d.c_out, d.h, d.w};
  Tensor out(out_shape);
  const std::size_t plane = d.h * d.w;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t co = 0; co < d.c_out; ++co) {
      float* o = &out.values[(n * d.c_out + co) * plane];
      std::fill(o, o + plane, B.values[co]);
      for (std::size_t ci = 0; ci < d.c_in; ++ci) {
        const float* in = &X.values[(n * d.c_in + ci) * plane];
        const float* ker = &K.values[(co * d.c_in + ci) * 9];
        for (std::size_t ky = 0; ky < 3; ++ky) {
          std::size_t y0, y1;
          tap_range(d.h, ky, y0, y1);
          for (std::size_t kx = 0; kx < 3; ++kx) {
            std::size_t x0, x1;
            tap_range(d.w, kx, x0, x1);
            const float wgt = ker[ky * 3 + kx];
            for (std::size_t y = y0; y < y1; ++y) {
              const float* irow = in + (y + ky - 1) * d.w + kx - 1;
              float* orow = o + y * d.w;
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wgt * irow[xx];
            }
          }
        }
      }
    }
  }
  Node node;
  node.op = OpKind::Conv2d;
  node.inputs = {x, kernels, bias};
  node.requires_grad = needs(x) || needs(kernels) || needs(bias);
  node.out = std::move(out);
  return push(std::move(node));
}

NodeId Graph::relu(NodeId x) {
  const Tensor& X = tensor(x);
  Tensor out(X.shape);
  for (std::size_t i = 0; i < X.size(); ++i) out.values[i] = X.values[i] > 0.0f ? X.values[i] : 0.0f;
  Node node;
  node.op = OpKind::Relu;
  node.inputs = {x};
  node.requires_grad = needs(x);
  node.out = std::move(out);
  return push(std::move(node));
}

NodeId Graph::maxpool2(NodeId x) {
  const Tensor& X = tensor(x);
  if (X.rank() < 2) throw DimensionError("maxpool2: rank >= 2 required, got " + shape_to_string(X.shape));
  const std::size_t h = X.shape[X.rank() - 2], w = X.shape[X.rank() - 1];
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  const std::size_t planes = X.size() / (h * w);
  Shape out_shape = X.shape;
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const float* in = &X.values[p * h * w];
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        std::size_t best_i = 0;
        bool first = true;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          const std::size_t iy = 2 * oy + dy;
          if (iy >= h) continue;
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t ix = 2 * ox + dx;
            if (ix >= w) continue;
            const float v = in[iy * w + ix];
            if (first || v > best) {
              best = v;
              best_i = p * h * w + iy * w + ix;
              first = false;
            }
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out.values[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  Node node;
  node.op = OpKind::MaxPool2;
  node.inputs = {x};
  node.requires_grad = needs(x);
  node.out = std::move(out);
  node.index = std::move(argmax);
  return push(std::move(node));
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  const Tensor& X = tensor(x);
  if (shape_size(shape) != X.size()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(X.shape) + " as " +
                         shape_to_string(shape));
  }
  Node node;
  node.op = OpKind::Reshape;
  node.inputs = {x};
  node.requires_grad = needs(x);
  node.out = Tensor(std::move(shape), X.values);
  return push(std::move(node));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::span<const int> labels) {
  const Tensor& L = tensor(logits);
  if (L.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be [n x C], got " + shape_to_string(L.shape));
  const std::size_t n = L.shape[0], c = L.shape[1];
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_to_string(L.shape));
  }
  std::vector<float> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const float* row = &L.values[i * c];
    const float mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = static_cast<float>(std::exp(row[j] - log_z));
    total += log_z - row[y];
  }
  Node node;
  node.op = OpKind::SoftmaxCrossEntropy;
  node.inputs = {logits};
  node.requires_grad = needs(logits);
  node.out = Tensor({1}, {static_cast<float>(total / static_cast<double>(n))});
  node.aux = std::move(probs);
  node.labels.assign(labels.begin(), labels.end());
  require_finite(node.out, "softmax_cross_entropy");
  return push(std::move(node));
}

NodeId Graph::mse(NodeId pred, const Tensor& target) {
  const Tensor& P = tensor(pred);
  if (P.size() != target.size()) {
    throw DimensionError("mse: prediction " + shape_to_string(P.shape) + " vs target " +
                         shape_to_string(target.shape));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double diff = static_cast<double>(P.values[i]) - target.values[i];
    total += diff * diff;
  }
  Node node;
  node.op = OpKind::Mse;
  node.inputs = {pred};
  node.requires_grad = needs(pred);
  node.out = Tensor({1}, {static_cast<float>(0.5 * total / static_cast<double>(P.size()))});
  node.aux = target.values;
  require_finite(node.out, "mse");
  return push(std::move(node));
}

NodeId Graph::sum(NodeId x) {
  const Tensor& X = tensor(x);
  double total = 0.0;
  for (float v : X.values) total += v;
  Node node;
  node.op = OpKind::Sum;
  node.inputs = {x};
  node.requires_grad = needs(x);
  node.out = Tensor({1}, {static_cast<float>(total)});
  return push(std::move(node));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& A = tensor(a);
  const Tensor& B = tensor(b);
  if (A.shape != B.shape) {
    throw DimensionError("add: shapes " + shape_to_string(A.shape) + " and " + shape_to_string(B.shape));
  }
  Tensor out(A.shape, A.values);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += B.values[i];
  Node node;
  node.op = OpKind::Add;
  node.inputs = {a, b};
  node.requires_grad = needs(a) || needs(b);
  node.out = std::move(out);
  return push(std::move(node));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& A = tensor(a);
  const Tensor& B = tensor(b);
  if (A.shape != B.shape) {
    throw DimensionError("mul: shapes " + shape_to_string(A.shape) + " and " + shape_to_string(B.shape));
  }
  Tensor out(A.shape, A.values);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= B.values[i];
  Node node;
  node.op = OpKind::Mul;
  node.inputs = {a, b};
  node.requires_grad = needs(a) || needs(b);
  node.out = std::move(out);
  return push(std::move(node));
}

NodeId Graph::scale(NodeId x, float factor) {
  const Tensor& X = tensor(x);
  Tensor out(X.shape, X.values);
  for (float& v : out.values) v *= factor;
  Node node;
  node.op = OpKind::Scale;
  node.inputs = {x};
  node.requires_grad = needs(x);
  node.out = std::move(out);
  node.factor = factor;
  return push(std::move(node));
}

void Graph::zero_grads() {
  for (Node& n : nodes_) n.out.zero_grad();
}

void Graph::backward(NodeId loss) {
  if (loss >= nodes_.size()) throw UsageError("backward: unknown node " + std::to_string(loss));
  if (nodes_[loss].out.size() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_to_string(nodes_[loss].out.shape));
  }
  for (Node& n : nodes_) {
    if (n.op != OpKind::Leaf) n.out.zero_grad();
  }
  nodes_[loss].out.grad[0] += 1.0f;
  for (std::size_t i = loss + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.op == OpKind::Leaf || !n.requires_grad) continue;
    // Each node forms its contribution from zero and adds it in one pass, so
    // a gradient is the sum of per-consumer terms in reverse tape order.
    std::vector<std::pair<NodeId, std::vector<float>>> pending;
    for (NodeId in : n.inputs) {
      std::vector<float>& grad = nodes_[in].out.grad;
      const bool seen = std::any_of(pending.begin(), pending.end(), [&](const auto& p) { return p.first == in; });
      if (seen || !needs(in) || std::all_of(grad.begin(), grad.end(), [](float v) { return v == 0.0f; })) continue;
      pending.emplace_back(in, std::exchange(grad, std::vector<float>(grad.size(), 0.0f)));
    }
    backward_node(n);
    for (auto& [in, before] : pending) {
      std::vector<float>& grad = nodes_[in].out.grad;
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] = before[j] + grad[j];
    }
  }
  for (const Node& n : nodes_) {
    if (n.op != OpKind::Leaf || !n.requires_grad) continue;
    for (float g : n.out.grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in backward pass");
    }
  }
}

void Graph::backward_node(Node& node) {
  const std::vector<float>& g = node.out.grad;
  switch (node.op) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      Tensor& A = nodes_[node.inputs[0]].out;
      Tensor& B = nodes_[node.inputs[1]].out;
      const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
      if (needs(node.inputs[0])) {
        // dA = g * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            float acc = 0.0f;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B.values[p * n + j];
            A.grad[i * k + p] += acc;
          }
      }
      if (needs(node.inputs[1])) {
        // dB = A^T * g
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const float a_ip = A.values[i * k + p];
            float* brow = &B.grad[p * n];
            for (std::size_t j = 0; j < n; ++j) brow[j] += a_ip * g[i * n + j];
          }
      }
      break;
    }
    case OpKind::AddRowBias: {
      Tensor& X = nodes_[node.inputs[0]].out;
      Tensor& B = nodes_[node.inputs[1]].out;
      const std::size_t n = X.shape[1];
      if (needs(node.inputs[0]))
        for (std::size_t i = 0; i < g.size(); ++i) X.grad[i] += g[i];
      if (needs(node.inputs[1]))
        for (std::size_t i = 0; i < X.shape[0]; ++i)
          for (std::size_t j = 0; j < n; ++j) B.grad[j] += g[i * n + j];
      break;
    }
    case OpKind::Conv2d: {
      Tensor& X = nodes_[node.inputs[0]].out;
      Tensor& K = nodes_[node.inputs[1]].out;
      Tensor& B = nodes_[node.inputs[2]].out;
      const ConvDims d = conv_dims(X, K, B);
      const bool want_x = needs(node.inputs[0]);
      const bool want_k = needs(node.inputs[1]);
      const std::size_t plane = d.h * d.w;
      for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t co = 0; co < d.c_out; ++co) {
          const float* go = &g[(n * d.c_out + co) * plane];
          if (needs(node.inputs[2])) {
            float acc = 0.0f;
            for (std::size_t i = 0; i < plane; ++i) acc += go[i];
            B.grad[co] += acc;
          }
          for (std::size_t ci = 0; ci < d.c_in; ++ci) {
            const float* in = &X.values[(n * d.c_in + ci) * plane];
            float* gin = &X.grad[(n * d.c_in + ci) * plane];
            const float* ker = &K.values[(co * d.c_in + ci) * 9];
            float* gker = &K.grad[(co * d.c_in + ci) * 9];
            for (std::size_t ky = 0; ky < 3; ++ky) {
              std::size_t y0, y1;
              tap_range(d.h, ky, y0, y1);
              for (std::size_t kx = 0; kx < 3; ++kx) {
                std::size_t x0, x1;
                tap_range(d.w, kx, x0, x1);
                const float wgt = ker[ky * 3 + kx];
                float acc = 0.0f;
                for (std::size_t y = y0; y < y1; ++y) {
                  const std::size_t irow = (y + ky - 1) * d.w + kx - 1;
                  const float* grow = go + y * d.w;
                  for (std::size_t xx = x0; xx < x1; ++xx) {
                    acc += grow[xx] * in[irow + xx];
                    if (want_x) gin[irow + xx] += wgt * grow[xx];
                  }
                }
                if (want_k) gker[ky * 3 + kx] += acc;
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::Relu: {
      Tensor& X = nodes_[node.inputs[0]].out;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (X.values[i] > 0.0f) X.grad[i] += g[i];
      break;
    }
    case OpKind::MaxPool2: {
      Tensor& X = nodes_[node.inputs[0]].out;
      for (std::size_t i = 0; i < g.size(); ++i) X.grad[node.index[i]] += g[i];
      break;
    }
    case OpKind::Reshape: {
      Tensor& X = nodes_[node.inputs[0]].out;
      for (std::size_t i = 0; i < g.size(); ++i) X.grad[i] += g[i];
      break;
    }
    case OpKind::SoftmaxCrossEntropy: {
      Tensor& L = nodes_[node.inputs[0]].out;
      const std::size_t n = L.shape[0], c = L.shape[1];
      const float s = g[0] / static_cast<float>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const float onehot = static_cast<std::size_t>(node.labels[i]) == j ? 1.0f : 0.0f;
          L.grad[i * c + j] += s * (node.aux[i * c + j] - onehot);
        }
      break;
    }
    case OpKind::Mse: {
      Tensor& P = nodes_[node.inputs[0]].out;
      const float s = g[0] / static_cast<float>(P.size());
      for (std::size_t i = 0; i < P.size(); ++i) P.grad[i] += s * (P.values[i] - node.aux[i]);
      break;
    }
    case OpKind::Sum: {
      Tensor& X = nodes_[node.inputs[0]].out;
      for (float& v : X.grad) v += g[0];
      break;
    }
    case OpKind::Add: {
      for (NodeId in : node.inputs) {
        if (!needs(in)) continue;
        Tensor& X = nodes_[in].out;
        for (std::size_t i = 0; i < g.size(); ++i) X.grad[i] += g[i];
      }
      break;
    }
    case OpKind::Mul: {
      Tensor& A = nodes_[node.inputs[0]].out;
      Tensor& B = nodes_[node.inputs[1]].out;
      // a and b may alias (x * x); read values before writing grads.
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float av = A.values[i], bv = B.values[i];
        if (needs(node.inputs[0])) A.grad[i] += g[i] * bv;
        if (needs(node.inputs[1])) B.grad[i] += g[i] * av;
      }
      break;
    }
    case OpKind::Scale: {
      Tensor& X = nodes_[node.inputs[0]].out;
      for (std::size_t i = 0; i < g.size(); ++i) X.grad[i] += node.factor * g[i];
      break;
    }
  }
}

}  // namespace metalth
