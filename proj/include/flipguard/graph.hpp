#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flipguard/tensor.hpp"

namespace flipguard::numerics {

enum class Op : std::uint8_t {
  kParameter,
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kEmbedding,
  kTranspose,
  kReshape,
  kConcat,
  kSoftmax,
  kLogSoftmax,
  kSigmoid,
  kLog,
  kExp,
  kRelu,
  kLayerNorm,
  kMean,
  kSum,
  kIndexSelect,
  kCausalMask,
};

constexpr std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::kParameter: return "parameter";
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kEmbedding: return "embedding";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kRelu: return "relu";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
    case Op::kIndexSelect: return "index_select";
    case Op::kCausalMask: return "causal_mask_fill";
  }
  return "unknown";
}

struct NodeId {
  std::uint32_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;
using ParameterMap = std::map<std::string, Tensor, std::less<>>;
using ParameterNodes = std::map<std::string, NodeId, std::less<>>;

/// Masked attention scores are filled with this value; exp() of it is exactly 0.
inline constexpr double kMaskFill = -1e30;
inline constexpr double kLayerNormEps = 1e-5;

/// Tape of tensor operations with reverse-mode differentiation.
///
/// Nodes are appended in topological order, so inputs always precede their
/// consumers. When every input of a new node already holds a value the node
/// is evaluated immediately; graphs containing unbound placeholders are
/// evaluated later through evaluate().
///
/// Broadcasting is limited to rank-0 (scalar) operands of add, sub and mul.
class Graph {
 public:
  // Leaves -----------------------------------------------------------------

  NodeId parameter(std::string name, Tensor value) {
    return leaf(Op::kParameter, std::move(name), value.shape(), &value);
  }
  NodeId parameter(std::string name, Shape shape) {
    return leaf(Op::kParameter, std::move(name), std::move(shape), nullptr);
  }
  NodeId input(std::string name, Tensor value) {
    return leaf(Op::kInput, std::move(name), value.shape(), &value);
  }
  NodeId input(std::string name, Shape shape) {
    return leaf(Op::kInput, std::move(name), std::move(shape), nullptr);
  }
  NodeId constant(Tensor value) { return leaf(Op::kConstant, {}, value.shape(), &value); }
  NodeId constant(double v) { return constant(Tensor::scalar(v)); }

  // Operations -------------------------------------------------------------

  NodeId add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }

  NodeId scale(NodeId a, double factor) {
    Node n = make(Op::kScale, {a}, shape(a));
    n.scalar = factor;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2)
      fail(Op::kMatMul, "operands must be rank 2, got " + to_string(sa) + " and " + to_string(sb));
    if (sa[1] != sb[0])
      fail(Op::kMatMul, "inner dimensions differ: " + to_string(sa) + " x " + to_string(sb));
    return push(make(Op::kMatMul, {a, b}, Shape{sa[0], sb[1]}));
  }

  /// Gathers rows of a [vocab, dim] table; result is [ids.size(), dim].
  NodeId embedding(NodeId table, std::span<const std::size_t> ids) {
    const Shape& st = shape(table);
    if (st.size() != 2) fail(Op::kEmbedding, "table must be rank 2, got " + to_string(st));
    if (ids.empty()) fail(Op::kEmbedding, "empty id list");
    for (auto id : ids)
      if (id >= st[0])
        fail(Op::kEmbedding, "id " + std::to_string(id) + " outside table of " + std::to_string(st[0]) + " rows");
    Node n = make(Op::kEmbedding, {table}, Shape{ids.size(), st[1]});
    n.index.assign(ids.begin(), ids.end());
    return push(std::move(n));
  }

  NodeId transpose(NodeId a) {
    const Shape& s = shape(a);
    if (s.size() != 2) fail(Op::kTranspose, "operand must be rank 2, got " + to_string(s));
    return push(make(Op::kTranspose, {a}, Shape{s[1], s[0]}));
  }

  NodeId reshape(NodeId a, Shape target) {
    if (element_count(target) != element_count(shape(a)))
      fail(Op::kReshape, "cannot reshape " + to_string(shape(a)) + " to " + to_string(target));
    for (auto d : target)
      if (d == 0) fail(Op::kReshape, "zero dimension in " + to_string(target));
    return push(make(Op::kReshape, {a}, std::move(target)));
  }

  NodeId concat(std::span<const NodeId> parts, std::size_t axis) {
    if (parts.empty()) fail(Op::kConcat, "nothing to concatenate");
    Shape out = shape(parts[0]);
    if (axis >= out.size()) fail(Op::kConcat, "axis " + std::to_string(axis) + " out of range for " + to_string(out));
    for (std::size_t k = 1; k < parts.size(); ++k) {
      const Shape& s = shape(parts[k]);
      if (s.size() != out.size()) fail(Op::kConcat, "rank mismatch " + to_string(s) + " vs " + to_string(out));
      for (std::size_t d = 0; d < s.size(); ++d)
        if (d != axis && s[d] != out[d])
          fail(Op::kConcat, "shape mismatch " + to_string(s) + " vs " + to_string(out));
      out[axis] += s[axis];
    }
    Node n = make(Op::kConcat, std::vector<NodeId>(parts.begin(), parts.end()), std::move(out));
    n.axis = axis;
    return push(std::move(n));
  }

  /// Softmax over the last axis.
  NodeId softmax(NodeId a) { return rowwise(Op::kSoftmax, a); }
  /// Log-softmax over the last axis.
  NodeId log_softmax(NodeId a) { return rowwise(Op::kLogSoftmax, a); }

  NodeId sigmoid(NodeId a) { return push(make(Op::kSigmoid, {a}, shape(a))); }
  NodeId log(NodeId a) { return push(make(Op::kLog, {a}, shape(a))); }
  NodeId exp(NodeId a) { return push(make(Op::kExp, {a}, shape(a))); }
  NodeId relu(NodeId a) { return push(make(Op::kRelu, {a}, shape(a))); }

  /// Row-wise layer normalization of a [rows, dim] input with gain and bias of [dim].
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias) {
    const Shape& sx = shape(x);
    if (sx.size() != 2) fail(Op::kLayerNorm, "input must be rank 2, got " + to_string(sx));
    const Shape expect{sx[1]};
    if (shape(gain) != expect || shape(bias) != expect)
      fail(Op::kLayerNorm, "gain/bias must be " + to_string(expect) + ", got " + to_string(shape(gain)) +
                               " and " + to_string(shape(bias)));
    Node n = make(Op::kLayerNorm, {x, gain, bias}, sx);
    n.scalar = kLayerNormEps;
    return push(std::move(n));
  }

  NodeId mean(NodeId a) { return push(make(Op::kMean, {a}, Shape{})); }
  NodeId sum(NodeId a) { return push(make(Op::kSum, {a}, Shape{})); }

  /// Picks entries by flat (row-major) index; result is rank 1.
  NodeId index_select(NodeId a, std::span<const std::size_t> flat_indices) {
    if (flat_indices.empty()) fail(Op::kIndexSelect, "empty index list");
    const std::size_t n = element_count(shape(a));
    for (auto i : flat_indices)
      if (i >= n) fail(Op::kIndexSelect, "index " + std::to_string(i) + " outside " + to_string(shape(a)));
    Node node = make(Op::kIndexSelect, {a}, Shape{flat_indices.size()});
    node.index.assign(flat_indices.begin(), flat_indices.end());
    return push(std::move(node));
  }

  /// Replaces entries above the diagonal of a square matrix with `fill`.
  NodeId causal_mask_fill(NodeId a, double fill = kMaskFill) {
    const Shape& s = shape(a);
    if (s.size() != 2 || s[0] != s[1]) fail(Op::kCausalMask, "operand must be square, got " + to_string(s));
    Node n = make(Op::kCausalMask, {a}, s);
    n.scalar = fill;
    return push(std::move(n));
  }

  // Convenience compositions of the primitives above.
  NodeId neg(NodeId a) { return scale(a, -1.0); }
  NodeId add_scalar(NodeId a, double c) { return add(a, constant(c)); }

  // Access -----------------------------------------------------------------

  std::size_t size() const noexcept { return nodes_.size(); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  Op op(NodeId id) const { return node(id).op; }
  bool has_value(NodeId id) const { return node(id).has_value; }

  const Tensor& value(NodeId id) const {
    const Node& n = node(id);
    if (!n.has_value) throw Error(describe(id) + " has not been evaluated");
    return n.value;
  }

  std::vector<std::string> placeholder_names() const {
    std::vector<std::string> names;
    for (const auto& n : nodes_)
      if (n.op == Op::kParameter || n.op == Op::kInput) names.push_back(n.name);
    return names;
  }

  // Evaluation -------------------------------------------------------------

  /// Binds placeholders by name and recomputes every node. Placeholders that
  /// already hold a value may be left out of `bindings`.
  std::vector<Tensor> evaluate(const Bindings& bindings) {
    for (const auto& [name, tensor] : bindings) {
      auto it = named_.find(name);
      if (it == named_.end()) throw Error("no placeholder named '" + name + "'");
      assign(it->second, tensor);
    }
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (is_leaf(n.op)) {
        if (!n.has_value) throw Error(describe(NodeId{i}) + " '" + n.name + "' is unbound");
        continue;
      }
      forward(n);
      n.has_value = true;
    }
    for (auto& n : nodes_) n.dirty = false;
    std::vector<Tensor> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) out.push_back(n.value);
    return out;
  }

  /// Replaces one placeholder value and recomputes only the nodes downstream
  /// of it. Requires a fully evaluated graph.
  void rebind(std::string_view name, const Tensor& value) {
    auto it = named_.find(name);
    if (it == named_.end()) throw Error("no placeholder named '" + std::string(name) + "'");
    require_evaluated();
    assign(it->second, value);
    nodes_[it->second.index].dirty = true;
    for (auto& n : nodes_) {
      if (is_leaf(n.op)) continue;
      bool stale = false;
      for (auto in : n.inputs) stale = stale || nodes_[in.index].dirty;
      if (stale) {
        forward(n);
        n.dirty = true;
      }
    }
    for (auto& n : nodes_) n.dirty = false;
  }

  bool evaluated() const noexcept {
    return std::all_of(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.has_value; });
  }

  // Differentiation --------------------------------------------------------

  /// Reverse-mode gradients of a scalar node with respect to every parameter.
  /// Accumulators live in a pass-local arena, so the graph itself is untouched.
  std::map<std::string, Tensor, std::less<>> gradients(NodeId loss) const {
    std::vector<std::optional<Tensor>> grads = backward(loss);
    std::map<std::string, Tensor, std::less<>> out;
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.op != Op::kParameter) continue;
      out.emplace(n.name, grads[i] ? std::move(*grads[i]) : Tensor(n.shape));
    }
    return out;
  }

  /// Gradient accumulators for every node; empty where the loss does not
  /// depend on the node through a parameter path.
  std::vector<std::optional<Tensor>> backward(NodeId loss) const {
    require_evaluated();
    const Node& root = node(loss);
    if (!root.shape.empty())
      throw Error("gradients(): loss " + describe(loss) + " must be a scalar, got " + to_string(root.shape));

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    if (!root.requires_grad) return grads;
    grads[loss.index] = Tensor::scalar(1.0);

    auto accumulator = [&](NodeId id) -> Tensor* {
      const Node& n = nodes_[id.index];
      if (!n.requires_grad) return nullptr;
      auto& slot = grads[id.index];
      if (!slot) slot.emplace(n.shape);
      return &*slot;
    };

    for (std::int64_t i = loss.index; i >= 0; --i) {
      const auto& slot = grads[static_cast<std::size_t>(i)];
      if (!slot) continue;
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (is_leaf(n.op)) continue;
      propagate(n, *slot, accumulator);
    }
    return grads;
  }

 private:
  struct Node {
    Op op = Op::kConstant;
    std::vector<NodeId> inputs;
    Shape shape;
    Tensor value;
    std::string name;
    std::vector<std::size_t> index;
    double scalar = 0.0;
    std::size_t axis = 0;
    bool has_value = false;
    bool requires_grad = false;
    bool dirty = false;
  };

  static bool is_leaf(Op op) noexcept {
    return op == Op::kParameter || op == Op::kInput || op == Op::kConstant;
  }

  const Node& node(NodeId id) const {
    if (id.index >= nodes_.size()) throw Error("node #" + std::to_string(id.index) + " does not exist");
    return nodes_[id.index];
  }

  std::string describe(NodeId id) const {
    return "node #" + std::to_string(id.index) + " (" + std::string(op_name(nodes_[id.index].op)) + ")";
  }

  [[noreturn]] void fail(Op op, const std::string& what) const {
    throw Error("node #" + std::to_string(nodes_.size()) + " (" + std::string(op_name(op)) + "): " + what);
  }

  void require_evaluated() const {
    if (!evaluated()) throw Error("graph has not been evaluated; bind every placeholder and call evaluate()");
  }

  Node make(Op op, std::vector<NodeId> inputs, Shape shape) const {
    Node n;
    n.op = op;
    for (auto in : inputs) {
      if (in.index >= nodes_.size())
        fail(op, "input node #" + std::to_string(in.index) + " does not exist");
      n.requires_grad = n.requires_grad || nodes_[in.index].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.shape = std::move(shape);
    return n;
  }

  NodeId push(Node n) {
    const bool ready = std::all_of(n.inputs.begin(), n.inputs.end(),
                                   [&](NodeId in) { return nodes_[in.index].has_value; });
    if (ready) {
      forward(n);
      n.has_value = true;
    }
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  NodeId leaf(Op op, std::string name, Shape shape, const Tensor* value) {
    for (auto d : shape)
      if (d == 0) fail(op, "zero dimension in " + to_string(shape));
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.requires_grad = (op == Op::kParameter);
    n.name = std::move(name);
    if (op != Op::kConstant) {
      if (n.name.empty()) fail(op, "placeholders need a name");
      if (named_.count(n.name)) fail(op, "duplicate placeholder name '" + n.name + "'");
    }
    if (value) {
      if (!value->all_finite()) fail(op, "non-finite value" + (n.name.empty() ? std::string() : " for '" + n.name + "'"));
      n.value = *value;
      n.has_value = true;
    } else {
      n.value = Tensor(n.shape);
    }
    const NodeId id{static_cast<std::uint32_t>(nodes_.size())};
    if (op != Op::kConstant) named_.emplace(n.name, id);
    nodes_.push_back(std::move(n));
    return id;
  }

  void assign(NodeId id, const Tensor& value) {
    Node& n = nodes_[id.index];
    if (value.shape() != n.shape)
      throw Error(describe(id) + " '" + n.name + "' expects shape " + to_string(n.shape) + ", bound " +
                  to_string(value.shape()));
    if (!value.all_finite()) throw Error(describe(id) + " '" + n.name + "' bound to a non-finite value");
    n.value = value;
    n.has_value = true;
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    Shape out;
    if (sa == sb) out = sa;
    else if (sa.empty()) out = sb;
    else if (sb.empty()) out = sa;
    else fail(op, "shape mismatch " + to_string(sa) + " vs " + to_string(sb) + " (only scalar broadcasting is supported)");
    return push(make(op, {a, b}, std::move(out)));
  }

  NodeId rowwise(Op op, NodeId a) {
    if (shape(a).empty()) fail(op, "operand must have rank >= 1");
    return push(make(op, {a}, shape(a)));
  }

  const Tensor& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k].index].value; }

  static std::size_t last_dim(const Shape& s) { return s.back(); }

  // Forward kernels ----------------------------------------------------------

  void forward(Node& n) const {
    Tensor& out = n.value;
    if (out.shape() != n.shape) out.reset(n.shape);
    double* y = out.data();
    const std::size_t size = out.size();
    switch (n.op) {
      case Op::kParameter:
      case Op::kInput:
      case Op::kConstant:
        return;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const bool sa = a.size() == 1 && a.rank() == 0 && size != 1;
        const bool sb = b.size() == 1 && b.rank() == 0 && size != 1;
        for (std::size_t i = 0; i < size; ++i) {
          const double u = sa ? a[0] : a[i];
          const double v = sb ? b[0] : b[i];
          y[i] = n.op == Op::kAdd ? u + v : n.op == Op::kSub ? u - v : u * v;
        }
        return;
      }
      case Op::kScale: {
        const Tensor& a = in(n, 0);
        for (std::size_t i = 0; i < size; ++i) y[i] = n.scalar * a[i];
        return;
      }
      case Op::kMatMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const std::size_t m = a.rows(), k = a.cols(), cols = b.cols();
        std::fill(y, y + size, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          double* row = y + i * cols;
          for (std::size_t p = 0; p < k; ++p) {
            const double s = a.data()[i * k + p];
            const double* brow = b.data() + p * cols;
            for (std::size_t j = 0; j < cols; ++j) row[j] += s * brow[j];
          }
        }
        return;
      }
      case Op::kEmbedding: {
        const Tensor& t = in(n, 0);
        const std::size_t d = t.cols();
        for (std::size_t r = 0; r < n.index.size(); ++r)
          std::copy_n(t.data() + n.index[r] * d, d, y + r * d);
        return;
      }
      case Op::kTranspose: {
        const Tensor& a = in(n, 0);
        const std::size_t r = a.rows(), c = a.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) y[j * r + i] = a.data()[i * c + j];
        return;
      }
      case Op::kReshape:
        std::copy_n(in(n, 0).data(), size, y);
        return;
      case Op::kConcat: {
        const auto [outer, inner] = split_axis(n.shape, n.axis);
        std::size_t offset = 0;
        const std::size_t out_row = n.shape[n.axis] * inner;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& part = in(n, k);
          const std::size_t block = part.shape()[n.axis] * inner;
          for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(part.data() + o * block, block, y + o * out_row + offset);
          offset += block;
        }
        return;
      }
      case Op::kSoftmax:
      case Op::kLogSoftmax: {
        const Tensor& a = in(n, 0);
        const std::size_t d = last_dim(n.shape);
        for (std::size_t r = 0; r < size / d; ++r) {
          const double* x = a.data() + r * d;
          double* out_row = y + r * d;
          const double mx = *std::max_element(x, x + d);
          double total = 0.0;
          for (std::size_t j = 0; j < d; ++j) total += std::exp(x[j] - mx);
          if (n.op == Op::kSoftmax) {
            for (std::size_t j = 0; j < d; ++j) out_row[j] = std::exp(x[j] - mx) / total;
          } else {
            const double lse = mx + std::log(total);
            for (std::size_t j = 0; j < d; ++j) out_row[j] = x[j] - lse;
          }
        }
        return;
      }
      case Op::kSigmoid: {
        const Tensor& a = in(n, 0);
        for (std::size_t i = 0; i < size; ++i) y[i] = logistic(a[i]);
        return;
      }
      case Op::kLog: {
        const Tensor& a = in(n, 0);
        for (std::size_t i = 0; i < size; ++i) y[i] = std::log(a[i]);
        return;
      }
      case Op::kExp: {
        const Tensor& a = in(n, 0);
        for (std::size_t i = 0; i < size; ++i) y[i] = std::exp(a[i]);
        return;
      }
      case Op::kRelu: {
        const Tensor& a = in(n, 0);
        for (std::size_t i = 0; i < size; ++i) y[i] = a[i] > 0.0 ? a[i] : 0.0;
        return;
      }
      case Op::kLayerNorm: {
        const Tensor& x = in(n, 0);
        const Tensor& g = in(n, 1);
        const Tensor& b = in(n, 2);
        const std::size_t d = x.cols();
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const double* xr = x.data() + r * d;
          const auto [mu, inv] = moments(xr, d, n.scalar);
          for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (xr[j] - mu) * inv * g[j] + b[j];
        }
        return;
      }
      case Op::kMean:
      case Op::kSum: {
        const Tensor& a = in(n, 0);
        double total = 0.0;
        for (double v : a.values()) total += v;
        y[0] = n.op == Op::kSum ? total : total / static_cast<double>(a.size());
        return;
      }
      case Op::kIndexSelect: {
        const Tensor& a = in(n, 0);
        for (std::size_t i = 0; i < n.index.size(); ++i) y[i] = a[n.index[i]];
        return;
      }
      case Op::kCausalMask: {
        const Tensor& a = in(n, 0);
        const std::size_t t = a.rows();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j) y[i * t + j] = j > i ? n.scalar : a[i * t + j];
        return;
      }
    }
  }

  // Backward kernels ---------------------------------------------------------

  template <class Acc>
  void propagate(const Node& n, const Tensor& g, Acc& accumulator) const {
    const double* gy = g.data();
    const std::size_t size = g.size();
    switch (n.op) {
      case Op::kParameter:
      case Op::kInput:
      case Op::kConstant:
        return;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const bool sa = a.rank() == 0 && size != 1;
        const bool sb = b.rank() == 0 && size != 1;
        if (Tensor* ga = accumulator(n.inputs[0])) {
          for (std::size_t i = 0; i < size; ++i) {
            const double d = n.op == Op::kMul ? gy[i] * (sb ? b[0] : b[i]) : gy[i];
            (*ga)[sa ? 0 : i] += d;
          }
        }
        if (Tensor* gb = accumulator(n.inputs[1])) {
          for (std::size_t i = 0; i < size; ++i) {
            const double d = n.op == Op::kMul ? gy[i] * (sa ? a[0] : a[i]) : n.op == Op::kSub ? -gy[i] : gy[i];
            (*gb)[sb ? 0 : i] += d;
          }
        }
        return;
      }
      case Op::kScale:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < size; ++i) (*ga)[i] += n.scalar * gy[i];
        return;
      case Op::kMatMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const std::size_t m = a.rows(), k = a.cols(), cols = b.cols();
        if (Tensor* ga = accumulator(n.inputs[0])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double* grow = gy + i * cols;
              const double* brow = b.data() + p * cols;
              double s = 0.0;
              for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
              ga->data()[i * k + p] += s;
            }
        }
        if (Tensor* gb = accumulator(n.inputs[1])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double s = a.data()[i * k + p];
              const double* grow = gy + i * cols;
              double* out = gb->data() + p * cols;
              for (std::size_t j = 0; j < cols; ++j) out[j] += s * grow[j];
            }
        }
        return;
      }
      case Op::kEmbedding:
        if (Tensor* gt = accumulator(n.inputs[0])) {
          const std::size_t d = n.shape[1];
          for (std::size_t r = 0; r < n.index.size(); ++r) {
            double* row = gt->data() + n.index[r] * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += gy[r * d + j];
          }
        }
        return;
      case Op::kTranspose:
        if (Tensor* ga = accumulator(n.inputs[0])) {
          const std::size_t r = n.shape[1], c = n.shape[0];  // input is r x c
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga->data()[i * c + j] += gy[j * r + i];
        }
        return;
      case Op::kReshape:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < size; ++i) (*ga)[i] += gy[i];
        return;
      case Op::kConcat: {
        const auto [outer, inner] = split_axis(n.shape, n.axis);
        const std::size_t out_row = n.shape[n.axis] * inner;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t block = nodes_[n.inputs[k].index].shape[n.axis] * inner;
          if (Tensor* gp = accumulator(n.inputs[k]))
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < block; ++j) gp->data()[o * block + j] += gy[o * out_row + offset + j];
          offset += block;
        }
        return;
      }
      case Op::kSoftmax:
        if (Tensor* ga = accumulator(n.inputs[0])) {
          const std::size_t d = last_dim(n.shape);
          const double* y = n.value.data();
          for (std::size_t r = 0; r < size / d; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += gy[r * d + j] * y[r * d + j];
            for (std::size_t j = 0; j < d; ++j) ga->data()[r * d + j] += y[r * d + j] * (gy[r * d + j] - dot);
          }
        }
        return;
      case Op::kLogSoftmax:
        if (Tensor* ga = accumulator(n.inputs[0])) {
          const std::size_t d = last_dim(n.shape);
          const double* y = n.value.data();
          for (std::size_t r = 0; r < size / d; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < d; ++j) total += gy[r * d + j];
            for (std::size_t j = 0; j < d; ++j)
              ga->data()[r * d + j] += gy[r * d + j] - std::exp(y[r * d + j]) * total;
          }
        }
        return;
      case Op::kSigmoid:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < size; ++i) (*ga)[i] += gy[i] * n.value[i] * (1.0 - n.value[i]);
        return;
      case Op::kLog:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < size; ++i) (*ga)[i] += gy[i] / in(n, 0)[i];
        return;
      case Op::kExp:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < size; ++i) (*ga)[i] += gy[i] * n.value[i];
        return;
      case Op::kRelu:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < size; ++i) (*ga)[i] += in(n, 0)[i] > 0.0 ? gy[i] : 0.0;
        return;
      case Op::kLayerNorm: {
        const Tensor& x = in(n, 0);
        const Tensor& gain = in(n, 1);
        const std::size_t d = x.cols();
        Tensor* gx = accumulator(n.inputs[0]);
        Tensor* gg = accumulator(n.inputs[1]);
        Tensor* gb = accumulator(n.inputs[2]);
        std::vector<double> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const double* xr = x.data() + r * d;
          const double* gr = gy + r * d;
          const auto [mu, inv] = moments(xr, d, n.scalar);
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mu) * inv;
            dxhat[j] = gr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
            if (gg) (*gg)[j] += gr[j] * xhat[j];
            if (gb) (*gb)[j] += gr[j];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          if (gx)
            for (std::size_t j = 0; j < d; ++j)
              gx->data()[r * d + j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
        return;
      }
      case Op::kMean:
      case Op::kSum:
        if (Tensor* ga = accumulator(n.inputs[0])) {
          const double d = n.op == Op::kSum ? gy[0] : gy[0] / static_cast<double>(ga->size());
          for (double& v : ga->values()) v += d;
        }
        return;
      case Op::kIndexSelect:
        if (Tensor* ga = accumulator(n.inputs[0]))
          for (std::size_t i = 0; i < n.index.size(); ++i) (*ga)[n.index[i]] += gy[i];
        return;
      case Op::kCausalMask:
        if (Tensor* ga = accumulator(n.inputs[0])) {
          const std::size_t t = n.shape[0];
          for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j <= i; ++j) ga->data()[i * t + j] += gy[i * t + j];
        }
        return;
    }
  }

  static double logistic(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static std::pair<double, double> moments(const double* x, std::size_t d, double eps) noexcept {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    return {mu, 1.0 / std::sqrt(var + eps)};
  }

  static std::pair<std::size_t, std::size_t> split_axis(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    return {outer, inner};
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId, std::less<>> named_;
};

}  // namespace flipguard::numerics
