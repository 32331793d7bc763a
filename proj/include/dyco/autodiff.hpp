#pragma once

// Append-only expression graph over dense tensors with reverse-mode
// differentiation. Nodes are created through Graph's builder methods, which
// infer and validate shapes eagerly; insertion order is a topological order.
// An Evaluation holds the values of one forward pass and may be extended after
// more nodes are appended to the same graph, which is how data-dependent
// stages (clustering) are spliced into a differentiable computation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dyco/tensor.hpp"

namespace dyco {

struct Node {
    std::uint32_t id = 0;
    bool operator==(const Node&) const = default;
};

enum class OpKind {
    Input,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Relu,
    Sigmoid,
    Log,
    Abs,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    MeanRows,
    Concat,
    SliceCols,
    SliceFlat,
    Reshape,
    GatherRows,
    SegmentMean,
    Conv3d,
    LayerNorm,
    RowNorm,
    BceLogits,
};

inline const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::Input: return "input";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Scale: return "scale";
        case OpKind::Relu: return "relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Log: return "log";
        case OpKind::Abs: return "abs";
        case OpKind::Softmax: return "softmax";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::MeanRows: return "mean_rows";
        case OpKind::Concat: return "concat";
        case OpKind::SliceCols: return "slice_cols";
        case OpKind::SliceFlat: return "slice_flat";
        case OpKind::Reshape: return "reshape";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::SegmentMean: return "segment_mean";
        case OpKind::Conv3d: return "conv3d";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::RowNorm: return "row_norm";
        case OpKind::BceLogits: return "bce_logits";
    }
    return "?";
}

/// Raised when a node's inputs are inconsistent with its op kind.
class ShapeError : public Error {
public:
    ShapeError(std::uint32_t node, OpKind op, const std::string& what)
        : Error("node " + std::to_string(node) + " (" + op_name(op) + "): " + what),
          node_(node) {}
    std::uint32_t node() const { return node_; }

private:
    std::uint32_t node_;
};

using Bindings = std::map<std::string, Tensor, std::less<>>;
using Gradients = std::map<std::string, Tensor, std::less<>>;

namespace detail {

enum class Broadcast { Same, Scalar, Row };

struct NodeRecord {
    OpKind op = OpKind::Input;
    std::vector<Node> inputs;
    Shape shape;
    bool needs_grad = false;
    std::string name;
    double scalar = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t grid = 0;
    Broadcast broadcast = Broadcast::Same;
    std::shared_ptr<const Tensor> constant;
    std::shared_ptr<const std::vector<std::int64_t>> index;
    std::shared_ptr<const std::vector<double>> inv_count;
    std::shared_ptr<const std::vector<std::uint8_t>> mask;
};

inline constexpr double kLayerNormEps = 1e-5;

}  // namespace detail

class Graph {
public:
    /// Named leaf bound at evaluation time.
    Node input(std::string name, Shape shape, bool requires_grad = true) {
        for (const auto& r : nodes_)
            if (r.op == OpKind::Input && r.name == name)
                throw Error("graph: duplicate leaf '" + name + "'");
        detail::NodeRecord r;
        r.op = OpKind::Input;
        r.shape = std::move(shape);
        r.needs_grad = requires_grad;
        r.name = std::move(name);
        return push(std::move(r));
    }

    /// Anonymous leaf whose value is baked into the graph. Never differentiated.
    Node constant(Tensor value) {
        detail::NodeRecord r;
        r.op = OpKind::Constant;
        r.shape = value.shape();
        r.constant = std::make_shared<const Tensor>(std::move(value));
        return push(std::move(r));
    }

    Node matmul(Node a, Node b) {
        const auto& sa = shape(a);
        const auto& sb = shape(b);
        if (sa.size() != 2 || sb.size() != 2)
            fail(OpKind::MatMul, "operands must be rank 2, got " + shape_str(sa) + " and " + shape_str(sb));
        if (sa[1] != sb[0])
            fail(OpKind::MatMul, "inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
        return unary_like(OpKind::MatMul, {a, b}, Shape{sa[0], sb[1]});
    }

    Node transpose(Node a) {
        const auto& sa = shape(a);
        if (sa.size() != 2) fail(OpKind::Transpose, "operand must be rank 2, got " + shape_str(sa));
        return unary_like(OpKind::Transpose, {a}, Shape{sa[1], sa[0]});
    }

    Node add(Node a, Node b) { return binary(OpKind::Add, a, b); }
    Node sub(Node a, Node b) { return binary(OpKind::Sub, a, b); }
    Node mul(Node a, Node b) { return binary(OpKind::Mul, a, b); }
    Node div(Node a, Node b) { return binary(OpKind::Div, a, b); }

    Node scale(Node a, double factor) {
        detail::NodeRecord r = record(OpKind::Scale, {a}, shape(a));
        r.scalar = factor;
        return push(std::move(r));
    }

    Node relu(Node a) { return unary_like(OpKind::Relu, {a}, shape(a)); }
    Node sigmoid(Node a) { return unary_like(OpKind::Sigmoid, {a}, shape(a)); }
    Node log(Node a) { return unary_like(OpKind::Log, {a}, shape(a)); }
    Node abs(Node a) { return unary_like(OpKind::Abs, {a}, shape(a)); }

    /// Softmax over the last axis.
    Node softmax(Node a) {
        if (shape(a).empty()) fail(OpKind::Softmax, "operand must have rank >= 1");
        return unary_like(OpKind::Softmax, {a}, shape(a));
    }
    Node log_softmax(Node a) {
        if (shape(a).empty()) fail(OpKind::LogSoftmax, "operand must have rank >= 1");
        return unary_like(OpKind::LogSoftmax, {a}, shape(a));
    }

    Node sum(Node a) { return unary_like(OpKind::Sum, {a}, Shape{}); }
    Node mean(Node a) { return unary_like(OpKind::Mean, {a}, Shape{}); }

    /// [m, n] -> [n], mean over rows.
    Node mean_rows(Node a) {
        const auto& sa = shape(a);
        if (sa.size() != 2) fail(OpKind::MeanRows, "operand must be rank 2, got " + shape_str(sa));
        return unary_like(OpKind::MeanRows, {a}, Shape{sa[1]});
    }

    /// Column-wise concatenation of rank-2 operands with equal row counts.
    Node concat(const std::vector<Node>& parts) {
        if (parts.empty()) fail(OpKind::Concat, "no operands");
        std::size_t rows = 0, cols = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const auto& s = shape(parts[i]);
            if (s.size() != 2) fail(OpKind::Concat, "operand " + std::to_string(i) + " must be rank 2, got " + shape_str(s));
            if (i == 0) rows = s[0];
            if (s[0] != rows) fail(OpKind::Concat, "row counts differ: " + std::to_string(rows) + " vs " + std::to_string(s[0]));
            cols += s[1];
        }
        return unary_like(OpKind::Concat, parts, Shape{rows, cols});
    }

    /// Columns [begin, end) of a rank-2 operand.
    Node slice_cols(Node a, std::size_t begin, std::size_t end) {
        const auto& sa = shape(a);
        if (sa.size() != 2) fail(OpKind::SliceCols, "operand must be rank 2, got " + shape_str(sa));
        if (begin >= end || end > sa[1])
            fail(OpKind::SliceCols, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(sa));
        detail::NodeRecord r = record(OpKind::SliceCols, {a}, Shape{sa[0], end - begin});
        r.begin = begin;
        r.end = end;
        return push(std::move(r));
    }

    /// Flat elements [begin, end) as a rank-1 tensor.
    Node slice_flat(Node a, std::size_t begin, std::size_t end) {
        const std::size_t n = shape_size(shape(a));
        if (begin >= end || end > n)
            fail(OpKind::SliceFlat, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + std::to_string(n) + " elements");
        detail::NodeRecord r = record(OpKind::SliceFlat, {a}, Shape{end - begin});
        r.begin = begin;
        r.end = end;
        return push(std::move(r));
    }

    Node reshape(Node a, Shape to) {
        if (shape_size(to) != shape_size(shape(a)))
            fail(OpKind::Reshape, "cannot reshape " + shape_str(shape(a)) + " to " + shape_str(to));
        for (std::size_t d : to)
            if (d == 0) fail(OpKind::Reshape, "zero dimension in " + shape_str(to));
        return unary_like(OpKind::Reshape, {a}, std::move(to));
    }

    /// Rows of `a` (leading axis) selected by `rows`; duplicates allowed.
    Node gather_rows(Node a, std::vector<std::int64_t> rows) {
        const auto& sa = shape(a);
        if (sa.empty()) fail(OpKind::GatherRows, "operand must have rank >= 1");
        if (rows.empty()) fail(OpKind::GatherRows, "empty row selection");
        for (auto i : rows)
            if (i < 0 || static_cast<std::size_t>(i) >= sa[0])
                fail(OpKind::GatherRows, "row " + std::to_string(i) + " outside " + shape_str(sa));
        Shape out = sa;
        out[0] = rows.size();
        detail::NodeRecord r = record(OpKind::GatherRows, {a}, std::move(out));
        r.index = std::make_shared<const std::vector<std::int64_t>>(std::move(rows));
        return push(std::move(r));
    }

    /// Mean of the rows of `a` sharing a segment id; id -1 drops the row.
    /// Segments without members are zero.
    Node segment_mean(Node a, std::vector<std::int64_t> segment_of_row, std::size_t segments) {
        const auto& sa = shape(a);
        if (sa.empty()) fail(OpKind::SegmentMean, "operand must have rank >= 1");
        if (segment_of_row.size() != sa[0])
            fail(OpKind::SegmentMean, std::to_string(segment_of_row.size()) + " segment ids for " + std::to_string(sa[0]) + " rows");
        if (segments == 0) fail(OpKind::SegmentMean, "zero segments");
        std::vector<double> count(segments, 0.0);
        for (auto s : segment_of_row) {
            if (s < -1 || s >= static_cast<std::int64_t>(segments))
                fail(OpKind::SegmentMean, "segment id " + std::to_string(s) + " outside [0," + std::to_string(segments) + ")");
            if (s >= 0) count[static_cast<std::size_t>(s)] += 1.0;
        }
        for (double& c : count) c = c > 0.0 ? 1.0 / c : 0.0;
        Shape out = sa;
        out[0] = segments;
        detail::NodeRecord r = record(OpKind::SegmentMean, {a}, std::move(out));
        r.index = std::make_shared<const std::vector<std::int64_t>>(std::move(segment_of_row));
        r.inv_count = std::make_shared<const std::vector<double>>(std::move(count));
        return push(std::move(r));
    }

    /// 3x3x3 convolution, stride 1, zero padding, over a g*g*g grid stored as
    /// [g^3, Cin] rows with linear voxel index (i*g + j)*g + k. Weights are
    /// [27, Cin, Cout] with tap index ((di+1)*3 + (dj+1))*3 + (dk+1).
    /// With `out_mask`, output rows outside the mask are zero.
    Node conv3d(Node x, Node weight, Node bias, std::size_t g, std::vector<std::uint8_t> out_mask = {}) {
        const auto& sx = shape(x);
        const auto& sw = shape(weight);
        const auto& sb = shape(bias);
        if (g == 0) fail(OpKind::Conv3d, "grid size must be positive");
        if (sx.size() != 2 || sx[0] != g * g * g)
            fail(OpKind::Conv3d, "input must be [" + std::to_string(g * g * g) + ", C], got " + shape_str(sx));
        if (sw.size() != 3 || sw[0] != 27 || sw[1] != sx[1])
            fail(OpKind::Conv3d, "weight must be [27, " + std::to_string(sx[1]) + ", Cout], got " + shape_str(sw));
        if (sb.size() != 1 || sb[0] != sw[2])
            fail(OpKind::Conv3d, "bias must be [" + std::to_string(sw[2]) + "], got " + shape_str(sb));
        if (!out_mask.empty() && out_mask.size() != g * g * g)
            fail(OpKind::Conv3d, "mask length " + std::to_string(out_mask.size()) + " != " + std::to_string(g * g * g));
        detail::NodeRecord r = record(OpKind::Conv3d, {x, weight, bias}, Shape{g * g * g, sw[2]});
        r.grid = g;
        if (!out_mask.empty()) r.mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(out_mask));
        return push(std::move(r));
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    Node layer_norm(Node x, Node gain, Node bias) {
        const auto& sx = shape(x);
        if (sx.size() != 2) fail(OpKind::LayerNorm, "input must be rank 2, got " + shape_str(sx));
        if (shape(gain) != Shape{sx[1]} || shape(bias) != Shape{sx[1]})
            fail(OpKind::LayerNorm, "gain/bias must be [" + std::to_string(sx[1]) + "]");
        return unary_like(OpKind::LayerNorm, {x, gain, bias}, sx);
    }

    /// Euclidean norm of each row: [m, n] -> [m]. Gradient at a zero row is zero.
    Node row_norm(Node a) {
        const auto& sa = shape(a);
        if (sa.size() != 2) fail(OpKind::RowNorm, "operand must be rank 2, got " + shape_str(sa));
        return unary_like(OpKind::RowNorm, {a}, Shape{sa[0]});
    }

    /// Elementwise binary cross-entropy of sigmoid(logits) against targets.
    /// Targets are not differentiated.
    Node bce_logits(Node logits, Node targets) {
        if (shape(logits) != shape(targets))
            fail(OpKind::BceLogits, "logits " + shape_str(shape(logits)) + " vs targets " + shape_str(shape(targets)));
        if (rec(targets).needs_grad) fail(OpKind::BceLogits, "targets must not require gradients");
        detail::NodeRecord r = record(OpKind::BceLogits, {logits, targets}, shape(logits));
        r.needs_grad = rec(logits).needs_grad;
        return push(std::move(r));
    }

    void set_output(std::string name, Node n) { outputs_[std::move(name)] = n; }
    Node output(std::string_view name) const {
        auto it = outputs_.find(name);
        if (it == outputs_.end()) throw Error("graph: no output named '" + std::string(name) + "'");
        return it->second;
    }

    const Shape& shape(Node n) const { return rec(n).shape; }
    bool needs_grad(Node n) const { return rec(n).needs_grad; }
    std::size_t size() const { return nodes_.size(); }
    const detail::NodeRecord& rec(Node n) const {
        if (n.id >= nodes_.size()) throw Error("graph: node " + std::to_string(n.id) + " does not exist");
        return nodes_[n.id];
    }

    /// Leaf node for `name`, if declared.
    bool find_input(std::string_view name, Node& out) const {
        for (std::uint32_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].op == OpKind::Input && nodes_[i].name == name) {
                out = Node{i};
                return true;
            }
        return false;
    }

private:
    [[noreturn]] void fail(OpKind op, const std::string& what) const {
        throw ShapeError(static_cast<std::uint32_t>(nodes_.size()), op, what);
    }

    detail::NodeRecord record(OpKind op, std::vector<Node> inputs, Shape out) const {
        detail::NodeRecord r;
        r.op = op;
        for (Node in : inputs) r.needs_grad = r.needs_grad || rec(in).needs_grad;
        r.inputs = std::move(inputs);
        r.shape = std::move(out);
        return r;
    }

    Node unary_like(OpKind op, std::vector<Node> inputs, Shape out) {
        return push(record(op, std::move(inputs), std::move(out)));
    }

    Node binary(OpKind op, Node a, Node b) {
        const auto& sa = shape(a);
        const auto& sb = shape(b);
        detail::NodeRecord r = record(op, {a, b}, sa);
        if (sa == sb)
            r.broadcast = detail::Broadcast::Same;
        else if (sb.empty())
            r.broadcast = detail::Broadcast::Scalar;
        else if (sb.size() == 1 && !sa.empty() && sb[0] == sa.back())
            r.broadcast = detail::Broadcast::Row;
        else
            fail(op, "cannot combine " + shape_str(sa) + " with " + shape_str(sb));
        return push(std::move(r));
    }

    Node push(detail::NodeRecord r) {
        nodes_.push_back(std::move(r));
        return Node{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<detail::NodeRecord> nodes_;
    std::map<std::string, Node, std::less<>> outputs_;
};

/// Values of every node computed so far for one set of bindings.
class Evaluation {
public:
    const Tensor& value(Node n) const {
        if (n.id >= values_.size()) throw Error("evaluation: node " + std::to_string(n.id) + " not computed");
        return values_[n.id];
    }
    std::size_t computed() const { return values_.size(); }

private:
    friend void evaluate(const Graph&, const Bindings&, Evaluation&);
    std::vector<Tensor> values_;
};

namespace detail {

inline std::size_t bmap(Broadcast b, std::size_t i, std::size_t cols) {
    switch (b) {
        case Broadcast::Same: return i;
        case Broadcast::Scalar: return 0;
        case Broadcast::Row: return i % cols;
    }
    return i;
}

inline Tensor forward(const NodeRecord& r, const std::vector<const Tensor*>& in) {
    Tensor out(r.shape);
    double* o = out.data();
    switch (r.op) {
        case OpKind::Input:
        case OpKind::Constant:
            break;
        case OpKind::MatMul: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            for (std::size_t i = 0; i < m; ++i) {
                double* orow = o + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = a[i * k + p];
                    if (av == 0.0) continue;
                    const double* brow = b.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
            }
            break;
        }
        case OpKind::Transpose: {
            const Tensor& a = *in[0];
            const std::size_t m = a.dim(0), n = a.dim(1);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) o[j * m + i] = a[i * n + j];
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
        case OpKind::Div: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            const std::size_t cols = a.cols();
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double x = a[i], y = b[bmap(r.broadcast, i, cols)];
                switch (r.op) {
                    case OpKind::Add: o[i] = x + y; break;
                    case OpKind::Sub: o[i] = x - y; break;
                    case OpKind::Mul: o[i] = x * y; break;
                    default: o[i] = x / y; break;
                }
            }
            break;
        }
        case OpKind::Scale:
            for (std::size_t i = 0; i < out.size(); ++i) o[i] = r.scalar * (*in[0])[i];
            break;
        case OpKind::Relu:
            for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::max(0.0, (*in[0])[i]);
            break;
        case OpKind::Sigmoid:
            for (std::size_t i = 0; i < out.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-(*in[0])[i]));
            break;
        case OpKind::Log:
            for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::log((*in[0])[i]);
            break;
        case OpKind::Abs:
            for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::fabs((*in[0])[i]);
            break;
        case OpKind::Softmax:
        case OpKind::LogSoftmax: {
            const Tensor& a = *in[0];
            const std::size_t cols = a.cols(), rows = a.rows();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* x = a.data() + i * cols;
                double* y = o + i * cols;
                const double mx = *std::max_element(x, x + cols);
                double z = 0.0;
                for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
                if (r.op == OpKind::Softmax) {
                    for (std::size_t j = 0; j < cols; ++j) y[j] = std::exp(x[j] - mx) / z;
                } else {
                    const double lse = mx + std::log(z);
                    for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] - lse;
                }
            }
            break;
        }
        case OpKind::Sum:
        case OpKind::Mean: {
            double s = 0.0;
            for (double v : in[0]->values()) s += v;
            o[0] = r.op == OpKind::Sum ? s : s / static_cast<double>(in[0]->size());
            break;
        }
        case OpKind::MeanRows: {
            const Tensor& a = *in[0];
            const std::size_t m = a.dim(0), n = a.dim(1);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) o[j] += a[i * n + j];
            for (std::size_t j = 0; j < n; ++j) o[j] /= static_cast<double>(m);
            break;
        }
        case OpKind::Concat: {
            const std::size_t rows = r.shape[0], total = r.shape[1];
            std::size_t offset = 0;
            for (const Tensor* t : in) {
                const std::size_t c = t->dim(1);
                for (std::size_t i = 0; i < rows; ++i)
                    std::copy_n(t->data() + i * c, c, o + i * total + offset);
                offset += c;
            }
            break;
        }
        case OpKind::SliceCols: {
            const Tensor& a = *in[0];
            const std::size_t n = a.dim(1), w = r.end - r.begin;
            for (std::size_t i = 0; i < a.dim(0); ++i) std::copy_n(a.data() + i * n + r.begin, w, o + i * w);
            break;
        }
        case OpKind::SliceFlat:
            std::copy(in[0]->data() + r.begin, in[0]->data() + r.end, o);
            break;
        case OpKind::Reshape:
            std::copy(in[0]->values().begin(), in[0]->values().end(), o);
            break;
        case OpKind::GatherRows: {
            const Tensor& a = *in[0];
            const std::size_t w = a.size() / a.dim(0);
            const auto& idx = *r.index;
            for (std::size_t i = 0; i < idx.size(); ++i)
                std::copy_n(a.data() + static_cast<std::size_t>(idx[i]) * w, w, o + i * w);
            break;
        }
        case OpKind::SegmentMean: {
            const Tensor& a = *in[0];
            const std::size_t w = a.size() / a.dim(0);
            const auto& seg = *r.index;
            const auto& inv = *r.inv_count;
            for (std::size_t i = 0; i < seg.size(); ++i) {
                if (seg[i] < 0) continue;
                const auto s = static_cast<std::size_t>(seg[i]);
                for (std::size_t j = 0; j < w; ++j) o[s * w + j] += a[i * w + j] * inv[s];
            }
            break;
        }
        case OpKind::Conv3d: {
            const Tensor& x = *in[0];
            const Tensor& w = *in[1];
            const Tensor& b = *in[2];
            const std::size_t g = r.grid, cin = w.dim(1), cout = w.dim(2);
            const auto* mask = r.mask.get();
            for (std::size_t s = 0; s < g * g * g; ++s) {
                if (mask && !(*mask)[s]) continue;
                double* orow = o + s * cout;
                std::copy_n(b.data(), cout, orow);
                const auto si = static_cast<std::int64_t>(s / (g * g));
                const auto sj = static_cast<std::int64_t>((s / g) % g);
                const auto sk = static_cast<std::int64_t>(s % g);
                const auto gi = static_cast<std::int64_t>(g);
                for (std::int64_t di = -1; di <= 1; ++di)
                    for (std::int64_t dj = -1; dj <= 1; ++dj)
                        for (std::int64_t dk = -1; dk <= 1; ++dk) {
                            const std::int64_t ni = si + di, nj = sj + dj, nk = sk + dk;
                            if (ni < 0 || nj < 0 || nk < 0 || ni >= gi || nj >= gi || nk >= gi) continue;
                            const auto nb = static_cast<std::size_t>((ni * gi + nj) * gi + nk);
                            const auto tap = static_cast<std::size_t>(((di + 1) * 3 + (dj + 1)) * 3 + (dk + 1));
                            const double* xrow = x.data() + nb * cin;
                            const double* wt = w.data() + tap * cin * cout;
                            for (std::size_t ci = 0; ci < cin; ++ci) {
                                const double xv = xrow[ci];
                                if (xv == 0.0) continue;
                                const double* wrow = wt + ci * cout;
                                for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * wrow[co];
                            }
                        }
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = *in[0];
            const Tensor& gain = *in[1];
            const Tensor& bias = *in[2];
            const std::size_t m = x.dim(0), n = x.dim(1);
            for (std::size_t i = 0; i < m; ++i) {
                const double* xr = x.data() + i * n;
                double mu = 0.0, var = 0.0;
                for (std::size_t j = 0; j < n; ++j) mu += xr[j];
                mu /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= static_cast<double>(n);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                for (std::size_t j = 0; j < n; ++j) o[i * n + j] = (xr[j] - mu) * inv * gain[j] + bias[j];
            }
            break;
        }
        case OpKind::RowNorm: {
            const Tensor& a = *in[0];
            const std::size_t n = a.dim(1);
            for (std::size_t i = 0; i < a.dim(0); ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * a[i * n + j];
                o[i] = std::sqrt(s);
            }
            break;
        }
        case OpKind::BceLogits: {
            const Tensor& x = *in[0];
            const Tensor& t = *in[1];
            for (std::size_t i = 0; i < out.size(); ++i)
                o[i] = std::max(x[i], 0.0) - x[i] * t[i] + std::log1p(std::exp(-std::fabs(x[i])));
            break;
        }
    }
    return out;
}

// Accumulates the vector-Jacobian product of node `r` into the input gradients.
// grads[k] is null when input k needs no gradient.
inline void backward_node(const NodeRecord& r, const std::vector<const Tensor*>& in, const Tensor& out,
                          const Tensor& g, const std::vector<Tensor*>& grads) {
    const double* gv = g.data();
    switch (r.op) {
        case OpKind::Input:
        case OpKind::Constant:
            break;
        case OpKind::MatMul: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = b.data() + p * n;
                        const double* grow = gv + i * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        (*ga)[i * k + p] += s;
                    }
            if (Tensor* gb = grads[1])
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = a[i * k + p];
                        if (av == 0.0) continue;
                        double* gbrow = gb->data() + p * n;
                        const double* grow = gv + i * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            break;
        }
        case OpKind::Transpose: {
            const std::size_t m = in[0]->dim(0), n = in[0]->dim(1);
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += gv[j * m + i];
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
        case OpKind::Div: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            const std::size_t cols = a.cols();
            Tensor* ga = grads[0];
            Tensor* gb = grads[1];
            for (std::size_t i = 0; i < out.size(); ++i) {
                const std::size_t bi = bmap(r.broadcast, i, cols);
                const double x = a[i], y = b[bi];
                double dx = 1.0, dy = 1.0;
                switch (r.op) {
                    case OpKind::Add: break;
                    case OpKind::Sub: dy = -1.0; break;
                    case OpKind::Mul: dx = y; dy = x; break;
                    default: dx = 1.0 / y; dy = -x / (y * y); break;
                }
                if (ga) (*ga)[i] += gv[i] * dx;
                if (gb) (*gb)[bi] += gv[i] * dy;
            }
            break;
        }
        case OpKind::Scale:
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < out.size(); ++i) (*ga)[i] += r.scalar * gv[i];
            break;
        case OpKind::Relu:
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < out.size(); ++i)
                    if ((*in[0])[i] > 0.0) (*ga)[i] += gv[i];
            break;
        case OpKind::Sigmoid:
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < out.size(); ++i) (*ga)[i] += gv[i] * out[i] * (1.0 - out[i]);
            break;
        case OpKind::Log:
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < out.size(); ++i) (*ga)[i] += gv[i] / (*in[0])[i];
            break;
        case OpKind::Abs:
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double x = (*in[0])[i];
                    (*ga)[i] += x > 0.0 ? gv[i] : (x < 0.0 ? -gv[i] : 0.0);
                }
            break;
        case OpKind::Softmax:
            if (Tensor* ga = grads[0]) {
                const std::size_t cols = out.cols(), rows = out.rows();
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* y = out.data() + i * cols;
                    const double* gr = gv + i * cols;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
                    for (std::size_t j = 0; j < cols; ++j) (*ga)[i * cols + j] += y[j] * (gr[j] - dot);
                }
            }
            break;
        case OpKind::LogSoftmax:
            if (Tensor* ga = grads[0]) {
                const std::size_t cols = out.cols(), rows = out.rows();
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* y = out.data() + i * cols;
                    const double* gr = gv + i * cols;
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) gsum += gr[j];
                    for (std::size_t j = 0; j < cols; ++j) (*ga)[i * cols + j] += gr[j] - std::exp(y[j]) * gsum;
                }
            }
            break;
        case OpKind::Sum:
        case OpKind::Mean:
            if (Tensor* ga = grads[0]) {
                const double d = r.op == OpKind::Sum ? gv[0] : gv[0] / static_cast<double>(ga->size());
                for (double& v : ga->values()) v += d;
            }
            break;
        case OpKind::MeanRows:
            if (Tensor* ga = grads[0]) {
                const std::size_t m = in[0]->dim(0), n = in[0]->dim(1);
                const double inv = 1.0 / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += gv[j] * inv;
            }
            break;
        case OpKind::Concat: {
            const std::size_t rows = r.shape[0], total = r.shape[1];
            std::size_t offset = 0;
            for (std::size_t k = 0; k < in.size(); ++k) {
                const std::size_t c = in[k]->dim(1);
                if (Tensor* ga = grads[k])
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += gv[i * total + offset + j];
                offset += c;
            }
            break;
        }
        case OpKind::SliceCols:
            if (Tensor* ga = grads[0]) {
                const std::size_t n = in[0]->dim(1), w = r.end - r.begin;
                for (std::size_t i = 0; i < in[0]->dim(0); ++i)
                    for (std::size_t j = 0; j < w; ++j) (*ga)[i * n + r.begin + j] += gv[i * w + j];
            }
            break;
        case OpKind::SliceFlat:
            if (Tensor* ga = grads[0])
                for (std::size_t i = r.begin; i < r.end; ++i) (*ga)[i] += gv[i - r.begin];
            break;
        case OpKind::Reshape:
            if (Tensor* ga = grads[0])
                for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += gv[i];
            break;
        case OpKind::GatherRows:
            if (Tensor* ga = grads[0]) {
                const std::size_t w = in[0]->size() / in[0]->dim(0);
                const auto& idx = *r.index;
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    double* dst = ga->data() + static_cast<std::size_t>(idx[i]) * w;
                    for (std::size_t j = 0; j < w; ++j) dst[j] += gv[i * w + j];
                }
            }
            break;
        case OpKind::SegmentMean:
            if (Tensor* ga = grads[0]) {
                const std::size_t w = in[0]->size() / in[0]->dim(0);
                const auto& seg = *r.index;
                const auto& inv = *r.inv_count;
                for (std::size_t i = 0; i < seg.size(); ++i) {
                    if (seg[i] < 0) continue;
                    const auto s = static_cast<std::size_t>(seg[i]);
                    for (std::size_t j = 0; j < w; ++j) (*ga)[i * w + j] += gv[s * w + j] * inv[s];
                }
            }
            break;
        case OpKind::Conv3d: {
            const Tensor& x = *in[0];
            const Tensor& w = *in[1];
            const std::size_t g3 = r.grid, cin = w.dim(1), cout = w.dim(2);
            Tensor* gx = grads[0];
            Tensor* gw = grads[1];
            Tensor* gb = grads[2];
            const auto* mask = r.mask.get();
            const auto gi = static_cast<std::int64_t>(g3);
            for (std::size_t s = 0; s < g3 * g3 * g3; ++s) {
                if (mask && !(*mask)[s]) continue;
                const double* grow = gv + s * cout;
                if (gb)
                    for (std::size_t co = 0; co < cout; ++co) (*gb)[co] += grow[co];
                const auto si = static_cast<std::int64_t>(s / (g3 * g3));
                const auto sj = static_cast<std::int64_t>((s / g3) % g3);
                const auto sk = static_cast<std::int64_t>(s % g3);
                for (std::int64_t di = -1; di <= 1; ++di)
                    for (std::int64_t dj = -1; dj <= 1; ++dj)
                        for (std::int64_t dk = -1; dk <= 1; ++dk) {
                            const std::int64_t ni = si + di, nj = sj + dj, nk = sk + dk;
                            if (ni < 0 || nj < 0 || nk < 0 || ni >= gi || nj >= gi || nk >= gi) continue;
                            const auto nb = static_cast<std::size_t>((ni * gi + nj) * gi + nk);
                            const auto tap = static_cast<std::size_t>(((di + 1) * 3 + (dj + 1)) * 3 + (dk + 1));
                            const double* xrow = x.data() + nb * cin;
                            const double* wt = w.data() + tap * cin * cout;
                            for (std::size_t ci = 0; ci < cin; ++ci) {
                                const double* wrow = wt + ci * cout;
                                if (gx) {
                                    double acc = 0.0;
                                    for (std::size_t co = 0; co < cout; ++co) acc += wrow[co] * grow[co];
                                    (*gx)[nb * cin + ci] += acc;
                                }
                                if (gw) {
                                    const double xv = xrow[ci];
                                    if (xv == 0.0) continue;
                                    double* gwrow = gw->data() + tap * cin * cout + ci * cout;
                                    for (std::size_t co = 0; co < cout; ++co) gwrow[co] += xv * grow[co];
                                }
                            }
                        }
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = *in[0];
            const Tensor& gain = *in[1];
            const std::size_t m = x.dim(0), n = x.dim(1);
            std::vector<double> xhat(n), gxhat(n);
            for (std::size_t i = 0; i < m; ++i) {
                const double* xr = x.data() + i * n;
                const double* gr = gv + i * n;
                double mu = 0.0, var = 0.0;
                for (std::size_t j = 0; j < n; ++j) mu += xr[j];
                mu /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= static_cast<double>(n);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                double mg = 0.0, mgx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (xr[j] - mu) * inv;
                    gxhat[j] = gr[j] * gain[j];
                    mg += gxhat[j];
                    mgx += gxhat[j] * xhat[j];
                }
                mg /= static_cast<double>(n);
                mgx /= static_cast<double>(n);
                if (Tensor* gx = grads[0])
                    for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += inv * (gxhat[j] - mg - xhat[j] * mgx);
                if (Tensor* gg = grads[1])
                    for (std::size_t j = 0; j < n; ++j) (*gg)[j] += gr[j] * xhat[j];
                if (Tensor* gb = grads[2])
                    for (std::size_t j = 0; j < n; ++j) (*gb)[j] += gr[j];
            }
            break;
        }
        case OpKind::RowNorm:
            if (Tensor* ga = grads[0]) {
                const Tensor& a = *in[0];
                const std::size_t n = a.dim(1);
                for (std::size_t i = 0; i < a.dim(0); ++i) {
                    if (out[i] == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += gv[i] * a[i * n + j] / out[i];
                }
            }
            break;
        case OpKind::BceLogits:
            if (Tensor* ga = grads[0]) {
                const Tensor& x = *in[0];
                const Tensor& t = *in[1];
                for (std::size_t i = 0; i < out.size(); ++i)
                    (*ga)[i] += gv[i] * (1.0 / (1.0 + std::exp(-x[i])) - t[i]);
            }
            break;
    }
}

}  // namespace detail

/// Computes every node not yet present in `eval`. Pure: identical bindings
/// give bit-identical values.
inline void evaluate(const Graph& graph, const Bindings& bindings, Evaluation& eval) {
    auto& values = eval.values_;
    values.reserve(graph.size());
    std::vector<const Tensor*> in;
    for (std::uint32_t id = static_cast<std::uint32_t>(values.size()); id < graph.size(); ++id) {
        const auto& r = graph.rec(Node{id});
        if (r.op == OpKind::Input) {
            auto it = bindings.find(r.name);
            if (it == bindings.end()) throw Error("evaluate: unbound leaf '" + r.name + "'");
            if (it->second.shape() != r.shape)
                throw Error("evaluate: leaf '" + r.name + "' bound with shape " + shape_str(it->second.shape()) +
                            ", declared " + shape_str(r.shape));
            values.push_back(it->second);
            continue;
        }
        if (r.op == OpKind::Constant) {
            values.push_back(*r.constant);
            continue;
        }
        in.clear();
        for (Node n : r.inputs) in.push_back(&values[n.id]);
        values.push_back(detail::forward(r, in));
    }
}

inline Evaluation evaluate(const Graph& graph, const Bindings& bindings) {
    Evaluation eval;
    evaluate(graph, bindings, eval);
    return eval;
}

/// Gradients of a scalar output with respect to every leaf declared with
/// requires_grad. Leaves the output does not reach get zeros.
inline Gradients backward(const Graph& graph, const Evaluation& eval, Node output) {
    if (!graph.shape(output).empty())
        throw Error("backward: output node " + std::to_string(output.id) + " is not scalar, shape " +
                    shape_str(graph.shape(output)));
    if (eval.computed() <= output.id) throw Error("backward: output not evaluated");

    std::vector<std::unique_ptr<Tensor>> grads(output.id + 1);
    if (graph.needs_grad(output)) grads[output.id] = std::make_unique<Tensor>(Shape{}, 1.0);

    std::vector<const Tensor*> in;
    std::vector<Tensor*> gin;
    for (std::int64_t id = output.id; id >= 0; --id) {
        const Node n{static_cast<std::uint32_t>(id)};
        if (!grads[n.id]) continue;
        const auto& r = graph.rec(n);
        if (r.op == OpKind::Input || r.op == OpKind::Constant) continue;
        in.clear();
        gin.clear();
        for (Node x : r.inputs) {
            in.push_back(&eval.value(x));
            if (graph.needs_grad(x)) {
                if (!grads[x.id]) grads[x.id] = std::make_unique<Tensor>(graph.shape(x));
                gin.push_back(grads[x.id].get());
            } else {
                gin.push_back(nullptr);
            }
        }
        detail::backward_node(r, in, eval.value(n), *grads[n.id], gin);
        if (r.op != OpKind::Input) grads[n.id].reset();
    }

    Gradients out;
    for (std::uint32_t id = 0; id < graph.size(); ++id) {
        const auto& r = graph.rec(Node{id});
        if (r.op != OpKind::Input || !r.needs_grad) continue;
        if (id < grads.size() && grads[id])
            out.emplace(r.name, std::move(*grads[id]));
        else
            out.emplace(r.name, Tensor(r.shape));
    }
    return out;
}

inline Gradients backward(const Graph& graph, const Evaluation& eval, std::string_view output) {
    return backward(graph, eval, graph.output(output));
}

struct GradCheckOptions {
    double epsilon = 1e-5;
    /// Upper bound on checked coordinates across all leaves; 0 checks all.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string leaf;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
    /// Coordinates whose +/- epsilon probes put some relu or abs input on
    /// different sides of zero; central differences are unreliable there.
    std::size_t kink_crossings = 0;
};

namespace detail {

/// Sign of every relu/abs input, flattened in node order.
inline std::vector<bool> kink_pattern(const Graph& graph, const Evaluation& eval) {
    std::vector<bool> out;
    for (std::uint32_t id = 0; id < graph.size(); ++id) {
        const auto& r = graph.rec(Node{id});
        if (r.op != OpKind::Relu && r.op != OpKind::Abs) continue;
        for (double v : eval.value(r.inputs[0]).values()) out.push_back(v > 0.0);
    }
    return out;
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences at `point`.
/// The error per coordinate is |a - n| / max(1, |a|, |n|).
inline GradCheckReport gradient_check(const Graph& graph, const Bindings& point, Node output,
                                      const GradCheckOptions& opt = {}) {
    if (!(opt.epsilon >= 1e-7 && opt.epsilon <= 1e-3))
        throw Error("gradient_check: epsilon " + std::to_string(opt.epsilon) + " outside [1e-7, 1e-3]");
    const Evaluation base = evaluate(graph, point);
    if (!std::isfinite(base.value(output).item())) throw Error("gradient_check: non-finite value at the base point");
    const Gradients analytic = backward(graph, base, output);

    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, g] : analytic)
        for (std::size_t i = 0; i < g.size(); ++i) coords.emplace_back(name, i);
    if (opt.max_coords && coords.size() > opt.max_coords) {
        std::mt19937_64 rng(opt.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opt.max_coords);
        std::sort(coords.begin(), coords.end());
    }

    Bindings probe = point;
    GradCheckReport report;
    for (const auto& [name, i] : coords) {
        double& x = probe.find(name)->second[i];
        const double saved = x;
        x = saved + opt.epsilon;
        const Evaluation plus = evaluate(graph, probe);
        x = saved - opt.epsilon;
        const Evaluation minus = evaluate(graph, probe);
        x = saved;
        const double fp = plus.value(output).item();
        const double fm = minus.value(output).item();
        if (detail::kink_pattern(graph, plus) != detail::kink_pattern(graph, minus)) ++report.kink_crossings;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw Error("gradient_check: non-finite value perturbing " + name + "[" + std::to_string(i) + "]");
        const double a = analytic.find(name)->second[i];
        if (!std::isfinite(a))
            throw Error("gradient_check: non-finite gradient at " + name + "[" + std::to_string(i) + "]");
        const double num = (fp - fm) / (2.0 * opt.epsilon);
        const double err = std::fabs(a - num) / std::max({1.0, std::fabs(a), std::fabs(num)});
        ++report.coords_checked;
        if (report.coords_checked == 1 || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.leaf = name;
            report.index = i;
            report.analytic = a;
            report.numeric = num;
        }
    }
    return report;
}

/// Single-tensor form: `f` maps a leaf holding `point` to a scalar node.
template <class Fn>
double gradient_check(Fn&& f, const Tensor& point, double epsilon) {
    Graph g;
    const Node x = g.input("x", point.shape());
    const Node y = f(g, x);
    Bindings b;
    b.emplace("x", point);
    GradCheckOptions opt;
    opt.epsilon = epsilon;
    return gradient_check(g, b, y, opt).max_rel_error;
}

}  // namespace dyco
