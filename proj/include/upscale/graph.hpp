#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "upscale/tensor.hpp"

namespace upscale {

enum class OpKind {
    Leaf,
    MatMul,
    MatMulBT,
    Add,
    AddScaled,
    Mul,
    Silu,
    Softmax,
    RmsNorm,
    Embedding,
    Rope,
    Attention,
    TopKSoftmax,
    ScaleByColumn,
    CrossEntropy,
    Sum,
};

const char* to_string(OpKind kind);

/// Handle to a node in a Graph. Only meaningful for the graph that issued it.
struct Var {
    std::size_t id = 0;
};

/// Reverse-mode tape over the fixed operation set in `ops`. Nodes are
/// appended in execution order, so the node list is already topologically
/// sorted; backward walks it once in reverse.
template <class T>
class Graph {
public:
    using Backward = std::function<void(Graph&, std::size_t)>;

    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<std::size_t> inputs;
        BasicTensor<T> value;
        bool requires_grad = false;
        Backward backward;
    };

    Var leaf(BasicTensor<T> value, bool requires_grad = false);

    const BasicTensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
    const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient of the last backward() loss with respect to v. Nodes that do
    /// not lie on a path to the loss hold zeros.
    const BasicTensor<T>& grad(Var v) const;

    /// Runs the reverse sweep from a single-element loss. Gradients from a
    /// previous call are discarded.
    void backward(Var loss);

    /// Number of nodes whose backward rule ran during the last backward().
    std::size_t last_backward_visits() const noexcept { return visits_; }

    // Used by the op implementations.
    Var record(OpKind kind, std::vector<std::size_t> inputs, BasicTensor<T> value, Backward fn);
    BasicTensor<T>& grad_buffer(std::size_t id) { return grads_[id]; }
    const BasicTensor<T>& node_value(std::size_t id) const { return nodes_[id].value; }
    bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

private:
    std::vector<Node> nodes_;
    std::vector<BasicTensor<T>> grads_;
    std::size_t visits_ = 0;
};

struct AttentionShape {
    std::size_t batch = 1;
    std::size_t seq = 1;
    std::size_t n_heads = 1;
    std::size_t n_kv_heads = 1;
    std::size_t head_dim = 1;
    std::optional<std::size_t> window;
};

namespace ops {

template <class T> Var matmul(Graph<T>& g, Var a, Var b);
template <class T> Var matmul_bt(Graph<T>& g, Var a, Var b);
template <class T> Var add(Graph<T>& g, Var a, Var b);
/// x + alpha·y with alpha a one-element tensor.
template <class T> Var add_scaled(Graph<T>& g, Var x, Var y, Var alpha);
template <class T> Var mul(Graph<T>& g, Var a, Var b);
template <class T> Var silu(Graph<T>& g, Var x);
template <class T> Var softmax(Graph<T>& g, Var x);
template <class T> Var rms_norm(Graph<T>& g, Var x, Var weight, double eps);
/// Gathers rows of table[V×d] for each id.
template <class T> Var embedding(Graph<T>& g, Var table, std::span<const std::int32_t> ids);
/// RoPE on rows laid out as [batch·seq × heads·head_dim]; row r sits at
/// position r mod seq.
template <class T>
Var rope(Graph<T>& g, Var x, std::size_t seq, std::size_t n_heads, std::size_t head_dim, double theta);
/// Causal grouped-query attention with an optional sliding window. q is
/// [batch·seq × n_heads·head_dim], k and v are [batch·seq × n_kv_heads·head_dim].
template <class T> Var attention(Graph<T>& g, Var q, Var k, Var v, const AttentionShape& shape);
/// Per row: keep the top-k logits, softmax over them, zeros elsewhere.
/// selected (optional) receives the chosen indices row by row.
template <class T>
Var top_k_softmax(Graph<T>& g, Var logits, std::size_t k, std::vector<std::size_t>* selected = nullptr);
/// Row i of x scaled by weights[i, column].
template <class T> Var scale_by_column(Graph<T>& g, Var x, Var weights, std::size_t column);
template <class T> Var cross_entropy(Graph<T>& g, Var logits, std::span<const std::int32_t> targets);
template <class T> Var sum(Graph<T>& g, Var x);

}  // namespace ops
}  // namespace upscale
