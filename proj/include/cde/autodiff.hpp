#pragma once

#include "cde/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cde {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
    Leaf,
    Affine,          // y = x * W^T + b
    Matmul,          // y = A * B
    MatmulNT,        // y = A * B^T
    Add,
    Sub,
    Mul,
    Scale,           // y = c * x
    Abs,
    Exp,
    Tanh,
    Relu,
    LogSoftmaxRows,
    LogSoftmaxRowsExclDiag, // row log-softmax over off-diagonal entries; diag = 0
    RowNormalize,    // rows scaled to unit L2 norm (eps-guarded)
    L1Norm,          // scalar sum of |x|
    L2Norm,          // scalar sqrt(sum x^2)
    SumAll,
    MeanAll,
    ConcatRows,
    CosineSim,       // scalar, eps-guarded on both norms
    TopKSelect,      // y = S_fwd * x with constant selection matrix; optional
                     // straight-through backward matrix S_bwd
};

/// Reverse-mode autodiff over a dynamically built tape. Nodes are appended in
/// topological order; forward values are computed eagerly at construction and
/// every op output is checked finite. Leaves can be rebound with set_value()
/// and the whole tape re-evaluated with recompute(), which is what the
/// finite-difference oracle uses.
class Graph {
public:
    struct Node {
        Op op = Op::Leaf;
        std::array<NodeId, 3> in{};
        std::uint8_t n_in = 0;
        double scalar_arg = 0.0;
        Tensor value;
        Tensor grad;
        Tensor aux;          // op-specific constant (selection matrices)
        Tensor aux2;
        bool requires_grad = false;
        std::string label;
    };

    // --- leaves ---------------------------------------------------------
    NodeId leaf(Tensor v, bool requires_grad, std::string label = "");
    NodeId constant(Tensor v, std::string label = "") { return leaf(std::move(v), false, std::move(label)); }
    NodeId param(Tensor v, std::string label = "") { return leaf(std::move(v), true, std::move(label)); }
    /// Named input leaf; rebind with bind()/set_value().
    NodeId input(Tensor v, std::string name);

    // --- ops -------------------------------------------------------------
    NodeId affine(NodeId x, NodeId w, NodeId b);
    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, double c);
    NodeId abs(NodeId x);
    NodeId exp(NodeId x);
    NodeId tanh(NodeId x);
    NodeId relu(NodeId x);
    NodeId log_softmax_rows(NodeId x);
    NodeId log_softmax_rows_excl_diag(NodeId x);
    NodeId row_normalize(NodeId x);
    NodeId l1_norm(NodeId x);
    NodeId l2_norm(NodeId x);
    NodeId sum_all(NodeId x);
    NodeId mean_all(NodeId x);
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId cosine_sim(NodeId a, NodeId b);
    /// y[r,l] = select[r, n] * x[n, l], select constant. When bwd_select is
    /// nonempty it is used in the backward pass instead (straight-through).
    NodeId topk_select(const Tensor& select, NodeId x, const Tensor& bwd_select = {});

    /// exp(log_softmax): convenience composition.
    NodeId softmax_rows(NodeId x) { return exp(log_softmax_rows(x)); }

    // --- evaluation ------------------------------------------------------
    void set_value(NodeId id, Tensor v); // leaves only
    void bind(const std::string& name, Tensor v);
    /// Re-runs the forward pass over the whole tape (after rebinding leaves).
    void recompute();
    /// Reverse-mode gradients of a scalar output w.r.t. every requires_grad node.
    void backward(NodeId output);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const Tensor& grad(NodeId id) const;
    NodeId node(const std::string& name) const;
    std::size_t num_nodes() const { return nodes_.size(); }

    static constexpr double kNormEps = 1e-12;

private:
    NodeId push(Node n);
    void eval(Node& n) const;
    void accumulate(Node& n);
    std::string describe(const Node& n) const;

    std::vector<Node> nodes_;
    std::unordered_map<std::string, NodeId> named_;
};

} // namespace cde
