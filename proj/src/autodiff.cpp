#include "cde/autodiff.hpp"

#include "cde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cde {

namespace {

// Plain sequential kernels; summation order is fixed so results are
// bit-reproducible run to run.

void mm(const Tensor& a, const Tensor& b, Tensor& out) { // [r,k]*[k,c]
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
    const double* A = a.data();
    const double* B = b.data();
    double* O = out.data();
    std::fill(O, O + r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double av = A[i * k + t];
            const double* Brow = B + t * c;
            double* Orow = O + i * c;
            for (std::size_t j = 0; j < c; ++j) Orow[j] += av * Brow[j];
        }
    }
}

void mm_nt(const Tensor& a, const Tensor& b, Tensor& out) { // [r,k]*[c,k]^T
    const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
    const double* A = a.data();
    const double* B = b.data();
    double* O = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double* Arow = A + i * k;
            const double* Brow = B + j * k;
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += Arow[t] * Brow[t];
            O[i * c + j] = acc;
        }
    }
}

void mm_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) { // [k,r]^T*[k,c], accumulating
    const std::size_t k = a.rows(), r = a.cols(), c = b.cols();
    const double* A = a.data();
    const double* B = b.data();
    double* O = out.data();
    for (std::size_t t = 0; t < k; ++t) {
        const double* Arow = A + t * r;
        const double* Brow = B + t * c;
        for (std::size_t i = 0; i < r; ++i) {
            const double av = Arow[i];
            double* Orow = O + i * c;
            for (std::size_t j = 0; j < c; ++j) Orow[j] += av * Brow[j];
        }
    }
}

void mm_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
    const double* A = a.data();
    const double* B = b.data();
    double* O = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double av = A[i * k + t];
            const double* Brow = B + t * c;
            double* Orow = O + i * c;
            for (std::size_t j = 0; j < c; ++j) Orow[j] += av * Brow[j];
        }
    }
}

void mm_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
    const double* A = a.data();
    const double* B = b.data();
    double* O = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double* Arow = A + i * k;
            const double* Brow = B + j * k;
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += Arow[t] * Brow[t];
            O[i * c + j] += acc;
        }
    }
}

double l2_of(const Tensor& t) {
    double acc = 0.0;
    for (double x : t.vec()) acc += x * x;
    return std::sqrt(acc);
}

double row_l2(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += x[j] * x[j];
    return std::sqrt(acc);
}

} // namespace

NodeId Graph::push(Node n) {
    const NodeId id = static_cast<NodeId>(nodes_.size());
    if (n.op != Op::Leaf) {
        eval(n);
        n.value.ensure_finite(describe(n));
        bool rg = false;
        for (std::uint8_t i = 0; i < n.n_in; ++i) rg = rg || nodes_[n.in[i]].requires_grad;
        n.requires_grad = rg;
    }
    nodes_.push_back(std::move(n));
    return id;
}

std::string Graph::describe(const Node& n) const {
    static const char* names[] = {
        "leaf", "affine", "matmul", "matmul_nt", "add", "sub", "mul", "scale",
        "abs", "exp", "tanh", "relu", "log_softmax_rows",
        "log_softmax_rows_excl_diag", "row_normalize", "l1_norm", "l2_norm",
        "sum_all", "mean_all", "concat_rows", "cosine_sim", "topk_select"};
    std::string s = names[static_cast<int>(n.op)];
    if (!n.label.empty()) s += " '" + n.label + "'";
    return s;
}

NodeId Graph::leaf(Tensor v, bool requires_grad, std::string label) {
    v.ensure_finite(label.empty() ? "leaf" : "leaf '" + label + "'");
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.label = std::move(label);
    return push(std::move(n));
}

NodeId Graph::input(Tensor v, std::string name) {
    const NodeId id = leaf(std::move(v), false, name);
    named_[std::move(name)] = id;
    return id;
}

NodeId Graph::node(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw NumericsError("no input named '" + name + "'");
    return it->second;
}

void Graph::bind(const std::string& name, Tensor v) { set_value(node(name), std::move(v)); }

void Graph::set_value(NodeId id, Tensor v) {
    Node& n = nodes_[id];
    if (n.op != Op::Leaf) throw NumericsError("set_value on non-leaf node " + describe(n));
    if (!v.same_shape(n.value)) {
        throw NumericsError("set_value shape " + v.shape_str() + " != " + n.value.shape_str() +
                            " on " + describe(n));
    }
    v.ensure_finite(describe(n));
    n.value = std::move(v);
}

void Graph::recompute() {
    for (Node& n : nodes_) {
        if (n.op == Op::Leaf) continue;
        eval(n);
        n.value.ensure_finite(describe(n));
    }
}

#define CDE_SHAPE_CHECK(cond, msg)                                    \
    do {                                                              \
        if (!(cond)) throw NumericsError(std::string(msg));           \
    } while (0)

NodeId Graph::affine(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& wv = nodes_[w].value;
    const Tensor& bv = nodes_[b].value;
    CDE_SHAPE_CHECK(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1,
                    "affine expects x[B,in], w[out,in], b[out]; got x" + xv.shape_str() +
                        " w" + wv.shape_str() + " b" + bv.shape_str());
    CDE_SHAPE_CHECK(xv.cols() == wv.cols() && bv.size() == wv.rows(),
                    "affine dims mismatch: x" + xv.shape_str() + " w" + wv.shape_str() + " b" +
                        bv.shape_str() + (nodes_[w].label.empty() ? "" : " at '" + nodes_[w].label + "'"));
    Node n;
    n.op = Op::Affine;
    n.in = {x, w, b};
    n.n_in = 3;
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    CDE_SHAPE_CHECK(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(),
                    "matmul dims mismatch: " + av.shape_str() + " x " + bv.shape_str());
    Node n;
    n.op = Op::Matmul;
    n.in = {a, b};
    n.n_in = 2;
    return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    CDE_SHAPE_CHECK(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.cols(),
                    "matmul_nt dims mismatch: " + av.shape_str() + " x " + bv.shape_str() + "^T");
    Node n;
    n.op = Op::MatmulNT;
    n.in = {a, b};
    n.n_in = 2;
    return push(std::move(n));
}

namespace {
Graph::Node binary_same_shape(Op op, NodeId a, NodeId b, const Tensor& av, const Tensor& bv,
                              const char* name) {
    if (!av.same_shape(bv)) {
        throw NumericsError(std::string(name) + " shape mismatch: " + av.shape_str() + " vs " +
                            bv.shape_str());
    }
    Graph::Node n;
    n.op = op;
    n.in = {a, b};
    n.n_in = 2;
    return n;
}
} // namespace

NodeId Graph::add(NodeId a, NodeId b) {
    return push(binary_same_shape(Op::Add, a, b, nodes_[a].value, nodes_[b].value, "add"));
}
NodeId Graph::sub(NodeId a, NodeId b) {
    return push(binary_same_shape(Op::Sub, a, b, nodes_[a].value, nodes_[b].value, "sub"));
}
NodeId Graph::mul(NodeId a, NodeId b) {
    return push(binary_same_shape(Op::Mul, a, b, nodes_[a].value, nodes_[b].value, "mul"));
}

NodeId Graph::scale(NodeId x, double c) {
    Node n;
    n.op = Op::Scale;
    n.in = {x};
    n.n_in = 1;
    n.scalar_arg = c;
    return push(std::move(n));
}

#define CDE_UNARY(fn, opk)                  \
    NodeId Graph::fn(NodeId x) {            \
        Node n;                             \
        n.op = opk;                         \
        n.in = {x};                         \
        n.n_in = 1;                         \
        return push(std::move(n));          \
    }

CDE_UNARY(abs, Op::Abs)
CDE_UNARY(exp, Op::Exp)
CDE_UNARY(tanh, Op::Tanh)
CDE_UNARY(relu, Op::Relu)
CDE_UNARY(l1_norm, Op::L1Norm)
CDE_UNARY(l2_norm, Op::L2Norm)
CDE_UNARY(sum_all, Op::SumAll)
CDE_UNARY(mean_all, Op::MeanAll)
#undef CDE_UNARY

NodeId Graph::log_softmax_rows(NodeId x) {
    CDE_SHAPE_CHECK(nodes_[x].value.rank() == 2, "log_softmax_rows expects rank-2 input");
    Node n;
    n.op = Op::LogSoftmaxRows;
    n.in = {x};
    n.n_in = 1;
    return push(std::move(n));
}

NodeId Graph::log_softmax_rows_excl_diag(NodeId x) {
    const Tensor& xv = nodes_[x].value;
    CDE_SHAPE_CHECK(xv.rank() == 2 && xv.rows() == xv.cols() && xv.rows() >= 2,
                    "log_softmax_rows_excl_diag expects square input with >=2 rows, got " +
                        xv.shape_str());
    Node n;
    n.op = Op::LogSoftmaxRowsExclDiag;
    n.in = {x};
    n.n_in = 1;
    return push(std::move(n));
}

NodeId Graph::row_normalize(NodeId x) {
    CDE_SHAPE_CHECK(nodes_[x].value.rank() == 2, "row_normalize expects rank-2 input");
    Node n;
    n.op = Op::RowNormalize;
    n.in = {x};
    n.n_in = 1;
    return push(std::move(n));
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    CDE_SHAPE_CHECK(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.cols(),
                    "concat_rows column mismatch: " + av.shape_str() + " vs " + bv.shape_str());
    Node n;
    n.op = Op::ConcatRows;
    n.in = {a, b};
    n.n_in = 2;
    return push(std::move(n));
}

NodeId Graph::cosine_sim(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    CDE_SHAPE_CHECK(av.size() == bv.size(), "cosine_sim size mismatch: " + av.shape_str() +
                                                " vs " + bv.shape_str());
    Node n;
    n.op = Op::CosineSim;
    n.in = {a, b};
    n.n_in = 2;
    return push(std::move(n));
}

NodeId Graph::topk_select(const Tensor& select, NodeId x, const Tensor& bwd_select) {
    const Tensor& xv = nodes_[x].value;
    CDE_SHAPE_CHECK(select.rank() == 2 && xv.rank() == 2 && select.cols() == xv.rows(),
                    "topk_select dims mismatch: " + select.shape_str() + " x " + xv.shape_str());
    if (!bwd_select.empty()) {
        CDE_SHAPE_CHECK(bwd_select.same_shape(select), "topk_select backward matrix shape mismatch");
    }
    Node n;
    n.op = Op::TopKSelect;
    n.in = {x};
    n.n_in = 1;
    n.aux = select;
    n.aux2 = bwd_select;
    return push(std::move(n));
}

void Graph::eval(Node& n) const {
    switch (n.op) {
    case Op::Leaf:
        return;
    case Op::Affine: {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& w = nodes_[n.in[1]].value;
        const Tensor& b = nodes_[n.in[2]].value;
        const std::size_t B = x.rows(), out = w.rows();
        if (n.value.size() != B * out) n.value = Tensor::zeros({B, out});
        mm_nt(x, w, n.value);
        double* O = n.value.data();
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < out; ++j) O[i * out + j] += b.at(j);
        return;
    }
    case Op::Matmul: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        if (n.value.size() != a.rows() * b.cols()) n.value = Tensor::zeros({a.rows(), b.cols()});
        mm(a, b, n.value);
        return;
    }
    case Op::MatmulNT: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        if (n.value.size() != a.rows() * b.rows()) n.value = Tensor::zeros({a.rows(), b.rows()});
        mm_nt(a, b, n.value);
        return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        if (!n.value.same_shape(a)) n.value = Tensor::zeros(a.shape());
        const double* A = a.data();
        const double* B = b.data();
        double* O = n.value.data();
        const std::size_t sz = a.size();
        if (n.op == Op::Add)
            for (std::size_t i = 0; i < sz; ++i) O[i] = A[i] + B[i];
        else if (n.op == Op::Sub)
            for (std::size_t i = 0; i < sz; ++i) O[i] = A[i] - B[i];
        else
            for (std::size_t i = 0; i < sz; ++i) O[i] = A[i] * B[i];
        return;
    }
    case Op::Scale: {
        const Tensor& x = nodes_[n.in[0]].value;
        if (!n.value.same_shape(x)) n.value = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) n.value.at(i) = n.scalar_arg * x.at(i);
        return;
    }
    case Op::Abs:
    case Op::Exp:
    case Op::Tanh:
    case Op::Relu: {
        const Tensor& x = nodes_[n.in[0]].value;
        if (!n.value.same_shape(x)) n.value = Tensor::zeros(x.shape());
        double* O = n.value.data();
        const double* X = x.data();
        const std::size_t sz = x.size();
        switch (n.op) {
        case Op::Abs:  for (std::size_t i = 0; i < sz; ++i) O[i] = std::fabs(X[i]); break;
        case Op::Exp:  for (std::size_t i = 0; i < sz; ++i) O[i] = std::exp(X[i]); break;
        case Op::Tanh: for (std::size_t i = 0; i < sz; ++i) O[i] = std::tanh(X[i]); break;
        default:       for (std::size_t i = 0; i < sz; ++i) O[i] = X[i] > 0.0 ? X[i] : 0.0; break;
        }
        return;
    }
    case Op::LogSoftmaxRows: {
        const Tensor& x = nodes_[n.in[0]].value;
        if (!n.value.same_shape(x)) n.value = Tensor::zeros(x.shape());
        const std::size_t R = x.rows(), C = x.cols();
        for (std::size_t i = 0; i < R; ++i) {
            const double* row = x.data() + i * C;
            double m = row[0];
            for (std::size_t j = 1; j < C; ++j) m = std::max(m, row[j]);
            double acc = 0.0;
            for (std::size_t j = 0; j < C; ++j) acc += std::exp(row[j] - m);
            const double lse = m + std::log(acc);
            double* out = n.value.data() + i * C;
            for (std::size_t j = 0; j < C; ++j) out[j] = row[j] - lse;
        }
        return;
    }
    case Op::LogSoftmaxRowsExclDiag: {
        const Tensor& x = nodes_[n.in[0]].value;
        if (!n.value.same_shape(x)) n.value = Tensor::zeros(x.shape());
        const std::size_t R = x.rows();
        for (std::size_t i = 0; i < R; ++i) {
            const double* row = x.data() + i * R;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < R; ++j)
                if (j != i) m = std::max(m, row[j]);
            double acc = 0.0;
            for (std::size_t j = 0; j < R; ++j)
                if (j != i) acc += std::exp(row[j] - m);
            const double lse = m + std::log(acc);
            double* out = n.value.data() + i * R;
            for (std::size_t j = 0; j < R; ++j) out[j] = (j == i) ? 0.0 : row[j] - lse;
        }
        return;
    }
    case Op::RowNormalize: {
        const Tensor& x = nodes_[n.in[0]].value;
        if (!n.value.same_shape(x)) n.value = Tensor::zeros(x.shape());
        const std::size_t R = x.rows(), C = x.cols();
        for (std::size_t i = 0; i < R; ++i) {
            const double* row = x.data() + i * C;
            const double inv = 1.0 / (row_l2(row, C) + kNormEps);
            double* out = n.value.data() + i * C;
            for (std::size_t j = 0; j < C; ++j) out[j] = row[j] * inv;
        }
        return;
    }
    case Op::L1Norm: {
        const Tensor& x = nodes_[n.in[0]].value;
        double acc = 0.0;
        for (double v : x.vec()) acc += std::fabs(v);
        n.value = Tensor::scalar(acc);
        return;
    }
    case Op::L2Norm: {
        n.value = Tensor::scalar(l2_of(nodes_[n.in[0]].value));
        return;
    }
    case Op::SumAll:
    case Op::MeanAll: {
        const Tensor& x = nodes_[n.in[0]].value;
        double acc = 0.0;
        for (double v : x.vec()) acc += v;
        n.value = Tensor::scalar(n.op == Op::SumAll ? acc : acc / static_cast<double>(x.size()));
        return;
    }
    case Op::ConcatRows: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        const std::size_t C = a.cols();
        if (n.value.size() != (a.rows() + b.rows()) * C)
            n.value = Tensor::zeros({a.rows() + b.rows(), C});
        std::copy(a.vec().begin(), a.vec().end(), n.value.vec().begin());
        std::copy(b.vec().begin(), b.vec().end(), n.value.vec().begin() + a.size());
        return;
    }
    case Op::CosineSim: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        double dot = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) dot += a.at(i) * b.at(i);
        const double na = l2_of(a), nb = l2_of(b);
        n.value = Tensor::scalar(dot / ((na + kNormEps) * (nb + kNormEps)));
        return;
    }
    case Op::TopKSelect: {
        const Tensor& x = nodes_[n.in[0]].value;
        if (n.value.size() != n.aux.rows() * x.cols())
            n.value = Tensor::zeros({n.aux.rows(), x.cols()});
        mm(n.aux, x, n.value);
        return;
    }
    }
}

const Tensor& Graph::grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) {
        throw NumericsError("no gradient on node " + describe(n) +
                            " (backward not run or node unreachable)");
    }
    return n.grad;
}

void Graph::backward(NodeId output) {
    Node& out = nodes_[output];
    if (out.value.size() != 1) {
        throw NumericsError("backward requires a scalar output, got shape " +
                            out.value.shape_str() + " on " + describe(out));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    out.grad = Tensor::full(out.value.shape(), 1.0);
    for (std::size_t idx = output + 1; idx-- > 0;) {
        Node& n = nodes_[idx];
        if (n.grad.empty() || n.op == Op::Leaf || !n.requires_grad) continue;
        accumulate(n);
        n.grad.ensure_finite("gradient of " + describe(n));
    }
}

namespace {
Tensor& grad_buf(Graph::Node& n) {
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}
} // namespace

void Graph::accumulate(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
    case Op::Leaf:
        return;
    case Op::Affine: {
        Node& xn = nodes_[n.in[0]];
        Node& wn = nodes_[n.in[1]];
        Node& bn = nodes_[n.in[2]];
        if (xn.requires_grad) mm_acc(g, wn.value, grad_buf(xn));
        if (wn.requires_grad) mm_tn_acc(g, xn.value, grad_buf(wn));
        if (bn.requires_grad) {
            Tensor& gb = grad_buf(bn);
            const std::size_t B = g.rows(), out = g.cols();
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < out; ++j) gb.at(j) += g.at(i, j);
        }
        return;
    }
    case Op::Matmul: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.requires_grad) mm_nt_acc(g, bn.value, grad_buf(an));
        if (bn.requires_grad) mm_tn_acc(an.value, g, grad_buf(bn));
        return;
    }
    case Op::MatmulNT: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.requires_grad) mm_acc(g, bn.value, grad_buf(an));
        if (bn.requires_grad) mm_tn_acc(g, an.value, grad_buf(bn));
        return;
    }
    case Op::Add:
    case Op::Sub: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.requires_grad) {
            Tensor& ga = grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga.at(i) += g.at(i);
        }
        if (bn.requires_grad) {
            Tensor& gb = grad_buf(bn);
            const double s = n.op == Op::Add ? 1.0 : -1.0;
            for (std::size_t i = 0; i < g.size(); ++i) gb.at(i) += s * g.at(i);
        }
        return;
    }
    case Op::Mul: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.requires_grad) {
            Tensor& ga = grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga.at(i) += g.at(i) * bn.value.at(i);
        }
        if (bn.requires_grad) {
            Tensor& gb = grad_buf(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb.at(i) += g.at(i) * an.value.at(i);
        }
        return;
    }
    case Op::Scale: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx.at(i) += n.scalar_arg * g.at(i);
        return;
    }
    case Op::Abs: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = xn.value.at(i);
            gx.at(i) += g.at(i) * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
        return;
    }
    case Op::Exp: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx.at(i) += g.at(i) * n.value.at(i);
        return;
    }
    case Op::Tanh: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = n.value.at(i);
            gx.at(i) += g.at(i) * (1.0 - y * y);
        }
        return;
    }
    case Op::Relu: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i)
            gx.at(i) += xn.value.at(i) > 0.0 ? g.at(i) : 0.0;
        return;
    }
    case Op::LogSoftmaxRows: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        const std::size_t R = g.rows(), C = g.cols();
        for (std::size_t i = 0; i < R; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < C; ++j) gsum += g.at(i, j);
            for (std::size_t j = 0; j < C; ++j)
                gx.at(i, j) += g.at(i, j) - std::exp(n.value.at(i, j)) * gsum;
        }
        return;
    }
    case Op::LogSoftmaxRowsExclDiag: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        const std::size_t R = g.rows();
        for (std::size_t i = 0; i < R; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < R; ++j)
                if (j != i) gsum += g.at(i, j);
            for (std::size_t j = 0; j < R; ++j) {
                if (j == i) continue; // diagonal output is a constant zero
                gx.at(i, j) += g.at(i, j) - std::exp(n.value.at(i, j)) * gsum;
            }
        }
        return;
    }
    case Op::RowNormalize: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        const std::size_t R = g.rows(), C = g.cols();
        for (std::size_t i = 0; i < R; ++i) {
            const double* x = xn.value.data() + i * C;
            const double* gr = g.data() + i * C;
            const double nrm = row_l2(x, C);
            const double inv = 1.0 / (nrm + kNormEps);
            double dot = 0.0;
            for (std::size_t j = 0; j < C; ++j) dot += x[j] * gr[j];
            // d(x/(n+eps)) = g/(n+eps) - x * (x.g) / (n * (n+eps)^2);
            // the second term vanishes in the limit n -> 0.
            const double corr = nrm > 0.0 ? dot * inv * inv / nrm : 0.0;
            double* out = gx.data() + i * C;
            for (std::size_t j = 0; j < C; ++j) out[j] += gr[j] * inv - x[j] * corr;
        }
        return;
    }
    case Op::L1Norm: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        const double gv = g.item();
        for (std::size_t i = 0; i < xn.value.size(); ++i) {
            const double x = xn.value.at(i);
            gx.at(i) += gv * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
        return;
    }
    case Op::L2Norm: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        const double nrm = n.value.item();
        if (nrm == 0.0) return;
        Tensor& gx = grad_buf(xn);
        const double gv = g.item() / nrm;
        for (std::size_t i = 0; i < xn.value.size(); ++i) gx.at(i) += gv * xn.value.at(i);
        return;
    }
    case Op::SumAll:
    case Op::MeanAll: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        Tensor& gx = grad_buf(xn);
        const double gv =
            n.op == Op::SumAll ? g.item() : g.item() / static_cast<double>(xn.value.size());
        for (std::size_t i = 0; i < xn.value.size(); ++i) gx.at(i) += gv;
        return;
    }
    case Op::ConcatRows: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.requires_grad) {
            Tensor& ga = grad_buf(an);
            for (std::size_t i = 0; i < an.value.size(); ++i) ga.at(i) += g.at(i);
        }
        if (bn.requires_grad) {
            Tensor& gb = grad_buf(bn);
            const std::size_t off = an.value.size();
            for (std::size_t i = 0; i < bn.value.size(); ++i) gb.at(i) += g.at(off + i);
        }
        return;
    }
    case Op::CosineSim: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        const Tensor& a = an.value;
        const Tensor& b = bn.value;
        const double na = l2_of(a), nb = l2_of(b);
        const double denom = (na + kNormEps) * (nb + kNormEps);
        const double s = n.value.item();
        const double gv = g.item();
        if (an.requires_grad) {
            Tensor& ga = grad_buf(an);
            const double corr = na > 0.0 ? s / (na * (na + kNormEps)) : 0.0;
            for (std::size_t i = 0; i < a.size(); ++i)
                ga.at(i) += gv * (b.at(i) / denom - corr * a.at(i));
        }
        if (bn.requires_grad) {
            Tensor& gb = grad_buf(bn);
            const double corr = nb > 0.0 ? s / (nb * (nb + kNormEps)) : 0.0;
            for (std::size_t i = 0; i < b.size(); ++i)
                gb.at(i) += gv * (a.at(i) / denom - corr * b.at(i));
        }
        return;
    }
    case Op::TopKSelect: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.requires_grad) return;
        const Tensor& sel = n.aux2.empty() ? n.aux : n.aux2;
        // gx += sel^T * g
        Tensor& gx = grad_buf(xn);
        const std::size_t R = sel.rows(), N = sel.cols(), C = g.cols();
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t t = 0; t < N; ++t) {
                const double sv = sel.at(i, t);
                if (sv == 0.0) continue;
                for (std::size_t j = 0; j < C; ++j) gx.at(t, j) += sv * g.at(i, j);
            }
        }
        return;
    }
    }
}

#undef CDE_SHAPE_CHECK

} // namespace cde
