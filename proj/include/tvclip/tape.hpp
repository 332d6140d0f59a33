#pragma once

// Reverse-mode gradient tape over dense arrays.
//
// Values are computed eagerly as nodes are recorded; backward() replays the
// tape in reverse and accumulates vector-Jacobian products into every node
// that can reach a requires-grad leaf. Leaves that cannot reach the loss
// keep an exactly-zero gradient. Every op checks its inputs' shapes and its
// output for non-finite values; a NaN/Inf anywhere is an error, not a state.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tvclip/array.hpp"

namespace tvclip {

constexpr double kLayerNormEps = 1e-5;

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    exp_,
    log_,
    abs_,
    square,
    sqrt_,
    reciprocal,
    gelu,
    matmul,
    matmul_nt,
    softmax_rows,
    log_softmax_rows,
    layernorm_rows,
    add_rowvec,
    mul_rowvec,
    mul_colvec,
    sum_axis0,
    mean_axis0,
    sum_axis1,
    mean_axis1,
    sum_all,
    mean_all,
    concat,
    slice,
    reshape,
    pick_per_row,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::add_scalar: return "add_scalar";
        case OpKind::exp_: return "exp";
        case OpKind::log_: return "log";
        case OpKind::abs_: return "abs";
        case OpKind::square: return "square";
        case OpKind::sqrt_: return "sqrt";
        case OpKind::reciprocal: return "reciprocal";
        case OpKind::gelu: return "gelu";
        case OpKind::matmul: return "matmul";
        case OpKind::matmul_nt: return "matmul_nt";
        case OpKind::softmax_rows: return "softmax_rows";
        case OpKind::log_softmax_rows: return "log_softmax_rows";
        case OpKind::layernorm_rows: return "layernorm_rows";
        case OpKind::add_rowvec: return "add_rowvec";
        case OpKind::mul_rowvec: return "mul_rowvec";
        case OpKind::mul_colvec: return "mul_colvec";
        case OpKind::sum_axis0: return "sum_axis0";
        case OpKind::mean_axis0: return "mean_axis0";
        case OpKind::sum_axis1: return "sum_axis1";
        case OpKind::mean_axis1: return "mean_axis1";
        case OpKind::sum_all: return "sum_all";
        case OpKind::mean_all: return "mean_all";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::reshape: return "reshape";
        case OpKind::pick_per_row: return "pick_per_row";
    }
    return "?";
}

template <typename Real>
class Tape;

template <typename Real>
struct Var {
    Tape<Real>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename Real>
class Tape {
  public:
    struct Node {
        OpKind op = OpKind::leaf;
        int p0 = -1, p1 = -1;
        int a0 = 0, a1 = 0, a2 = 0;  // axis / start / length, op dependent
        Real c = Real(0);            // scalar attribute
        Shape shape;
        std::vector<Real> val;
        std::vector<Real> aux;  // layernorm row stats (mu, rstd)
        std::vector<int> idx;   // pick_per_row indices
        std::string name;       // leaves only
        bool requires_grad = false;
        bool needs_grad = false;
    };

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(Var<Real> v) const { return nodes_[static_cast<size_t>(v.id)]; }

    const std::vector<Real>& val(Var<Real> v) const { return node(v).val; }
    const Shape& shape(Var<Real> v) const { return node(v).shape; }
    Real scalar(Var<Real> v) const {
        const Node& n = node(v);
        if (numel(n.shape) != 1) throw std::invalid_argument("scalar() on non-scalar node of shape " + shape_str(n.shape));
        return n.val[0];
    }

    Var<Real> leaf(const Array<Real>& a, bool requires_grad = false, std::string name = {}) {
        Node n;
        n.op = OpKind::leaf;
        n.shape = a.shape;
        n.val = a.data;
        n.name = std::move(name);
        n.requires_grad = requires_grad;
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }

    Var<Real> constant(const Array<Real>& a) { return leaf(a, false); }

    // ---- elementwise binary, identical shapes ----

    Var<Real> add(Var<Real> a, Var<Real> b) { return binary(OpKind::add, a, b); }
    Var<Real> sub(Var<Real> a, Var<Real> b) { return binary(OpKind::sub, a, b); }
    Var<Real> mul(Var<Real> a, Var<Real> b) { return binary(OpKind::mul, a, b); }

    // ---- elementwise unary ----

    Var<Real> scale(Var<Real> a, Real c) { return unary_c(OpKind::scale, a, c); }
    Var<Real> add_scalar(Var<Real> a, Real c) { return unary_c(OpKind::add_scalar, a, c); }
    Var<Real> exp(Var<Real> a) { return unary_c(OpKind::exp_, a, Real(0)); }
    Var<Real> log(Var<Real> a) { return unary_c(OpKind::log_, a, Real(0)); }
    Var<Real> abs(Var<Real> a) { return unary_c(OpKind::abs_, a, Real(0)); }
    Var<Real> square(Var<Real> a) { return unary_c(OpKind::square, a, Real(0)); }
    Var<Real> sqrt(Var<Real> a) { return unary_c(OpKind::sqrt_, a, Real(0)); }
    Var<Real> reciprocal(Var<Real> a) { return unary_c(OpKind::reciprocal, a, Real(0)); }
    Var<Real> gelu(Var<Real> a) { return unary_c(OpKind::gelu, a, Real(0)); }

    // ---- matrix products (rank-2 only) ----

    Var<Real> matmul(Var<Real> a, Var<Real> b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        require_rank2(na, "matmul lhs");
        require_rank2(nb, "matmul rhs");
        if (na.shape[1] != nb.shape[0])
            throw std::invalid_argument(std::string("matmul: inner extents differ, ") + shape_str(na.shape) + " vs " +
                                        shape_str(nb.shape));
        Node n;
        n.op = OpKind::matmul;
        n.p0 = a.id;
        n.p1 = b.id;
        n.shape = {na.shape[0], nb.shape[1]};
        n.val.assign(static_cast<size_t>(numel(n.shape)), Real(0));
        gemm_nn(na.val.data(), nb.val.data(), n.val.data(), na.shape[0], na.shape[1], nb.shape[1]);
        return push(std::move(n));
    }

    // a (m x k) times b^T where b is (n x k)
    Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        require_rank2(na, "matmul_nt lhs");
        require_rank2(nb, "matmul_nt rhs");
        if (na.shape[1] != nb.shape[1])
            throw std::invalid_argument(std::string("matmul_nt: trailing extents differ, ") + shape_str(na.shape) +
                                        " vs " + shape_str(nb.shape));
        Node n;
        n.op = OpKind::matmul_nt;
        n.p0 = a.id;
        n.p1 = b.id;
        n.shape = {na.shape[0], nb.shape[0]};
        n.val.assign(static_cast<size_t>(numel(n.shape)), Real(0));
        const int m = na.shape[0], k = na.shape[1], r = nb.shape[0];
        for (int i = 0; i < m; ++i) {
            const Real* ai = na.val.data() + static_cast<size_t>(i) * k;
            for (int j = 0; j < r; ++j) {
                const Real* bj = nb.val.data() + static_cast<size_t>(j) * k;
                Real acc = 0;
                for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
                n.val[static_cast<size_t>(i) * r + j] = acc;
            }
        }
        return push(std::move(n));
    }

    // ---- row-wise transforms (rank-2) ----

    Var<Real> softmax_rows(Var<Real> a) { return softmax_impl(a, false); }
    Var<Real> log_softmax_rows(Var<Real> a) { return softmax_impl(a, true); }

    Var<Real> layernorm_rows(Var<Real> a) {
        const Node& na = node(a);
        require_rank2(na, "layernorm_rows");
        const int r = na.shape[0], cdim = na.shape[1];
        Node n;
        n.op = OpKind::layernorm_rows;
        n.p0 = a.id;
        n.shape = na.shape;
        n.val.resize(na.val.size());
        n.aux.resize(static_cast<size_t>(r) * 2);
        for (int i = 0; i < r; ++i) {
            const Real* x = na.val.data() + static_cast<size_t>(i) * cdim;
            Real* y = n.val.data() + static_cast<size_t>(i) * cdim;
            Real mu = 0;
            for (int j = 0; j < cdim; ++j) mu += x[j];
            mu /= Real(cdim);
            Real var = 0;
            for (int j = 0; j < cdim; ++j) var += (x[j] - mu) * (x[j] - mu);
            var /= Real(cdim);
            Real rstd = Real(1) / std::sqrt(var + Real(kLayerNormEps));
            for (int j = 0; j < cdim; ++j) y[j] = (x[j] - mu) * rstd;
            n.aux[static_cast<size_t>(i) * 2] = mu;
            n.aux[static_cast<size_t>(i) * 2 + 1] = rstd;
        }
        return push(std::move(n));
    }

    // ---- broadcasts ----

    Var<Real> add_rowvec(Var<Real> a, Var<Real> v) { return rowvec_impl(OpKind::add_rowvec, a, v); }
    Var<Real> mul_rowvec(Var<Real> a, Var<Real> v) { return rowvec_impl(OpKind::mul_rowvec, a, v); }

    // each row of a (r x c) scaled by u[i] where u is (r x 1)
    Var<Real> mul_colvec(Var<Real> a, Var<Real> u) {
        const Node& na = node(a);
        const Node& nu = node(u);
        require_rank2(na, "mul_colvec lhs");
        if (nu.shape != Shape{na.shape[0], 1})
            throw std::invalid_argument(std::string("mul_colvec: column vector must be ") +
                                        shape_str({na.shape[0], 1}) + ", got " + shape_str(nu.shape));
        Node n;
        n.op = OpKind::mul_colvec;
        n.p0 = a.id;
        n.p1 = u.id;
        n.shape = na.shape;
        n.val.resize(na.val.size());
        const int r = na.shape[0], cdim = na.shape[1];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < cdim; ++j)
                n.val[static_cast<size_t>(i) * cdim + j] = na.val[static_cast<size_t>(i) * cdim + j] * nu.val[i];
        return push(std::move(n));
    }

    // ---- reductions ----

    Var<Real> sum_axis0(Var<Real> a) { return reduce0(OpKind::sum_axis0, a); }
    Var<Real> mean_axis0(Var<Real> a) { return reduce0(OpKind::mean_axis0, a); }
    Var<Real> sum_axis1(Var<Real> a) { return reduce1(OpKind::sum_axis1, a); }
    Var<Real> mean_axis1(Var<Real> a) { return reduce1(OpKind::mean_axis1, a); }

    Var<Real> sum_all(Var<Real> a) { return reduce_all(OpKind::sum_all, a); }
    Var<Real> mean_all(Var<Real> a) { return reduce_all(OpKind::mean_all, a); }

    // ---- structural ----

    Var<Real> concat(Var<Real> a, Var<Real> b, int axis) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape.size() != nb.shape.size())
            throw std::invalid_argument(std::string("concat: rank mismatch ") + shape_str(na.shape) + " vs " +
                                        shape_str(nb.shape));
        check_axis(na, axis, "concat");
        for (size_t d = 0; d < na.shape.size(); ++d)
            if (static_cast<int>(d) != axis && na.shape[d] != nb.shape[d])
                throw std::invalid_argument(std::string("concat: shapes differ off-axis, ") + shape_str(na.shape) +
                                            " vs " + shape_str(nb.shape));
        Node n;
        n.op = OpKind::concat;
        n.p0 = a.id;
        n.p1 = b.id;
        n.a0 = axis;
        n.shape = na.shape;
        n.shape[axis] += nb.shape[axis];
        n.val.resize(static_cast<size_t>(numel(n.shape)));
        const auto [outer, alen_a, inner] = axis_split(na.shape, axis);
        const int alen_b = nb.shape[axis];
        const int alen = alen_a + alen_b;
        for (std::int64_t o = 0; o < outer; ++o) {
            Real* dst = n.val.data() + o * alen * inner;
            std::copy_n(na.val.data() + o * alen_a * inner, alen_a * inner, dst);
            std::copy_n(nb.val.data() + o * alen_b * inner, alen_b * inner, dst + alen_a * inner);
        }
        return push(std::move(n));
    }

    Var<Real> slice(Var<Real> a, int axis, int start, int len) {
        const Node& na = node(a);
        check_axis(na, axis, "slice");
        if (start < 0 || len < 0 || start + len > na.shape[axis])
            throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                        ") out of bounds for axis " + std::to_string(axis) + " of " +
                                        shape_str(na.shape));
        Node n;
        n.op = OpKind::slice;
        n.p0 = a.id;
        n.a0 = axis;
        n.a1 = start;
        n.a2 = len;
        n.shape = na.shape;
        n.shape[axis] = len;
        n.val.resize(static_cast<size_t>(numel(n.shape)));
        const auto [outer, alen, inner] = axis_split(na.shape, axis);
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(na.val.data() + (o * alen + start) * inner, static_cast<std::int64_t>(len) * inner,
                        n.val.data() + o * len * inner);
        return push(std::move(n));
    }

    Var<Real> reshape(Var<Real> a, Shape s) {
        const Node& na = node(a);
        if (numel(s) != numel(na.shape))
            throw std::invalid_argument("reshape: element count differs, " + shape_str(na.shape) + " -> " +
                                        shape_str(s));
        Node n;
        n.op = OpKind::reshape;
        n.p0 = a.id;
        n.shape = std::move(s);
        n.val = na.val;
        return push(std::move(n));
    }

    // y[i, 0] = a[i, indices[i]]
    Var<Real> pick_per_row(Var<Real> a, const std::vector<int>& indices) {
        const Node& na = node(a);
        require_rank2(na, "pick_per_row");
        if (static_cast<int>(indices.size()) != na.shape[0])
            throw std::invalid_argument("pick_per_row: need one index per row, got " +
                                        std::to_string(indices.size()) + " for " + shape_str(na.shape));
        for (int i = 0; i < na.shape[0]; ++i)
            if (indices[i] < 0 || indices[i] >= na.shape[1])
                throw std::invalid_argument("pick_per_row: index " + std::to_string(indices[i]) + " at row " +
                                            std::to_string(i) + " out of range for " + shape_str(na.shape));
        Node n;
        n.op = OpKind::pick_per_row;
        n.p0 = a.id;
        n.shape = {na.shape[0], 1};
        n.idx = indices;
        n.val.resize(static_cast<size_t>(na.shape[0]));
        for (int i = 0; i < na.shape[0]; ++i) n.val[i] = na.val[static_cast<size_t>(i) * na.shape[1] + indices[i]];
        return push(std::move(n));
    }

    // ---- backward ----

    void backward(Var<Real> root) {
        const Node& r = node(root);
        if (numel(r.shape) != 1)
            throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(r.shape));
        grads_.assign(nodes_.size(), {});
        // requires-grad leaves always end up with a (possibly zero) gradient
        for (size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].requires_grad) grads_[i].assign(nodes_[i].val.size(), Real(0));
        ensure_grad(root.id);
        grads_[static_cast<size_t>(root.id)][0] = Real(1);
        for (int id = root.id; id >= 0; --id) {
            const Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.needs_grad || grads_[static_cast<size_t>(id)].empty()) continue;
            backprop_node(id);
        }
    }

    // gradient of the last backward() w.r.t. a node; exact zeros if unreached
    Array<Real> grad_array(Var<Real> v) const {
        const Node& n = node(v);
        Array<Real> out(n.shape);
        const auto& g = grads_[static_cast<size_t>(v.id)];
        if (!g.empty()) out.data = g;
        return out;
    }

  private:
    std::vector<Node> nodes_;
    std::vector<std::vector<Real>> grads_;

    Var<Real> push(Node&& n) {
        if (n.op != OpKind::leaf) {
            bool needs = false;
            if (n.p0 >= 0) needs = needs || nodes_[static_cast<size_t>(n.p0)].needs_grad;
            if (n.p1 >= 0) needs = needs || nodes_[static_cast<size_t>(n.p1)].needs_grad;
            n.needs_grad = needs;
        }
        for (Real v : n.val)
            if (!std::isfinite(v))
                throw std::runtime_error(std::string("non-finite value in output of ") + op_name(n.op));
        nodes_.push_back(std::move(n));
        return Var<Real>{this, static_cast<int>(nodes_.size()) - 1};
    }

    static void require_rank2(const Node& n, const char* what) {
        if (n.shape.size() != 2)
            throw std::invalid_argument(std::string(what) + ": rank-2 array required, got " + shape_str(n.shape));
    }

    static void check_axis(const Node& n, int axis, const char* what) {
        if (axis < 0 || axis >= static_cast<int>(n.shape.size()))
            throw std::invalid_argument(std::string(what) + ": axis " + std::to_string(axis) + " out of range for " +
                                        shape_str(n.shape));
    }

    static std::tuple<std::int64_t, int, std::int64_t> axis_split(const Shape& s, int axis) {
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= s[d];
        for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
        return {outer, s[axis], inner};
    }

    static void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            const Real* ai = a + static_cast<size_t>(i) * k;
            Real* ci = c + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const Real aip = ai[p];
                if (aip == Real(0)) continue;
                const Real* bp = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
            }
        }
    }

    Var<Real> binary(OpKind op, Var<Real> a, Var<Real> b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape != nb.shape)
            throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " + shape_str(na.shape) +
                                        " vs " + shape_str(nb.shape));
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.p1 = b.id;
        n.shape = na.shape;
        n.val.resize(na.val.size());
        switch (op) {
            case OpKind::add:
                for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = na.val[i] + nb.val[i];
                break;
            case OpKind::sub:
                for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = na.val[i] - nb.val[i];
                break;
            case OpKind::mul:
                for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = na.val[i] * nb.val[i];
                break;
            default:
                throw std::logic_error("binary: bad op");
        }
        return push(std::move(n));
    }

    Var<Real> unary_c(OpKind op, Var<Real> a, Real c) {
        const Node& na = node(a);
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.c = c;
        n.shape = na.shape;
        n.val.resize(na.val.size());
        for (size_t i = 0; i < n.val.size(); ++i) {
            const Real x = na.val[i];
            switch (op) {
                case OpKind::scale: n.val[i] = c * x; break;
                case OpKind::add_scalar: n.val[i] = x + c; break;
                case OpKind::exp_: n.val[i] = std::exp(x); break;
                case OpKind::log_: n.val[i] = std::log(x); break;
                case OpKind::abs_: n.val[i] = std::abs(x); break;
                case OpKind::square: n.val[i] = x * x; break;
                case OpKind::sqrt_:
                    if (x < Real(0))
                        throw std::invalid_argument("sqrt of negative value " + std::to_string(static_cast<double>(x)));
                    n.val[i] = std::sqrt(x);
                    break;
                case OpKind::reciprocal: n.val[i] = Real(1) / x; break;
                case OpKind::gelu: n.val[i] = gelu_fwd(x); break;
                default: throw std::logic_error("unary: bad op");
            }
        }
        return push(std::move(n));
    }

    // exact Gaussian-CDF form
    static Real gelu_fwd(Real x) {
        return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
    }
    static Real gelu_bwd(Real x) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
        const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.39894228040143267794);
        return cdf + x * pdf;
    }

    Var<Real> softmax_impl(Var<Real> a, bool log_form) {
        const Node& na = node(a);
        require_rank2(na, log_form ? "log_softmax_rows" : "softmax_rows");
        Node n;
        n.op = log_form ? OpKind::log_softmax_rows : OpKind::softmax_rows;
        n.p0 = a.id;
        n.shape = na.shape;
        n.val.resize(na.val.size());
        const int r = na.shape[0], cdim = na.shape[1];
        for (int i = 0; i < r; ++i) {
            const Real* x = na.val.data() + static_cast<size_t>(i) * cdim;
            Real* y = n.val.data() + static_cast<size_t>(i) * cdim;
            Real m = x[0];
            for (int j = 1; j < cdim; ++j) m = std::max(m, x[j]);
            Real z = 0;
            for (int j = 0; j < cdim; ++j) z += std::exp(x[j] - m);
            if (log_form) {
                const Real lz = std::log(z);
                for (int j = 0; j < cdim; ++j) y[j] = x[j] - m - lz;
            } else {
                const Real inv = Real(1) / z;
                for (int j = 0; j < cdim; ++j) y[j] = std::exp(x[j] - m) * inv;
            }
        }
        return push(std::move(n));
    }

    Var<Real> rowvec_impl(OpKind op, Var<Real> a, Var<Real> v) {
        const Node& na = node(a);
        const Node& nv = node(v);
        require_rank2(na, "rowvec broadcast lhs");
        if (nv.shape != Shape{1, na.shape[1]})
            throw std::invalid_argument(std::string(op_name(op)) + ": row vector must be " +
                                        shape_str({1, na.shape[1]}) + ", got " + shape_str(nv.shape));
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.p1 = v.id;
        n.shape = na.shape;
        n.val.resize(na.val.size());
        const int r = na.shape[0], cdim = na.shape[1];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < cdim; ++j) {
                const size_t at = static_cast<size_t>(i) * cdim + j;
                n.val[at] = op == OpKind::add_rowvec ? na.val[at] + nv.val[j] : na.val[at] * nv.val[j];
            }
        return push(std::move(n));
    }

    Var<Real> reduce0(OpKind op, Var<Real> a) {
        const Node& na = node(a);
        require_rank2(na, op_name(op));
        const int r = na.shape[0], cdim = na.shape[1];
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.shape = {1, cdim};
        n.val.assign(static_cast<size_t>(cdim), Real(0));
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < cdim; ++j) n.val[j] += na.val[static_cast<size_t>(i) * cdim + j];
        if (op == OpKind::mean_axis0)
            for (int j = 0; j < cdim; ++j) n.val[j] /= Real(r);
        return push(std::move(n));
    }

    Var<Real> reduce1(OpKind op, Var<Real> a) {
        const Node& na = node(a);
        require_rank2(na, op_name(op));
        const int r = na.shape[0], cdim = na.shape[1];
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.shape = {r, 1};
        n.val.assign(static_cast<size_t>(r), Real(0));
        for (int i = 0; i < r; ++i) {
            Real acc = 0;
            for (int j = 0; j < cdim; ++j) acc += na.val[static_cast<size_t>(i) * cdim + j];
            n.val[i] = op == OpKind::mean_axis1 ? acc / Real(cdim) : acc;
        }
        return push(std::move(n));
    }

    Var<Real> reduce_all(OpKind op, Var<Real> a) {
        const Node& na = node(a);
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.shape = {1, 1};
        Real acc = 0;
        for (Real v : na.val) acc += v;
        n.val = {op == OpKind::mean_all ? acc / Real(na.val.size()) : acc};
        return push(std::move(n));
    }

    std::vector<Real>& ensure_grad(int id) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.empty()) g.assign(nodes_[static_cast<size_t>(id)].val.size(), Real(0));
        return g;
    }

    bool wants_grad(int id) const { return id >= 0 && nodes_[static_cast<size_t>(id)].needs_grad; }

    void backprop_node(int id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        const std::vector<Real>& g = grads_[static_cast<size_t>(id)];
        const Node* pa = n.p0 >= 0 ? &nodes_[static_cast<size_t>(n.p0)] : nullptr;
        const Node* pb = n.p1 >= 0 ? &nodes_[static_cast<size_t>(n.p1)] : nullptr;
        const bool wa = wants_grad(n.p0);
        const bool wb = wants_grad(n.p1);

        switch (n.op) {
            case OpKind::leaf:
                break;
            case OpKind::add: {
                if (wa) axpy(ensure_grad(n.p0), g, Real(1));
                if (wb) axpy(ensure_grad(n.p1), g, Real(1));
                break;
            }
            case OpKind::sub: {
                if (wa) axpy(ensure_grad(n.p0), g, Real(1));
                if (wb) axpy(ensure_grad(n.p1), g, Real(-1));
                break;
            }
            case OpKind::mul: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->val[i];
                }
                if (wb) {
                    auto& gb = ensure_grad(n.p1);
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->val[i];
                }
                break;
            }
            case OpKind::scale: {
                if (wa) axpy(ensure_grad(n.p0), g, n.c);
                break;
            }
            case OpKind::add_scalar: {
                if (wa) axpy(ensure_grad(n.p0), g, Real(1));
                break;
            }
            case OpKind::exp_: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.val[i];
                }
                break;
            }
            case OpKind::log_: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pa->val[i];
                }
                break;
            }
            case OpKind::abs_: {
                // subgradient 0 at 0
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) {
                        const Real x = pa->val[i];
                        ga[i] += x > Real(0) ? g[i] : (x < Real(0) ? -g[i] : Real(0));
                    }
                }
                break;
            }
            case OpKind::square: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += Real(2) * g[i] * pa->val[i];
                }
                break;
            }
            case OpKind::sqrt_: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (Real(2) * n.val[i]);
                }
                break;
            }
            case OpKind::reciprocal: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * n.val[i] * n.val[i];
                }
                break;
            }
            case OpKind::gelu: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_bwd(pa->val[i]);
                }
                break;
            }
            case OpKind::matmul: {
                const int m = pa->shape[0], k = pa->shape[1], c = pb->shape[1];
                if (wa) {
                    auto& ga = ensure_grad(n.p0);  // g (m x c) * b^T (c x k)
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            Real acc = 0;
                            for (int j = 0; j < c; ++j)
                                acc += g[static_cast<size_t>(i) * c + j] * pb->val[static_cast<size_t>(p) * c + j];
                            ga[static_cast<size_t>(i) * k + p] += acc;
                        }
                }
                if (wb) {
                    auto& gb = ensure_grad(n.p1);  // a^T (k x m) * g (m x c)
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            const Real aip = pa->val[static_cast<size_t>(i) * k + p];
                            if (aip == Real(0)) continue;
                            for (int j = 0; j < c; ++j)
                                gb[static_cast<size_t>(p) * c + j] += aip * g[static_cast<size_t>(i) * c + j];
                        }
                }
                break;
            }
            case OpKind::matmul_nt: {
                const int m = pa->shape[0], k = pa->shape[1], r = pb->shape[0];
                if (wa) {
                    auto& ga = ensure_grad(n.p0);  // g (m x r) * b (r x k)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < r; ++j) {
                            const Real gij = g[static_cast<size_t>(i) * r + j];
                            if (gij == Real(0)) continue;
                            for (int p = 0; p < k; ++p)
                                ga[static_cast<size_t>(i) * k + p] += gij * pb->val[static_cast<size_t>(j) * k + p];
                        }
                }
                if (wb) {
                    auto& gb = ensure_grad(n.p1);  // g^T (r x m) * a (m x k)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < r; ++j) {
                            const Real gij = g[static_cast<size_t>(i) * r + j];
                            if (gij == Real(0)) continue;
                            for (int p = 0; p < k; ++p)
                                gb[static_cast<size_t>(j) * k + p] += gij * pa->val[static_cast<size_t>(i) * k + p];
                        }
                }
                break;
            }
            case OpKind::softmax_rows: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const int r = n.shape[0], cdim = n.shape[1];
                    for (int i = 0; i < r; ++i) {
                        const Real* y = n.val.data() + static_cast<size_t>(i) * cdim;
                        const Real* gi = g.data() + static_cast<size_t>(i) * cdim;
                        Real dot = 0;
                        for (int j = 0; j < cdim; ++j) dot += gi[j] * y[j];
                        Real* out = ga.data() + static_cast<size_t>(i) * cdim;
                        for (int j = 0; j < cdim; ++j) out[j] += y[j] * (gi[j] - dot);
                    }
                }
                break;
            }
            case OpKind::log_softmax_rows: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const int r = n.shape[0], cdim = n.shape[1];
                    for (int i = 0; i < r; ++i) {
                        const Real* y = n.val.data() + static_cast<size_t>(i) * cdim;
                        const Real* gi = g.data() + static_cast<size_t>(i) * cdim;
                        Real gsum = 0;
                        for (int j = 0; j < cdim; ++j) gsum += gi[j];
                        Real* out = ga.data() + static_cast<size_t>(i) * cdim;
                        for (int j = 0; j < cdim; ++j) out[j] += gi[j] - std::exp(y[j]) * gsum;
                    }
                }
                break;
            }
            case OpKind::layernorm_rows: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const int r = n.shape[0], cdim = n.shape[1];
                    for (int i = 0; i < r; ++i) {
                        const Real rstd = n.aux[static_cast<size_t>(i) * 2 + 1];
                        const Real* y = n.val.data() + static_cast<size_t>(i) * cdim;
                        const Real* gi = g.data() + static_cast<size_t>(i) * cdim;
                        Real gmean = 0, gymean = 0;
                        for (int j = 0; j < cdim; ++j) {
                            gmean += gi[j];
                            gymean += gi[j] * y[j];
                        }
                        gmean /= Real(cdim);
                        gymean /= Real(cdim);
                        Real* out = ga.data() + static_cast<size_t>(i) * cdim;
                        for (int j = 0; j < cdim; ++j) out[j] += rstd * (gi[j] - gmean - y[j] * gymean);
                    }
                }
                break;
            }
            case OpKind::add_rowvec: {
                const int r = n.shape[0], cdim = n.shape[1];
                if (wa) axpy(ensure_grad(n.p0), g, Real(1));
                if (wb) {
                    auto& gv = ensure_grad(n.p1);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cdim; ++j) gv[j] += g[static_cast<size_t>(i) * cdim + j];
                }
                break;
            }
            case OpKind::mul_rowvec: {
                const int r = n.shape[0], cdim = n.shape[1];
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cdim; ++j) {
                            const size_t at = static_cast<size_t>(i) * cdim + j;
                            ga[at] += g[at] * pb->val[j];
                        }
                }
                if (wb) {
                    auto& gv = ensure_grad(n.p1);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cdim; ++j) {
                            const size_t at = static_cast<size_t>(i) * cdim + j;
                            gv[j] += g[at] * pa->val[at];
                        }
                }
                break;
            }
            case OpKind::mul_colvec: {
                const int r = n.shape[0], cdim = n.shape[1];
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cdim; ++j) {
                            const size_t at = static_cast<size_t>(i) * cdim + j;
                            ga[at] += g[at] * pb->val[i];
                        }
                }
                if (wb) {
                    auto& gu = ensure_grad(n.p1);
                    for (int i = 0; i < r; ++i) {
                        Real acc = 0;
                        for (int j = 0; j < cdim; ++j) {
                            const size_t at = static_cast<size_t>(i) * cdim + j;
                            acc += g[at] * pa->val[at];
                        }
                        gu[i] += acc;
                    }
                }
                break;
            }
            case OpKind::sum_axis0:
            case OpKind::mean_axis0: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const int r = pa->shape[0], cdim = pa->shape[1];
                    const Real f = n.op == OpKind::mean_axis0 ? Real(1) / Real(r) : Real(1);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cdim; ++j) ga[static_cast<size_t>(i) * cdim + j] += f * g[j];
                }
                break;
            }
            case OpKind::sum_axis1:
            case OpKind::mean_axis1: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const int r = pa->shape[0], cdim = pa->shape[1];
                    const Real f = n.op == OpKind::mean_axis1 ? Real(1) / Real(cdim) : Real(1);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cdim; ++j) ga[static_cast<size_t>(i) * cdim + j] += f * g[i];
                }
                break;
            }
            case OpKind::sum_all:
            case OpKind::mean_all: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const Real f = n.op == OpKind::mean_all ? g[0] / Real(pa->val.size()) : g[0];
                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += f;
                }
                break;
            }
            case OpKind::concat: {
                const int axis = n.a0;
                const auto [outer, alen_a, inner] = axis_split(pa->shape, axis);
                const int alen_b = pb->shape[axis];
                const int alen = alen_a + alen_b;
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < alen_a * inner; ++i)
                            ga[o * alen_a * inner + i] += g[o * alen * inner + i];
                }
                if (wb) {
                    auto& gb = ensure_grad(n.p1);
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < alen_b * inner; ++i)
                            gb[o * alen_b * inner + i] += g[(o * alen + alen_a) * inner + i];
                }
                break;
            }
            case OpKind::slice: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const auto [outer, alen, inner] = axis_split(pa->shape, n.a0);
                    const int start = n.a1, len = n.a2;
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < len * inner; ++i)
                            ga[(o * alen + start) * inner + i] += g[o * len * inner + i];
                }
                break;
            }
            case OpKind::reshape: {
                if (wa) axpy(ensure_grad(n.p0), g, Real(1));
                break;
            }
            case OpKind::pick_per_row: {
                if (wa) {
                    auto& ga = ensure_grad(n.p0);
                    const int cdim = pa->shape[1];
                    for (int i = 0; i < pa->shape[0]; ++i)
                        ga[static_cast<size_t>(i) * cdim + n.idx[i]] += g[i];
                }
                break;
            }
        }
    }

    static void axpy(std::vector<Real>& y, const std::vector<Real>& x, Real a) {
        for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
    }
};

}  // namespace tvclip
