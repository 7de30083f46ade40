#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lifted3d/core.hpp"

namespace lifted3d {

class Tape;

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

inline long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

// Immutable dense tensor. A tensor either lives on a tape (node_ >= 0), in
// which case gradients can flow to and through it, or is a plain constant.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(std::vector<int> shape, std::vector<real> data) {
        Tensor t;
        require(numel_of(shape) == static_cast<long long>(data.size()),
                "tensor data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<real>>(std::move(data));
        return t;
    }

    static Tensor scalar(real v) { return constant({}, {v}); }

    static Tensor full(std::vector<int> shape, real v) {
        std::vector<real> d(static_cast<size_t>(numel_of(shape)), v);
        return constant(std::move(shape), std::move(d));
    }

    static Tensor zeros(std::vector<int> shape) { return full(std::move(shape), 0.0); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    long long numel() const { return numel_of(shape_); }

    const std::vector<real>& data() const { return *data_; }
    const std::shared_ptr<std::vector<real>>& data_ptr() const { return data_; }
    real operator[](long long i) const { return (*data_)[static_cast<size_t>(i)]; }

    real scalar_value() const {
        require(numel() == 1, "scalar_value on tensor of shape " + shape_str(shape_));
        return (*data_)[0];
    }

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    bool defined() const { return data_ != nullptr; }

private:
    friend class Tape;
    std::shared_ptr<std::vector<real>> data_;
    std::vector<int> shape_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Reverse-mode tape. Nodes are whole-tensor operations recorded in execution
// order, which is automatically a topological order; backward walks them in
// reverse and accumulates (sums) gradients across fan-out.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // A leaf whose gradient will be requested after backward. Shares the
    // caller's buffer; the tape never mutates values.
    Tensor leaf(std::vector<int> shape, std::shared_ptr<std::vector<real>> data,
                const char* name = "leaf") {
        require(numel_of(shape) == static_cast<long long>(data->size()),
                std::string("leaf data does not match shape ") + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        t.tape_ = this;
        t.node_ = add_node(t.data_, t.shape_, {}, nullptr, name);
        return t;
    }

    Tensor leaf(std::vector<int> shape, std::vector<real> data, const char* name = "leaf") {
        return leaf(std::move(shape), std::make_shared<std::vector<real>>(std::move(data)), name);
    }

    // Record an op result. `parents` may contain -1 entries for constant
    // inputs; the backward fn must skip those.
    Tensor record(std::vector<int> shape, std::vector<real> data, std::vector<int> parents,
                  BackwardFn backward, const char* name) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<real>>(std::move(data));
        t.tape_ = this;
        t.node_ = add_node(t.data_, t.shape_, std::move(parents), std::move(backward), name);
        if (check_finite) {
            for (real v : *t.data_)
            if (!std::isfinite(v))
                throw numeric_error(std::string("non-finite value in output of ") + name +
                                    " (node " + std::to_string(t.node_) + ")");
        }
        return t;
    }

    void backward(const Tensor& loss) {
        require(loss.tape_ == this && loss.node_ >= 0, "backward: loss is not on this tape");
        require(loss.numel() == 1 && loss.rank() == 0,
                "backward: loss must be a scalar (shape []), got " + shape_str(loss.shape_));
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<size_t>(loss.node_)] = {1.0};
        std::vector<char> needed(nodes_.size(), 0);
        needed[static_cast<size_t>(loss.node_)] = 1;
        for (int id = loss.node_; id >= 0; --id) {
            if (!needed[static_cast<size_t>(id)]) continue;
            for (int p : nodes_[static_cast<size_t>(id)].parents)
                if (p >= 0) needed[static_cast<size_t>(p)] = 1;
        }
        for (int id = loss.node_; id >= 0; --id) {
            auto& node = nodes_[static_cast<size_t>(id)];
            if (!needed[static_cast<size_t>(id)] || grads_[static_cast<size_t>(id)].empty())
                continue;
            if (node.backward) node.backward(*this, id);
        }
    }

    // Gradient of a tensor on this tape; zeros if it never received one.
    std::vector<real> grad(const Tensor& t) const {
        require(t.tape_ == this && t.node_ >= 0, "grad: tensor is not on this tape");
        const auto& g = grads_[static_cast<size_t>(t.node_)];
        if (g.empty()) return std::vector<real>(static_cast<size_t>(t.numel()), 0.0);
        return g;
    }

    // Accumulation buffer for a parent node, allocated on first touch.
    std::vector<real>& grad_buf(int id) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.empty()) g.assign(nodes_[static_cast<size_t>(id)].value->size(), 0.0);
        return g;
    }

    const std::vector<real>& grad_of(int id) const { return grads_[static_cast<size_t>(id)]; }
    const std::vector<real>& value_of(int id) const { return *nodes_[static_cast<size_t>(id)].value; }
    const std::vector<int>& shape_of(int id) const { return nodes_[static_cast<size_t>(id)].shape; }
    const char* name_of(int id) const { return nodes_[static_cast<size_t>(id)].name; }
    size_t size() const { return nodes_.size(); }

    // Scans forward values for the first non-finite entry (diagnostics).
    int first_non_finite() const {
        for (size_t i = 0; i < nodes_.size(); ++i)
            for (real v : *nodes_[i].value)
                if (!std::isfinite(v)) return static_cast<int>(i);
        return -1;
    }

    bool check_finite = false;

private:
    struct Node {
        std::shared_ptr<std::vector<real>> value;
        std::vector<int> shape;
        std::vector<int> parents;
        BackwardFn backward;
        const char* name;
    };

    int add_node(std::shared_ptr<std::vector<real>> value, std::vector<int> shape,
                 std::vector<int> parents, BackwardFn backward, const char* name) {
        nodes_.push_back({std::move(value), std::move(shape), std::move(parents),
                          std::move(backward), name});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<real>> grads_;
};

namespace detail {

inline Tape* tape_of(std::initializer_list<const Tensor*> ts) {
    Tape* tp = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tp == nullptr) tp = t->tape();
        else require(tp == t->tape(), "operands live on different tapes");
    }
    return tp;
}

inline int node_or_neg1(const Tensor& t) { return t.on_tape() ? t.node() : -1; }

}  // namespace detail

// Detach: same values, no tape connection.
inline Tensor detach(const Tensor& t) {
    Tensor r = Tensor::constant(t.shape(), t.data());
    return r;
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

// dfdx receives (x, y) and returns dy/dx at that element.
template <class F, class DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF dfdx) {
    const auto& xd = x.data();
    std::vector<real> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = x.node();
    auto xptr = x.data_ptr();
    return tp->record(
        x.shape(), std::move(out), {px},
        [px, xptr, dfdx](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& y = t.value_of(self);
            auto& gx = t.grad_buf(px);
            const auto& xv = *xptr;
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], y[i]);
        },
        name);
}

inline Tensor neg(const Tensor& x) {
    return unary_op(x, "neg", [](real v) { return -v; }, [](real, real) { return -1.0; });
}
inline Tensor abs_op(const Tensor& x) {
    return unary_op(x, "abs", [](real v) { return std::fabs(v); },
                    [](real v, real) { return v >= 0 ? 1.0 : -1.0; });
}
inline Tensor square(const Tensor& x) {
    return unary_op(x, "square", [](real v) { return v * v; },
                    [](real v, real) { return 2.0 * v; });
}
inline Tensor sqrt_op(const Tensor& x) {
    return unary_op(x, "sqrt", [](real v) { return std::sqrt(v); },
                    [](real, real y) { return 0.5 / y; });
}
inline Tensor exp_op(const Tensor& x) {
    return unary_op(x, "exp", [](real v) { return std::exp(v); },
                    [](real, real y) { return y; });
}
inline Tensor tanh_op(const Tensor& x) {
    return unary_op(x, "tanh", [](real v) { return std::tanh(v); },
                    [](real, real y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& x) {
    return unary_op(x, "sigmoid", [](real v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](real, real y) { return y * (1.0 - y); });
}
inline Tensor relu(const Tensor& x) {
    return unary_op(x, "relu", [](real v) { return v > 0 ? v : 0.0; },
                    [](real v, real) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor leaky_relu(const Tensor& x, real slope = 0.2) {
    return unary_op(x, "leaky_relu", [slope](real v) { return v > 0 ? v : slope * v; },
                    [slope](real v, real) { return v > 0 ? 1.0 : slope; });
}
inline Tensor sin_op(const Tensor& x) {
    return unary_op(x, "sin", [](real v) { return std::sin(v); },
                    [](real v, real) { return std::cos(v); });
}
inline Tensor cos_op(const Tensor& x) {
    return unary_op(x, "cos", [](real v) { return std::cos(v); },
                    [](real v, real) { return -std::sin(v); });
}
inline Tensor max_with(const Tensor& x, real floor_v) {
    return unary_op(x, "max_with", [floor_v](real v) { return v > floor_v ? v : floor_v; },
                    [floor_v](real v, real) { return v > floor_v ? 1.0 : 0.0; });
}
inline Tensor add_const(const Tensor& x, real c) {
    return unary_op(x, "add_const", [c](real v) { return v + c; },
                    [](real, real) { return 1.0; });
}
inline Tensor mul_const(const Tensor& x, real c) {
    return unary_op(x, "mul_const", [c](real v) { return v * c; },
                    [c](real, real) { return c; });
}

// Elementwise multiply by a same-shape constant vector (no gradient to it).
inline Tensor mul_constvec(const Tensor& x, const std::vector<real>& c, const char* name = "mul_constvec") {
    require(static_cast<long long>(c.size()) == x.numel(), "mul_constvec: size mismatch");
    const auto& xd = x.data();
    std::vector<real> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * c[i];
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = x.node();
    auto cc = c;  // captured copy
    return tp->record(
        x.shape(), std::move(out), {px},
        [px, cc](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * cc[i];
        },
        name);
}

// ---------------------------------------------------------------------------
// elementwise binary ops (same shape, or scalar on either side)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { SameShape, ScalarLhs, ScalarRhs };

inline BinKind bin_kind(const Tensor& a, const Tensor& b, const char* name) {
    if (a.shape() == b.shape()) return BinKind::SameShape;
    if (a.numel() == 1) return BinKind::ScalarLhs;
    if (b.numel() == 1) return BinKind::ScalarRhs;
    throw contract_error(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// f(a,b); dfa/dfb give partials as functions of (a, b).
template <class F, class DFA, class DFB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DFA dfa, DFB dfb) {
    auto kind = detail::bin_kind(a, b, name);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<int> oshape = (kind == detail::BinKind::ScalarLhs) ? b.shape() : a.shape();
    size_t n = static_cast<size_t>(numel_of(oshape));
    std::vector<real> out(n);
    for (size_t i = 0; i < n; ++i) {
        real av = (kind == detail::BinKind::ScalarLhs) ? ad[0] : ad[i];
        real bv = (kind == detail::BinKind::ScalarRhs) ? bd[0] : bd[i];
        out[i] = f(av, bv);
    }
    Tape* tp = detail::tape_of({&a, &b});
    if (!tp) return Tensor::constant(std::move(oshape), std::move(out));
    int pa = detail::node_or_neg1(a), pb = detail::node_or_neg1(b);
    auto aptr = a.data_ptr();
    auto bptr = b.data_ptr();
    return tp->record(
        std::move(oshape), std::move(out), {pa, pb},
        [pa, pb, aptr, bptr, kind, dfa, dfb](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& av = *aptr;
            const auto& bv = *bptr;
            if (pa >= 0) {
                auto& ga = t.grad_buf(pa);
                for (size_t i = 0; i < g.size(); ++i) {
                    real x = (kind == detail::BinKind::ScalarLhs) ? av[0] : av[i];
                    real y = (kind == detail::BinKind::ScalarRhs) ? bv[0] : bv[i];
                    real d = g[i] * dfa(x, y);
                    if (kind == detail::BinKind::ScalarLhs) ga[0] += d;
                    else ga[i] += d;
                }
            }
            if (pb >= 0) {
                auto& gb = t.grad_buf(pb);
                for (size_t i = 0; i < g.size(); ++i) {
                    real x = (kind == detail::BinKind::ScalarLhs) ? av[0] : av[i];
                    real y = (kind == detail::BinKind::ScalarRhs) ? bv[0] : bv[i];
                    real d = g[i] * dfb(x, y);
                    if (kind == detail::BinKind::ScalarRhs) gb[0] += d;
                    else gb[i] += d;
                }
            }
        },
        name);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](real x, real y) { return x + y; },
                     [](real, real) { return 1.0; }, [](real, real) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](real x, real y) { return x - y; },
                     [](real, real) { return 1.0; }, [](real, real) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](real x, real y) { return x * y; },
                     [](real, real y) { return y; }, [](real x, real) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "div", [](real x, real y) { return x / y; },
                     [](real, real y) { return 1.0 / y; },
                     [](real x, real y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    const auto& xd = x.data();
    real s = 0.0;
    for (real v : xd) s += v;
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::scalar(s);
    int px = x.node();
    return tp->record(
        {}, {s}, {px},
        [px](Tape& t, int self) {
            real g = t.grad_of(self)[0];
            auto& gx = t.grad_buf(px);
            for (auto& v : gx) v += g;
        },
        "sum_all");
}

inline Tensor mean_all(const Tensor& x) {
    real inv = 1.0 / static_cast<real>(x.numel());
    return mul_const(sum_all(x), inv);
}

// ---------------------------------------------------------------------------
// shape / indexing ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
    require(numel_of(shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    if (!x.on_tape()) return Tensor::constant(std::move(shape), x.data());
    Tape* tp = x.tape();
    int px = x.node();
    return tp->record(
        std::move(shape), x.data(), {px},
        [px](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        },
        "reshape");
}

// single element -> scalar tensor
inline Tensor index(const Tensor& x, int i) {
    require(i >= 0 && i < x.numel(), "index out of range");
    Tape* tp = detail::tape_of({&x});
    real v = x[i];
    if (!tp) return Tensor::scalar(v);
    int px = x.node();
    return tp->record(
        {}, {v}, {px},
        [px, i](Tape& t, int self) { t.grad_buf(px)[static_cast<size_t>(i)] += t.grad_of(self)[0]; },
        "index");
}

// contiguous range [a, b) of a rank-1 tensor
inline Tensor slice(const Tensor& x, int a, int b) {
    require(x.rank() == 1, "slice expects rank-1 tensor");
    require(0 <= a && a <= b && b <= x.dim(0), "slice range invalid");
    std::vector<real> out(x.data().begin() + a, x.data().begin() + b);
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant({b - a}, std::move(out));
    int px = x.node();
    return tp->record(
        {b - a}, std::move(out), {px},
        [px, a](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>(a) + i] += g[i];
        },
        "slice");
}

inline Tensor concat1d(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat1d: empty input");
    std::vector<real> out;
    std::vector<int> pnodes;
    std::vector<int> sizes;
    Tape* tp = nullptr;
    for (const auto& p : parts) {
        require(p.rank() <= 1, "concat1d expects scalars or rank-1 tensors");
        out.insert(out.end(), p.data().begin(), p.data().end());
        pnodes.push_back(detail::node_or_neg1(p));
        sizes.push_back(static_cast<int>(p.numel()));
        if (p.on_tape()) {
            require(tp == nullptr || tp == p.tape(), "concat1d: mixed tapes");
            tp = p.tape();
        }
    }
    int total = static_cast<int>(out.size());
    if (!tp) return Tensor::constant({total}, std::move(out));
    return tp->record(
        {total}, std::move(out), pnodes,
        [pnodes, sizes](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            size_t off = 0;
            for (size_t k = 0; k < pnodes.size(); ++k) {
                if (pnodes[k] >= 0) {
                    auto& gp = t.grad_buf(pnodes[k]);
                    for (int i = 0; i < sizes[k]; ++i) gp[static_cast<size_t>(i)] += g[off + static_cast<size_t>(i)];
                }
                off += static_cast<size_t>(sizes[k]);
            }
        },
        "concat1d");
}

// Flip along one axis (e.g. axis=1 of [H,W,C] flips columns).
inline Tensor flip_axis(const Tensor& x, int axis) {
    require(axis >= 0 && axis < x.rank(), "flip_axis: bad axis");
    const auto& s = x.shape();
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<size_t>(i)];
    long long n_ax = s[static_cast<size_t>(axis)];
    const auto& xd = x.data();
    std::vector<real> out(xd.size());
    for (long long o = 0; o < outer; ++o)
        for (long long a = 0; a < n_ax; ++a) {
            const real* src = xd.data() + (o * n_ax + a) * inner;
            real* dst = out.data() + (o * n_ax + (n_ax - 1 - a)) * inner;
            std::copy(src, src + inner, dst);
        }
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = x.node();
    return tp->record(
        x.shape(), std::move(out), {px},
        [px, outer, n_ax, inner](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (long long o = 0; o < outer; ++o)
                for (long long a = 0; a < n_ax; ++a) {
                    const real* src = g.data() + (o * n_ax + (n_ax - 1 - a)) * inner;
                    real* dst = gx.data() + (o * n_ax + a) * inner;
                    for (long long i = 0; i < inner; ++i) dst[i] += src[i];
                }
        },
        "flip_axis");
}

// Stack K same-shape [..] tensors into [.., K] (channels-last).
inline Tensor stack_last(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "stack_last: empty input");
    const auto& s0 = xs[0].shape();
    for (const auto& x : xs) require(x.shape() == s0, "stack_last: shape mismatch");
    int k = static_cast<int>(xs.size());
    long long n = xs[0].numel();
    std::vector<real> out(static_cast<size_t>(n * k));
    for (int c = 0; c < k; ++c) {
        const auto& xd = xs[static_cast<size_t>(c)].data();
        for (long long i = 0; i < n; ++i) out[static_cast<size_t>(i * k + c)] = xd[static_cast<size_t>(i)];
    }
    std::vector<int> oshape = s0;
    oshape.push_back(k);
    Tape* tp = nullptr;
    std::vector<int> pnodes;
    for (const auto& x : xs) {
        pnodes.push_back(detail::node_or_neg1(x));
        if (x.on_tape()) tp = x.tape();
    }
    if (!tp) return Tensor::constant(std::move(oshape), std::move(out));
    return tp->record(
        std::move(oshape), std::move(out), pnodes,
        [pnodes, n, k](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            for (int c = 0; c < k; ++c) {
                if (pnodes[static_cast<size_t>(c)] < 0) continue;
                auto& gx = t.grad_buf(pnodes[static_cast<size_t>(c)]);
                for (long long i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i * k + c)];
            }
        },
        "stack_last");
}

// Select channel c of a channels-last tensor [.., K] -> [..].
inline Tensor chan(const Tensor& x, int c) {
    require(x.rank() >= 1, "chan: rank-0 input");
    int k = x.dim(x.rank() - 1);
    require(c >= 0 && c < k, "chan: channel out of range");
    long long n = x.numel() / k;
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(n));
    for (long long i = 0; i < n; ++i) out[static_cast<size_t>(i)] = xd[static_cast<size_t>(i * k + c)];
    std::vector<int> oshape(x.shape().begin(), x.shape().end() - 1);
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(std::move(oshape), std::move(out));
    int px = x.node();
    return tp->record(
        std::move(oshape), std::move(out), {px},
        [px, n, k, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (long long i = 0; i < n; ++i) gx[static_cast<size_t>(i * k + c)] += g[static_cast<size_t>(i)];
        },
        "chan");
}

// x [.., K] * m [..] broadcast over the last axis
inline Tensor mul_bcast_last(const Tensor& x, const Tensor& m) {
    require(x.rank() == m.rank() + 1, "mul_bcast_last: rank mismatch");
    for (int i = 0; i < m.rank(); ++i)
        require(x.dim(i) == m.dim(i), "mul_bcast_last: shape mismatch " + shape_str(x.shape()) +
                                          " vs " + shape_str(m.shape()));
    int k = x.dim(x.rank() - 1);
    long long n = m.numel();
    const auto& xd = x.data();
    const auto& md = m.data();
    std::vector<real> out(xd.size());
    for (long long i = 0; i < n; ++i)
        for (int c = 0; c < k; ++c)
            out[static_cast<size_t>(i * k + c)] = xd[static_cast<size_t>(i * k + c)] * md[static_cast<size_t>(i)];
    Tape* tp = detail::tape_of({&x, &m});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = detail::node_or_neg1(x), pm = detail::node_or_neg1(m);
    auto xptr = x.data_ptr();
    auto mptr = m.data_ptr();
    return tp->record(
        x.shape(), std::move(out), {px, pm},
        [px, pm, xptr, mptr, n, k](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            if (px >= 0) {
                auto& gx = t.grad_buf(px);
                const auto& md = *mptr;
                for (long long i = 0; i < n; ++i)
                    for (int c = 0; c < k; ++c)
                        gx[static_cast<size_t>(i * k + c)] += g[static_cast<size_t>(i * k + c)] * md[static_cast<size_t>(i)];
            }
            if (pm >= 0) {
                auto& gm = t.grad_buf(pm);
                const auto& xd = *xptr;
                for (long long i = 0; i < n; ++i) {
                    real s = 0.0;
                    for (int c = 0; c < k; ++c)
                        s += g[static_cast<size_t>(i * k + c)] * xd[static_cast<size_t>(i * k + c)];
                    gm[static_cast<size_t>(i)] += s;
                }
            }
        },
        "mul_bcast_last");
}

inline Tensor div_bcast_last(const Tensor& x, const Tensor& m) {
    require(x.rank() == m.rank() + 1, "div_bcast_last: rank mismatch");
    for (int i = 0; i < m.rank(); ++i)
        require(x.dim(i) == m.dim(i), "div_bcast_last: shape mismatch");
    int k = x.dim(x.rank() - 1);
    long long n = m.numel();
    const auto& xd = x.data();
    const auto& md = m.data();
    std::vector<real> out(xd.size());
    for (long long i = 0; i < n; ++i)
        for (int c = 0; c < k; ++c)
            out[static_cast<size_t>(i * k + c)] = xd[static_cast<size_t>(i * k + c)] / md[static_cast<size_t>(i)];
    Tape* tp = detail::tape_of({&x, &m});
    if (!tp) return Tensor::constant(x.shape(), std::move(out));
    int px = detail::node_or_neg1(x), pm = detail::node_or_neg1(m);
    auto xptr = x.data_ptr();
    auto mptr = m.data_ptr();
    return tp->record(
        x.shape(), std::move(out), {px, pm},
        [px, pm, xptr, mptr, n, k](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& md = *mptr;
            if (px >= 0) {
                auto& gx = t.grad_buf(px);
                for (long long i = 0; i < n; ++i)
                    for (int c = 0; c < k; ++c)
                        gx[static_cast<size_t>(i * k + c)] += g[static_cast<size_t>(i * k + c)] / md[static_cast<size_t>(i)];
            }
            if (pm >= 0) {
                auto& gm = t.grad_buf(pm);
                const auto& xd = *xptr;
                for (long long i = 0; i < n; ++i) {
                    real s = 0.0, mi = md[static_cast<size_t>(i)];
                    for (int c = 0; c < k; ++c)
                        s += g[static_cast<size_t>(i * k + c)] * xd[static_cast<size_t>(i * k + c)];
                    gm[static_cast<size_t>(i)] += -s / (mi * mi);
                }
            }
        },
        "div_bcast_last");
}

// Sum over the last axis: [.., K] -> [..]
inline Tensor sum_last(const Tensor& x) {
    require(x.rank() >= 1, "sum_last: rank-0 input");
    int k = x.dim(x.rank() - 1);
    long long n = x.numel() / k;
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(n), 0.0);
    for (long long i = 0; i < n; ++i) {
        real s = 0.0;
        for (int c = 0; c < k; ++c) s += xd[static_cast<size_t>(i * k + c)];
        out[static_cast<size_t>(i)] = s;
    }
    std::vector<int> oshape(x.shape().begin(), x.shape().end() - 1);
    Tape* tp = detail::tape_of({&x});
    if (!tp) return Tensor::constant(std::move(oshape), std::move(out));
    int px = x.node();
    return tp->record(
        std::move(oshape), std::move(out), {px},
        [px, n, k](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            auto& gx = t.grad_buf(px);
            for (long long i = 0; i < n; ++i)
                for (int c = 0; c < k; ++c) gx[static_cast<size_t>(i * k + c)] += g[static_cast<size_t>(i)];
        },
        "sum_last");
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// y = W x, W: [m,n], x: [n] -> [m]
inline Tensor matvec(const Tensor& w, const Tensor& x) {
    require(w.rank() == 2 && x.rank() == 1, "matvec expects [m,n] and [n]");
    int m = w.dim(0), n = w.dim(1);
    require(x.dim(0) == n, "matvec: inner dimension mismatch " + shape_str(w.shape()) + " vs " +
                               shape_str(x.shape()));
    const auto& wd = w.data();
    const auto& xd = x.data();
    std::vector<real> out(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        real s = 0.0;
        const real* row = wd.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) s += row[j] * xd[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = s;
    }
    Tape* tp = detail::tape_of({&w, &x});
    if (!tp) return Tensor::constant({m}, std::move(out));
    int pw = detail::node_or_neg1(w), px = detail::node_or_neg1(x);
    auto wptr = w.data_ptr();
    auto xptr = x.data_ptr();
    return tp->record(
        {m}, std::move(out), {pw, px},
        [pw, px, wptr, xptr, m, n](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            if (pw >= 0) {
                auto& gw = t.grad_buf(pw);
                const auto& xd = *xptr;
                for (int i = 0; i < m; ++i) {
                    real gi = g[static_cast<size_t>(i)];
                    real* row = gw.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) row[j] += gi * xd[static_cast<size_t>(j)];
                }
            }
            if (px >= 0) {
                auto& gx = t.grad_buf(px);
                const auto& wd = *wptr;
                for (int i = 0; i < m; ++i) {
                    real gi = g[static_cast<size_t>(i)];
                    const real* row = wd.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gx[static_cast<size_t>(j)] += gi * row[j];
                }
            }
        },
        "matvec");
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum_all(mul(a, b)); }

inline Tensor sum_sq(const Tensor& x) { return sum_all(square(x)); }

}  // namespace lifted3d
