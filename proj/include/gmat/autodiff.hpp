#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every primitive in evaluation order, so the record is
// topologically sorted by construction and one reverse sweep fills the
// gradient of every leaf reachable from the loss. Values are 64-bit.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gmat/errors.hpp"
#include "gmat/matrix.hpp"
#include "gmat/rng.hpp"

namespace gmat::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the Tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    /// Gradient after Tape::backward; zeros if the node received none.
    Matrix grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double item() const;

    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf: receives a gradient.
    Var leaf(Matrix value) { return push_leaf(std::move(value), true); }
    /// Constant input: never receives a gradient.
    Var constant(Matrix value) { return push_leaf(std::move(value), false); }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a 1x1 loss. May be called once per tape.
    void backward(const Var& loss) {
        require(loss.tape() == this, "backward: loss belongs to another tape");
        const Matrix& lv = nodes_[loss.id()].value;
        require(lv.rows() == 1 && lv.cols() == 1,
                "backward: loss must be scalar, got " + lv.shape_string());
        require(!backward_done_, "backward: tape already differentiated");
        backward_done_ = true;
        auto& root = nodes_[loss.id()];
        if (!root.needs_grad) return;
        grad_ref(loss.id()).fill(1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, i);
            for (std::size_t in : nodes_[i].inputs) {
                const Matrix& g = nodes_[in].grad;
                if (!g.empty() && !g.all_finite())
                    throw NumericFailure(std::string("backward: non-finite gradient from primitive '") +
                                         nodes_[i].op + "'");
            }
        }
    }

    /// Gradients of `loss` with respect to `params`; unreached params map to zeros.
    std::vector<Matrix> grad(const Var& loss, std::span<const Var> params) {
        for (const auto& p : params) {
            require(p.tape() == this, "grad: parameter belongs to another tape");
            require(nodes_[p.id()].is_leaf, "grad: parameter is not a leaf");
        }
        backward(loss);
        std::vector<Matrix> out;
        out.reserve(params.size());
        for (const auto& p : params) out.push_back(p.grad());
        return out;
    }

    // ---- primitive-authoring interface -------------------------------------------------

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    const char* op(std::size_t id) const { return nodes_[id].op; }

    /// Gradient accumulator of node `id`, allocated on first use; nullptr for constants.
    Matrix* grad_target(std::size_t id) {
        if (!nodes_[id].needs_grad) return nullptr;
        return &grad_ref(id);
    }

    const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }

    Var push(Matrix value, const char* op, std::vector<std::size_t> inputs, Backward bw) {
        if (!value.all_finite())
            throw NumericFailure(std::string("forward: non-finite output from primitive '") + op + "'");
        bool needs = false;
        for (auto in : inputs) needs = needs || nodes_[in].needs_grad;
        Node n;
        n.value = std::move(value);
        n.op = op;
        n.needs_grad = needs;
        n.inputs = std::move(inputs);
        if (needs) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        const char* op = "leaf";
        bool needs_grad = false;
        bool is_leaf = false;
        std::vector<std::size_t> inputs;
        Backward backward;
    };

    Var push_leaf(Matrix value, bool trainable) {
        Node n;
        n.value = std::move(value);
        n.op = trainable ? "leaf" : "constant";
        n.needs_grad = trainable;
        n.is_leaf = true;
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Matrix& grad_ref(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline Matrix Var::grad() const {
    const Matrix& g = tape_->grad_of(id_);
    if (g.empty()) return Matrix(value().rows(), value().cols());
    return g;
}

inline double Var::item() const {
    require(value().size() == 1, "item: value is not scalar");
    return value()[0];
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
    require(a.tape() != nullptr && a.tape() == b.tape(), "autodiff: operands live on different tapes");
    return *a.tape();
}

inline std::size_t broadcast_dim(std::size_t a, std::size_t b, const char* op) {
    if (a == b) return a;
    if (a == 1) return b;
    if (b == 1) return a;
    throw ContractError(std::string(op) + ": incompatible shapes for broadcasting");
}

/// Sum `g` (out shape) down to `rows x cols` and add it into `target`.
inline void accumulate_reduced(Matrix& target, const Matrix& g) {
    if (target.same_shape(g)) {
        for (std::size_t i = 0; i < g.size(); ++i) target[i] += g[i];
        return;
    }
    const bool rr = target.rows() == 1 && g.rows() != 1;
    const bool rc = target.cols() == 1 && g.cols() != 1;
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) target(rr ? 0 : r, rc ? 0 : c) += g(r, c);
}

template <class F>
Matrix broadcast_apply(const Matrix& a, const Matrix& b, const char* op, F f) {
    const std::size_t rows = broadcast_dim(a.rows(), b.rows(), op);
    const std::size_t cols = broadcast_dim(a.cols(), b.cols(), op);
    Matrix out(rows, cols);
    const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out(r, c) = f(a(ar ? 0 : r, ac ? 0 : c), b(br ? 0 : r, bc ? 0 : c));
    return out;
}

inline double bval(const Matrix& m, std::size_t r, std::size_t c) {
    return m(m.rows() == 1 ? 0 : r, m.cols() == 1 ? 0 : c);
}

template <class F>
Var unary(const Var& a, const char* op, F forward_fn, std::function<double(double x, double y)> dydx) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = forward_fn(av[i]);
    const std::size_t ia = a.id();
    return t.push(std::move(out), op, {ia}, [ia, dydx](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const Matrix& g = tp.grad_of(self);
        const Matrix& x = tp.value(ia);
        const Matrix& y = tp.value(self);
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dydx(x[i], y[i]);
    });
}

} // namespace detail

// ---- elementwise binary (2-D broadcasting: each dim equal or 1) --------------------------

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Matrix out = detail::broadcast_apply(a.value(), b.value(), "add", [](double x, double y) { return x + y; });
    const std::size_t ia = a.id(), ib = b.id();
    return t.push(std::move(out), "add", {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_of(self);
        if (Matrix* ga = tp.grad_target(ia)) detail::accumulate_reduced(*ga, g);
        if (Matrix* gb = tp.grad_target(ib)) detail::accumulate_reduced(*gb, g);
    });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Matrix out = detail::broadcast_apply(a.value(), b.value(), "subtract", [](double x, double y) { return x - y; });
    const std::size_t ia = a.id(), ib = b.id();
    return t.push(std::move(out), "subtract", {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_of(self);
        if (Matrix* ga = tp.grad_target(ia)) detail::accumulate_reduced(*ga, g);
        if (Matrix* gb = tp.grad_target(ib)) {
            Matrix neg = g;
            for (auto& v : neg.values()) v = -v;
            detail::accumulate_reduced(*gb, neg);
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Matrix out = detail::broadcast_apply(a.value(), b.value(), "multiply", [](double x, double y) { return x * y; });
    const std::size_t ia = a.id(), ib = b.id();
    return t.push(std::move(out), "multiply", {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_of(self);
        const Matrix& av = tp.value(ia);
        const Matrix& bv = tp.value(ib);
        if (Matrix* ga = tp.grad_target(ia)) {
            Matrix ca(g.rows(), g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) ca(r, c) = g(r, c) * detail::bval(bv, r, c);
            detail::accumulate_reduced(*ga, ca);
        }
        if (Matrix* gb = tp.grad_target(ib)) {
            Matrix cb(g.rows(), g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) cb(r, c) = g(r, c) * detail::bval(av, r, c);
            detail::accumulate_reduced(*gb, cb);
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Matrix out = detail::broadcast_apply(a.value(), b.value(), "divide", [](double x, double y) { return x / y; });
    const std::size_t ia = a.id(), ib = b.id();
    return t.push(std::move(out), "divide", {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_of(self);
        const Matrix& av = tp.value(ia);
        const Matrix& bv = tp.value(ib);
        if (Matrix* ga = tp.grad_target(ia)) {
            Matrix ca(g.rows(), g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) ca(r, c) = g(r, c) / detail::bval(bv, r, c);
            detail::accumulate_reduced(*ga, ca);
        }
        if (Matrix* gb = tp.grad_target(ib)) {
            Matrix cb(g.rows(), g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    const double y = detail::bval(bv, r, c);
                    cb(r, c) = -g(r, c) * detail::bval(av, r, c) / (y * y);
                }
            detail::accumulate_reduced(*gb, cb);
        }
    });
}

inline Var scale(const Var& a, double s) {
    return detail::unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
    return detail::unary(a, "add", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }

// ---- elementwise unary -------------------------------------------------------------------

inline Var exp(const Var& a) {
    return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// sqrt with the subgradient 0 at x == 0, so exact zero distances stay differentiable.
inline Var sqrt(const Var& a) {
    return detail::unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                         [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var square(const Var& a) {
    return detail::unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var relu(const Var& a) {
    return detail::unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// max(x, floor); gradient passes only where x > floor.
inline Var clamp_min(const Var& a, double floor) {
    return detail::unary(a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
                         [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

inline Var stop_gradient(const Var& a) { return a.tape()->constant(a.value()); }

// ---- shape ------------------------------------------------------------------------------

inline Var transpose(const Var& a) {
    Tape& t = *a.tape();
    const std::size_t ia = a.id();
    return t.push(a.value().transposed(), "transpose", {ia}, [ia](Tape& tp, std::size_t self) {
        if (Matrix* ga = tp.grad_target(ia)) detail::accumulate_reduced(*ga, tp.grad_of(self).transposed());
    });
}

/// Explicit broadcast of a row, column or scalar to `rows x cols`.
inline Var broadcast_to(const Var& a, std::size_t rows, std::size_t cols) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    require((av.rows() == rows || av.rows() == 1) && (av.cols() == cols || av.cols() == 1),
            "broadcast: cannot broadcast " + av.shape_string());
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out(r, c) = detail::bval(av, r, c);
    const std::size_t ia = a.id();
    return t.push(std::move(out), "broadcast", {ia}, [ia](Tape& tp, std::size_t self) {
        if (Matrix* ga = tp.grad_target(ia)) detail::accumulate_reduced(*ga, tp.grad_of(self));
    });
}

/// Rows of `a` at `idx` (repeats allowed).
inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
    Tape& t = *a.tape();
    Matrix out = a.value().select_rows(idx);
    const std::size_t ia = a.id();
    return t.push(std::move(out), "gather_rows", {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const Matrix& g = tp.grad_of(self);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(idx[i], c) += g(i, c);
    });
}

/// out[i] = a[i, idx[i]] as an N x 1 column.
inline Var pick(const Var& a, std::vector<std::size_t> idx) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    require(idx.size() == av.rows(), "pick: one index per row required");
    Matrix out(av.rows(), 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < av.cols(), "pick: index out of range");
        out(i, 0) = av(i, idx[i]);
    }
    const std::size_t ia = a.id();
    return t.push(std::move(out), "pick", {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const Matrix& g = tp.grad_of(self);
        for (std::size_t i = 0; i < idx.size(); ++i) (*ga)(i, idx[i]) += g(i, 0);
    });
}

// ---- linear algebra ---------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    Matrix out = gmat::matmul(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return t.push(std::move(out), "matmul", {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_of(self);
        if (Matrix* ga = tp.grad_target(ia)) {
            Matrix d = gmat::matmul(g, tp.value(ib), false, true);
            detail::accumulate_reduced(*ga, d);
        }
        if (Matrix* gb = tp.grad_target(ib)) {
            Matrix d = gmat::matmul(tp.value(ia), g, true, false);
            detail::accumulate_reduced(*gb, d);
        }
    });
}

// ---- reductions -------------------------------------------------------------------------

inline Var sum(const Var& a) {
    Tape& t = *a.tape();
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    const std::size_t ia = a.id();
    return t.push(Matrix::scalar(s), "sum", {ia}, [ia](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const double g = tp.grad_of(self)[0];
        for (auto& v : ga->values()) v += g;
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum over rows: r x c -> 1 x c.
inline Var sum_rows(const Var& a) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    Matrix out(1, av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < av.cols(); ++c) out(0, c) += av(r, c);
    const std::size_t ia = a.id();
    return t.push(std::move(out), "sum", {ia}, [ia](Tape& tp, std::size_t self) {
        if (Matrix* ga = tp.grad_target(ia)) {
            const Matrix& g = tp.grad_of(self);
            for (std::size_t r = 0; r < ga->rows(); ++r)
                for (std::size_t c = 0; c < ga->cols(); ++c) (*ga)(r, c) += g(0, c);
        }
    });
}

/// Sum over columns: r x c -> r x 1.
inline Var sum_cols(const Var& a) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    Matrix out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < av.cols(); ++c) out(r, 0) += av(r, c);
    const std::size_t ia = a.id();
    return t.push(std::move(out), "sum", {ia}, [ia](Tape& tp, std::size_t self) {
        if (Matrix* ga = tp.grad_target(ia)) {
            const Matrix& g = tp.grad_of(self);
            for (std::size_t r = 0; r < ga->rows(); ++r)
                for (std::size_t c = 0; c < ga->cols(); ++c) (*ga)(r, c) += g(r, 0);
        }
    });
}

/// Row-wise log-sum-exp, shifted by the row maximum: r x c -> r x 1.
inline Var logsumexp_rows(const Var& a) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    require(av.cols() > 0, "logsumexp: empty rows");
    Matrix out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r) {
        auto row = av.row_span(r);
        const double m = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - m);
        out(r, 0) = m + std::log(s);
    }
    const std::size_t ia = a.id();
    return t.push(std::move(out), "logsumexp", {ia}, [ia](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const Matrix& g = tp.grad_of(self);
        const Matrix& x = tp.value(ia);
        const Matrix& y = tp.value(self);
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) (*ga)(r, c) += g(r, 0) * std::exp(x(r, c) - y(r, 0));
    });
}

/// Row maximum with stop-gradient selection: the gradient flows to the selected entry
/// (lowest index on ties) but not through the choice itself. r x c -> r x 1.
inline Var max_rows(const Var& a) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    std::vector<std::size_t> arg(av.rows());
    Matrix out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r) {
        auto row = av.row_span(r);
        arg[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        out(r, 0) = row[arg[r]];
    }
    const std::size_t ia = a.id();
    return t.push(std::move(out), "argmax", {ia}, [ia, arg = std::move(arg)](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const Matrix& g = tp.grad_of(self);
        for (std::size_t r = 0; r < arg.size(); ++r) (*ga)(r, arg[r]) += g(r, 0);
    });
}

/// Column maximum with stop-gradient selection: r x c -> 1 x c.
inline Var max_cols(const Var& a) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    std::vector<std::size_t> arg(av.cols(), 0);
    Matrix out(1, av.cols());
    for (std::size_t c = 0; c < av.cols(); ++c) {
        for (std::size_t r = 1; r < av.rows(); ++r)
            if (av(r, c) > av(arg[c], c)) arg[c] = r;
        out(0, c) = av(arg[c], c);
    }
    const std::size_t ia = a.id();
    return t.push(std::move(out), "argmax", {ia}, [ia, arg = std::move(arg)](Tape& tp, std::size_t self) {
        Matrix* ga = tp.grad_target(ia);
        if (!ga) return;
        const Matrix& g = tp.grad_of(self);
        for (std::size_t c = 0; c < arg.size(); ++c) (*ga)(arg[c], c) += g(0, c);
    });
}

// ---- fused kernels used by the mixture layer ---------------------------------------------

/// Squared diagonal Mahalanobis distances: out[i,j] = sum_k (x_ik - mu_jk)^2 exp(-2 ls_jk).
/// x: N x d, mu: M x d, log_scale: M x d -> N x M.
inline Var sq_mahalanobis(const Var& x, const Var& mu, const Var& log_scale) {
    Tape& t = detail::same_tape(x, mu);
    detail::same_tape(mu, log_scale);
    const Matrix& xv = x.value();
    const Matrix& mv = mu.value();
    const Matrix& lv = log_scale.value();
    require(mv.same_shape(lv), "sq_mahalanobis: means and log-scales differ in shape");
    require(xv.cols() == mv.cols(),
            "sq_mahalanobis: input width " + std::to_string(xv.cols()) + " != prototype dim " +
                std::to_string(mv.cols()));
    const std::size_t n = xv.rows(), m = mv.rows(), d = xv.cols();
    Matrix prec(m, d);
    for (std::size_t i = 0; i < prec.size(); ++i) prec[i] = std::exp(-2.0 * lv[i]);
    Matrix out(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = xv(i, k) - mv(j, k);
                s += diff * diff * prec(j, k);
            }
            out(i, j) = s;
        }
    const std::size_t ix = x.id(), im = mu.id(), il = log_scale.id();
    return t.push(std::move(out), "mahalanobis", {ix, im, il},
                  [ix, im, il, prec = std::move(prec)](Tape& tp, std::size_t self) {
                      const Matrix& g = tp.grad_of(self);
                      const Matrix& xv = tp.value(ix);
                      const Matrix& mv = tp.value(im);
                      Matrix* gx = tp.grad_target(ix);
                      Matrix* gm = tp.grad_target(im);
                      Matrix* gl = tp.grad_target(il);
                      const std::size_t n = xv.rows(), m = mv.rows(), d = xv.cols();
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < m; ++j) {
                              const double gij = g(i, j);
                              if (gij == 0.0) continue;
                              for (std::size_t k = 0; k < d; ++k) {
                                  const double diff = xv(i, k) - mv(j, k);
                                  const double lin = 2.0 * gij * diff * prec(j, k);
                                  if (gx) (*gx)(i, k) += lin;
                                  if (gm) (*gm)(j, k) -= lin;
                                  if (gl) (*gl)(j, k) -= lin * diff;
                              }
                          }
                  });
}

/// Responsibility-weighted prototype noise: out[i,k] = sum_j w_ij s_jk e_i(j*d+k).
/// w: N x M, scale: M x d, noise: N x (M*d) -> N x d.
inline Var mix_noise(const Var& w, const Var& scale_, const Var& noise) {
    Tape& t = detail::same_tape(w, scale_);
    detail::same_tape(w, noise);
    const Matrix& wv = w.value();
    const Matrix& sv = scale_.value();
    const Matrix& ev = noise.value();
    const std::size_t n = wv.rows(), m = wv.cols(), d = sv.cols();
    require(sv.rows() == m, "mix_noise: scale rows != responsibility columns");
    require(ev.rows() == n && ev.cols() == m * d, "mix_noise: noise shape mismatch");
    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double wij = wv(i, j);
            for (std::size_t k = 0; k < d; ++k) out(i, k) += wij * sv(j, k) * ev(i, j * d + k);
        }
    const std::size_t iw = w.id(), is = scale_.id(), ie = noise.id();
    return t.push(std::move(out), "mix_noise", {iw, is, ie}, [iw, is, ie](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad_of(self);
        const Matrix& wv = tp.value(iw);
        const Matrix& sv = tp.value(is);
        const Matrix& ev = tp.value(ie);
        Matrix* gw = tp.grad_target(iw);
        Matrix* gs = tp.grad_target(is);
        const std::size_t n = wv.rows(), m = wv.cols(), d = sv.cols();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t k = 0; k < d; ++k) {
                    const double e = ev(i, j * d + k);
                    if (gw) (*gw)(i, j) += g(i, k) * sv(j, k) * e;
                    if (gs) (*gs)(j, k) += g(i, k) * wv(i, j) * e;
                }
    });
}

// ---- composites -------------------------------------------------------------------------

/// Row-wise softmin: exp(-x - logsumexp(-x)), computed on rows shifted by their maximum
/// so huge equal entries still normalise.
inline Var softmin_rows(const Var& a) {
    Var negated = neg(a);
    Var shifted = sub(negated, stop_gradient(max_rows(negated)));
    return exp(sub(shifted, logsumexp_rows(shifted)));
}

/// Reparameterised draw mu + exp(log_sigma) * eps. The noise is a constant node, so the
/// backward pass is exact for the recorded draw.
inline Var gaussian_sample(const Var& mu, const Var& log_sigma, Rng& rng) {
    require(mu.value().same_shape(log_sigma.value()), "gaussian_sample: mu and log_sigma differ in shape");
    Matrix eps(mu.rows(), mu.cols());
    for (auto& v : eps.values()) v = rng.normal();
    Var e = mu.tape()->constant(std::move(eps));
    return add(mu, mul(exp(log_sigma), e));
}

// ---- gradient checking ------------------------------------------------------------------

using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Analytic gradients of the built loss at `params`.
inline std::vector<Matrix> gradients(const LossBuilder& build, const std::vector<Matrix>& params) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var loss = build(tape, leaves);
    return tape.grad(loss, leaves);
}

inline double evaluate(const LossBuilder& build, const std::vector<Matrix>& params) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.constant(p));
    return build(tape, leaves).item();
}

/// max |analytic - central| / (|central| + 1e-8) over every coordinate of every param.
inline double finite_difference_check(const LossBuilder& build, std::vector<Matrix> params, double step) {
    require(step > 0.0, "finite_difference_check: step must be positive");
    const auto analytic = gradients(build, params);
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double orig = params[p][i];
            params[p][i] = orig + step;
            const double up = evaluate(build, params);
            params[p][i] = orig - step;
            const double down = evaluate(build, params);
            params[p][i] = orig;
            const double central = (up - down) / (2.0 * step);
            worst = std::max(worst, std::abs(analytic[p][i] - central) / (std::abs(central) + 1e-8));
        }
    return worst;
}

} // namespace gmat::ad
