#pragma once

// Dense reverse-mode automatic differentiation with double backward.
//
// A Var is a handle to a graph node holding an Array value. Operations on
// Vars record a node only when at least one input requires a gradient. The
// backward rule of every op is itself written in terms of Var ops, so a
// gradient computed with create_graph=true is again differentiable. This is
// what the implicit-gradient (gradient matching) term needs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace trm::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::domain_error {
    using std::domain_error::domain_error;
};

struct GraphError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Row-major dense array of doubles. Every entry is finite.
class Array {
public:
    Array() : shape_{}, data_(1, 0.0) {}

    explicit Array(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_finite("Array");
    }

    Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw ShapeError("Array: shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
        check_finite("Array");
    }

    static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
    static Array vector(std::vector<double> v) {
        const auto n = v.size();
        return Array(Shape{n}, std::move(v));
    }
    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Array(Shape{rows, cols}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }
    std::vector<double>& values() { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item(): array of shape " + shape_str(shape_));
        return data_[0];
    }

    void check_finite(const char* where) const {
        for (double v : data_)
            if (!std::isfinite(v))
                throw NonFiniteError(std::string(where) + ": non-finite value in array of shape " +
                                     shape_str(shape_));
    }

    bool operator==(const Array& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

class Var;

struct Node {
    std::shared_ptr<const Array> value;
    bool requires_grad = false;
    bool stop_gradient = false;
    // Set on gradients produced without create_graph; they cannot be differentiated again.
    bool released = false;
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    // Maps the upstream gradient to one gradient per parent (null Var for "no contribution").
    std::function<std::vector<Var>(const Var& upstream, const std::vector<Var>& parents)> backward;
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    /// Leaf constant.
    Var(Array value) : node_(std::make_shared<Node>()) {  // NOLINT implicit
        node_->value = std::make_shared<const Array>(std::move(value));
        node_->op = "const";
    }

    static Var param(Array value) {
        Var v(std::move(value));
        v.node_->requires_grad = true;
        v.node_->op = "param";
        return v;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Array& value() const { return *node_->value; }
    const Shape& shape() const { return node_->value->shape(); }
    std::size_t size() const { return node_->value->size(); }
    double item() const { return node_->value->item(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_stop_gradient() const { return node_ && node_->stop_gradient; }
    const std::string& op() const { return node_->op; }
    const std::shared_ptr<Node>& node() const { return node_; }
    const Node* id() const { return node_.get(); }

    /// Same value, no parents, no gradient.
    Var detach() const {
        auto n = std::make_shared<Node>();
        n->value = node_->value;
        n->op = "detach";
        return Var(std::move(n));
    }

private:
    std::shared_ptr<Node> node_;
};

/// The stop-gradient operator: value flows forward, derivative contribution is zero.
inline Var stop_gradient(const Var& x) {
    auto n = std::make_shared<Node>();
    n->value = x.node()->value;
    n->stop_gradient = true;
    n->op = "stop_gradient";
    return Var(std::move(n));
}

namespace detail {

using BackwardFn = std::function<std::vector<Var>(const Var&, const std::vector<Var>&)>;

inline Var make(Array value, const char* op, std::vector<Var> inputs, BackwardFn bw) {
    value.check_finite(op);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    auto n = std::make_shared<Node>();
    n->value = std::make_shared<const Array>(std::move(value));
    n->op = op;
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward = std::move(bw);
    }
    return Var(std::move(n));
}

inline void require_same(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank(const char* op, const Var& a, std::size_t r) {
    if (a.value().rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                         shape_str(a.shape()));
}

inline bool is_scalar(const Var& a) { return a.value().rank() == 0; }

template <class F>
Array map(const Array& a, F f) {
    Array out(a.shape());
    const double* x = a.data();
    double* y = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i]);
    return out;
}

template <class F>
Array zip(const Array& a, const Array& b, F f) {
    Array out(a.shape());
    const double* x = a.data();
    const double* z = b.data();
    double* y = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i], z[i]);
    return out;
}

inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(0.0, x); }
inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// Forward declarations so backward rules can refer to each other.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var reciprocal(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var logistic_loss(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);
Var norm2(const Var& a);
Var broadcast_to(const Var& s, const Shape& shape);
Var matvec(const Var& A, const Var& x);
Var matvec_t(const Var& A, const Var& y);
Var outer(const Var& u, const Var& v);
Var matmul(const Var& A, const Var& B);
Var transpose(const Var& A);
Var sum_rows(const Var& M);
Var sum_cols(const Var& M);
Var expand_cols(const Var& v, std::size_t cols);
Var expand_rows(const Var& v, std::size_t rows);
Var add_row(const Var& M, const Var& b);
Var softmax(const Var& logits);
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

inline Var broadcast_to(const Var& s, const Shape& shape) {
    if (!detail::is_scalar(s))
        throw ShapeError("broadcast_to: expected scalar, got " + shape_str(s.shape()));
    Array out(shape, s.item());
    return detail::make(std::move(out), "broadcast", {s},
                        [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{sum(g)}; });
}

// Elementwise binary ops allow a scalar on either side; everything else must match exactly.
inline Var add(const Var& a, const Var& b) {
    if (detail::is_scalar(a) && !detail::is_scalar(b)) return add(broadcast_to(a, b.shape()), b);
    if (detail::is_scalar(b) && !detail::is_scalar(a)) return add(a, broadcast_to(b, a.shape()));
    detail::require_same("add", a, b);
    return detail::make(detail::zip(a.value(), b.value(), std::plus<>()), "add", {a, b},
                        [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
    if (detail::is_scalar(a) && !detail::is_scalar(b)) return sub(broadcast_to(a, b.shape()), b);
    if (detail::is_scalar(b) && !detail::is_scalar(a)) return sub(a, broadcast_to(b, a.shape()));
    detail::require_same("sub", a, b);
    return detail::make(detail::zip(a.value(), b.value(), std::minus<>()), "sub", {a, b},
                        [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a, const Var& b) {
    if (detail::is_scalar(a) && !detail::is_scalar(b)) return mul(broadcast_to(a, b.shape()), b);
    if (detail::is_scalar(b) && !detail::is_scalar(a)) return mul(a, broadcast_to(b, a.shape()));
    detail::require_same("mul", a, b);
    return detail::make(detail::zip(a.value(), b.value(), std::multiplies<>()), "mul", {a, b},
                        [](const Var& g, const std::vector<Var>& p) {
                            return std::vector<Var>{mul(g, p[1]), mul(g, p[0])};
                        });
}

inline Var neg(const Var& a) {
    return detail::make(detail::map(a.value(), [](double x) { return -x; }), "neg", {a},
                        [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double s) {
    return detail::make(detail::map(a.value(), [s](double x) { return s * x; }), "scale", {a},
                        [s](const Var& g, const std::vector<Var>&) { return std::vector<Var>{scale(g, s)}; });
}

inline Var add_scalar(const Var& a, double s) {
    return detail::make(detail::map(a.value(), [s](double x) { return x + s; }), "add_scalar", {a},
                        [](const Var& g, const std::vector<Var>&) { return std::vector<Var>{g}; });
}

inline Var exp(const Var& a) {
    auto out = detail::map(a.value(), [](double x) { return std::exp(x); });
    return detail::make(std::move(out), "exp", {a}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{mul(g, exp(p[0]))};
    });
}

inline Var log(const Var& a) {
    for (double v : a.value().values())
        if (!(v > 0)) throw NonFiniteError("log: non-positive input");
    auto out = detail::map(a.value(), [](double x) { return std::log(x); });
    return detail::make(std::move(out), "log", {a}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{mul(g, reciprocal(p[0]))};
    });
}

inline Var reciprocal(const Var& a) {
    for (double v : a.value().values())
        if (v == 0.0) throw NonFiniteError("reciprocal: zero input");
    auto out = detail::map(a.value(), [](double x) { return 1.0 / x; });
    return detail::make(std::move(out), "reciprocal", {a}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{neg(mul(g, square(reciprocal(p[0]))))};
    });
}

inline Var square(const Var& a) {
    return detail::make(detail::map(a.value(), [](double x) { return x * x; }), "square", {a},
                        [](const Var& g, const std::vector<Var>& p) {
                            return std::vector<Var>{scale(mul(g, p[0]), 2.0)};
                        });
}

inline Var sqrt(const Var& a) {
    for (double v : a.value().values())
        if (v < 0) throw NonFiniteError("sqrt: negative input");
    auto out = detail::map(a.value(), [](double x) { return std::sqrt(x); });
    return detail::make(std::move(out), "sqrt", {a}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{scale(mul(g, reciprocal(sqrt(p[0]))), 0.5)};
    });
}

inline Var tanh(const Var& a) {
    auto out = detail::map(a.value(), [](double x) { return std::tanh(x); });
    return detail::make(std::move(out), "tanh", {a}, [](const Var& g, const std::vector<Var>& p) {
        Var t = tanh(p[0]);
        return std::vector<Var>{mul(g, add_scalar(neg(square(t)), 1.0))};
    });
}

inline Var sigmoid(const Var& a) {
    auto out = detail::map(a.value(), [](double x) { return detail::sigmoid(x); });
    return detail::make(std::move(out), "sigmoid", {a}, [](const Var& g, const std::vector<Var>& p) {
        Var s = sigmoid(p[0]);
        return std::vector<Var>{mul(g, mul(s, sigmoid(neg(p[0]))))};
    });
}

/// Elementwise logistic loss log(1 + e^{-x}), via softplus(-x) = log1p(exp(-|x|)) + max(0, -x).
inline Var logistic_loss(const Var& a) {
    auto out = detail::map(a.value(), [](double x) { return detail::softplus(-x); });
    return detail::make(std::move(out), "logistic_loss", {a}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{neg(mul(g, sigmoid(neg(p[0]))))};
    });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    Shape shp = a.shape();
    return detail::make(Array::scalar(s), "sum", {a}, [shp](const Var& g, const std::vector<Var>&) {
        return std::vector<Var>{broadcast_to(g, shp)};
    });
}

inline Var mean(const Var& a) {
    if (a.size() == 0) throw ShapeError("mean: empty array");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Var dot(const Var& a, const Var& b) {
    detail::require_rank("dot", a, 1);
    detail::require_same("dot", a, b);
    return sum(mul(a, b));
}

inline Var norm2(const Var& a) { return sum(square(a)); }

inline Var matvec(const Var& A, const Var& x) {
    detail::require_rank("matvec", A, 2);
    detail::require_rank("matvec", x, 1);
    const auto m = A.value().rows(), n = A.value().cols();
    if (x.size() != n)
        throw ShapeError("matvec: shape mismatch " + shape_str(A.shape()) + " x " + shape_str(x.shape()));
    Array out(Shape{m});
    const double* a = A.value().data();
    const double* v = x.value().data();
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * v[j];
        out[i] = s;
    }
    return detail::make(std::move(out), "matvec", {A, x}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{outer(g, p[1]), matvec_t(p[0], g)};
    });
}

inline Var matvec_t(const Var& A, const Var& y) {
    detail::require_rank("matvec_t", A, 2);
    detail::require_rank("matvec_t", y, 1);
    const auto m = A.value().rows(), n = A.value().cols();
    if (y.size() != m)
        throw ShapeError("matvec_t: shape mismatch " + shape_str(A.shape()) + "^T x " + shape_str(y.shape()));
    Array out(Shape{n});
    const double* a = A.value().data();
    const double* v = y.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j] * v[i];
    return detail::make(std::move(out), "matvec_t", {A, y}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{outer(p[1], g), matvec(p[0], g)};
    });
}

inline Var outer(const Var& u, const Var& v) {
    detail::require_rank("outer", u, 1);
    detail::require_rank("outer", v, 1);
    const auto m = u.size(), n = v.size();
    Array out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = u.value()[i] * v.value()[j];
    return detail::make(std::move(out), "outer", {u, v}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{matvec(g, p[1]), matvec_t(g, p[0])};
    });
}

inline Var matmul(const Var& A, const Var& B) {
    detail::require_rank("matmul", A, 2);
    detail::require_rank("matmul", B, 2);
    const auto m = A.value().rows(), k = A.value().cols(), n = B.value().cols();
    if (B.value().rows() != k)
        throw ShapeError("matmul: shape mismatch " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    Array out(Shape{m, n});
    const double* a = A.value().data();
    const double* b = B.value().data();
    double* c = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = a[i * k + l];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += ail * b[l * n + j];
        }
    return detail::make(std::move(out), "matmul", {A, B}, [](const Var& g, const std::vector<Var>& p) {
        return std::vector<Var>{matmul(g, transpose(p[1])), matmul(transpose(p[0]), g)};
    });
}

inline Var transpose(const Var& A) {
    detail::require_rank("transpose", A, 2);
    const auto m = A.value().rows(), n = A.value().cols();
    Array out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = A.value()(i, j);
    return detail::make(std::move(out), "transpose", {A}, [](const Var& g, const std::vector<Var>&) {
        return std::vector<Var>{transpose(g)};
    });
}

inline Var sum_rows(const Var& M) {
    detail::require_rank("sum_rows", M, 2);
    const auto m = M.value().rows(), n = M.value().cols();
    Array out(Shape{m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += M.value()(i, j);
    return detail::make(std::move(out), "sum_rows", {M}, [n](const Var& g, const std::vector<Var>&) {
        return std::vector<Var>{expand_cols(g, n)};
    });
}

inline Var sum_cols(const Var& M) {
    detail::require_rank("sum_cols", M, 2);
    const auto m = M.value().rows(), n = M.value().cols();
    Array out(Shape{n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += M.value()(i, j);
    return detail::make(std::move(out), "sum_cols", {M}, [m](const Var& g, const std::vector<Var>&) {
        return std::vector<Var>{expand_rows(g, m)};
    });
}

inline Var expand_cols(const Var& v, std::size_t cols) {
    detail::require_rank("expand_cols", v, 1);
    const auto m = v.size();
    Array out(Shape{m, cols});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cols; ++j) out(i, j) = v.value()[i];
    return detail::make(std::move(out), "expand_cols", {v}, [](const Var& g, const std::vector<Var>&) {
        return std::vector<Var>{sum_rows(g)};
    });
}

inline Var expand_rows(const Var& v, std::size_t rows) {
    detail::require_rank("expand_rows", v, 1);
    const auto n = v.size();
    Array out(Shape{rows, n});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = v.value()[j];
    return detail::make(std::move(out), "expand_rows", {v}, [](const Var& g, const std::vector<Var>&) {
        return std::vector<Var>{sum_cols(g)};
    });
}

inline Var add_row(const Var& M, const Var& b) {
    detail::require_rank("add_row", M, 2);
    detail::require_rank("add_row", b, 1);
    if (M.value().cols() != b.size())
        throw ShapeError("add_row: shape mismatch " + shape_str(M.shape()) + " + " + shape_str(b.shape()));
    return add(M, expand_rows(b, M.value().rows()));
}

/// Row-wise softmax of an n x K matrix.
inline Var softmax(const Var& logits) {
    detail::require_rank("softmax", logits, 2);
    const auto m = logits.value().rows(), n = logits.value().cols();
    Array out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits.value()(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (out(i, j) = std::exp(logits.value()(i, j) - mx));
        for (std::size_t j = 0; j < n; ++j) out(i, j) /= z;
    }
    return detail::make(std::move(out), "softmax", {logits}, [n](const Var& g, const std::vector<Var>& p) {
        Var s = softmax(p[0]);
        Var inner = expand_cols(sum_rows(mul(g, s)), n);
        return std::vector<Var>{mul(s, sub(g, inner))};
    });
}

/// Mean softmax cross-entropy of n x K logits against integer labels in [0, K).
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
    detail::require_rank("softmax_cross_entropy", logits, 2);
    const auto m = logits.value().rows(), n = logits.value().cols();
    if (labels.size() != m)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    double total = 0.0;
    Array onehot(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= n)
            throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits.value()(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(logits.value()(i, j) - mx);
        total += mx + std::log(z) - logits.value()(i, static_cast<std::size_t>(y));
        onehot(i, static_cast<std::size_t>(y)) = 1.0;
    }
    const double inv = 1.0 / static_cast<double>(m);
    auto oh = std::make_shared<const Array>(std::move(onehot));
    return detail::make(Array::scalar(total * inv), "softmax_cross_entropy", {logits},
                        [oh, inv](const Var& g, const std::vector<Var>& p) {
                            Var diff = sub(softmax(p[0]), Var(*oh));
                            return std::vector<Var>{mul(broadcast_to(scale(g, inv), diff.shape()), diff)};
                        });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

/// Gradients keyed by parameter node.
class GradMap {
public:
    void insert(const Var& param, Array g) { entries_.emplace_back(param.id(), std::move(g)); }

    const Array& operator[](const Var& param) const {
        for (const auto& [id, g] : entries_)
            if (id == param.id()) return g;
        throw std::out_of_range("GradMap: parameter not requested");
    }

    std::size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::vector<std::pair<const Node*, Array>> entries_;
};

/// Reverse-mode gradients of a scalar output. With create_graph the returned
/// Vars are themselves differentiable; otherwise they are released leaves.
/// Parameters the output does not depend on receive zeros of matching shape.
inline std::vector<Var> grad_vars(const Var& output, const std::vector<Var>& params, bool create_graph = false) {
    if (output.size() != 1)
        throw ShapeError("grad: output must be scalar, got " + shape_str(output.shape()));
    if (output.node()->released)
        throw GraphError("grad: output was computed from a gradient whose graph was not retained "
                         "(use create_graph=true for the first derivative)");

    std::unordered_map<const Node*, Var> acc;
    if (output.requires_grad()) {
        // Topological order by iterative DFS over nodes that require grad.
        std::vector<Node*> order;
        std::unordered_set<const Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack{{output.node().get(), 0}};
        seen.insert(output.node().get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }

        acc.emplace(output.id(), Var(Array(output.shape(), 1.0)));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            auto found = acc.find(n);
            if (found == acc.end() || !n->backward) continue;
            Var upstream = create_graph ? found->second : found->second.detach();
            std::vector<Var> parents;
            parents.reserve(n->parents.size());
            for (const auto& p : n->parents) parents.push_back(create_graph ? Var(p) : Var(p).detach());
            auto grads = n->backward(upstream, parents);
            for (std::size_t i = 0; i < n->parents.size(); ++i) {
                const Node* p = n->parents[i].get();
                if (!p->requires_grad || !grads[i].defined()) continue;
                auto slot = acc.find(p);
                if (slot == acc.end())
                    acc.emplace(p, grads[i]);
                else
                    slot->second = add(slot->second, grads[i]);
            }
        }
    }

    std::vector<Var> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        auto it = acc.find(p.id());
        Var g = it == acc.end() ? Var(Array(p.shape(), 0.0)) : it->second;
        if (!create_graph) {
            g = g.detach();
            g.node()->released = true;
        }
        out.push_back(std::move(g));
    }
    return out;
}

inline GradMap grad(const Var& output, const std::vector<Var>& params) {
    auto gs = grad_vars(output, params, false);
    GradMap m;
    for (std::size_t i = 0; i < params.size(); ++i) m.insert(params[i], gs[i].value());
    return m;
}

/// d/d(second) of sum_i <sg(probe_i), d output / d first_i>.
inline GradMap grad_of_grad(const Var& output, const std::vector<Var>& first, const std::vector<Array>& probes,
                            const std::vector<Var>& second) {
    if (probes.size() != first.size())
        throw ShapeError("grad_of_grad: " + std::to_string(probes.size()) + " probes for " +
                         std::to_string(first.size()) + " parameters");
    auto g1 = grad_vars(output, first, true);
    Var total(Array::scalar(0.0));
    for (std::size_t i = 0; i < first.size(); ++i) {
        if (probes[i].shape() != first[i].shape())
            throw ShapeError("grad_of_grad: probe shape " + shape_str(probes[i].shape()) + " vs parameter " +
                             shape_str(first[i].shape()));
        Var v = stop_gradient(Var(probes[i]));
        total = add(total, sum(mul(v, g1[i])));
    }
    return grad(total, second);
}

}  // namespace trm::ad
