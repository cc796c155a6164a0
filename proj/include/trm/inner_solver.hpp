#pragma once

// Per-environment optimal predictors w(Q; Phi), Hessians at the optimum and
// truncated Neumann-series inverse-Hessian-vector products.

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "envgen.hpp"
#include "log.hpp"

namespace trm {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline Vec to_vec(const ad::Array& a) { return Eigen::Map<const Vec>(a.data(), static_cast<Eigen::Index>(a.size())); }

inline ad::Array to_array(const Vec& v, const ad::Shape& shape) {
    return ad::Array(shape, std::vector<double>(v.data(), v.data() + v.size()));
}

struct SolverOptions {
    double tol = 1e-8;
    int max_iters = 100;
    double max_norm = 1e3;  // trust-region cap on ||w||
    double damping = 1e-4;  // added to H when its smallest eigenvalue falls below it
};

struct SolveResult {
    ad::Array w;  // k (binary) or K x k
    double grad_norm = 0.0;
    double risk = 0.0;
    int iters = 0;
    bool converged = false;
    bool capped = false;
};

namespace solver_detail {

inline double sig(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(0.0, x); }

/// Mean risk, gradient and Hessian of a linear predictor over fixed features.
struct Problem {
    const double* F;
    std::size_t n, k;
    const std::vector<int>* labels;
    int K;

    std::size_t dim() const { return K == 2 ? k : static_cast<std::size_t>(K) * k; }

    double risk(const Vec& w) const {
        double total = 0.0;
        if (K == 2) {
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t a = 0; a < k; ++a) s += w[a] * F[i * k + a];
                total += softplus(-(*labels)[i] * s);
            }
        } else {
            std::vector<double> z(K);
            for (std::size_t i = 0; i < n; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < K; ++c) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < k; ++a) s += w[c * k + a] * F[i * k + a];
                    z[c] = s;
                    mx = std::max(mx, s);
                }
                double lse = 0.0;
                for (int c = 0; c < K; ++c) lse += std::exp(z[c] - mx);
                total += mx + std::log(lse) - z[(*labels)[i]];
            }
        }
        return total / static_cast<double>(n);
    }

    void grad_hess(const Vec& w, Vec& g, Mat* H) const {
        const std::size_t D = dim();
        g.setZero(static_cast<Eigen::Index>(D));
        if (H) H->setZero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
        const double inv = 1.0 / static_cast<double>(n);
        if (K == 2) {
            for (std::size_t i = 0; i < n; ++i) {
                const double* f = F + i * k;
                double s = 0.0;
                for (std::size_t a = 0; a < k; ++a) s += w[a] * f[a];
                const double y = (*labels)[i];
                const double q = sig(-y * s);
                for (std::size_t a = 0; a < k; ++a) g[a] -= inv * y * q * f[a];
                if (H) {
                    const double c = inv * q * (1.0 - q);
                    for (std::size_t a = 0; a < k; ++a)
                        for (std::size_t b = 0; b <= a; ++b) (*H)(a, b) += c * f[a] * f[b];
                }
            }
        } else {
            std::vector<double> p(K);
            for (std::size_t i = 0; i < n; ++i) {
                const double* f = F + i * k;
                double mx = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < K; ++c) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < k; ++a) s += w[c * k + a] * f[a];
                    p[c] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int c = 0; c < K; ++c) z += (p[c] = std::exp(p[c] - mx));
                for (int c = 0; c < K; ++c) p[c] /= z;
                const int y = (*labels)[i];
                for (int c = 0; c < K; ++c) {
                    const double r = p[c] - (c == y ? 1.0 : 0.0);
                    for (std::size_t a = 0; a < k; ++a) g[c * k + a] += inv * r * f[a];
                }
                if (H) {
                    for (int c = 0; c < K; ++c)
                        for (int e = 0; e <= c; ++e) {
                            const double coef = inv * ((c == e ? p[c] : 0.0) - p[c] * p[e]);
                            for (std::size_t a = 0; a < k; ++a)
                                for (std::size_t b = 0; b < k; ++b) {
                                    const std::size_t r = c * k + a, s = e * k + b;
                                    if (s <= r) (*H)(r, s) += coef * f[a] * f[b];
                                }
                        }
                }
            }
        }
        if (H) (*H) = H->selfadjointView<Eigen::Lower>();
    }
};

inline Problem make_problem(const ad::Array& F, const std::vector<int>& labels, int K) {
    if (F.rank() != 2) throw ad::ShapeError("solver: features must be a matrix, got " + ad::shape_str(F.shape()));
    if (F.rows() != labels.size())
        throw ad::ShapeError("solver: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(F.rows()) + " feature rows");
    return Problem{F.data(), F.rows(), F.cols(), &labels, K};
}

inline void require_classes(const std::vector<int>& labels, int K) {
    if (labels.empty()) throw DataError("predictor transfer undefined for single-class group");
    if (K == 2) {
        for (int y : labels)
            if (y != labels.front()) return;
        throw DataError("predictor transfer undefined for single-class group");
    }
    std::vector<bool> seen(static_cast<std::size_t>(K), false);
    for (int y : labels) seen.at(static_cast<std::size_t>(y)) = true;
    for (bool s : seen)
        if (!s) throw DataError("predictor transfer undefined for single-class group");
}

inline ad::Shape predictor_shape(std::size_t k, int K) {
    return K == 2 ? ad::Shape{k} : ad::Shape{static_cast<std::size_t>(K), k};
}

}  // namespace solver_detail

/// w(Q) = argmin_w mean loss of w over the features F of one environment.
/// Damped Newton with Armijo backtracking; iterates are kept inside the
/// ball ||w|| <= max_norm so separable data cannot diverge.
inline SolveResult solve_optimal_predictor(const ad::Array& F, const std::vector<int>& labels, int num_classes,
                                           const SolverOptions& opt = {},
                                           const std::optional<ad::Array>& warm = std::nullopt) {
    solver_detail::require_classes(labels, num_classes);
    const auto prob = solver_detail::make_problem(F, labels, num_classes);
    const auto D = static_cast<Eigen::Index>(prob.dim());
    Vec w = Vec::Zero(D);
    if (warm && warm->size() == static_cast<std::size_t>(D)) {
        w = to_vec(*warm);
        if (!w.allFinite()) w.setZero();
        if (w.norm() > opt.max_norm) w *= opt.max_norm / w.norm();
    }

    SolveResult res;
    Vec g;
    Mat H;
    double f = prob.risk(w);
    for (res.iters = 0; res.iters < opt.max_iters; ++res.iters) {
        prob.grad_hess(w, g, &H);
        res.grad_norm = g.norm();
        if (res.grad_norm <= opt.tol) {
            res.converged = true;
            break;
        }
        Eigen::LDLT<Mat> ldlt(H);
        Vec p;
        const double min_eig = Eigen::SelfAdjointEigenSolver<Mat>(H, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
        if (min_eig < opt.damping) {
            p = -(H + (opt.damping - std::min(min_eig, 0.0)) * Mat::Identity(D, D)).ldlt().solve(g);
        } else {
            p = -ldlt.solve(g);
        }
        if (!p.allFinite() || g.dot(p) >= 0) p = -g;

        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            Vec cand = w + t * p;
            bool capped = false;
            if (cand.norm() > opt.max_norm) {
                cand *= opt.max_norm / cand.norm();
                capped = true;
            }
            const double fc = prob.risk(cand);
            if (fc <= f + 1e-4 * t * g.dot(p) || (capped && fc < f)) {
                res.capped = res.capped || capped;
                if (std::abs(f - fc) == 0.0 && (cand - w).norm() == 0.0) break;
                w = cand;
                f = fc;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;  // no further decrease possible within the ball
    }
    if (!res.converged) {
        prob.grad_hess(w, g, nullptr);
        res.grad_norm = g.norm();
        res.converged = res.grad_norm <= opt.tol;
    }
    if (!w.allFinite()) throw NumericError("solver: non-finite predictor");
    res.w = to_array(w, solver_detail::predictor_shape(prob.k, num_classes));
    res.risk = f;
    return res;
}

/// Hessian of the mean loss w.r.t. the predictor, explicit or matrix-free,
/// plus a diagonal damping term.
struct HessianOperator {
    std::optional<Mat> matrix;
    std::function<Vec(const Vec&)> hvp;
    Eigen::Index dim = 0;
    double damping = 0.0;
    bool damping_triggered = false;

    Vec apply(const Vec& v) const {
        if (v.size() != dim)
            throw ad::ShapeError("hessian: vector of length " + std::to_string(v.size()) + ", expected " +
                                 std::to_string(dim));
        Vec out = matrix ? Vec((*matrix) * v) : hvp(v);
        if (damping != 0.0) out += damping * v;
        return out;
    }

    /// Dense matrix including damping.
    Mat dense() const {
        Mat M(dim, dim);
        if (matrix) {
            M = *matrix;
            M.diagonal().array() += damping;
            return M;
        }
        for (Eigen::Index j = 0; j < dim; ++j) M.col(j) = apply(Vec::Unit(dim, j));
        return M;
    }

    static HessianOperator from_matrix(Mat H, double damping = 0.0) {
        HessianOperator op;
        op.dim = H.rows();
        op.matrix = std::move(H);
        op.damping = damping;
        return op;
    }
};

/// Explicit Hessian at w: mean of sigma(m)(1 - sigma(m)) z z^T for the
/// logistic loss (softmax analog for K > 2). Adds `eps` to the diagonal when
/// the smallest eigenvalue is below `eps`.
inline HessianOperator hessian_at(const ad::Array& w, const ad::Array& F, const std::vector<int>& labels,
                                  int num_classes, double eps = 1e-4) {
    const auto prob = solver_detail::make_problem(F, labels, num_classes);
    if (w.size() != prob.dim())
        throw ad::ShapeError("hessian_at: predictor of size " + std::to_string(w.size()) + ", expected " +
                             std::to_string(prob.dim()));
    Vec g;
    Mat H;
    prob.grad_hess(to_vec(w), g, &H);
    auto op = HessianOperator::from_matrix(H);
    const double min_eig = Eigen::SelfAdjointEigenSolver<Mat>(H, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
    if (min_eig < eps) {
        op.damping = eps;
        op.damping_triggered = true;
        log_debug("hessian_at: smallest eigenvalue " + std::to_string(min_eig) + " below " + std::to_string(eps) +
                  ", damping added");
    }
    return op;
}

/// Matrix-free binary-logistic HVP bound to one batch.
inline HessianOperator hvp_operator(const ad::Array& w, const ad::Array& F, const std::vector<int>& labels,
                                    double damping = 0.0) {
    const std::size_t n = F.rows(), k = F.cols();
    if (w.size() != k) throw ad::ShapeError("hvp_operator: predictor/feature size mismatch");
    auto coef = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t a = 0; a < k; ++a) s += w[a] * F(i, a);
        const double q = solver_detail::sig(labels[i] * s);
        (*coef)[i] = q * (1.0 - q) / static_cast<double>(n);
    }
    HessianOperator op;
    op.dim = static_cast<Eigen::Index>(k);
    op.damping = damping;
    op.hvp = [F, coef, n, k](const Vec& v) {
        Vec out = Vec::Zero(static_cast<Eigen::Index>(k));
        for (std::size_t i = 0; i < n; ++i) {
            double zv = 0.0;
            for (std::size_t a = 0; a < k; ++a) zv += F(i, a) * v[static_cast<Eigen::Index>(a)];
            const double c = (*coef)[i] * zv;
            for (std::size_t a = 0; a < k; ++a) out[static_cast<Eigen::Index>(a)] += c * F(i, a);
        }
        return out;
    };
    return op;
}

struct NeumannConfig {
    int steps = 10;        // j
    double scale = 0.0;    // c; 0 selects default_neumann_scale
    double damping = 1e-4; // epsilon
};

/// c = 1 / (0.25 * max_i ||z_i||^2 + eps), which bounds the logistic
/// Hessian so that the series converges. Softmax Hessians are bounded by 0.5.
inline double default_neumann_scale(const ad::Array& F, double eps, int num_classes = 2) {
    double mx = 0.0;
    for (std::size_t i = 0; i < F.rows(); ++i) {
        double s = 0.0;
        for (std::size_t a = 0; a < F.cols(); ++a) s += F(i, a) * F(i, a);
        mx = std::max(mx, s);
    }
    const double bound = num_classes == 2 ? 0.25 : 0.5;
    return 1.0 / (bound * mx + eps);
}

/// c * sum_{i=0}^{j} (I - c H')^i v  with  H' = H + eps I.
inline Vec neumann_inv_hvp(const HessianOperator& H, const Vec& v, const NeumannConfig& cfg) {
    if (cfg.steps < 1) throw std::invalid_argument("neumann: steps must be >= 1");
    if (!(cfg.scale > 0)) throw std::invalid_argument("neumann: scale must be positive (resolve the default first)");
    if (cfg.damping < 0) throw std::invalid_argument("neumann: damping must be >= 0");
    Vec term = v;
    Vec acc = v;
    for (int i = 1; i <= cfg.steps; ++i) {
        term = term - cfg.scale * (H.apply(term) + cfg.damping * term);
        if (!term.allFinite()) throw NumericError("neumann: non-finite value at step " + std::to_string(i));
        acc += term;
    }
    return cfg.scale * acc;
}

/// v_Q = H^{-1} g, either exactly (dense solve of H) or by the Neumann series.
inline Vec transfer_vector(const HessianOperator& H, const Vec& g, const NeumannConfig& cfg, bool exact = false) {
    if (g.size() != H.dim)
        throw ad::ShapeError("transfer_vector: gradient of length " + std::to_string(g.size()) + ", expected " +
                             std::to_string(H.dim));
    if (g.isZero(0.0)) return Vec::Zero(g.size());
    Vec v = exact ? Vec(H.dense().ldlt().solve(g)) : neumann_inv_hvp(H, g, cfg);
    if (!v.allFinite()) throw NumericError("transfer_vector: non-finite result");
    return v;
}

}  // namespace trm
