#pragma once

// Risk functionals: ERM, IRMv1, REx, GroupDRO weighting, transfer risk and
// the per-environment TRM objective.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "inner_solver.hpp"
#include "log.hpp"
#include "model.hpp"
#include "simplex.hpp"

namespace trm {

struct RiskReport {
    std::vector<double> env_losses;
    std::vector<std::pair<std::string, double>> components;
    double total = 0.0;
    ad::Var objective;  // differentiable when built from parameter leaves

    double component(const std::string& name) const {
        for (const auto& [k, v] : components)
            if (k == name) return v;
        throw std::out_of_range("risk report has no component '" + name + "'");
    }

    static void csv_header(std::ostream& os) { os << "# trm risk-report v1\niteration,env,component,value\n"; }

    /// Long-form rows; env is -1 for suite-level components.
    void append_csv(std::ostream& os, long iteration) const {
        const auto old = os.precision(17);
        for (std::size_t e = 0; e < env_losses.size(); ++e)
            os << iteration << ',' << e << ",env_loss," << env_losses[e] << '\n';
        for (const auto& [k, v] : components) os << iteration << ",-1," << k << ',' << v << '\n';
        os << iteration << ",-1,total," << total << '\n';
        os.precision(old);
    }
};

enum class TransferVariant { sum_sup, sum_sum };
enum class InnerMode { exact_worst, eg_state };

inline TransferVariant parse_variant(const std::string& s) {
    if (s == "sum_sup") return TransferVariant::sum_sup;
    if (s == "sum_sum") return TransferVariant::sum_sum;
    throw std::invalid_argument("unknown transfer variant '" + s + "' (expected sum_sup or sum_sum)");
}

namespace obj_detail {

inline ad::Var leaf_or_param(const ad::Var& w) { return w.requires_grad() ? w : ad::Var::param(w.value()); }

inline std::vector<ad::Var> env_losses(const Model& model, const ad::Var& w, const std::vector<Batch>& batches) {
    std::vector<ad::Var> out;
    out.reserve(batches.size());
    for (const auto& b : batches) out.push_back(env_risk(model.features(b.X), w, b));
    return out;
}

inline ad::Var sum_all(const std::vector<ad::Var>& xs) {
    ad::Var total = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) total = total + xs[i];
    return total;
}

}  // namespace obj_detail

/// Per-environment mean losses and the pooled (sample-size weighted) loss.
/// `sum_erm` holds the unweighted sum over environments, which the trainer
/// minimizes for ERM so that IRMv1 and REx with zero penalty coincide with it.
inline RiskReport erm_risk(const Model& model, const ad::Var& w, const std::vector<Batch>& batches) {
    if (batches.empty()) throw std::invalid_argument("erm_risk: no environments");
    auto Ls = obj_detail::env_losses(model, w, batches);
    RiskReport r;
    double n_total = 0.0;
    for (const auto& b : batches) n_total += static_cast<double>(b.size());
    ad::Var pooled = Ls.front() * (static_cast<double>(batches.front().size()) / n_total);
    for (std::size_t i = 1; i < Ls.size(); ++i)
        pooled = pooled + Ls[i] * (static_cast<double>(batches[i].size()) / n_total);
    for (const auto& L : Ls) r.env_losses.push_back(L.item());
    const ad::Var sum = obj_detail::sum_all(Ls);
    r.components = {{"pooled", pooled.item()}, {"sum_erm", sum.item()}};
    r.total = pooled.item();
    r.objective = pooled;
    return r;
}

namespace obj_detail {

inline Batch rows_of(const Batch& b, std::size_t begin, std::size_t end) {
    Batch out;
    const std::size_t d = b.X.cols(), n = end - begin;
    out.X = ad::Array(ad::Shape{n, d}, std::vector<double>(b.X.data() + begin * d, b.X.data() + end * d));
    out.labels.assign(b.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      b.labels.begin() + static_cast<std::ptrdiff_t>(end));
    if (b.binary()) out.ysign = ad::Array(ad::Shape{n}, std::vector<double>(b.ysign.data() + begin, b.ysign.data() + end));
    out.num_classes = b.num_classes;
    out.env_id = b.env_id;
    return out;
}

}  // namespace obj_detail

/// sum_P E_P[l] + lambda * sum_P ||grad_w E_P[l]||^2. The penalty is built
/// through a retained first-gradient graph, so it is differentiable in Phi and w.
/// With split_half the squared norm is estimated without bias on minibatches
/// as <grad on first half, grad on second half>.
inline RiskReport irmv1_risk(const Model& model, const ad::Var& w_in, const std::vector<Batch>& batches,
                             double lambda, bool split_half = false) {
    if (batches.empty()) throw std::invalid_argument("irmv1_risk: no environments");
    if (lambda < 0) throw std::invalid_argument("irmv1_risk: lambda must be >= 0");
    const ad::Var w = obj_detail::leaf_or_param(w_in);
    auto Ls = obj_detail::env_losses(model, w, batches);
    RiskReport r;
    std::vector<ad::Var> pens;
    double pen_total = 0.0;
    for (std::size_t e = 0; e < Ls.size(); ++e) {
        r.env_losses.push_back(Ls[e].item());
        if (split_half && batches[e].size() >= 2) {
            const std::size_t half = batches[e].size() / 2;
            const Batch A = obj_detail::rows_of(batches[e], 0, half);
            const Batch B = obj_detail::rows_of(batches[e], half, 2 * half);
            const ad::Var gA = ad::grad_vars(env_risk(model.features(A.X), w, A), {w}, true)[0];
            const ad::Var gB = ad::grad_vars(env_risk(model.features(B.X), w, B), {w}, true)[0];
            pens.push_back(ad::sum(ad::mul(gA, gB)));
        } else {
            pens.push_back(ad::norm2(ad::grad_vars(Ls[e], {w}, true)[0]));
        }
        pen_total += pens.back().item();
    }
    const ad::Var erm = obj_detail::sum_all(Ls);
    ad::Var total = erm;
    if (lambda != 0.0) total = erm + obj_detail::sum_all(pens) * lambda;
    r.components = {{"erm_term", erm.item()}, {"penalty", pen_total}};
    r.total = total.item();
    r.objective = total;
    return r;
}

/// sum_P E_P[l] + beta * Var_P(E_P[l]) with the population variance.
inline RiskReport rex_risk(const Model& model, const ad::Var& w, const std::vector<Batch>& batches, double beta) {
    if (batches.size() < 2) throw std::invalid_argument("rex_risk: at least two environments are required");
    auto Ls = obj_detail::env_losses(model, w, batches);
    RiskReport r;
    for (const auto& L : Ls) r.env_losses.push_back(L.item());
    const ad::Var erm = obj_detail::sum_all(Ls);
    const double inv = 1.0 / static_cast<double>(Ls.size());
    const ad::Var mean = erm * inv;
    std::vector<ad::Var> dev;
    for (const auto& L : Ls) dev.push_back(ad::square(L - mean));
    const ad::Var var = obj_detail::sum_all(dev) * inv;
    ad::Var total = erm;
    if (beta != 0.0) total = erm + var * beta;
    r.components = {{"erm_term", erm.item()}, {"variance", var.item()}};
    r.total = total.item();
    r.objective = total;
    return r;
}

/// GroupDRO: EG ascent over all environments with the shared model's losses.
inline SimplexWeights groupdro_weights_update(const SimplexWeights& current, const std::vector<double>& losses,
                                              double eta) {
    if (current.owner != -1) throw std::invalid_argument("groupdro_weights_update: weights must span all environments");
    return exponentiated_gradient(current, losses, eta);
}

/// EG ascent on alpha(Q); the gain of alpha_i is E_{P_i}[l(w(Q) o Phi)].
inline SimplexWeights eg_update(const SimplexWeights& alpha, const std::vector<double>& losses, double eta) {
    if (alpha.owner < 0) throw std::invalid_argument("eg_update: alpha must exclude its owner environment");
    std::vector<double> gains = losses;
    gains[static_cast<std::size_t>(alpha.owner)] = 0.0;  // ignored, weight pinned at zero
    for (double g : gains)
        if (!std::isfinite(g)) throw std::invalid_argument("eg_update: non-finite loss");
    return exponentiated_gradient(alpha, gains, eta);
}

/// Index of the largest loss among P != exclude; lowest index on ties.
inline std::size_t worst_env(const std::vector<double>& losses, int exclude) {
    std::size_t best = losses.size();
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (static_cast<int>(i) == exclude) continue;
        if (best == losses.size() || losses[i] > losses[best]) best = i;
    }
    if (best == losses.size()) throw std::invalid_argument("worst_env: no candidate environment");
    return best;
}

/// Solved w(Q) per environment plus T(Q, P) = E_P[l(w(Q) o Phi)].
/// Environments whose predictor is undefined (one class) get NaN rows.
struct TransferTable {
    std::vector<std::optional<SolveResult>> solutions;
    Mat loss;  // E x E, diagonal = within-env optimal risk
};

inline TransferTable transfer_table(const Model& model, const std::vector<Batch>& batches, const SolverOptions& opt,
                                    bool training = false, const std::vector<ad::Array>* warm = nullptr) {
    const Model frozen = model.frozen();
    const auto E = batches.size();
    TransferTable t;
    t.loss = Mat::Constant(static_cast<Eigen::Index>(E), static_cast<Eigen::Index>(E),
                           std::numeric_limits<double>::quiet_NaN());
    std::vector<ad::Var> feats;
    for (const auto& b : batches) feats.push_back(frozen.features(b.X));
    for (std::size_t q = 0; q < E; ++q) {
        try {
            std::optional<ad::Array> w0;
            if (warm && q < warm->size()) w0 = (*warm)[q];
            t.solutions.emplace_back(solve_optimal_predictor(feats[q].value(), batches[q].labels,
                                                             batches[q].num_classes, opt, w0));
        } catch (const DataError& e) {
            if (training) throw;
            log_warn("transfer risk: environment " + std::to_string(q) + " skipped: " + e.what());
            t.solutions.emplace_back(std::nullopt);
            continue;
        }
        const ad::Var wq(t.solutions.back()->w);
        for (std::size_t p = 0; p < E; ++p)
            t.loss(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(p)) =
                env_risk(feats[p], wq, batches[p]).item();
    }
    return t;
}

/// Transfer risk. sum_sup takes, for each Q, the sup over Conv(Omega \ Q):
/// exact_worst selects the worst single environment, eg_state uses the given
/// alpha(Q). sum_sum averages uniformly over P != Q. env_losses[Q] holds each
/// Q's term; `objective` is differentiable in Phi with every w(Q) frozen.
inline RiskReport transfer_risk(const Model& model, const std::vector<Batch>& batches, TransferVariant variant,
                                InnerMode mode, const std::vector<SimplexWeights>* alphas = nullptr,
                                const SolverOptions& opt = {}, bool training = false) {
    const auto E = batches.size();
    if (E < 2) throw std::invalid_argument("transfer_risk: at least two environments are required");
    if (variant == TransferVariant::sum_sup && mode == InnerMode::eg_state && (!alphas || alphas->size() != E))
        throw std::invalid_argument("transfer_risk: eg_state needs one alpha per environment");
    const auto table = transfer_table(model, batches, opt, training);
    RiskReport r;
    r.env_losses.assign(E, std::numeric_limits<double>::quiet_NaN());
    ad::Var objective;
    std::vector<ad::Var> feats;
    for (const auto& b : batches) feats.push_back(model.features(b.X));
    double total = 0.0;
    for (std::size_t q = 0; q < E; ++q) {
        if (!table.solutions[q]) continue;
        std::vector<double> weight(E, 0.0);
        if (variant == TransferVariant::sum_sum) {
            for (std::size_t p = 0; p < E; ++p)
                if (p != q) weight[p] = 1.0 / static_cast<double>(E - 1);
        } else if (mode == InnerMode::exact_worst) {
            std::vector<double> row(E);
            for (std::size_t p = 0; p < E; ++p) row[p] = table.loss(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(p));
            weight[worst_env(row, static_cast<int>(q))] = 1.0;
        } else {
            (*alphas)[q].validate();
            weight = (*alphas)[q].weights;
        }
        double term = 0.0;
        const ad::Var wq(table.solutions[q]->w);
        for (std::size_t p = 0; p < E; ++p) {
            if (weight[p] == 0.0) continue;
            term += weight[p] * table.loss(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(p));
            ad::Var piece = env_risk(feats[p], wq, batches[p]) * weight[p];
            objective = objective.defined() ? objective + piece : piece;
        }
        r.env_losses[q] = term;
        total += term;
    }
    r.total = total;
    r.components = {{variant == TransferVariant::sum_sum ? "transfer_sumsum"
                     : mode == InnerMode::exact_worst     ? "transfer_sumsup"
                                                          : "transfer_eg",
                     total}};
    r.objective = objective.defined() ? objective : ad::Var(ad::Array::scalar(0.0));
    return r;
}

struct TRMHyper {
    double lambda = 0.1;
    NeumannConfig neumann;
    TransferVariant variant = TransferVariant::sum_sup;
    bool exact_inverse = false;
};

/// Extra outputs of one TRM step besides the report.
struct TRMStepInfo {
    std::vector<double> transfer_losses;  // E_P[l(w(Q) o Phi)], NaN at Q
    Vec v_q;
    double grad_match_value = 0.0;
};

/// E_Q[l(w_all o Phi)] + E_{P(Q)}[l(w(Q) o Phi)] - lambda sg(v_Q)^T dE_Q[l(w(Q) o Phi)]/dw.
/// w(Q) enters as a frozen leaf: its value follows Phi through the solve but
/// no derivative flows through it. v_Q = H^{-1} dE_{P(Q)}[l]/dw at w(Q).
inline RiskReport trm_step_objective(const Model& model, const ad::Var& w_all, const std::vector<Batch>& batches,
                                     std::size_t Q, const SimplexWeights& alpha, const TRMHyper& hyper,
                                     const ad::Array& w_q, TRMStepInfo* info = nullptr,
                                     const std::vector<ad::Var>* features = nullptr) {
    const auto E = batches.size();
    if (Q >= E) throw std::out_of_range("trm_step_objective: Q out of range");
    if (hyper.lambda < 0) throw std::invalid_argument("trm_step_objective: lambda must be >= 0");
    if (alpha.size() != E || alpha.owner != static_cast<int>(Q))
        throw std::invalid_argument("trm_step_objective: alpha must be owned by Q");
    alpha.validate();

    std::vector<double> weight(E, 0.0);
    for (std::size_t p = 0; p < E; ++p)
        if (p != Q)
            weight[p] = hyper.variant == TransferVariant::sum_sum ? 1.0 / static_cast<double>(E - 1) : alpha.weights[p];

    std::vector<ad::Var> feats(E);
    if (features && features->size() != E) throw std::invalid_argument("trm_step_objective: one feature node per environment");
    for (std::size_t p = 0; p < E; ++p)
        if (p == Q || weight[p] > 0.0 || info) feats[p] = features ? (*features)[p] : model.features(batches[p].X);

    const ad::Var erm = env_risk(feats[Q], w_all, batches[Q]);

    const ad::Var wq = ad::Var::param(w_q);
    ad::Var transfer;
    std::vector<double> tl(E, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t p = 0; p < E; ++p) {
        if (p == Q || !feats[p].defined()) continue;
        const ad::Var Lp = env_risk(feats[p], wq, batches[p]);
        tl[p] = Lp.item();
        if (weight[p] == 0.0) continue;
        const ad::Var piece = Lp * weight[p];
        transfer = transfer.defined() ? transfer + piece : piece;
    }
    if (!transfer.defined()) throw std::invalid_argument("trm_step_objective: empty mixture");

    RiskReport r;
    r.env_losses = tl;
    ad::Var total = erm + transfer;
    double gm_value = 0.0;
    Vec v;
    if (hyper.lambda != 0.0) {
        Vec g_transfer = Vec::Zero(static_cast<Eigen::Index>(w_q.size()));
        for (std::size_t p = 0; p < E; ++p) {
            if (weight[p] == 0.0) continue;
            const auto prob = solver_detail::make_problem(feats[p].value(), batches[p].labels, batches[p].num_classes);
            Vec gp;
            prob.grad_hess(to_vec(w_q), gp, nullptr);
            g_transfer += weight[p] * gp;
        }
        const ad::Array FQ = feats[Q].value();
        const auto H = hessian_at(w_q, FQ, batches[Q].labels, batches[Q].num_classes, hyper.neumann.damping);
        NeumannConfig nc = hyper.neumann;
        if (!(nc.scale > 0)) nc.scale = default_neumann_scale(FQ, nc.damping, batches[Q].num_classes);
        v = hyper.exact_inverse ? transfer_vector(HessianOperator::from_matrix(*H.matrix, H.damping_triggered ? H.damping : 0.0),
                                                  g_transfer, nc, true)
                                : transfer_vector(HessianOperator::from_matrix(*H.matrix), g_transfer, nc, false);
        const ad::Var LQ = env_risk(feats[Q], wq, batches[Q]);
        const ad::Var gQ = ad::grad_vars(LQ, {wq}, true)[0];
        const ad::Var vv = ad::stop_gradient(ad::Var(to_array(v, w_q.shape())));
        const ad::Var gm = ad::sum(ad::mul(vv, gQ)) * (-hyper.lambda);
        gm_value = gm.item();
        total = total + gm;
    }
    r.components = {{"erm_term", erm.item()}, {"transfer_term", transfer.item()}, {"grad_match_term", gm_value}};
    r.total = total.item();
    r.objective = total;
    if (info) {
        info->transfer_losses = tl;
        info->v_q = v;
        info->grad_match_value = gm_value;
    }
    return r;
}

/// Sum over environments of ||grad_w E_P[l(w o Phi)]||^2, values only.
inline double irmv1_penalty_value(const Model& model, const ad::Array& w, const std::vector<Batch>& batches) {
    const Model frozen = model.frozen();
    const ad::Var wp = ad::Var::param(w);
    double total = 0.0;
    for (const auto& b : batches) {
        const auto g = ad::grad(env_risk(frozen.features(b.X), wp, b), {wp})[wp];
        for (std::size_t i = 0; i < g.size(); ++i) total += g[i] * g[i];
    }
    return total;
}

}  // namespace trm
