#pragma once

// The 2-d linear analysis: closed-form predictors, grid brute force over the
// unit circle, and weight-ratio sweeps of ERM / IRMv1 / TRM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "envgen.hpp"
#include "jobs.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "trainer.hpp"

namespace trm {

/// w(P) for Phi = (a, b) in the 2-d Gaussian setting with unit variances.
inline double closed_form_predictor(double a, double b, double mu_c, double mu_e) {
    const double n2 = a * a + b * b;
    if (!(n2 > 0)) throw std::invalid_argument("closed_form_predictor: Phi is zero");
    return 2.0 * (a * mu_c + b * mu_e) / n2;
}

/// Nodes and weights of n-point Gauss-Hermite quadrature (weight exp(-x^2)),
/// by Golub-Welsch.
inline std::pair<std::vector<double>, std::vector<double>> gauss_hermite(int n) {
    if (n < 1) throw std::invalid_argument("gauss_hermite: n must be >= 1");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    std::vector<double> x(n), w(n);
    for (int i = 0; i < n; ++i) {
        x[i] = es.eigenvalues()(i);
        const double v = es.eigenvectors()(0, i);
        w[i] = std::sqrt(std::numbers::pi) * v * v;
    }
    return {x, w};
}

/// E[f(u)] for u ~ N(m, s^2).
template <class F>
double gaussian_expectation(F&& f, double m, double s, int nodes = 64) {
    thread_local std::map<int, std::pair<std::vector<double>, std::vector<double>>> cache;
    auto it = cache.find(nodes);
    if (it == cache.end()) it = cache.emplace(nodes, gauss_hermite(nodes)).first;
    const auto& [x, w] = it->second;
    double acc = 0.0;
    for (int i = 0; i < nodes; ++i) acc += w[i] * f(m + std::sqrt(2.0) * s * x[i]);
    return acc / std::sqrt(std::numbers::pi);
}

/// Population logistic risk of score w (a z_c + b z_e) when
/// z_c | y ~ N(y mu_c, 1), z_e | y ~ N(y mu_e, 1).
inline double population_risk_2d(double a, double b, double w, double mu_c, double mu_e, int nodes = 64) {
    const double m = w * (a * mu_c + b * mu_e);
    const double s = std::abs(w) * std::hypot(a, b);
    auto loss = [](double u) { return u > 0 ? std::log1p(std::exp(-u)) : -u + std::log1p(std::exp(u)); };
    if (s == 0.0) return loss(m);
    return gaussian_expectation(loss, m, s, nodes);
}

// ---------------------------------------------------------------------------
// Brute force over Phi(theta) = (cos theta, sin theta).

struct BruteForceOptions {
    double lambda_irm = 1.0;
    // Evaluate half the circle and mirror; the objectives are even in Phi.
    bool use_symmetry = true;
    double max_norm = 1e3;
};

struct BruteForceResult {
    std::vector<double> theta;
    std::vector<double> values;
    std::size_t argmin = 0;
    double theta_star = 0.0;
    double ratio = 0.0;
    double step = 0.0;
};

namespace bf_detail {

struct Projected {
    std::vector<double> u, y;
};

// L, dL/dw, d2L/dw2, d3L/dw3 of mean logistic loss of w * u.
struct Moments {
    double L = 0, g = 0, h = 0, t = 0;
};

inline Moments moments(const Projected& p, double w, bool third) {
    Moments m;
    const std::size_t n = p.u.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double yu = p.y[i] * p.u[i];
        const double z = w * yu;
        const double e = std::exp(-std::abs(z));
        const double big = 1.0 / (1.0 + e), small = e * big;
        const double sp = z >= 0 ? big : small, sn = z >= 0 ? small : big;  // sigma(m), sigma(-m)
        m.L += std::log1p(e) + std::max(0.0, -z);
        m.g -= sn * yu;
        const double d2 = sp * sn;
        m.h += d2 * yu * yu;
        if (third) m.t += d2 * (sn - sp) * yu * yu * yu;
    }
    const double k = 1.0 / static_cast<double>(n);
    m.L *= k;
    m.g *= k;
    m.h *= k;
    m.t *= k;
    return m;
}

// Safeguarded Newton on a scalar function given (J, J', J'').
template <class Fn>
double newton_1d(Fn&& fn, double w, double cap) {
    double J, d1, d2;
    fn(w, J, d1, d2);
    for (int it = 0; it < 200; ++it) {
        if (std::abs(d1) < 1e-11) break;
        const double step = d2 > 0 ? -d1 / d2 : -d1;
        if (std::abs(step) < 1e-13 * (1.0 + std::abs(w))) break;
        double t = 1.0, Jn = 0, n1 = 0, n2 = 0, wn = w;
        bool ok = false;
        for (int ls = 0; ls < 40; ++ls) {
            wn = std::clamp(w + t * step, -cap, cap);
            fn(wn, Jn, n1, n2);
            // Near the optimum J stops resolving the decrease; a shrinking
            // derivative is accepted instead.
            if (Jn <= J + 1e-4 * t * step * d1 || (d2 > 0 && n2 > 0 && std::abs(n1) < 0.5 * std::abs(d1))) {
                ok = true;
                break;
            }
            t *= 0.5;
        }
        if (!ok || wn == w) break;
        w = wn;
        J = Jn;
        d1 = n1;
        d2 = n2;
    }
    return w;
}

}  // namespace bf_detail

/// Grid argmin of the objective of `alg` over the unit circle, with the
/// predictors minimized out at each angle. ERM: min_w sum_P L_P. IRMv1:
/// min_w sum_P L_P + lambda sum_P (dL_P/dw)^2. TRM: the ERM value plus
/// sum_Q mean_{P != Q} L_P(w(Q)). Returns |tan theta*|.
inline BruteForceResult bruteforce_ratio(const EnvironmentSuite& suite, Algorithm alg, std::size_t grid = 4096,
                                         const BruteForceOptions& opt = {}) {
    if (suite.dim() != 2 || suite.num_classes() != 2)
        throw std::invalid_argument("bruteforce_ratio: needs a binary suite with 2-d inputs");
    if (alg != Algorithm::erm && alg != Algorithm::irmv1 && alg != Algorithm::trm)
        throw std::invalid_argument("bruteforce_ratio: supports erm, irmv1 and trm");
    if (grid < 4 || grid % 2) throw std::invalid_argument("bruteforce_ratio: grid must be even and >= 4");
    const std::size_t E = suite.size();
    std::vector<bf_detail::Projected> proj(E);
    for (std::size_t p = 0; p < E; ++p) {
        proj[p].y.assign(suite.envs[p].labels.begin(), suite.envs[p].labels.end());
        proj[p].u.resize(suite.envs[p].size());
    }

    BruteForceResult res;
    res.step = 2.0 * std::numbers::pi / static_cast<double>(grid);
    res.theta.resize(grid);
    res.values.assign(grid, 0.0);
    const std::size_t count = opt.use_symmetry ? grid / 2 : grid;

    double w_erm = 0.0, w_irm = 0.0;
    std::vector<double> w_q(E, 0.0);
    for (std::size_t k = 0; k < grid; ++k) res.theta[k] = res.step * static_cast<double>(k);
    for (std::size_t k = 0; k < count; ++k) {
        const double c = std::cos(res.theta[k]), s = std::sin(res.theta[k]);
        for (std::size_t p = 0; p < E; ++p) {
            const auto& X = suite.envs[p].features;
            for (std::size_t i = 0; i < proj[p].u.size(); ++i) proj[p].u[i] = c * X(i, 0) + s * X(i, 1);
        }
        auto erm_fn = [&](double w, double& J, double& d1, double& d2) {
            J = d1 = d2 = 0;
            for (const auto& p : proj) {
                const auto m = bf_detail::moments(p, w, false);
                J += m.L;
                d1 += m.g;
                d2 += m.h;
            }
        };
        w_erm = bf_detail::newton_1d(erm_fn, w_erm, opt.max_norm);
        double J, d1, d2;
        erm_fn(w_erm, J, d1, d2);
        double value = J;

        if (alg == Algorithm::irmv1) {
            const double lam = opt.lambda_irm;
            auto irm_fn = [&](double w, double& Jv, double& g1, double& g2) {
                Jv = g1 = g2 = 0;
                for (const auto& p : proj) {
                    const auto m = bf_detail::moments(p, w, true);
                    Jv += m.L + lam * m.g * m.g;
                    g1 += m.g + 2 * lam * m.g * m.h;
                    g2 += m.h + 2 * lam * (m.h * m.h + m.g * m.t);
                }
            };
            // Continuation from the previous angle and a restart from ERM.
            const double a = bf_detail::newton_1d(irm_fn, w_irm, opt.max_norm);
            const double b = bf_detail::newton_1d(irm_fn, w_erm, opt.max_norm);
            double Ja, Jb;
            irm_fn(a, Ja, d1, d2);
            irm_fn(b, Jb, d1, d2);
            w_irm = Jb < Ja ? b : a;
            value = std::min(Ja, Jb);
        } else if (alg == Algorithm::trm) {
            for (std::size_t q = 0; q < E; ++q) {
                auto fn = [&](double w, double& Jv, double& g1, double& g2) {
                    const auto m = bf_detail::moments(proj[q], w, false);
                    Jv = m.L;
                    g1 = m.g;
                    g2 = m.h;
                };
                w_q[q] = bf_detail::newton_1d(fn, w_q[q], opt.max_norm);
                double tr = 0.0;
                for (std::size_t p = 0; p < E; ++p)
                    if (p != q) tr += bf_detail::moments(proj[p], w_q[q], false).L;
                value += tr / static_cast<double>(E - 1);
            }
        }
        res.values[k] = value;
    }
    if (opt.use_symmetry)
        for (std::size_t k = 0; k < grid / 2; ++k) res.values[k + grid / 2] = res.values[k];

    res.argmin = static_cast<std::size_t>(std::min_element(res.values.begin(), res.values.end()) - res.values.begin());
    res.theta_star = res.theta[res.argmin];
    res.ratio = weight_ratio(std::cos(res.theta_star), std::sin(res.theta_star));
    return res;
}

/// Distance between two directions of the 2-d map, modulo the sign flip.
inline double angle_gap(double theta1, double theta2) {
    double d = std::fmod(std::abs(theta1 - theta2), std::numbers::pi);
    return std::min(d, std::numbers::pi - d);
}

// ---------------------------------------------------------------------------
// Weight-ratio sweeps.

enum class SweepAxis { mu_c, num_envs };

inline SweepAxis parse_axis(const std::string& s) {
    if (s == "mu_c") return SweepAxis::mu_c;
    if (s == "num_envs" || s == "E") return SweepAxis::num_envs;
    throw std::invalid_argument("unknown sweep axis '" + s + "' (expected mu_c or num_envs)");
}

inline std::string to_string(SweepAxis a) { return a == SweepAxis::mu_c ? "mu_c" : "num_envs"; }

struct SweepSpec {
    SuiteConfig suite;  // 2-d: d_e = 1, one causal coordinate
    SweepAxis axis = SweepAxis::mu_c;
    std::vector<double> values;
    std::vector<std::uint64_t> seeds;
    std::vector<Algorithm> algorithms{Algorithm::erm, Algorithm::irmv1, Algorithm::trm};
    TrainConfig train;
    std::size_t jobs = 1;
    // Non-increasing check of median r_ERM / r_TRM tolerates this many rises.
    int allowed_inversions = 1;

    void validate() const {
        if (values.empty()) throw std::invalid_argument("sweep: no grid values");
        if (seeds.empty()) throw std::invalid_argument("sweep: no seeds");
        for (double v : values) {
            if (!std::isfinite(v)) throw std::invalid_argument("sweep: non-finite grid value");
            if (axis == SweepAxis::num_envs && (v < 2 || v != std::floor(v)))
                throw std::invalid_argument("sweep: num_envs values must be integers >= 2");
            if (axis == SweepAxis::mu_c && v <= 0) throw std::invalid_argument("sweep: mu_c values must be > 0");
        }
        if (algorithms.empty()) throw std::invalid_argument("sweep: no algorithms");
    }
};

struct SweepRow {
    double value = 0.0;
    Algorithm algorithm = Algorithm::erm;
    std::uint64_t seed = 0;
    double ratio = 0.0;
    double a = 0.0, b = 0.0;
    double k_diag = std::numeric_limits<double>::quiet_NaN();  // IRMv1 rows only
};

struct SweepPoint {
    double value = 0.0;
    std::vector<double> median;     // per algorithm, in spec order
    std::vector<double> halfwidth;  // 1.96 sd / sqrt(n) over seeds
    double ratio_erm_trm = std::numeric_limits<double>::quiet_NaN();  // median of per-seed ratios
    double ratio_irm_trm = std::numeric_limits<double>::quiet_NaN();
    double relative_margin = std::numeric_limits<double>::quiet_NaN();  // 1 - med r_TRM / med r_ERM
    bool ordered = true;  // med r_TRM <= med r_IRMv1 <= med r_ERM
};

struct RatioSweepResult {
    SweepAxis axis = SweepAxis::mu_c;
    std::vector<Algorithm> algorithms;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepRow> rows;
    std::vector<SweepPoint> points;
    int inversions = 0;
    bool monotone = true;
    bool ordered = true;

    double median(double value, Algorithm alg) const {
        for (const auto& p : points)
            if (p.value == value)
                for (std::size_t i = 0; i < algorithms.size(); ++i)
                    if (algorithms[i] == alg) return p.median[i];
        throw std::out_of_range("sweep: no such grid point / algorithm");
    }

    void write_csv(std::ostream& os) const {
        const auto old = os.precision(17);
        os << "# trm sweep v1\n" << to_string(axis) << ",algorithm,seed,ratio,a,b,k_diag\n";
        for (const auto& r : rows)
            os << r.value << ',' << to_string(r.algorithm) << ',' << r.seed << ',' << r.ratio << ',' << r.a << ','
               << r.b << ',' << r.k_diag << '\n';
        os.precision(old);
    }

    void write_summary(std::ostream& os) const {
        const auto old = os.precision(5);
        os << "sweep over " << to_string(axis) << " (" << seeds.size() << " seeds)\n";
        for (const auto& p : points) {
            os << "  " << to_string(axis) << '=' << p.value << ':';
            for (std::size_t i = 0; i < algorithms.size(); ++i)
                os << "  r_" << to_string(algorithms[i]) << '=' << p.median[i] << " +/- " << p.halfwidth[i];
            os << "  erm/trm=" << p.ratio_erm_trm << "  irmv1/trm=" << p.ratio_irm_trm
               << (p.ordered ? "  ordered" : "  NOT ordered") << '\n';
        }
        os << "  inversions of erm/trm: " << inversions << (monotone ? " (monotone)" : " (not monotone)") << '\n';
        os.precision(old);
    }
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Mean over environments of the Brier score E[(sigmoid(s) - 1{y = +1})^2].
inline double square_loss_diagnostic(const Model& model, const ad::Array& w, const std::vector<Batch>& batches) {
    const Model frozen = model.frozen();
    double total = 0.0;
    for (const auto& b : batches) {
        const auto s = logits(frozen.features(b.X), ad::Var(w)).value();
        double acc = 0.0;
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double d = solver_detail::sig(s[i]) - (b.labels[i] > 0 ? 1.0 : 0.0);
            acc += d * d;
        }
        total += acc / static_cast<double>(b.size());
    }
    return total / static_cast<double>(batches.size());
}

inline SuiteConfig sweep_suite(const SweepSpec& spec, double value) {
    SuiteConfig sc = spec.suite;
    if (spec.axis == SweepAxis::mu_c) sc.mu_c = {value};
    else sc.num_envs = static_cast<std::size_t>(value);
    return sc;
}

/// Suite draws depend on the seed only, so grid points share their noise.
inline std::uint64_t sweep_suite_seed(std::uint64_t seed) { return Philox::mix(seed, 0x7377656570ULL, 0); }

inline RatioSweepResult ratio_sweep(const SweepSpec& spec) {
    spec.validate();
    const std::size_t V = spec.values.size(), S = spec.seeds.size(), A = spec.algorithms.size();
    std::vector<SweepRow> rows(V * S * A);
    parallel_for(V * S, spec.jobs, [&](std::size_t task) {
        const std::size_t vi = task / S, si = task % S;
        const double value = spec.values[vi];
        const auto seed = spec.seeds[si];
        const auto suite = make_suite(sweep_suite(spec, value), sweep_suite_seed(seed));
        for (std::size_t ai = 0; ai < A; ++ai) {
            TrainConfig cfg = spec.train;
            cfg.algorithm = spec.algorithms[ai];
            cfg.seed = seed;
            cfg.model.constrained = true;
            cfg.model.kind = FeatureKind::linear;
            cfg.model.feature_dim = 1;
            const auto res = train(suite, cfg);
            SweepRow& row = rows[(vi * S + si) * A + ai];
            row.value = value;
            row.algorithm = cfg.algorithm;
            row.seed = seed;
            std::tie(row.a, row.b) = res.averaged.ab();
            row.ratio = weight_ratio(row.a, row.b);
            if (cfg.algorithm == Algorithm::irmv1)
                row.k_diag = square_loss_diagnostic(res.averaged, res.averaged_w,
                                                    make_eval_batches(suite, spec.train.eval_samples));
        }
    });

    RatioSweepResult out;
    out.axis = spec.axis;
    out.algorithms = spec.algorithms;
    out.seeds = spec.seeds;
    out.rows = rows;
    auto index_of = [&](Algorithm a) -> int {
        for (std::size_t i = 0; i < A; ++i)
            if (spec.algorithms[i] == a) return static_cast<int>(i);
        return -1;
    };
    const int ie = index_of(Algorithm::erm), ii = index_of(Algorithm::irmv1), it = index_of(Algorithm::trm);
    for (std::size_t vi = 0; vi < V; ++vi) {
        SweepPoint pt;
        pt.value = spec.values[vi];
        std::vector<std::vector<double>> per(A);
        for (std::size_t si = 0; si < S; ++si)
            for (std::size_t ai = 0; ai < A; ++ai) per[ai].push_back(rows[(vi * S + si) * A + ai].ratio);
        for (std::size_t ai = 0; ai < A; ++ai) {
            pt.median.push_back(median_of(per[ai]));
            double mean = 0, var = 0;
            for (double r : per[ai]) mean += r / static_cast<double>(S);
            for (double r : per[ai]) var += (r - mean) * (r - mean);
            pt.halfwidth.push_back(S > 1 ? 1.96 * std::sqrt(var / static_cast<double>(S - 1)) / std::sqrt(static_cast<double>(S)) : 0.0);
        }
        auto ratio_median = [&](int num) {
            std::vector<double> q;
            for (std::size_t si = 0; si < S; ++si) q.push_back(per[num][si] / per[it][si]);
            return median_of(q);
        };
        if (it >= 0 && ie >= 0) {
            pt.ratio_erm_trm = ratio_median(ie);
            pt.relative_margin = 1.0 - pt.median[it] / pt.median[ie];
        }
        if (it >= 0 && ii >= 0) pt.ratio_irm_trm = ratio_median(ii);
        if (ie >= 0 && ii >= 0 && it >= 0)
            pt.ordered = pt.median[it] <= pt.median[ii] && pt.median[ii] <= pt.median[ie];
        out.ordered = out.ordered && pt.ordered;
        out.points.push_back(pt);
    }
    for (std::size_t vi = 1; vi < out.points.size(); ++vi)
        if (out.points[vi].ratio_erm_trm > out.points[vi - 1].ratio_erm_trm) ++out.inversions;
    out.monotone = out.inversions <= spec.allowed_inversions;
    return out;
}

}  // namespace trm
