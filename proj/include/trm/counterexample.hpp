#pragma once

// Piecewise classifier with near-optimal IRMv1 loss but high transfer risk,
// and its Monte-Carlo certificate.
//
// Phi(z_c, z_e) = [z_c; 0]    if z_e lies in a ball of radius r around some +-mu_k, k != i
//               = [z_c; z_e]  otherwise
// w = (2 mu_c / sigma_c^2, 2 mu_i), r = sqrt(2 d_e), sigma_e = 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jobs.hpp"
#include "rng.hpp"

namespace trm {

struct ConstructionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConstructionSpec {
    std::size_t d_c = 0, d_e = 0, num_envs = 0;
    double sigma_c = 1.0;
    std::vector<double> mu_c;               // d_c
    std::vector<std::vector<double>> mu;    // num_envs x d_e
    std::size_t i = 0, j = 1;               // far-separated env, opposing env
    double radius = 0.0;                    // 0 means sqrt(2 d_e)
    std::size_t mc_samples = 1000000;       // per environment

    double r() const { return radius > 0 ? radius : std::sqrt(2.0 * static_cast<double>(d_e)); }

    /// Every violated assumption, one per line; empty when valid.
    std::vector<std::string> violations() const {
        std::vector<std::string> out;
        auto fmt = [](double x) {
            std::ostringstream s;
            s.precision(6);
            s << x;
            return s.str();
        };
        if (d_c == 0 || d_e == 0) out.push_back("d_c and d_e must be >= 1");
        if (num_envs < 2) out.push_back("at least two environments are required");
        if (!(sigma_c > 0)) out.push_back("sigma_c must be > 0");
        if (mu_c.size() != d_c) out.push_back("mu_c has " + std::to_string(mu_c.size()) + " entries, expected d_c");
        if (mu.size() != num_envs) out.push_back("expected one non-causal mean per environment");
        for (const auto& m : mu)
            if (m.size() != d_e) {
                out.push_back("a non-causal mean has the wrong dimension");
                break;
            }
        if (i >= num_envs || j >= num_envs || i == j) out.push_back("i and j must be distinct environment indices");
        if (!out.empty()) return out;

        const double sd = std::sqrt(static_cast<double>(d_e));
        const double nc = norm(mu_c);
        if (nc < sd * (1 - 1e-12)) out.push_back("||mu_c|| = " + fmt(nc) + " violates sqrt(d_e) <= ||mu_c|| (sqrt(d_e) = " + fmt(sd) + ")");
        if (nc > 8 * sd * (1 + 1e-12)) out.push_back("||mu_c|| = " + fmt(nc) + " violates ||mu_c|| <= 8 sqrt(d_e) = " + fmt(8 * sd));
        for (std::size_t k = 0; k < num_envs; ++k) {
            const double nk = norm(mu[k]);
            if (nk > 8 * sd * (1 + 1e-12))
                out.push_back("||mu_" + std::to_string(k) + "|| = " + fmt(nk) + " violates ||mu_k|| <= 8 sqrt(d_e) = " + fmt(8 * sd));
        }
        for (std::size_t k = 0; k < num_envs; ++k) {
            if (k == i) continue;
            double d2 = 0;
            for (std::size_t t = 0; t < d_e; ++t) d2 += (mu[i][t] - mu[k][t]) * (mu[i][t] - mu[k][t]);
            if (std::sqrt(d2) < 2 * r() * (1 - 1e-12))
                out.push_back("||mu_i - mu_" + std::to_string(k) + "|| = " + fmt(std::sqrt(d2)) +
                              " violates ||mu_i - mu_k|| >= 2 sqrt(2 d_e) = " + fmt(2 * r()));
        }
        const double ip = dot(mu[i], mu[j]), bound = -nc * nc / (sigma_c * sigma_c);
        if (ip > bound + 1e-9 * std::max(1.0, std::abs(bound)))
            out.push_back("mu_i . mu_j = " + fmt(ip) + " violates mu_i . mu_j <= -||mu_c||^2 / sigma_c^2 = " + fmt(bound));
        return out;
    }

    void validate() const {
        const auto v = violations();
        if (v.empty()) return;
        std::string msg = "construction geometry invalid:";
        for (const auto& s : v) msg += "\n  " + s;
        throw ConstructionError(msg);
    }

    static double dot(const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (std::size_t t = 0; t < a.size(); ++t) s += a[t] * b[t];
        return s;
    }
    static double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }
};

/// Deterministic means satisfying the assumptions: mu_c spread evenly over
/// d_c coordinates, mu_i = 8 sqrt(d_e) e_1, mu_j = -mu_i ||mu_c||^2 / (sigma_c^2 ||mu_i||^2),
/// the remaining means sqrt(d_e) along e_2, e_3, ... (cycling).
inline ConstructionSpec make_construction_spec(std::size_t d_c, std::size_t d_e, std::size_t num_envs,
                                               double sigma_c = 1.0, double mu_c_norm = 0.0) {
    if (d_c == 0 || d_e == 0 || num_envs < 2) throw ConstructionError("construction: need d_c, d_e >= 1 and E >= 2");
    ConstructionSpec s;
    s.d_c = d_c;
    s.d_e = d_e;
    s.num_envs = num_envs;
    s.sigma_c = sigma_c;
    const double sd = std::sqrt(static_cast<double>(d_e));
    const double nc = mu_c_norm > 0 ? mu_c_norm : sd;
    s.mu_c.assign(d_c, nc / std::sqrt(static_cast<double>(d_c)));
    s.mu.assign(num_envs, std::vector<double>(d_e, 0.0));
    s.i = 0;
    s.j = 1;
    s.mu[0][0] = 8 * sd;
    s.mu[1][0] = -8 * sd * nc * nc / (sigma_c * sigma_c * 64 * static_cast<double>(d_e));
    for (std::size_t k = 2; k < num_envs; ++k) {
        const std::size_t axis = d_e == 1 ? 0 : 1 + (k - 2) % (d_e - 1);
        s.mu[k][axis] = sd;
    }
    return s;
}

struct PiecewiseClassifier {
    ConstructionSpec spec;
    double radius = 0.0;
    std::vector<double> w_c;   // 2 mu_c / sigma_c^2
    std::vector<double> w_e;   // 2 mu_i
    bool invariant_only = false;

    /// True when z_e falls in one of the balls, i.e. Phi drops z_e.
    bool invariant_branch(const double* z_e) const {
        if (invariant_only) return true;
        double zz = 0;
        for (std::size_t t = 0; t < spec.d_e; ++t) zz += z_e[t] * z_e[t];
        const double r2 = radius * radius;
        for (std::size_t k = 0; k < spec.num_envs; ++k) {
            if (k == spec.i) continue;
            double zm = 0, mm = 0;
            for (std::size_t t = 0; t < spec.d_e; ++t) {
                zm += z_e[t] * spec.mu[k][t];
                mm += spec.mu[k][t] * spec.mu[k][t];
            }
            if (zz + mm - 2 * std::abs(zm) <= r2) return true;
        }
        return false;
    }

    /// w_c . z_c + w_e' . Phi_e(z_e) with the given non-causal weights.
    double score(const double* z_c, const double* z_e, const std::vector<double>& we) const {
        double s = 0;
        for (std::size_t t = 0; t < spec.d_c; ++t) s += w_c[t] * z_c[t];
        if (!invariant_branch(z_e))
            for (std::size_t t = 0; t < spec.d_e; ++t) s += we[t] * z_e[t];
        return s;
    }
    double score(const double* z_c, const double* z_e) const { return score(z_c, z_e, w_e); }
};

inline PiecewiseClassifier build_counterexample(const ConstructionSpec& spec) {
    spec.validate();
    PiecewiseClassifier c;
    c.spec = spec;
    c.radius = spec.r();
    for (double m : spec.mu_c) c.w_c.push_back(2 * m / (spec.sigma_c * spec.sigma_c));
    for (double m : spec.mu[spec.i]) c.w_e.push_back(2 * m);
    return c;
}

/// Phi = [z_c; 0] everywhere with the invariant predictor.
inline PiecewiseClassifier invariant_classifier(const ConstructionSpec& spec) {
    auto c = build_counterexample(spec);
    c.invariant_only = true;
    return c;
}

struct CertifyOptions {
    std::uint64_t seed = 0;
    std::size_t batches = 32;
    int max_doublings = 2;
    double max_halfwidth = 0.05;  // every clause's CI must be at least this tight
    double penalty_max = 0.05;
    double excess_max = 0.05;
    double transfer_min = 0.5;
    std::size_t jobs = 1;
    double z = 1.959963984540054;  // two-sided 95%
};

struct CertificateClause {
    std::string name;
    double estimate = 0, lo = 0, hi = 0, threshold = 0;
    bool upper_bound = true;  // estimate must lie below threshold (else above)
    bool pass = false;
    double halfwidth() const { return 0.5 * (hi - lo); }
};

struct Certificate {
    std::vector<CertificateClause> clauses;
    std::vector<double> penalty;            // per environment
    std::vector<double> penalty_hi;
    std::vector<double> loss;               // constructed classifier, per environment
    std::vector<double> invariant_loss;     // invariant classifier, per environment
    double transfer = 0, transfer_lo = 0, transfer_hi = 0;
    std::size_t samples_per_env = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    bool passed = false;
    std::string note;

    void write_csv(std::ostream& os) const {
        const auto old = os.precision(17);
        os << "# trm certificate v1\nclause,estimate,ci_low,ci_high,threshold,pass\n";
        for (const auto& c : clauses)
            os << c.name << ',' << c.estimate << ',' << c.lo << ',' << c.hi << ',' << c.threshold << ','
               << (c.pass ? 1 : 0) << '\n';
        for (std::size_t k = 0; k < penalty.size(); ++k)
            os << "penalty_env" << k << ',' << penalty[k] << ",," << penalty_hi[k] << ",,\n";
        for (std::size_t k = 0; k < loss.size(); ++k)
            os << "loss_env" << k << ',' << loss[k] << ",,,,\n"
               << "invariant_loss_env" << k << ',' << invariant_loss[k] << ",,,,\n";
        os.precision(old);
    }

    void write_summary(std::ostream& os) const {
        const auto old = os.precision(6);
        os << "certificate: " << (passed ? "PASS" : "FAIL") << "  (samples/env " << samples_per_env << ", seed " << seed;
        if (!config_hash.empty()) os << ", config " << config_hash;
        os << ")\n";
        for (const auto& c : clauses)
            os << "  " << (c.pass ? "pass " : "FAIL ") << c.name << " = " << c.estimate << "  95% CI [" << c.lo << ", "
               << c.hi << "]  " << (c.upper_bound ? "<= " : ">= ") << c.threshold << '\n';
        if (!note.empty()) os << "  note: " << note << '\n';
        os.precision(old);
    }
};

namespace cert_detail {

struct BatchStats {
    std::vector<double> grad;  // sum of per-sample gradients of the constructed classifier
    double diff = 0, diff2 = 0, loss = 0, inv_loss = 0, tr = 0, tr2 = 0;
    std::size_t n = 0;
};

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1 / (1 + std::exp(-x)) : std::exp(x) / (1 + std::exp(x)); }

inline BatchStats run_batch(const PiecewiseClassifier& c, std::size_t env, std::size_t n, std::uint64_t stream_seed,
                            const std::vector<double>& w_transfer) {
    const auto& s = c.spec;
    BatchStats b;
    b.grad.assign(s.d_c + s.d_e, 0.0);
    Philox rng(stream_seed);
    std::vector<double> zc(s.d_c), ze(s.d_e);
    std::vector<double> inv_w(s.d_e, 0.0);
    const bool transfer_env = env == s.i;
    for (std::size_t k = 0; k < n; ++k) {
        const double y = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (std::size_t t = 0; t < s.d_c; ++t) zc[t] = y * s.mu_c[t] + s.sigma_c * rng.normal();
        for (std::size_t t = 0; t < s.d_e; ++t) ze[t] = y * s.mu[env][t] + rng.normal();
        const bool inv = c.invariant_branch(ze.data());
        double sc = 0;
        for (std::size_t t = 0; t < s.d_c; ++t) sc += c.w_c[t] * zc[t];
        double se = 0, st = 0;
        if (!inv)
            for (std::size_t t = 0; t < s.d_e; ++t) {
                se += c.w_e[t] * ze[t];
                st += w_transfer[t] * ze[t];
            }
        const double m = y * (sc + se);
        const double l = softplus(-m), l0 = softplus(-y * sc);
        b.loss += l;
        b.inv_loss += l0;
        b.diff += l - l0;
        b.diff2 += (l - l0) * (l - l0);
        const double g = -sigmoid(-m) * y;
        for (std::size_t t = 0; t < s.d_c; ++t) b.grad[t] += g * zc[t];
        if (!inv)
            for (std::size_t t = 0; t < s.d_e; ++t) b.grad[s.d_c + t] += g * ze[t];
        if (transfer_env) {
            const double lt = softplus(-y * (sc + st));
            b.tr += lt;
            b.tr2 += lt * lt;
        }
    }
    b.n = n;
    return b;
}

// Unbiased estimate of ||E g||^2 from B batch means with a jackknife SE.
inline std::pair<double, double> squared_norm_ustat(const std::vector<std::vector<double>>& means) {
    const std::size_t B = means.size(), d = means.front().size();
    std::vector<double> S(d, 0.0), sq(B, 0.0);
    double Q = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < d; ++t) {
            S[t] += means[b][t];
            sq[b] += means[b][t] * means[b][t];
        }
    for (double v : sq) Q += v;
    double SS = 0;
    for (double v : S) SS += v * v;
    const double Bd = static_cast<double>(B);
    const double est = (SS - Q) / (Bd * (Bd - 1));
    std::vector<double> loo(B);
    double mean = 0;
    for (std::size_t b = 0; b < B; ++b) {
        double s2 = 0;
        for (std::size_t t = 0; t < d; ++t) s2 += (S[t] - means[b][t]) * (S[t] - means[b][t]);
        loo[b] = (s2 - (Q - sq[b])) / ((Bd - 1) * (Bd - 2));
        mean += loo[b] / Bd;
    }
    double var = 0;
    for (double v : loo) var += (v - mean) * (v - mean);
    return {est, std::sqrt((Bd - 1) / Bd * var)};
}

}  // namespace cert_detail

/// Monte-Carlo certificate for (a) the IRMv1 penalty per environment,
/// (b) the excess ERM loss over the invariant classifier (mean over
/// environments), (c) E_{P_i}[l(w_j o Phi)]. Undecided or too-wide clauses
/// double the sample count up to `max_doublings` times.
inline Certificate certify_counterexample(const PiecewiseClassifier& c, std::size_t samples_per_env,
                                          const CertifyOptions& opt = {}) {
    const auto& s = c.spec;
    if (samples_per_env < opt.batches * 2) throw std::invalid_argument("certify: too few samples for the batch count");
    if (opt.batches < 3) throw std::invalid_argument("certify: at least 3 batches are required");
    std::vector<double> w_transfer;
    for (double m : s.mu[s.j]) w_transfer.push_back(2 * m);

    std::size_t N = samples_per_env;
    Certificate cert;
    for (int round = 0;; ++round) {
        const std::size_t E = s.num_envs, B = opt.batches;
        std::vector<cert_detail::BatchStats> stats(E * B);
        parallel_for(E * B, opt.jobs, [&](std::size_t task) {
            const std::size_t env = task / B, b = task % B;
            const std::size_t n = N / B + (b < N % B ? 1 : 0);
            stats[task] = cert_detail::run_batch(c, env, n, Philox::mix(opt.seed, env, b), w_transfer);
        });

        cert = Certificate{};
        cert.samples_per_env = N;
        cert.seed = opt.seed;
        double pen_max = -std::numeric_limits<double>::infinity(), pen_hi_max = pen_max;
        double ex = 0, ex_var = 0;
        for (std::size_t env = 0; env < E; ++env) {
            std::vector<std::vector<double>> means;
            double diff = 0, diff2 = 0, loss = 0, inv = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const auto& st = stats[env * B + b];
                std::vector<double> m(st.grad);
                for (double& v : m) v /= static_cast<double>(st.n);
                means.push_back(std::move(m));
                diff += st.diff;
                diff2 += st.diff2;
                loss += st.loss;
                inv += st.inv_loss;
                if (env == s.i) {
                    cert.transfer += st.tr;
                    cert.transfer_hi += st.tr2;  // second moment, finalized below
                }
            }
            const auto [pe, se] = cert_detail::squared_norm_ustat(means);
            cert.penalty.push_back(pe);
            cert.penalty_hi.push_back(pe + opt.z * se);
            pen_max = std::max(pen_max, pe);
            pen_hi_max = std::max(pen_hi_max, pe + opt.z * se);
            const double n = static_cast<double>(N);
            cert.loss.push_back(loss / n);
            cert.invariant_loss.push_back(inv / n);
            const double md = diff / n, vd = std::max(0.0, diff2 / n - md * md);
            ex += md / static_cast<double>(E);
            ex_var += vd / n / static_cast<double>(E * E);
        }
        const double n = static_cast<double>(N);
        const double tm = cert.transfer / n, tv = std::max(0.0, cert.transfer_hi / n - tm * tm);
        cert.transfer = tm;
        cert.transfer_lo = tm - opt.z * std::sqrt(tv / n);
        cert.transfer_hi = tm + opt.z * std::sqrt(tv / n);

        const double pen_lo = 2 * pen_max - pen_hi_max;
        cert.clauses.push_back({"irmv1_penalty_max", pen_max, pen_lo, pen_hi_max, opt.penalty_max, true, pen_hi_max <= opt.penalty_max});
        const double exh = opt.z * std::sqrt(ex_var);
        cert.clauses.push_back({"excess_erm_loss", ex, ex - exh, ex + exh, opt.excess_max, true, ex + exh <= opt.excess_max});
        cert.clauses.push_back({"transfer_statistic", cert.transfer, cert.transfer_lo, cert.transfer_hi, opt.transfer_min,
                                false, cert.transfer_lo >= opt.transfer_min});

        bool retry = false;
        for (const auto& cl : cert.clauses) {
            const bool undecided = cl.lo < cl.threshold && cl.hi > cl.threshold;
            if (undecided || cl.halfwidth() > opt.max_halfwidth) retry = true;
        }
        if (!retry || round >= opt.max_doublings) {
            cert.passed = true;
            for (const auto& cl : cert.clauses) cert.passed = cert.passed && cl.pass;
            if (retry) {
                double w = 0;
                for (const auto& cl : cert.clauses) w = std::max(w, cl.halfwidth());
                cert.passed = false;
                std::ostringstream os;
                os << "sample cap reached with CI half-width " << w << " (target " << opt.max_halfwidth << ")";
                cert.note = os.str();
            }
            return cert;
        }
        N *= 2;
    }
}

}  // namespace trm
