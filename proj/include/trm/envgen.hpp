#pragma once

// Multi-environment synthetic data: label-conditioned Gaussians.
//
// Binary environments draw y in {+1,-1} with P(y=+1) = label_prior, then
//   z_c ~ N(y * mu_c, sigma_c^2 I)
//   z_e ~ N(y * mu_e, sigma_e^2 I)        with probability bias_degree
//   z_e ~ N(y * m,    sigma_e^2 I)        otherwise, m uniform over decoy_means
// and observe x = [z_c, z_e] (optionally rotated by a fixed orthogonal matrix).
//
// Multi-class environments (num_classes = K > 2) use one-hot class means:
// z_c ~ N(mu_c[y] e_y, .), the aligned z_e ~ N(mu_e[y] e_y, .), and a
// failed bias coin draws the z_e mean of a uniformly chosen other class
// (or a decoy mean when given). They require d_c = d_e = K.
//
// Random numbers come from Philox4x32-10 streams; each environment owns an
// independent stream derived from (seed, env_id).
//
// The lattice sampler stands in for the population when d_c = d_e = 1: the
// noise pairs are a randomly shifted rank-1 Fibonacci lattice pushed through
// Box-Muller, and each noise pair is used once with y = +1 and once with
// y = -1. Expectations of smooth functions then converge much faster than
// with i.i.d. draws.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "rng.hpp"
#include "simplex.hpp"

namespace trm {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Sampler { iid, lattice };

inline Sampler parse_sampler(const std::string& s) {
    if (s == "iid") return Sampler::iid;
    if (s == "lattice") return Sampler::lattice;
    throw std::invalid_argument("unknown sampler '" + s + "' (expected iid or lattice)");
}

struct GaussianEnvSpec {
    std::vector<double> mu_c;
    std::vector<double> mu_e;
    double sigma_c = 1.0;
    double sigma_e = 1.0;
    std::size_t n_samples = 1000;
    double label_prior = 0.5;
    double bias_degree = 1.0;
    std::vector<std::vector<double>> decoy_means;
    int num_classes = 2;
    Sampler sampler = Sampler::iid;

    std::size_t d_c() const { return mu_c.size(); }
    std::size_t d_e() const { return mu_e.size(); }

    void validate() const {
        if (mu_c.empty() || mu_e.empty()) throw std::invalid_argument("env spec: d_c and d_e must be >= 1");
        if (!(sigma_c > 0) || !(sigma_e > 0)) throw std::invalid_argument("env spec: sigma_c and sigma_e must be > 0");
        if (!(bias_degree >= 0 && bias_degree <= 1))
            throw std::invalid_argument("env spec: bias_degree must lie in [0, 1]");
        if (!(label_prior > 0 && label_prior < 1))
            throw std::invalid_argument("env spec: label_prior must lie in (0, 1)");
        if (n_samples == 0) throw std::invalid_argument("env spec: n_samples must be positive");
        if (bias_degree < 1.0 && decoy_means.empty() && num_classes == 2)
            throw std::invalid_argument("env spec: bias_degree < 1 requires decoy_means");
        for (const auto& m : decoy_means)
            if (m.size() != mu_e.size())
                throw std::invalid_argument("env spec: decoy mean of length " + std::to_string(m.size()) +
                                            ", expected d_e = " + std::to_string(mu_e.size()));
        if (num_classes < 2) throw std::invalid_argument("env spec: num_classes must be >= 2");
        if (num_classes > 2 && (d_c() != static_cast<std::size_t>(num_classes) ||
                                d_e() != static_cast<std::size_t>(num_classes)))
            throw std::invalid_argument("env spec: multi-class environments need d_c = d_e = num_classes");
        if (sampler == Sampler::lattice &&
            (num_classes != 2 || d_c() != 1 || d_e() != 1 || bias_degree < 1.0 || label_prior != 0.5 || n_samples % 2))
            throw std::invalid_argument(
                "env spec: the lattice sampler needs a binary 2-d environment with bias_degree 1, label_prior 0.5 "
                "and an even n_samples");
    }
};

/// Labeled samples of one environment. Binary labels are +1/-1; multi-class
/// labels are 0..K-1.
struct Dataset {
    ad::Array features;  // n x (d_c + d_e)
    std::vector<int> labels;
    int env_id = 0;
    std::size_t d_c = 0;
    std::size_t d_e = 0;
    int num_classes = 2;
    // Bias coin outcome per row; only populated by the sampler.
    std::vector<bool> aligned;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return d_c + d_e; }
    bool binary() const { return num_classes == 2; }

    bool operator==(const Dataset& o) const {
        return features == o.features && labels == o.labels && env_id == o.env_id && d_c == o.d_c && d_e == o.d_e &&
               num_classes == o.num_classes;
    }
};

inline std::uint64_t env_seed(std::uint64_t seed, int env_id) {
    return Philox::mix(seed, static_cast<std::uint64_t>(env_id), 0x656e76ULL);
}

inline Dataset sample_environment(const GaussianEnvSpec& spec, std::uint64_t seed, int env_id = 0) {
    spec.validate();
    const std::size_t dc = spec.d_c(), de = spec.d_e(), n = spec.n_samples;
    Philox rng(env_seed(seed, env_id));
    Dataset ds;
    ds.env_id = env_id;
    ds.d_c = dc;
    ds.d_e = de;
    ds.num_classes = spec.num_classes;
    ds.labels.resize(n);
    ds.aligned.resize(n);
    std::vector<double> x(n * (dc + de));
    if (spec.sampler == Sampler::lattice) {
        const std::size_t m = n / 2;
        const double g = std::round(static_cast<double>(m) / std::numbers::phi);
        const double s0 = rng.uniform(), s1 = rng.uniform();
        for (std::size_t k = 0; k < m; ++k) {
            double u0 = (static_cast<double>(k) + 0.5) / static_cast<double>(m) + s0;
            double u1 = std::fmod(static_cast<double>(k) * g, static_cast<double>(m)) / static_cast<double>(m) + s1;
            u0 -= std::floor(u0);
            u1 -= std::floor(u1);
            if (u0 <= 0.0) u0 = std::numeric_limits<double>::min();
            const double r = std::sqrt(-2.0 * std::log(u0)), t = 2.0 * std::numbers::pi * u1;
            const double e_c = spec.sigma_c * r * std::cos(t), e_e = spec.sigma_e * r * std::sin(t);
            for (int y : {1, -1}) {
                const std::size_t i = 2 * k + (y > 0 ? 0 : 1);
                ds.labels[i] = y;
                ds.aligned[i] = true;
                x[2 * i] = y * spec.mu_c[0] + e_c;
                x[2 * i + 1] = y * spec.mu_e[0] + e_e;
            }
        }
        ds.features = ad::Array(ad::Shape{n, 2}, std::move(x));
        return ds;
    }
    const auto K = static_cast<std::uint64_t>(spec.num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = x.data() + i * (dc + de);
        const bool aligned = spec.bias_degree >= 1.0 || rng.bernoulli(spec.bias_degree);
        ds.aligned[i] = aligned;
        if (K == 2) {
            const int y = rng.bernoulli(spec.label_prior) ? 1 : -1;
            ds.labels[i] = y;
            const std::vector<double>* me = &spec.mu_e;
            if (!aligned) me = &spec.decoy_means[rng.below(spec.decoy_means.size())];
            for (std::size_t j = 0; j < dc; ++j) row[j] = y * spec.mu_c[j] + spec.sigma_c * rng.normal();
            for (std::size_t j = 0; j < de; ++j) row[dc + j] = y * (*me)[j] + spec.sigma_e * rng.normal();
        } else {
            const auto y = rng.below(K);
            ds.labels[i] = static_cast<int>(y);
            for (std::size_t j = 0; j < dc; ++j)
                row[j] = (j == y ? spec.mu_c[j] : 0.0) + spec.sigma_c * rng.normal();
            if (aligned || spec.decoy_means.empty()) {
                std::uint64_t cls = y;
                if (!aligned) cls = (y + 1 + rng.below(K - 1)) % K;
                for (std::size_t j = 0; j < de; ++j)
                    row[dc + j] = (j == cls ? spec.mu_e[j] : 0.0) + spec.sigma_e * rng.normal();
            } else {
                const auto& m = spec.decoy_means[rng.below(spec.decoy_means.size())];
                for (std::size_t j = 0; j < de; ++j) row[dc + j] = m[j] + spec.sigma_e * rng.normal();
            }
        }
    }
    ds.features = ad::Array(ad::Shape{n, dc + de}, std::move(x));
    return ds;
}

/// Parameters for a whole suite. Either `mu_e` lists one non-causal mean per
/// environment, or it is empty and means are sampled i.i.d. N(0, I) and then
/// affinely corrected per coordinate so that their mean and population
/// variance across environments equal `mu_e_mean` and `mu_e_var` exactly.
struct SuiteConfig {
    std::size_t num_envs = 2;
    std::vector<double> mu_c{1.0};
    std::vector<std::vector<double>> mu_e;
    std::size_t d_e = 1;
    double mu_e_mean = 0.0;
    double mu_e_var = 1.0;
    double sigma_c = 1.0;
    double sigma_e = 1.0;
    std::size_t n_samples = 1000;
    double label_prior = 0.5;
    std::vector<double> bias_degree{1.0};  // one value for all envs, or one per env
    std::vector<std::vector<double>> decoy_means;
    int num_classes = 2;
    bool rotate = false;
    Sampler sampler = Sampler::iid;
};

struct EnvironmentSuite {
    std::vector<GaussianEnvSpec> specs;
    std::vector<Dataset> envs;
    ad::Array rotation;  // empty (0-d) unless the suite is rotated

    std::size_t size() const { return envs.size(); }
    std::size_t dim() const { return envs.empty() ? 0 : envs.front().dim(); }
    std::size_t d_c() const { return envs.empty() ? 0 : envs.front().d_c; }
    std::size_t d_e() const { return envs.empty() ? 0 : envs.front().d_e; }
    int num_classes() const { return envs.empty() ? 2 : envs.front().num_classes; }

    /// Mean of the non-causal means, per coordinate.
    std::vector<double> mean_of_means() const {
        std::vector<double> m(specs.front().d_e(), 0.0);
        for (const auto& s : specs)
            for (std::size_t j = 0; j < m.size(); ++j) m[j] += s.mu_e[j] / static_cast<double>(specs.size());
        return m;
    }

    /// Population variance of the non-causal means, per coordinate.
    std::vector<double> var_of_means() const {
        const auto m = mean_of_means();
        std::vector<double> v(m.size(), 0.0);
        for (const auto& s : specs)
            for (std::size_t j = 0; j < m.size(); ++j)
                v[j] += (s.mu_e[j] - m[j]) * (s.mu_e[j] - m[j]) / static_cast<double>(specs.size());
        return v;
    }

    void validate() const {
        if (envs.size() < 2) throw std::invalid_argument("suite: at least two environments are required");
        for (const auto& e : envs)
            if (e.d_c != envs.front().d_c || e.d_e != envs.front().d_e || e.num_classes != envs.front().num_classes)
                throw std::invalid_argument("suite: environments disagree on d_c, d_e or num_classes");
    }
};

/// Non-causal means with exactly the requested mean and population variance per coordinate.
inline std::vector<std::vector<double>> sample_corrected_means(std::size_t num_envs, std::size_t d_e, double target_mean,
                                                               double target_var, std::uint64_t seed) {
    if (num_envs < 2 && target_var > 0)
        throw std::invalid_argument("make_suite: a positive variance target needs at least two environments");
    if (target_var < 0) throw std::invalid_argument("make_suite: variance target must be >= 0");
    Philox rng(Philox::mix(seed, 0x6d65616eULL, 0));
    std::vector<std::vector<double>> mu(num_envs, std::vector<double>(d_e));
    for (auto& m : mu)
        for (auto& v : m) v = rng.normal();
    const double E = static_cast<double>(num_envs);
    for (std::size_t j = 0; j < d_e; ++j) {
        double mean = 0.0;
        for (const auto& m : mu) mean += m[j] / E;
        double var = 0.0;
        for (const auto& m : mu) var += (m[j] - mean) * (m[j] - mean) / E;
        const double sd = std::sqrt(var);
        for (auto& m : mu) {
            const double z = sd > 0 ? (m[j] - mean) / sd : 0.0;
            m[j] = target_mean + std::sqrt(target_var) * z;
        }
    }
    return mu;
}

/// Fixed random orthogonal matrix (QR of a Gaussian matrix, sign-normalized).
inline ad::Array random_rotation(std::size_t d, std::uint64_t seed) {
    Philox rng(Philox::mix(seed, 0x726f74ULL, 0));
    Eigen::MatrixXd g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    ad::Array out(ad::Shape{d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
            out(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
}

inline EnvironmentSuite make_suite(const SuiteConfig& cfg, std::uint64_t seed) {
    if (cfg.num_envs < 2) {
        if (cfg.mu_e.empty() && cfg.mu_e_var > 0)
            throw std::invalid_argument("make_suite: a positive variance target needs at least two environments");
        throw std::invalid_argument("make_suite: at least two environments are required");
    }
    auto means = cfg.mu_e.empty() ? sample_corrected_means(cfg.num_envs, cfg.d_e, cfg.mu_e_mean, cfg.mu_e_var, seed)
                                  : cfg.mu_e;
    if (means.size() != cfg.num_envs)
        throw std::invalid_argument("make_suite: " + std::to_string(means.size()) + " non-causal means for " +
                                    std::to_string(cfg.num_envs) + " environments");
    if (cfg.bias_degree.size() != 1 && cfg.bias_degree.size() != cfg.num_envs)
        throw std::invalid_argument("make_suite: bias_degree needs one value or one per environment");

    EnvironmentSuite suite;
    for (std::size_t e = 0; e < cfg.num_envs; ++e) {
        GaussianEnvSpec spec;
        spec.mu_c = cfg.mu_c;
        spec.mu_e = means[e];
        spec.sigma_c = cfg.sigma_c;
        spec.sigma_e = cfg.sigma_e;
        spec.n_samples = cfg.n_samples;
        spec.label_prior = cfg.label_prior;
        spec.bias_degree = cfg.bias_degree.size() == 1 ? cfg.bias_degree[0] : cfg.bias_degree[e];
        spec.decoy_means = cfg.decoy_means;
        spec.num_classes = cfg.num_classes;
        spec.sampler = cfg.sampler;
        if (e > 0 && spec.d_e() != suite.specs.front().d_e())
            throw std::invalid_argument("make_suite: environments disagree on d_e");
        suite.specs.push_back(spec);
        suite.envs.push_back(sample_environment(spec, seed, static_cast<int>(e)));
    }
    if (cfg.rotate) {
        suite.rotation = random_rotation(suite.dim(), seed);
        for (auto& env : suite.envs) {
            // x <- R x for every row, i.e. X <- X R^T
            ad::Var X(env.features), R(suite.rotation);
            env.features = ad::matmul(X, ad::transpose(R)).value();
        }
    }
    suite.validate();
    return suite;
}

/// Expectations under the mixture P = sum_i alpha_i P_i over a suite,
/// evaluated as alpha-weighted per-environment empirical expectations.
class MixtureView {
public:
    MixtureView(const EnvironmentSuite& suite, SimplexWeights weights, int exclude)
        : suite_(&suite), weights_(std::move(weights)), exclude_(exclude) {
        if (weights_.size() != suite.size())
            throw std::invalid_argument("mixture_view: " + std::to_string(weights_.size()) + " weights for " +
                                        std::to_string(suite.size()) + " environments");
        if (exclude >= 0 && weights_.weights.at(static_cast<std::size_t>(exclude)) != 0.0)
            throw std::invalid_argument("mixture_view: weight on excluded environment " + std::to_string(exclude));
        weights_.owner = exclude;
        weights_.validate();
    }

    template <class F>
    double expect(F&& per_env) const {
        double total = 0.0;
        for (std::size_t i = 0; i < suite_->size(); ++i)
            if (weights_.weights[i] > 0.0) total += weights_.weights[i] * per_env(suite_->envs[i]);
        return total;
    }

    const SimplexWeights& weights() const { return weights_; }
    int excluded() const { return exclude_; }

private:
    const EnvironmentSuite* suite_;
    SimplexWeights weights_;
    int exclude_;
};

inline MixtureView mixture_view(const EnvironmentSuite& suite, const SimplexWeights& weights, int exclude) {
    return MixtureView(suite, weights, exclude);
}

// ---------------------------------------------------------------------------
// Dataset files.
//
// CSV: "# trm suite v1", then header "env_id,y,z_1,...,z_d", one row per
// sample, values printed with 17 significant digits so a round trip is
// bit-exact.
//
// Binary (all little-endian):
//   "XRSK1"                   5 bytes
//   u64 num_envs
//   per environment:
//     i64 env_id, u64 n, u64 d_c, u64 d_e, u64 num_classes
//     n x f64 labels
//     n*(d_c+d_e) x f64 features, row-major

inline void write_csv(std::ostream& os, const std::vector<Dataset>& envs) {
    if (envs.empty()) return;
    os << "# trm suite v1\nenv_id,y";
    for (std::size_t j = 0; j < envs.front().dim(); ++j) os << ",z_" << (j + 1);
    os << '\n';
    os << std::setprecision(17);
    for (const auto& ds : envs)
        for (std::size_t i = 0; i < ds.size(); ++i) {
            os << ds.env_id << ',' << ds.labels[i];
            for (std::size_t j = 0; j < ds.dim(); ++j) os << ',' << ds.features(i, j);
            os << '\n';
        }
}

/// Reads a CSV written by write_csv. d_c and num_classes are not part of
/// the CSV schema and must be supplied.
inline std::vector<Dataset> read_csv(std::istream& is, std::size_t d_c, int num_classes = 2,
                                     const std::string& source = "<csv>") {
    std::string line;
    std::size_t lineno = 0;
    do {
        if (!std::getline(is, line)) throw DataError(source + ": empty file");
        ++lineno;
    } while (line.rfind('#', 0) == 0);
    std::size_t cols = 1;
    for (char c : line) cols += c == ',';
    if (line.rfind("env_id,y", 0) != 0 || cols < 3) throw DataError(source + ":" + std::to_string(lineno) + ": bad header");
    const std::size_t d = cols - 2;
    if (d_c >= d) throw DataError(source + ": d_c must be smaller than the number of features");
    std::vector<Dataset> out;
    std::vector<std::vector<double>> feats;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        std::vector<std::string> toks;
        while (std::getline(ls, tok, ',')) toks.push_back(tok);
        if (toks.size() != cols)
            throw DataError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) + " columns");
        int env = 0, y = 0;
        try {
            env = std::stoi(toks[0]);
            y = std::stoi(toks[1]);
        } catch (const std::exception&) {
            throw DataError(source + ":" + std::to_string(lineno) + ": bad env_id or label");
        }
        if (out.empty() || out.back().env_id != env) {
            out.emplace_back();
            out.back().env_id = env;
            out.back().d_c = d_c;
            out.back().d_e = d - d_c;
            out.back().num_classes = num_classes;
            feats.emplace_back();
        }
        out.back().labels.push_back(y);
        for (std::size_t j = 0; j < d; ++j) {
            char* end = nullptr;
            const double v = std::strtod(toks[2 + j].c_str(), &end);
            if (end == toks[2 + j].c_str() || !std::isfinite(v))
                throw DataError(source + ":" + std::to_string(lineno) + ": bad value in column " + std::to_string(3 + j));
            feats.back().push_back(v);
        }
    }
    for (std::size_t e = 0; e < out.size(); ++e)
        out[e].features = ad::Array(ad::Shape{out[e].labels.size(), d}, std::move(feats[e]));
    return out;
}

namespace io_detail {
template <class T>
void put(std::ostream& os, T v) {
    static_assert(std::endian::native == std::endian::little, "binary IO assumes a little-endian host");
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is, const std::string& source) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(source + ": truncated file");
    return v;
}
}  // namespace io_detail

inline void write_binary(std::ostream& os, const std::vector<Dataset>& envs) {
    os.write("XRSK1", 5);
    io_detail::put<std::uint64_t>(os, envs.size());
    for (const auto& ds : envs) {
        io_detail::put<std::int64_t>(os, ds.env_id);
        io_detail::put<std::uint64_t>(os, ds.size());
        io_detail::put<std::uint64_t>(os, ds.d_c);
        io_detail::put<std::uint64_t>(os, ds.d_e);
        io_detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(ds.num_classes));
        for (int y : ds.labels) io_detail::put<double>(os, static_cast<double>(y));
        os.write(reinterpret_cast<const char*>(ds.features.data()),
                 static_cast<std::streamsize>(ds.features.size() * sizeof(double)));
    }
}

inline std::vector<Dataset> read_binary(std::istream& is, const std::string& source = "<binary>") {
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, "XRSK1", 5) != 0) throw DataError(source + ": bad magic");
    const auto count = io_detail::get<std::uint64_t>(is, source);
    std::vector<Dataset> out(count);
    for (auto& ds : out) {
        ds.env_id = static_cast<int>(io_detail::get<std::int64_t>(is, source));
        const auto n = io_detail::get<std::uint64_t>(is, source);
        ds.d_c = io_detail::get<std::uint64_t>(is, source);
        ds.d_e = io_detail::get<std::uint64_t>(is, source);
        ds.num_classes = static_cast<int>(io_detail::get<std::uint64_t>(is, source));
        ds.labels.resize(n);
        for (auto& y : ds.labels) y = static_cast<int>(io_detail::get<double>(is, source));
        std::vector<double> x(n * (ds.d_c + ds.d_e));
        if (!is.read(reinterpret_cast<char*>(x.data()), static_cast<std::streamsize>(x.size() * sizeof(double))))
            throw DataError(source + ": truncated feature block");
        ds.features = ad::Array(ad::Shape{n, ds.d_c + ds.d_e}, std::move(x));
    }
    return out;
}

}  // namespace trm
