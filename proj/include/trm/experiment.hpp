#pragma once

// Config-driven commands behind the CLI: generate, train, sweep, certify.
// Every command validates its whole config before computing, writes its
// outputs into one directory and finishes with a manifest.json carrying the
// config hash and seed.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "analysis.hpp"
#include "config.hpp"
#include "counterexample.hpp"
#include "envgen.hpp"
#include "trainer.hpp"

namespace trm {

/// Values given on the command line; they win over the config file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<std::string> out;
};

namespace exp_detail {

inline const std::set<std::string> kSuiteKeys{"num_envs", "mu_c",        "mu_e",         "d_e",     "mu_e_mean",
                                              "mu_e_var", "sigma_c",     "sigma_e",      "n_samples", "label_prior",
                                              "bias_degree", "decoy_means", "num_classes", "rotate", "sampler"};

inline const std::set<std::string> kTrainKeys{
    "algorithm",     "iterations",   "lr_phi",        "lr_w",          "lr_alpha",        "optimizer",
    "momentum",      "lambda",       "neumann_steps", "neumann_scale", "damping",         "variant",
    "exact_inverse", "lambda_irm",   "beta_rex",      "penalty_warmup", "irm_split_half", "batch_size",
    "population_mode", "q_sampling", "model",         "feature_dim",   "constrained",     "phi_init",
    "metrics_every", "eval_samples", "average_tail",  "solver_tol",    "solver_max_iters"};

inline std::set<std::string> join(std::initializer_list<std::set<std::string>> parts, std::set<std::string> extra = {}) {
    for (const auto& p : parts) extra.insert(p.begin(), p.end());
    return extra;
}

inline std::size_t get_size(const Config& c, const std::string& key, std::size_t dflt) {
    if (!c.has(key)) return dflt;
    const auto v = c.get_int(key);
    if (v < 0) c.fail(key, "must be >= 0");
    return static_cast<std::size_t>(v);
}

template <class Fn>
auto checked(const Config& c, const std::string& key, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        c.fail(key, e.what());
    }
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error(p.string() + ": cannot open for writing");
    os << text;
    if (!os) throw std::runtime_error(p.string() + ": write failed");
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error(p.string() + ": cannot open");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const Config& cfg,
                           std::uint64_t seed, const std::vector<std::string>& files) {
    nlohmann::json m;
    m["format"] = "trm-manifest-v1";
    m["command"] = command;
    m["config_source"] = cfg.source();
    m["config_hash"] = hex64(fnv1a(cfg.canonical()));
    m["config"] = nlohmann::json::object();
    for (const auto& [k, e] : cfg.entries()) m["config"][k] = e.value;
    m["seed"] = seed;
    for (const auto& f : files) m["files"][f] = hex64(fnv1a(read_file(dir / f)));
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace exp_detail

inline SuiteConfig parse_suite_config(const Config& c, const std::set<std::string>& optional_keys = {}) {
    using namespace exp_detail;
    for (const char* k : {"num_envs", "mu_c", "sigma_c", "sigma_e", "n_samples"})
        if (!optional_keys.count(k)) c.require(k);
    SuiteConfig s;
    s.num_envs = get_size(c, "num_envs", s.num_envs);
    if (c.has("mu_c")) s.mu_c = c.get_doubles("mu_c");
    s.sigma_c = c.get_double("sigma_c", s.sigma_c);
    s.sigma_e = c.get_double("sigma_e", s.sigma_e);
    if (!(s.sigma_c > 0)) c.fail("sigma_c", "must be > 0");
    if (!(s.sigma_e > 0)) c.fail("sigma_e", "must be > 0");
    s.n_samples = get_size(c, "n_samples", s.n_samples);
    if (s.n_samples == 0) c.fail("n_samples", "must be >= 1");
    if (c.has("mu_e")) {
        s.mu_e = c.get_matrix("mu_e");
        if (c.has("mu_e_mean") || c.has("mu_e_var")) c.fail("mu_e", "cannot be combined with mu_e_mean / mu_e_var");
        s.d_e = s.mu_e.empty() ? 0 : s.mu_e.front().size();
        if (!optional_keys.count("num_envs") && s.mu_e.size() != s.num_envs)
            c.fail("mu_e", "has " + std::to_string(s.mu_e.size()) + " rows, expected num_envs = " + std::to_string(s.num_envs));
    } else {
        s.d_e = get_size(c, "d_e", 1);
        s.mu_e_mean = c.get_double("mu_e_mean", 0.0);
        s.mu_e_var = c.get_double("mu_e_var", 1.0);
        if (s.mu_e_var < 0) c.fail("mu_e_var", "must be >= 0");
    }
    if (s.d_e == 0) c.fail("d_e", "must be >= 1");
    s.label_prior = c.get_double("label_prior", 0.5);
    if (!(s.label_prior > 0 && s.label_prior < 1)) c.fail("label_prior", "must lie in (0, 1)");
    if (c.has("bias_degree")) s.bias_degree = c.get_doubles("bias_degree");
    for (double b : s.bias_degree)
        if (!(b >= 0 && b <= 1)) c.fail("bias_degree", "values must lie in [0, 1]");
    if (c.has("decoy_means")) s.decoy_means = c.get_matrix("decoy_means");
    s.num_classes = static_cast<int>(c.get_int("num_classes", 2));
    if (s.num_classes < 2) c.fail("num_classes", "must be >= 2");
    s.rotate = c.get_bool("rotate", false);
    if (c.has("sampler")) s.sampler = checked(c, "sampler", [&] { return parse_sampler(c.get_string("sampler")); });
    if (!optional_keys.count("num_envs") && s.num_envs < 2) c.fail("num_envs", "must be >= 2");
    return s;
}

inline TrainConfig parse_train_config(const Config& c) {
    using namespace exp_detail;
    TrainConfig t;
    if (c.has("algorithm")) t.algorithm = checked(c, "algorithm", [&] { return parse_algorithm(c.get_string("algorithm")); });
    t.iterations = c.get_int("iterations", t.iterations);
    t.lr_phi = c.get_double("lr_phi", t.lr_phi);
    t.lr_w = c.get_double("lr_w", t.lr_w);
    t.lr_alpha = c.get_double("lr_alpha", t.lr_alpha);
    if (c.has("optimizer")) {
        const auto o = c.get_string("optimizer");
        if (o == "adam") t.optimizer = OptimizerKind::adam;
        else if (o == "sgd") t.optimizer = OptimizerKind::sgd;
        else c.fail("optimizer", "must be adam or sgd");
    }
    t.momentum = c.get_double("momentum", t.momentum);
    t.trm.lambda = c.get_double("lambda", t.trm.lambda);
    t.trm.neumann.steps = static_cast<int>(c.get_int("neumann_steps", t.trm.neumann.steps));
    t.trm.neumann.scale = c.get_double("neumann_scale", t.trm.neumann.scale);
    t.trm.neumann.damping = c.get_double("damping", t.trm.neumann.damping);
    if (c.has("variant")) t.trm.variant = checked(c, "variant", [&] { return parse_variant(c.get_string("variant")); });
    t.trm.exact_inverse = c.get_bool("exact_inverse", t.trm.exact_inverse);
    t.lambda_irm = c.get_double("lambda_irm", t.lambda_irm);
    t.beta_rex = c.get_double("beta_rex", t.beta_rex);
    t.penalty_warmup = c.get_int("penalty_warmup", t.penalty_warmup);
    t.irm_split_half = c.get_bool("irm_split_half", t.irm_split_half);
    t.batch_size = get_size(c, "batch_size", t.batch_size);
    t.population_mode = c.get_bool("population_mode", t.population_mode);
    if (c.has("q_sampling")) {
        const auto q = c.get_string("q_sampling");
        if (q == "uniform") t.q_sampling = QSampling::uniform;
        else if (q == "all") t.q_sampling = QSampling::all;
        else c.fail("q_sampling", "must be uniform or all");
    }
    if (c.has("model")) {
        const auto m = c.get_string("model");
        if (m == "linear") t.model.kind = FeatureKind::linear;
        else if (m == "mlp") t.model.kind = FeatureKind::mlp;
        else c.fail("model", "must be linear or mlp");
    }
    t.model.feature_dim = get_size(c, "feature_dim", t.model.feature_dim);
    t.model.constrained = c.get_bool("constrained", t.model.constrained);
    if (c.has("phi_init")) t.model.phi_init = c.get_doubles("phi_init");
    t.metrics_every = c.get_int("metrics_every", t.metrics_every);
    t.eval_samples = get_size(c, "eval_samples", t.eval_samples);
    t.average_tail = c.get_double("average_tail", t.average_tail);
    t.solver.tol = c.get_double("solver_tol", t.solver.tol);
    t.solver.max_iters = static_cast<int>(c.get_int("solver_max_iters", t.solver.max_iters));
    checked(c, "iterations", [&] {
        t.validate();
        return 0;
    });
    if (t.metrics_every < 0) c.fail("metrics_every", "must be >= 0");
    if (t.penalty_warmup < 0) c.fail("penalty_warmup", "must be >= 0");
    return t;
}

inline SweepSpec parse_sweep_spec(const Config& c) {
    using namespace exp_detail;
    SweepSpec s;
    c.require("axis");
    c.require("values");
    s.axis = checked(c, "axis", [&] { return parse_axis(c.get_string("axis")); });
    s.values = c.get_doubles("values");
    const std::string axis_key = s.axis == SweepAxis::mu_c ? "mu_c" : "num_envs";
    if (c.has(axis_key)) c.fail(axis_key, "is the sweep axis; set it through 'values'");
    s.suite = parse_suite_config(c, {axis_key});
    s.train = parse_train_config(c);
    if (c.has("seeds")) {
        for (double v : c.get_doubles("seeds")) {
            if (v < 0 || v != std::floor(v)) c.fail("seeds", "must be non-negative integers");
            s.seeds.push_back(static_cast<std::uint64_t>(v));
        }
    } else {
        const auto n = get_size(c, "num_seeds", 10);
        for (std::size_t i = 0; i < n; ++i) s.seeds.push_back(i);
    }
    if (c.has("algorithms")) {
        s.algorithms.clear();
        const auto& j = c.raw("algorithms");
        if (!j.is_array()) c.fail("algorithms", "must be an array of names");
        for (const auto& a : j) {
            if (!a.is_string()) c.fail("algorithms", "must be an array of names");
            s.algorithms.push_back(checked(c, "algorithms", [&] { return parse_algorithm(a.get<std::string>()); }));
        }
    }
    s.allowed_inversions = static_cast<int>(c.get_int("allowed_inversions", 1));
    checked(c, "values", [&] {
        s.validate();
        return 0;
    });
    if (s.axis == SweepAxis::mu_c && s.suite.d_e != 1) c.fail("d_e", "sweeps use the 2-d setting (d_e = 1)");
    if (s.suite.mu_c.size() != 1 && s.axis != SweepAxis::mu_c) c.fail("mu_c", "sweeps use a single causal coordinate");
    return s;
}

struct CertifyJob {
    ConstructionSpec spec;
    CertifyOptions options;
};

inline CertifyJob parse_certify_config(const Config& c) {
    using namespace exp_detail;
    for (const char* k : {"d_c", "d_e", "num_envs"}) c.require(k);
    const auto d_c = get_size(c, "d_c", 0), d_e = get_size(c, "d_e", 0), E = get_size(c, "num_envs", 0);
    const double sigma_c = c.get_double("sigma_c", 1.0);
    if (!(sigma_c > 0)) c.fail("sigma_c", "must be > 0");
    CertifyJob job;
    job.spec = checked(c, "d_e", [&] { return make_construction_spec(d_c, d_e, E, sigma_c, c.get_double("mu_c_norm", 0.0)); });
    if (c.has("mu_c")) job.spec.mu_c = c.get_doubles("mu_c");
    if (c.has("mu")) job.spec.mu = c.get_matrix("mu");
    job.spec.i = get_size(c, "i", job.spec.i);
    job.spec.j = get_size(c, "j", job.spec.j);
    job.spec.radius = c.get_double("radius", 0.0);
    job.spec.mc_samples = get_size(c, "mc_samples", job.spec.mc_samples);
    auto& o = job.options;
    o.batches = get_size(c, "batches", o.batches);
    o.max_doublings = static_cast<int>(c.get_int("max_doublings", o.max_doublings));
    o.max_halfwidth = c.get_double("max_halfwidth", o.max_halfwidth);
    o.penalty_max = c.get_double("penalty_max", o.penalty_max);
    o.excess_max = c.get_double("excess_max", o.excess_max);
    o.transfer_min = c.get_double("transfer_min", o.transfer_min);
    if (o.batches < 3) c.fail("batches", "must be >= 3");
    if (job.spec.mc_samples < 2 * o.batches) c.fail("mc_samples", "must be at least twice the batch count");
    job.spec.validate();
    return job;
}

inline std::uint64_t config_seed(const Config& c, const Overrides& ov) {
    if (ov.seed) return *ov.seed;
    const auto s = c.get_int("seed", 0);
    if (s < 0) c.fail("seed", "must be >= 0");
    return static_cast<std::uint64_t>(s);
}

inline std::filesystem::path output_dir(const Config& c, const Overrides& ov, const std::string& dflt) {
    std::filesystem::path p = ov.out ? *ov.out : c.get_string("out", dflt);
    std::filesystem::create_directories(p);
    return p;
}

/// generate: suite.bin, suite.csv, manifest.json.
inline EnvironmentSuite cmd_generate(const Config& c, const Overrides& ov = {}) {
    using namespace exp_detail;
    c.reject_unknown(join({kSuiteKeys}, {"seed", "out"}));
    const auto sc = parse_suite_config(c);
    const auto seed = config_seed(c, ov);
    const auto suite = checked(c, "num_envs", [&] { return make_suite(sc, seed); });
    const auto dir = output_dir(c, ov, "out");
    {
        std::ofstream os(dir / "suite.bin", std::ios::binary);
        write_binary(os, suite.envs);
        std::ofstream cs(dir / "suite.csv", std::ios::binary);
        write_csv(cs, suite.envs);
    }
    write_manifest(dir, "generate", c, seed, {"suite.bin", "suite.csv"});
    return suite;
}

inline EnvironmentSuite load_suite(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(path + ": cannot open");
    EnvironmentSuite s;
    s.envs = read_binary(is, path);
    s.validate();
    return s;
}

/// train: metrics.csv, alpha.csv (TRM), checkpoint.{bin,json}, manifest.json.
/// A diverged run leaves last_good.{bin,json} and rethrows.
inline TrainResult cmd_train(const Config& c, const Overrides& ov = {}) {
    using namespace exp_detail;
    c.reject_unknown(join({kSuiteKeys, kTrainKeys}, {"seed", "out", "data"}));
    const auto seed = config_seed(c, ov);
    EnvironmentSuite suite;
    if (c.has("data")) {
        for (const auto& k : kSuiteKeys)
            if (c.has(k)) c.fail(k, "cannot be combined with 'data'");
    }
    TrainConfig tc = parse_train_config(c);
    tc.seed = seed;
    if (c.has("data")) {
        suite = load_suite(c.get_string("data"));
    } else {
        const auto sc = parse_suite_config(c);
        suite = checked(c, "num_envs", [&] { return make_suite(sc, seed); });
    }
    const auto dir = output_dir(c, ov, "out");
    const std::string hash = hex64(fnv1a(c.canonical()));
    TrainResult res;
    try {
        res = train(suite, tc);
    } catch (TrainingDiverged& e) {
        e.checkpoint.config_hash = hash;
        e.checkpoint.save((dir / "last_good").string());
        throw;
    }
    std::vector<std::string> files{"metrics.csv"};
    {
        std::ofstream os(dir / "metrics.csv", std::ios::binary);
        res.metrics.write_csv(os);
    }
    if (tc.algorithm == Algorithm::trm) {
        std::ofstream os(dir / "alpha.csv", std::ios::binary);
        res.metrics.write_alpha_csv(os);
        files.push_back("alpha.csv");
    }
    res.checkpoint(to_string(tc.algorithm), hash).save((dir / "checkpoint").string());
    files.push_back("checkpoint.bin");
    files.push_back("checkpoint.json");
    write_manifest(dir, "train", c, seed, files);
    return res;
}

/// sweep: sweep.csv, summary.txt, manifest.json. The seed offsets every
/// listed seed so a manifest replays the same grid.
inline RatioSweepResult cmd_sweep(const Config& c, const Overrides& ov = {}) {
    using namespace exp_detail;
    c.reject_unknown(join({kSuiteKeys, kTrainKeys},
                          {"seed", "out", "axis", "values", "seeds", "num_seeds", "algorithms", "allowed_inversions", "jobs"}));
    auto spec = parse_sweep_spec(c);
    const auto seed = config_seed(c, ov);
    for (auto& s : spec.seeds) s += seed;
    spec.jobs = ov.jobs ? *ov.jobs : get_size(c, "jobs", default_jobs());
    const auto res = ratio_sweep(spec);
    const auto dir = output_dir(c, ov, "out");
    {
        std::ofstream os(dir / "sweep.csv", std::ios::binary);
        res.write_csv(os);
        std::ofstream ss(dir / "summary.txt", std::ios::binary);
        res.write_summary(ss);
    }
    write_manifest(dir, "sweep", c, seed, {"sweep.csv", "summary.txt"});
    return res;
}

/// certify: certificate.csv, certificate.txt, manifest.json.
inline Certificate cmd_certify(const Config& c, const Overrides& ov = {}) {
    using namespace exp_detail;
    c.reject_unknown({"seed", "out", "jobs", "d_c", "d_e", "num_envs", "sigma_c", "mu_c_norm", "mu_c", "mu", "i", "j",
                      "radius", "mc_samples", "batches", "max_doublings", "max_halfwidth", "penalty_max", "excess_max",
                      "transfer_min"});
    auto job = parse_certify_config(c);
    job.options.seed = config_seed(c, ov);
    job.options.jobs = ov.jobs ? *ov.jobs : get_size(c, "jobs", default_jobs());
    const auto clf = build_counterexample(job.spec);
    auto cert = certify_counterexample(clf, job.spec.mc_samples, job.options);
    cert.config_hash = hex64(fnv1a(c.canonical()));
    const auto dir = output_dir(c, ov, "out");
    {
        std::ofstream os(dir / "certificate.csv", std::ios::binary);
        cert.write_csv(os);
        std::ofstream ss(dir / "certificate.txt", std::ios::binary);
        cert.write_summary(ss);
    }
    write_manifest(dir, "certify", c, job.options.seed, {"certificate.csv", "certificate.txt"});
    return cert;
}

}  // namespace trm
