#pragma once

// Training loops: TRM (per-environment objective with EG-updated mixtures)
// and the ERM / IRMv1 / REx / GroupDRO baselines over the same model family.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "config.hpp"
#include "envgen.hpp"
#include "inner_solver.hpp"
#include "model.hpp"
#include "objectives.hpp"
#include "rng.hpp"
#include "simplex.hpp"

namespace trm {

enum class Algorithm { erm, irmv1, rex, groupdro, trm };
enum class OptimizerKind { adam, sgd };
enum class QSampling { uniform, all };

inline Algorithm parse_algorithm(const std::string& s) {
    if (s == "erm") return Algorithm::erm;
    if (s == "irmv1") return Algorithm::irmv1;
    if (s == "rex") return Algorithm::rex;
    if (s == "groupdro") return Algorithm::groupdro;
    if (s == "trm") return Algorithm::trm;
    throw std::invalid_argument("unknown algorithm '" + s + "' (expected erm, irmv1, rex, groupdro or trm)");
}

inline std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::erm: return "erm";
        case Algorithm::irmv1: return "irmv1";
        case Algorithm::rex: return "rex";
        case Algorithm::groupdro: return "groupdro";
        case Algorithm::trm: return "trm";
    }
    return "?";
}

struct TrainConfig {
    Algorithm algorithm = Algorithm::erm;
    long iterations = 2000;
    double lr_phi = 0.01;
    double lr_w = 0.01;
    double lr_alpha = 0.01;
    OptimizerKind optimizer = OptimizerKind::adam;
    double momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    TRMHyper trm;
    double lambda_irm = 1.0;
    double beta_rex = 1.0;
    long penalty_warmup = 0;  // iterations before the IRMv1 / REx penalty switches on
    bool irm_split_half = true;  // unbiased minibatch estimate of the IRMv1 penalty

    // Per-environment minibatch size; 0 or population_mode uses every sample.
    std::size_t batch_size = 0;
    bool population_mode = false;
    QSampling q_sampling = QSampling::uniform;

    ModelSpec model;
    SolverOptions solver;

    long metrics_every = 1;         // 0 logs the final iteration only
    std::size_t eval_samples = 0;   // rows per environment used for metrics, 0 = all
    double average_tail = 0.0;      // fraction of trailing iterations averaged into the final model

    void validate() const {
        if (iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
        if (!(lr_phi > 0) || !(lr_w > 0) || !(lr_alpha > 0))
            throw std::invalid_argument("train: learning rates must be positive");
        if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("train: momentum must lie in [0, 1)");
        if (trm.lambda < 0 || lambda_irm < 0 || beta_rex < 0)
            throw std::invalid_argument("train: penalty coefficients must be >= 0");
        if (!(average_tail >= 0 && average_tail < 1)) throw std::invalid_argument("train: average_tail must lie in [0, 1)");
        if (trm.neumann.steps < 1) throw std::invalid_argument("train: neumann_steps must be >= 1");
    }
};

struct MetricRow {
    long iter = 0;
    std::vector<double> env_loss;
    std::vector<double> transfer_loss;  // exact-worst transfer term per Q
    double objective = 0.0;
    double transfer_sumsup = 0.0;
    double transfer_sumsum = 0.0;
    double transfer_eg = std::numeric_limits<double>::quiet_NaN();
    double irmv1_penalty = 0.0;
    double weight_ratio = 0.0;
    double pred_distance = 0.0;
    int sampled_env = -1;
};

/// One EG step of alpha(Q): the weights it started from and the gains it used.
struct EgEvent {
    long iter = 0;
    int owner = 0;
    std::vector<double> alpha_before;
    std::vector<double> losses;
};

struct RunMetrics {
    std::vector<MetricRow> rows;
    std::vector<double> objective;  // training objective at every iteration
    std::vector<int> sampled;       // sampled Q per iteration, -1 when all are used
    std::vector<EgEvent> eg_events;
    std::vector<std::pair<long, SimplexWeights>> alpha_log;  // weights after each EG step
    double wall_time = 0.0;

    static constexpr const char* kHeader =
        "iter,env,env_loss,objective,transfer_risk_sumsup,transfer_risk_sumsum,transfer_risk_eg,irmv1_penalty,"
        "weight_ratio,pred_distance,sampled_env";

    void write_csv(std::ostream& os) const {
        os << "# trm metrics v1\n" << kHeader << '\n' << std::setprecision(17);
        for (const auto& r : rows)
            for (std::size_t e = 0; e < r.env_loss.size(); ++e)
                os << r.iter << ',' << e << ',' << r.env_loss[e] << ',' << r.objective << ',' << r.transfer_sumsup << ','
                   << r.transfer_sumsum << ',' << r.transfer_eg << ',' << r.irmv1_penalty << ',' << r.weight_ratio << ','
                   << r.pred_distance << ',' << r.sampled_env << '\n';
    }

    void write_alpha_csv(std::ostream& os) const {
        os << "# trm alpha v1\niter,owner,env,weight\n" << std::setprecision(17);
        for (const auto& [it, a] : alpha_log)
            for (std::size_t e = 0; e < a.size(); ++e) os << it << ',' << a.owner << ',' << e << ',' << a.weights[e] << '\n';
    }
};

/// Flat parameter arrays with a manifest.
struct Checkpoint {
    std::vector<std::string> names;
    std::vector<ad::Array> arrays;
    std::string algorithm;
    std::string config_hash;
    long iteration = 0;

    nlohmann::json manifest() const {
        nlohmann::json m;
        m["format"] = "trm-checkpoint-v1";
        m["algorithm"] = algorithm;
        m["config_hash"] = config_hash;
        m["iteration"] = iteration;
        for (std::size_t i = 0; i < names.size(); ++i)
            m["params"].push_back({{"name", names[i]}, {"shape", arrays[i].shape()}});
        return m;
    }

    /// Writes <base>.bin (magic "TRMCKPT1", then f64 data of each array in
    /// manifest order, little-endian) and <base>.json.
    void save(const std::string& base) const {
        std::ofstream bin(base + ".bin", std::ios::binary);
        if (!bin) throw std::runtime_error(base + ".bin: cannot open for writing");
        bin.write("TRMCKPT1", 8);
        for (const auto& a : arrays)
            bin.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
        std::ofstream js(base + ".json");
        if (!js) throw std::runtime_error(base + ".json: cannot open for writing");
        js << manifest().dump(2) << '\n';
    }

    static Checkpoint load(const std::string& base) {
        std::ifstream js(base + ".json");
        if (!js) throw std::runtime_error(base + ".json: cannot open");
        const auto m = nlohmann::json::parse(js);
        Checkpoint c;
        c.algorithm = m.at("algorithm").get<std::string>();
        c.config_hash = m.at("config_hash").get<std::string>();
        c.iteration = m.at("iteration").get<long>();
        std::ifstream bin(base + ".bin", std::ios::binary);
        char magic[8];
        if (!bin.read(magic, 8) || std::string(magic, 8) != "TRMCKPT1") throw std::runtime_error(base + ".bin: bad magic");
        for (const auto& p : m.at("params")) {
            c.names.push_back(p.at("name").get<std::string>());
            const auto shape = p.at("shape").get<ad::Shape>();
            std::vector<double> data(ad::shape_numel(shape));
            if (!bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
                throw std::runtime_error(base + ".bin: truncated");
            c.arrays.emplace_back(shape, std::move(data));
        }
        return c;
    }
};

struct TrainingDiverged : NumericError {
    TrainingDiverged(const std::string& msg, Checkpoint last_good)
        : NumericError(msg), checkpoint(std::move(last_good)) {}
    Checkpoint checkpoint;
};

struct TrainResult {
    Model model;       // last iterate
    ad::Array w_all;
    Model averaged;    // tail average (equals the last iterate when averaging is off)
    ad::Array averaged_w;
    std::vector<SimplexWeights> alphas;  // TRM only
    SimplexWeights group_weights;        // GroupDRO only
    RunMetrics metrics;
    long iterations = 0;

    Checkpoint checkpoint(const std::string& algorithm, const std::string& config_hash) const {
        Checkpoint c;
        c.names = Model::phi_names(averaged.spec());
        c.arrays = averaged.values();
        c.names.push_back("w_all");
        c.arrays.push_back(averaged_w);
        c.algorithm = algorithm;
        c.config_hash = config_hash;
        c.iteration = iterations;
        return c;
    }
};

namespace train_detail {

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, const std::vector<ad::Array>& params) : cfg_(cfg) {
        for (const auto& p : params) {
            m_.emplace_back(p.shape(), 0.0);
            v_.emplace_back(p.shape(), 0.0);
        }
    }

    void step(std::vector<ad::Array>& params, const std::vector<ad::Array>& grads, const std::vector<double>& lrs) {
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            const auto& g = grads[i];
            auto& m = m_[i];
            auto& v = v_[i];
            if (cfg_.optimizer == OptimizerKind::sgd) {
                for (std::size_t j = 0; j < p.size(); ++j) {
                    m[j] = cfg_.momentum * m[j] + g[j];
                    p[j] -= lrs[i] * m[j];
                }
                continue;
            }
            const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = b1 * m[j] + (1 - b1) * g[j];
                v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
                p[j] -= lrs[i] * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.adam_eps);
            }
        }
    }

private:
    const TrainConfig& cfg_;
    std::vector<ad::Array> m_, v_;
    long t_ = 0;
};

inline bool all_finite(const ad::Array& a) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!std::isfinite(a[i])) return false;
    return true;
}

}  // namespace train_detail

/// Mean over unordered pairs (i, j) of ||w(P_i) - w(P_j)||^2.
inline double predictor_distance(const std::vector<ad::Array>& predictors) {
    if (predictors.size() < 2) throw std::invalid_argument("predictor_distance: at least two environments are required");
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < predictors.size(); ++i)
        for (std::size_t j = i + 1; j < predictors.size(); ++j, ++pairs) {
            if (predictors[i].shape() != predictors[j].shape())
                throw ad::ShapeError("predictor_distance: predictors of different shapes");
            for (std::size_t k = 0; k < predictors[i].size(); ++k) {
                const double d = predictors[i][k] - predictors[j][k];
                total += d * d;
            }
        }
    return total / static_cast<double>(pairs);
}

inline double predictor_distance(const Model& model, const std::vector<Batch>& batches, const SolverOptions& opt = {}) {
    if (batches.size() < 2) throw std::invalid_argument("predictor_distance: at least two environments are required");
    const Model frozen = model.frozen();
    std::vector<ad::Array> ws;
    for (const auto& b : batches) {
        try {
            ws.push_back(solve_optimal_predictor(frozen.features(b.X).value(), b.labels, b.num_classes, opt).w);
        } catch (const DataError& e) {
            log_warn("predictor_distance: environment " + std::to_string(b.env_id) + " skipped: " + e.what());
        }
    }
    return predictor_distance(ws);
}

inline MetricRow evaluate_metrics(const Model& model, const ad::Array& w_all, const std::vector<Batch>& eval,
                                  const SolverOptions& opt, const std::vector<SimplexWeights>* alphas,
                                  std::size_t d_c) {
    MetricRow row;
    const Model frozen = model.frozen();
    const ad::Var w(w_all);
    for (const auto& b : eval) row.env_loss.push_back(env_risk(frozen.features(b.X), w, b).item());
    row.irmv1_penalty = irmv1_penalty_value(model, w_all, eval);
    row.weight_ratio = weight_ratio(model, d_c);

    const auto E = eval.size();
    const auto table = transfer_table(model, eval, opt);
    std::vector<ad::Array> ws;
    row.transfer_loss.assign(E, std::numeric_limits<double>::quiet_NaN());
    double eg = 0.0;
    for (std::size_t q = 0; q < E; ++q) {
        if (!table.solutions[q]) continue;
        ws.push_back(table.solutions[q]->w);
        std::vector<double> r(E);
        double mean = 0.0;
        for (std::size_t p = 0; p < E; ++p) {
            r[p] = table.loss(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(p));
            if (p != q) mean += r[p] / static_cast<double>(E - 1);
        }
        row.transfer_loss[q] = r[worst_env(r, static_cast<int>(q))];
        row.transfer_sumsup += row.transfer_loss[q];
        row.transfer_sumsum += mean;
        if (alphas)
            for (std::size_t p = 0; p < E; ++p) eg += (*alphas)[q].weights[p] * (p == q ? 0.0 : r[p]);
    }
    if (alphas) row.transfer_eg = eg;
    row.pred_distance = ws.size() >= 2 ? predictor_distance(ws) : std::numeric_limits<double>::quiet_NaN();
    return row;
}

/// Runs `cfg.algorithm` on the suite. TRM follows the alternating scheme:
/// pick Q, solve w(Q) at the current Phi, take one step on (Phi, w_all)
/// against the per-environment objective, then one EG step on alpha(Q).
/// Unsampled alpha(Q) are left unchanged.
inline TrainResult train(const EnvironmentSuite& suite, TrainConfig cfg) {
    cfg.validate();
    suite.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const std::size_t E = suite.size();
    cfg.model.input_dim = suite.dim();
    cfg.model.num_classes = suite.num_classes();

    Model model = Model::create(cfg.model, cfg.seed);
    ad::Array w_all = model.zero_predictor();

    const bool minibatch = cfg.batch_size > 0 && !cfg.population_mode;
    std::vector<Batch> full;
    if (!minibatch) full = make_batches(suite);
    const std::vector<Batch> eval = make_eval_batches(suite, cfg.eval_samples);

    Philox data_rng(Philox::mix(cfg.seed, 0x64617461ULL, 1));
    Philox q_rng(Philox::mix(cfg.seed, 0x71ULL, 2));

    std::vector<SimplexWeights> alphas;
    for (std::size_t q = 0; q < E; ++q) alphas.push_back(SimplexWeights::uniform(E, static_cast<int>(q), cfg.lr_alpha));
    SimplexWeights group = SimplexWeights::uniform(E, -1, cfg.lr_alpha);
    std::vector<std::optional<ad::Array>> w_cache(E);

    std::vector<ad::Array> params = model.values();
    params.push_back(w_all);
    std::vector<double> lrs(model.phi().size(), cfg.lr_phi);
    lrs.push_back(cfg.lr_w);
    train_detail::Optimizer opt(cfg, params);

    const long T = cfg.iterations;
    const long avg_from = cfg.average_tail > 0 ? T - static_cast<long>(std::floor(cfg.average_tail * static_cast<double>(T))) : T;
    std::vector<ad::Array> avg;
    long avg_count = 0;

    TrainResult res;
    auto snapshot = [&](long it) {
        Checkpoint c;
        c.names = Model::phi_names(cfg.model);
        c.names.push_back("w_all");
        c.arrays = params;
        c.algorithm = to_string(cfg.algorithm);
        c.iteration = it;
        return c;
    };

    for (long t = 0; t < T; ++t) {
        std::vector<Batch> mb;
        if (minibatch) {
            for (const auto& env : suite.envs) {
                std::vector<std::size_t> rows(cfg.batch_size);
                for (auto& r : rows) r = static_cast<std::size_t>(data_rng.below(env.size()));
                mb.push_back(subsample(env, rows));
            }
        }
        const std::vector<Batch>& batches = minibatch ? mb : full;

        model.assign(std::vector<ad::Array>(params.begin(), params.end() - 1));
        const ad::Var w = ad::Var::param(params.back());

        ad::Var objective;
        int sampled = -1;
        std::vector<std::pair<std::size_t, std::vector<double>>> eg_pending;
        try {
            switch (cfg.algorithm) {
                case Algorithm::erm: {
                    std::vector<ad::Var> Ls;
                    for (const auto& b : batches) Ls.push_back(env_risk(model.features(b.X), w, b));
                    objective = obj_detail::sum_all(Ls);
                    break;
                }
                case Algorithm::irmv1:
                    objective = irmv1_risk(model, w, batches, t < cfg.penalty_warmup ? 0.0 : cfg.lambda_irm,
                                           minibatch && cfg.irm_split_half).objective;
                    break;
                case Algorithm::rex:
                    objective = rex_risk(model, w, batches, t < cfg.penalty_warmup ? 0.0 : cfg.beta_rex).objective;
                    break;
                case Algorithm::groupdro: {
                    std::vector<ad::Var> Ls;
                    std::vector<double> vals;
                    for (const auto& b : batches) {
                        Ls.push_back(env_risk(model.features(b.X), w, b));
                        vals.push_back(Ls.back().item());
                    }
                    group = groupdro_weights_update(group, vals, cfg.lr_alpha);
                    for (std::size_t p = 0; p < E; ++p) {
                        const ad::Var piece = Ls[p] * group.weights[p];
                        objective = objective.defined() ? objective + piece : piece;
                    }
                    break;
                }
                case Algorithm::trm: {
                    std::vector<std::size_t> qs;
                    if (cfg.q_sampling == QSampling::all) {
                        for (std::size_t q = 0; q < E; ++q) qs.push_back(q);
                    } else {
                        qs.push_back(static_cast<std::size_t>(q_rng.below(E)));
                        sampled = static_cast<int>(qs.front());
                    }
                    std::vector<ad::Var> feats;
                    for (const auto& b : batches) feats.push_back(model.features(b.X));
                    for (std::size_t q : qs) {
                        const auto sol = solve_optimal_predictor(feats[q].value(), batches[q].labels,
                                                                 batches[q].num_classes, cfg.solver, w_cache[q]);
                        w_cache[q] = sol.w;
                        TRMStepInfo info;
                        const auto rep = trm_step_objective(model, w, batches, q, alphas[q], cfg.trm, sol.w, &info, &feats);
                        objective = objective.defined() ? objective + rep.objective : rep.objective;
                        eg_pending.emplace_back(q, info.transfer_losses);
                    }
                    break;
                }
            }
        } catch (const ad::NonFiniteError& e) {
            throw TrainingDiverged("iteration " + std::to_string(t) + ": " + e.what(), snapshot(t));
        }

        const double obj_value = objective.item();
        if (!std::isfinite(obj_value))
            throw TrainingDiverged("iteration " + std::to_string(t) + ": non-finite objective", snapshot(t));

        std::vector<ad::Var> vars = model.phi();
        vars.push_back(w);
        const auto gvars = ad::grad_vars(objective, vars);
        std::vector<ad::Array> grads;
        for (const auto& g : gvars) {
            if (!train_detail::all_finite(g.value()))
                throw TrainingDiverged("iteration " + std::to_string(t) + ": non-finite gradient", snapshot(t));
            grads.push_back(g.value());
        }

        for (auto& [q, losses] : eg_pending) {
            EgEvent ev;
            ev.iter = t;
            ev.owner = static_cast<int>(q);
            ev.alpha_before = alphas[q].weights;
            ev.losses = losses;
            ev.losses[q] = 0.0;
            alphas[q] = eg_update(alphas[q], ev.losses, cfg.lr_alpha);
            res.metrics.eg_events.push_back(std::move(ev));
            res.metrics.alpha_log.emplace_back(t, alphas[q]);
        }

        const Checkpoint last_good = snapshot(t);
        if (cfg.model.constrained) {
            // Tangent part only; Adam's per-coordinate scaling would turn
            // the radial part into drift along the circle.
            const ad::Array& W = params.front();
            ad::Array& G = grads.front();
            const double radial = G[0] * W[0] + G[1] * W[1];
            G[0] -= radial * W[0];
            G[1] -= radial * W[1];
        }
        opt.step(params, grads, lrs);
        if (cfg.model.constrained) {
            ad::Array& W = params.front();
            const double n = std::hypot(W[0], W[1]);
            if (!(n > 0) || !std::isfinite(n)) throw TrainingDiverged("iteration " + std::to_string(t) + ": feature map collapsed", last_good);
            W[0] /= n;
            W[1] /= n;
        }
        for (const auto& p : params)
            if (!train_detail::all_finite(p))
                throw TrainingDiverged("iteration " + std::to_string(t) + ": non-finite parameters", last_good);

        res.metrics.objective.push_back(obj_value);
        res.metrics.sampled.push_back(sampled);

        if (t >= avg_from) {
            if (avg.empty()) avg.assign(params.begin(), params.end());
            else
                for (std::size_t i = 0; i < params.size(); ++i)
                    for (std::size_t j = 0; j < params[i].size(); ++j) avg[i][j] += params[i][j];
            ++avg_count;
        }

        const bool log_now = (cfg.metrics_every > 0 && t % cfg.metrics_every == 0) || t == T - 1;
        if (log_now) {
            model.assign(std::vector<ad::Array>(params.begin(), params.end() - 1));
            auto row = evaluate_metrics(model, params.back(), eval, cfg.solver,
                                        cfg.algorithm == Algorithm::trm ? &alphas : nullptr, suite.d_c());
            row.iter = t;
            row.objective = obj_value;
            row.sampled_env = sampled;
            res.metrics.rows.push_back(std::move(row));
        }
    }

    model.assign(std::vector<ad::Array>(params.begin(), params.end() - 1));
    res.model = model;
    res.w_all = params.back();
    if (avg_count > 0) {
        for (auto& a : avg)
            for (std::size_t j = 0; j < a.size(); ++j) a[j] /= static_cast<double>(avg_count);
        if (cfg.model.constrained) {
            const double n = std::hypot(avg.front()[0], avg.front()[1]);
            avg.front()[0] /= n;
            avg.front()[1] /= n;
        }
        res.averaged = model;
        res.averaged.assign(std::vector<ad::Array>(avg.begin(), avg.end() - 1));
        res.averaged_w = avg.back();
    } else {
        res.averaged = res.model;
        res.averaged_w = res.w_all;
    }
    res.alphas = alphas;
    res.group_weights = group;
    res.iterations = T;
    res.metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

inline TrainResult train_trm(const EnvironmentSuite& suite, TrainConfig cfg) {
    cfg.algorithm = Algorithm::trm;
    return train(suite, cfg);
}

inline TrainResult train_baseline(const EnvironmentSuite& suite, TrainConfig cfg) {
    if (cfg.algorithm == Algorithm::trm) throw std::invalid_argument("train_baseline: use train_trm for TRM");
    return train(suite, cfg);
}

/// Average regret of the EG players: for each Q, over the iterations where
/// alpha(Q) was updated, (max_P sum_s L_P(s) - sum_s <alpha(s), L(s)>) / count,
/// then averaged over Q. `bounded` reports whether regret(t) sqrt(t) stays
/// within `factor` times its value at the reference iteration.
struct RegretTrace {
    std::vector<long> iters;
    std::vector<double> regret;
    double reference = 0.0;     // regret(t0) sqrt(t0)
    double scaled_sup = 0.0;    // sup_{t >= t0} regret(t) sqrt(t)
    bool bounded = true;
};

inline RegretTrace regret_trace(const RunMetrics& metrics, long reference_iter = 100, double factor = 10.0) {
    RegretTrace tr;
    if (metrics.eg_events.empty()) return tr;
    std::size_t E = metrics.eg_events.front().losses.size();
    std::vector<std::vector<double>> cum(E, std::vector<double>(E, 0.0));
    std::vector<double> played(E, 0.0);
    std::vector<long> count(E, 0);
    std::size_t i = 0;
    const auto& ev = metrics.eg_events;
    while (i < ev.size()) {
        const long it = ev[i].iter;
        for (; i < ev.size() && ev[i].iter == it; ++i) {
            const auto q = static_cast<std::size_t>(ev[i].owner);
            double dot = 0.0;
            for (std::size_t p = 0; p < E; ++p) {
                if (p == q) continue;
                cum[q][p] += ev[i].losses[p];
                dot += ev[i].alpha_before[p] * ev[i].losses[p];
            }
            played[q] += dot;
            ++count[q];
        }
        double total = 0.0;
        std::size_t active = 0;
        for (std::size_t q = 0; q < E; ++q) {
            if (count[q] == 0) continue;
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t p = 0; p < E; ++p)
                if (p != q) best = std::max(best, cum[q][p]);
            total += (best - played[q]) / static_cast<double>(count[q]);
            ++active;
        }
        tr.iters.push_back(it + 1);
        tr.regret.push_back(total / static_cast<double>(active));
    }
    std::size_t ref = 0;
    while (ref + 1 < tr.iters.size() && tr.iters[ref] < reference_iter) ++ref;
    tr.reference = tr.regret[ref] * std::sqrt(static_cast<double>(tr.iters[ref]));
    for (std::size_t k = ref; k < tr.iters.size(); ++k)
        tr.scaled_sup = std::max(tr.scaled_sup, tr.regret[k] * std::sqrt(static_cast<double>(tr.iters[k])));
    tr.bounded = tr.scaled_sup <= factor * std::max(tr.reference, 1e-12);
    return tr;
}

}  // namespace trm
