#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace trm;

namespace {

Model linear_model(double a, double b) {
    ModelSpec ms;
    ms.phi_init = {a, b};
    return Model::create(ms, 0);
}

Batch hand_batch(std::vector<double> x, std::vector<int> y, int env = 0) {
    Batch b;
    const std::size_t n = y.size();
    b.X = ad::Array(ad::Shape{n, 2}, std::move(x));
    b.labels = y;
    b.ysign = ad::Array::vector(std::vector<double>(y.begin(), y.end()));
    b.env_id = env;
    return b;
}

/// Single sample whose loss under Phi = (1, 0), w = 1 equals `loss`.
Batch batch_with_loss(double loss, int env) {
    const double x = -std::log(std::expm1(loss));
    return hand_batch({x, 0.0}, {1}, env);
}

double softplus_neg(double m) { return m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m)); }

/// Central differences of f over the entries of Phi.
template <class F>
std::vector<double> fd_phi(const Model& base, F&& f, double h = 1e-5) {
    std::vector<double> out;
    const auto W = base.phi()[0].value();
    for (std::size_t i = 0; i < W.size(); ++i) {
        Model mp = base, mm = base;
        auto Wp = W, Wm = W;
        Wp[i] += h;
        Wm[i] -= h;
        mp.assign({Wp});
        mm.assign({Wm});
        out.push_back((f(mp) - f(mm)) / (2 * h));
    }
    return out;
}

std::vector<double> as_vec(const ad::Array& a) { return {a.data(), a.data() + a.size()}; }

TEST(Erm, ZeroPredictorGivesLn2) {
    const auto s = testutil::suite_2d(3, 1.0, 1.0, 300, 1);
    const auto model = linear_model(0.6, 0.8);
    const auto r = erm_risk(model, ad::Var(ad::Array::vector({0.0})), make_batches(s));
    for (double L : r.env_losses) EXPECT_NEAR(L, std::log(2.0), 1e-13);
}

TEST(Erm, LargeMarginPredictor) {
    const auto r = erm_risk(linear_model(1, 0), ad::Var(ad::Array::vector({10.0})),
                            {hand_batch({5, 0, -5, 0}, {1, -1})});
    EXPECT_LE(r.total, 1e-6);
}

TEST(Erm, PooledIsSampleWeighted) {
    const auto s = testutil::suite_2d(2, 1.0, 1.0, 400, 2);
    auto batches = make_batches(s);
    std::vector<std::size_t> rows(100);
    for (std::size_t i = 0; i < 100; ++i) rows[i] = i;
    batches[1] = subsample(s.envs[1], rows);
    const auto r = erm_risk(linear_model(0.3, 0.7), ad::Var(ad::Array::vector({1.3})), batches);
    EXPECT_NEAR(r.component("pooled"), (400 * r.env_losses[0] + 100 * r.env_losses[1]) / 500, 1e-14);
}

TEST(Irm, PenaltyVanishesAtOptimum) {
    const auto s = testutil::suite_2d(2, 1.0, 1.0, 2000, 3);
    const auto model = linear_model(0.6, 0.8);
    const std::vector<Batch> one{make_batch(s.envs[0])};
    const auto F = model.frozen().features(one[0].X).value();
    const auto res = solve_optimal_predictor(F, one[0].labels, 2);
    const auto r = irmv1_risk(model, ad::Var(res.w), one, 1.0);
    EXPECT_LE(r.component("penalty"), 1e-16);
    EXPECT_LE(irmv1_penalty_value(model, res.w, one), 1e-16);
}

TEST(Irm, IdenticalEnvironmentsDoublePenalty) {
    const auto s = testutil::suite_2d(2, 1.0, 1.0, 500, 4);
    const auto model = linear_model(0.6, 0.8);
    const auto b = make_batch(s.envs[0]);
    const ad::Var w(ad::Array::vector({0.4}));
    const double one = irmv1_risk(model, w, {b}, 1.0).component("penalty");
    EXPECT_GT(one, 0.0);
    EXPECT_NEAR(irmv1_risk(model, w, {b, b}, 1.0).component("penalty"), 2 * one, 1e-15);
}

TEST(Irm, PenaltyGradientMatchesFiniteDifferences) {
    const auto s = testutil::suite_2d(3, 1.0, 1.0, 300, 5);
    const auto batches = make_batches(s);
    const auto model = linear_model(0.6, 0.8);
    const auto w = ad::Var::param(ad::Array::vector({0.7}));
    const auto r = irmv1_risk(model, w, batches, 2.0);
    const auto& phi = model.phi()[0];
    const auto g = ad::grad(r.objective, {phi, w});
    const auto fd = fd_phi(model, [&](const Model& m) {
        return irmv1_risk(m, ad::Var(ad::Array::vector({0.7})), batches, 2.0).total;
    });
    EXPECT_LE(testutil::rel_err(as_vec(g[phi]), fd), 1e-4);
    const double h = 1e-5;
    const double fw = (irmv1_risk(model, ad::Var(ad::Array::vector({0.7 + h})), batches, 2.0).total -
                       irmv1_risk(model, ad::Var(ad::Array::vector({0.7 - h})), batches, 2.0).total) /
                      (2 * h);
    EXPECT_LE(testutil::rel_err(as_vec(g[w]), {fw}), 1e-4);
}

TEST(Irm, ZeroLambdaEqualsErmSum) {
    const auto s = testutil::suite_2d(3, 1.0, 1.0, 300, 6);
    const auto batches = make_batches(s);
    const auto model = linear_model(0.6, 0.8);
    const ad::Var w(ad::Array::vector({0.9}));
    EXPECT_EQ(irmv1_risk(model, w, batches, 0.0).total, erm_risk(model, w, batches).component("sum_erm"));
}

TEST(Rex, VarianceOfTwoLosses) {
    const auto model = linear_model(1, 0);
    const ad::Var w(ad::Array::vector({1.0}));
    const auto r = rex_risk(model, w, {batch_with_loss(0.2, 0), batch_with_loss(0.4, 1)}, 1.0);
    EXPECT_NEAR(r.env_losses[0], 0.2, 1e-15);
    EXPECT_NEAR(r.component("variance"), 0.01, 1e-15);
    EXPECT_NEAR(r.total, 0.6 + 0.01, 1e-15);
    const auto same = rex_risk(model, w, {batch_with_loss(0.3, 0), batch_with_loss(0.3, 1)}, 1.0);
    EXPECT_EQ(same.component("variance"), 0.0);
}

TEST(Rex, GradientMatchesFiniteDifferences) {
    const auto s = testutil::suite_2d(3, 1.0, 1.0, 300, 7);
    const auto batches = make_batches(s);
    const auto model = linear_model(0.5, -0.9);
    const auto r = rex_risk(model, ad::Var(ad::Array::vector({1.1})), batches, 5.0);
    const auto& phi = model.phi()[0];
    const auto g = ad::grad(r.objective, {phi});
    const auto fd = fd_phi(model, [&](const Model& m) {
        return rex_risk(m, ad::Var(ad::Array::vector({1.1})), batches, 5.0).total;
    });
    EXPECT_LE(testutil::rel_err(as_vec(g[phi]), fd), 1e-4);
}

TEST(Rex, SingleEnvironmentRejected) {
    EXPECT_THROW(rex_risk(linear_model(1, 0), ad::Var(ad::Array::vector({1.0})), {batch_with_loss(0.2, 0)}, 1.0),
                 std::invalid_argument);
}

// Shared by eg_update and groupdro_weights_update.
template <class Update>
void eg_examples(Update update, int owner) {
    const std::size_t E = owner >= 0 ? 3 : 2;
    const std::size_t i0 = owner == 0 ? 1 : 0, i1 = i0 + 1;
    SimplexWeights w = SimplexWeights::uniform(E, owner);
    std::vector<double> losses(E, 0.0);
    losses[i0] = std::log(4.0);
    losses[i1] = std::log(2.0);
    const auto next = update(w, losses, 1.0);
    EXPECT_NEAR(next[i0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(next[i1], 1.0 / 3.0, 1e-15);

    std::vector<double> equal(E, 0.7);
    const auto same = update(w, equal, 3.0);
    for (std::size_t i = 0; i < E; ++i) EXPECT_NEAR(same[i], w[i], 1e-15);

    for (double eta : {1e-3, 1e-5, 1e-7}) {
        const auto small = update(w, losses, eta);
        double d = 0;
        for (std::size_t i = 0; i < E; ++i) d += std::pow(small[i] - w[i], 2);
        EXPECT_LE(std::sqrt(d), eta * std::log(4.0));
    }
}

TEST(Eg, Examples) { eg_examples(eg_update, 0); }
TEST(GroupDro, Examples) { eg_examples(groupdro_weights_update, -1); }

TEST(Eg, OwnerMismatchRejected) {
    EXPECT_THROW(eg_update(SimplexWeights::uniform(3, -1), {1, 2, 3}, 0.1), std::invalid_argument);
    EXPECT_THROW(groupdro_weights_update(SimplexWeights::uniform(3, 1), {1, 2, 3}, 0.1), std::invalid_argument);
    EXPECT_THROW(eg_update(SimplexWeights::uniform(3, 0), {1, NAN, 3}, 0.1), std::invalid_argument);
}

TEST(Eg, RandomUpdatesStayOnSimplex) {
    Philox rng(13);
    for (int t = 0; t < 10000; ++t) {
        const std::size_t E = 2 + rng.below(8);
        const int owner = static_cast<int>(rng.below(E));
        SimplexWeights a = SimplexWeights::uniform(E, owner);
        std::vector<double> losses(E);
        for (int step = 0; step < 3; ++step) {
            for (auto& l : losses) l = 5 * rng.uniform();
            const double eta = std::pow(10.0, -3 + 5 * rng.uniform());
            const auto next = eg_update(a, losses, eta);
            double sum = 0;
            for (double v : next.weights) {
                ASSERT_GE(v, 0.0);
                sum += v;
            }
            ASSERT_NEAR(sum, 1.0, 1e-12);
            ASSERT_EQ(next[static_cast<std::size_t>(owner)], 0.0);
            std::size_t best = owner == 0 ? 1 : 0;
            for (std::size_t i = 0; i < E; ++i)
                if (static_cast<int>(i) != owner && losses[i] > losses[best]) best = i;
            if (a[best] > 0) {
                ASSERT_GE(next[best], a[best] * (1 - 1e-12));
            }
            a = next;
        }
    }
}

TEST(Eg, LargeStepConcentratesOnWorst) {
    const auto a = eg_update(SimplexWeights::uniform(4, 2), {0.3, 0.9, 5.0, 0.5}, 1e6);
    EXPECT_EQ(a.argmax(), 1u);
    EXPECT_NEAR(a[1], 1.0, 1e-12);
}

TEST(WorstEnv, ArgmaxWithLowestIdOnTies) {
    EXPECT_EQ(worst_env({0.3, 0.9, 0.5}, -1), 1u);
    EXPECT_EQ(worst_env({0.3, 0.9, 0.9}, -1), 1u);
    EXPECT_EQ(worst_env({0.3, 0.9, 0.9}, 1), 2u);
}

TEST(Transfer, IdenticalEnvironmentsGiveTwiceWithinRisk) {
    const auto s = testutil::suite_2d(2, 1.0, 1.0, 2000, 8);
    auto b0 = make_batch(s.envs[0]);
    auto b1 = b0;
    b1.env_id = 1;
    const auto model = linear_model(0.6, 0.8);
    const auto F = model.frozen().features(b0.X).value();
    const double within = solve_optimal_predictor(F, b0.labels, 2).risk;
    for (auto v : {TransferVariant::sum_sum, TransferVariant::sum_sup})
        EXPECT_NEAR(transfer_risk(model, {b0, b1}, v, InnerMode::exact_worst).total, 2 * within, 1e-12);
}

TEST(Transfer, CausalMapMatchesQuadrature) {
    // Phi = (+-1, 0) sees only z_c; y z_c ~ N(mu_c, 1) and w(Q) = 2 mu_c.
    SuiteConfig sc;
    sc.num_envs = 2;
    sc.mu_c = {1.0};
    sc.d_e = 1;
    sc.mu_e_mean = 0.0;
    sc.mu_e_var = 1.0;
    sc.n_samples = 100000;
    sc.sampler = Sampler::lattice;
    const auto s = make_suite(sc, 9);
    // Composite Simpson on [-12, 14] against the N(1, 1) density.
    const int N = 20000;
    const double lo = -12, hi = 14, h = (hi - lo) / N;
    double oracle = 0;
    for (int i = 0; i <= N; ++i) {
        const double z = lo + i * h;
        const double wgt = (i == 0 || i == N) ? 1 : (i % 2 ? 4 : 2);
        oracle += wgt * softplus_neg(2 * z) * std::exp(-0.5 * (z - 1) * (z - 1)) / std::sqrt(2 * M_PI);
    }
    oracle *= h / 3;
    for (double a : {1.0, -1.0}) {
        const double t = transfer_risk(linear_model(a, 0), make_batches(s), TransferVariant::sum_sum,
                                       InnerMode::exact_worst)
                             .total;
        EXPECT_NEAR(t / (2 * oracle), 1.0, 1e-3);
    }
}

TEST(Transfer, SupDominatesFixedMixtures) {
    const auto s = testutil::suite_2d(4, 1.0, 1.0, 500, 10);
    const auto batches = make_batches(s);
    const auto model = linear_model(0.4, 0.9);
    const double sup = transfer_risk(model, batches, TransferVariant::sum_sup, InnerMode::exact_worst).total;
    Philox rng(3);
    for (int t = 0; t < 20; ++t) {
        std::vector<SimplexWeights> alphas;
        for (int q = 0; q < 4; ++q) {
            auto a = SimplexWeights::uniform(4, q);
            std::vector<double> g(4);
            for (auto& x : g) x = 3 * rng.normal();
            alphas.push_back(exponentiated_gradient(a, g, 1.0));
        }
        EXPECT_LE(transfer_risk(model, batches, TransferVariant::sum_sup, InnerMode::eg_state, &alphas).total,
                  sup + 1e-12);
    }
}

TEST(Transfer, SingleClassEnvironmentSkippedOrRejected) {
    auto good = hand_batch({1, 0, -1, 0, 2, 1}, {1, -1, 1}, 0);
    auto bad = hand_batch({1, 0, 2, 0}, {1, 1}, 1);
    const auto model = linear_model(1, 0.5);
    const auto r = transfer_risk(model, {good, bad}, TransferVariant::sum_sum, InnerMode::exact_worst);
    EXPECT_TRUE(std::isnan(r.env_losses[1]));
    EXPECT_THROW(transfer_risk(model, {good, bad}, TransferVariant::sum_sum, InnerMode::exact_worst, nullptr, {}, true),
                 DataError);
}

struct TrmFixture {
    EnvironmentSuite suite = testutil::suite_2d(3, 1.0, 1.0, 3000, 11);
    std::vector<Batch> batches = make_batches(suite);
    Model model = linear_model(0.6, 0.8);

    ad::Array solve_q(const Model& m, std::size_t q, double tol = 1e-8) const {
        SolverOptions opt;
        opt.tol = tol;
        return solve_optimal_predictor(m.frozen().features(batches[q].X).value(), batches[q].labels, 2, opt).w;
    }
    /// L_P(Q(Phi)) with w(Q) re-solved for the given map.
    double transfer_loss(const Model& m, std::size_t q, const std::vector<double>& weight) const {
        const ad::Var w(solve_q(m, q, 1e-12));
        double t = 0;
        for (std::size_t p = 0; p < batches.size(); ++p)
            if (weight[p] > 0) t += weight[p] * env_risk(m.frozen().features(batches[p].X), w, batches[p]).item();
        return t;
    }
};

TEST(TrmStep, ZeroLambdaIsErmPlusTransfer) {
    TrmFixture f;
    TRMHyper hyper;
    hyper.lambda = 0.0;
    const auto alpha = SimplexWeights::uniform(3, 1);
    const auto wq = f.solve_q(f.model, 1);
    const ad::Var w_all(ad::Array::vector({1.5}));
    const auto r = trm_step_objective(f.model, w_all, f.batches, 1, alpha, hyper, wq);
    EXPECT_EQ(r.total, r.component("erm_term") + r.component("transfer_term"));
    EXPECT_EQ(r.component("grad_match_term"), 0.0);
    const auto feats = [&](std::size_t p) { return f.model.frozen().features(f.batches[p].X); };
    EXPECT_NEAR(r.component("erm_term"), env_risk(feats(1), w_all, f.batches[1]).item(), 1e-15);
    const double direct = 0.5 * env_risk(feats(0), ad::Var(wq), f.batches[0]).item() +
                          0.5 * env_risk(feats(2), ad::Var(wq), f.batches[2]).item();
    EXPECT_NEAR(r.component("transfer_term"), direct, 1e-15);
}

TEST(TrmStep, GradMatchValueVanishesAtInnerOptimum) {
    TrmFixture f;
    TRMHyper hyper;
    hyper.lambda = 1.0;
    TRMStepInfo info;
    const auto r = trm_step_objective(f.model, ad::Var(ad::Array::vector({1.0})), f.batches, 0,
                                      SimplexWeights::uniform(3, 0), hyper, f.solve_q(f.model, 0), &info);
    EXPECT_LE(std::abs(r.component("grad_match_term")), info.v_q.norm() * 1e-8);
    // Its Phi-gradient does not vanish.
    const auto& phi = f.model.phi()[0];
    const auto g_total = ad::grad(r.objective, {phi})[phi];
    hyper.lambda = 0.0;
    const auto r0 = trm_step_objective(f.model, ad::Var(ad::Array::vector({1.0})), f.batches, 0,
                                       SimplexWeights::uniform(3, 0), hyper, f.solve_q(f.model, 0));
    const auto g0 = ad::grad(r0.objective, {phi})[phi];
    EXPECT_GT(std::abs(g_total[0] - g0[0]) + std::abs(g_total[1] - g0[1]), 1e-6);
}

TEST(TrmStep, TotalGradientMatchesResolvedFiniteDifferences) {
    TrmFixture f;
    f.model = [] {
        ModelSpec ms;
        ms.phi_init = {0.7, 0.4};
        return Model::create(ms, 0);
    }();
    TRMHyper hyper;
    hyper.lambda = 1.0;
    hyper.exact_inverse = true;
    hyper.variant = TransferVariant::sum_sum;
    const std::size_t Q = 2;
    // w_all = 0 makes the ERM term constant in Phi.
    const auto r = trm_step_objective(f.model, ad::Var(ad::Array::vector({0.0})), f.batches, Q,
                                      SimplexWeights::uniform(3, 2), hyper, f.solve_q(f.model, Q));
    const auto& phi = f.model.phi()[0];
    const auto g = ad::grad(r.objective, {phi})[phi];
    const std::vector<double> weight{0.5, 0.5, 0.0};
    const auto fd = fd_phi(f.model, [&](const Model& m) { return f.transfer_loss(m, Q, weight); }, 1e-4);
    EXPECT_LE(testutil::rel_err(as_vec(g), fd), 1e-3);
}

TEST(TrmStep, ImplicitGradientMatchesDenseAssembly) {
    TrmFixture f;
    TRMHyper hyper;
    hyper.lambda = 1.0;
    hyper.exact_inverse = true;
    hyper.variant = TransferVariant::sum_sum;
    const std::size_t Q = 0;
    const auto wq = f.solve_q(f.model, Q);
    const auto r = trm_step_objective(f.model, ad::Var(ad::Array::vector({0.0})), f.batches, Q,
                                      SimplexWeights::uniform(3, 0), hyper, wq);
    const auto& phi = f.model.phi()[0];
    const auto g_total = ad::grad(r.objective, {phi})[phi];

    // Direct part: d/dPhi of the transfer loss with w(Q) held fixed.
    const ad::Var wc(wq);
    const auto direct_node = env_risk(f.model.features(f.batches[1].X), wc, f.batches[1]) * 0.5 +
                             env_risk(f.model.features(f.batches[2].X), wc, f.batches[2]) * 0.5;
    const auto g_direct = ad::grad(direct_node, {phi})[phi];

    // Dense: -(dL_P/dw) H^{-1} d^2 E_Q / dw dPhi.
    const auto wp = ad::Var::param(wq);
    const auto LP = env_risk(f.model.frozen().features(f.batches[1].X), wp, f.batches[1]) * 0.5 +
                    env_risk(f.model.frozen().features(f.batches[2].X), wp, f.batches[2]) * 0.5;
    const double gP = ad::grad(LP, {wp})[wp][0];
    const auto FQ = f.model.frozen().features(f.batches[Q].X).value();
    const double H = hessian_at(wq, FQ, f.batches[Q].labels, 2, 0.0).dense()(0, 0);
    const auto wq2 = ad::Var::param(wq);
    const auto dEQ_dw = ad::grad_vars(env_risk(f.model.features(f.batches[Q].X), wq2, f.batches[Q]), {wq2}, true)[0];
    const auto mixed = ad::grad(ad::sum(dEQ_dw), {phi})[phi];
    std::vector<double> dense(2), got(2);
    for (int i = 0; i < 2; ++i) {
        dense[i] = -gP / H * mixed[i];
        got[i] = g_total[i] - g_direct[i];
    }
    EXPECT_LE(testutil::rel_err(got, dense), 1e-6);
}

TEST(TrmStep, RejectsForeignAlpha) {
    TrmFixture f;
    EXPECT_THROW(trm_step_objective(f.model, ad::Var(ad::Array::vector({1.0})), f.batches, 0,
                                    SimplexWeights::uniform(3, 1), TRMHyper{}, f.solve_q(f.model, 0)),
                 std::invalid_argument);
}

TEST(RiskReport, CsvRows) {
    RiskReport r;
    r.env_losses = {0.5};
    r.components = {{"erm_term", 0.25}};
    r.total = 0.25;
    std::ostringstream os;
    RiskReport::csv_header(os);
    r.append_csv(os, 7);
    EXPECT_EQ(os.str(), "# trm risk-report v1\niteration,env,component,value\n7,0,env_loss,0.5\n"
                        "7,-1,erm_term,0.25\n7,-1,total,0.25\n");
}

}  // namespace
