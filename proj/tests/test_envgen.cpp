#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace trm;

namespace {

GaussianEnvSpec spec_1d(double mu_c, double mu_e, std::size_t n) {
    GaussianEnvSpec s;
    s.mu_c = {mu_c};
    s.mu_e = {mu_e};
    s.n_samples = n;
    return s;
}

TEST(Envgen, CausalMeanForPositiveLabels) {
    auto s = spec_1d(1.0, 0.5, 100000);
    s.label_prior = 1.0 - 1e-9;
    const auto ds = sample_environment(s, 3);
    double m = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ASSERT_EQ(ds.labels[i], 1);
        m += ds.features(i, 0) / static_cast<double>(ds.size());
    }
    EXPECT_NEAR(m, 1.0, 0.01);
}

TEST(Envgen, FullBiasDrawsAlignedMeans) {
    GaussianEnvSpec s;
    s.mu_c = {1.0};
    s.mu_e = {2.0, -1.0};
    s.n_samples = 20000;
    s.sigma_e = 1.5;
    const auto ds = sample_environment(s, 4);
    std::vector<double> pos(2, 0), neg(2, 0);
    double np = 0, nn = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ASSERT_TRUE(ds.aligned[i]);
        auto& acc = ds.labels[i] > 0 ? pos : neg;
        (ds.labels[i] > 0 ? np : nn) += 1;
        for (int j = 0; j < 2; ++j) acc[j] += ds.features(i, 1 + j);
    }
    for (int j = 0; j < 2; ++j) {
        EXPECT_NEAR(pos[j] / np, s.mu_e[j], 3 * s.sigma_e / std::sqrt(np));
        EXPECT_NEAR(neg[j] / nn, -s.mu_e[j], 3 * s.sigma_e / std::sqrt(nn));
    }
}

TEST(Envgen, BiasDegreeFraction) {
    GaussianEnvSpec s;
    s.mu_c = std::vector<double>(10, 0.0);
    s.mu_c[0] = 1.0;
    s.mu_e = std::vector<double>(10, 0.0);
    s.mu_e[0] = 1.0;
    for (int k = 0; k < 10; ++k) {
        std::vector<double> m(10, 0.0);
        m[k] = 1.0;
        s.decoy_means.push_back(m);
    }
    s.bias_degree = 0.9;
    s.n_samples = 100000;
    const auto ds = sample_environment(s, 9);
    double f = 0;
    for (bool a : ds.aligned) f += a;
    f /= static_cast<double>(ds.size());
    // Binomial sd is sqrt(0.09 / 1e5) ~ 9.5e-4.
    EXPECT_NEAR(f, 0.9, 0.01);
}

TEST(Envgen, BiasWithoutDecoysRejected) {
    auto s = spec_1d(1, 1, 10);
    s.bias_degree = 0.5;
    EXPECT_THROW(sample_environment(s, 0), std::invalid_argument);
}

TEST(Envgen, LabelMarginalWithinBinomialBounds) {
    auto s = spec_1d(1, 1, 5000);
    s.label_prior = 0.3;
    const auto ds = sample_environment(s, 12);
    double pos = 0;
    for (int y : ds.labels) pos += y > 0;
    const double sd = std::sqrt(0.3 * 0.7 * 5000);
    EXPECT_NEAR(pos, 1500, 3 * sd);
}

TEST(Envgen, ClassConditionalMeansConverge) {
    for (std::size_t n : {1000u, 100000u}) {
        const auto ds = sample_environment(spec_1d(1.5, -0.5, n), 77);
        double mc = 0, me = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mc += ds.labels[i] * ds.features(i, 0);
            me += ds.labels[i] * ds.features(i, 1);
        }
        mc /= static_cast<double>(n);
        me /= static_cast<double>(n);
        EXPECT_NEAR(mc, 1.5, 4 / std::sqrt(static_cast<double>(n)));
        EXPECT_NEAR(me, -0.5, 4 / std::sqrt(static_cast<double>(n)));
    }
}

TEST(Envgen, SeedDeterminism) {
    const auto a = testutil::suite_2d(3, 1.0, 1.0, 500, 42);
    const auto b = testutil::suite_2d(3, 1.0, 1.0, 500, 42);
    const auto c = testutil::suite_2d(3, 1.0, 1.0, 500, 43);
    for (std::size_t e = 0; e < 3; ++e) EXPECT_TRUE(a.envs[e] == b.envs[e]);
    EXPECT_FALSE(a.envs[0] == c.envs[0]);
}

TEST(Envgen, LatticeSamplerBalancedAndDeterministic) {
    auto s = spec_1d(1.0, 0.5, 20000);
    s.sampler = Sampler::lattice;
    const auto a = sample_environment(s, 5);
    EXPECT_TRUE(a == sample_environment(s, 5));
    EXPECT_FALSE(a == sample_environment(s, 6));
    double pos = 0, mc = 0, me = 0, vc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        pos += a.labels[i] > 0;
        mc += a.labels[i] * a.features(i, 0);
        me += a.labels[i] * a.features(i, 1);
    }
    mc /= 20000.0;
    me /= 20000.0;
    for (std::size_t i = 0; i < a.size(); ++i) vc += std::pow(a.labels[i] * a.features(i, 0) - mc, 2);
    EXPECT_EQ(pos, 10000);
    // Far tighter than the i.i.d. standard error of 7e-3.
    EXPECT_NEAR(mc, 1.0, 1e-3);
    EXPECT_NEAR(me, 0.5, 1e-3);
    EXPECT_NEAR(vc / 20000.0, 1.0, 1e-2);
}

TEST(Envgen, LatticeSamplerRejectsUnsupportedSpecs) {
    auto s = spec_1d(1.0, 0.5, 101);
    s.sampler = Sampler::lattice;
    EXPECT_THROW(sample_environment(s, 0), std::invalid_argument);
    s.n_samples = 100;
    s.label_prior = 0.3;
    EXPECT_THROW(sample_environment(s, 0), std::invalid_argument);
    EXPECT_THROW(parse_sampler("sobol"), std::invalid_argument);
    EXPECT_EQ(parse_sampler("lattice"), Sampler::lattice);
}

TEST(MakeSuite, TwoPointSymmetricMeans) {
    const auto s = testutil::suite_2d(2, 1.0, 0.0, 10, 5);
    const double m0 = s.specs[0].mu_e[0], m1 = s.specs[1].mu_e[0];
    EXPECT_DOUBLE_EQ(std::abs(m0), 1.0);
    EXPECT_DOUBLE_EQ(m0, -m1);
}

TEST(MakeSuite, AffineCorrectionIsExact) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SuiteConfig sc;
        sc.num_envs = 5;
        sc.d_e = 3;
        sc.mu_e_mean = 1.0;
        sc.mu_e_var = 1.0;
        sc.n_samples = 5;
        const auto s = make_suite(sc, seed);
        for (double m : s.mean_of_means()) EXPECT_NEAR(m, 1.0, 1e-12);
        for (double v : s.var_of_means()) EXPECT_NEAR(v, 1.0, 1e-12);
    }
}

TEST(MakeSuite, SingleEnvironmentRejected) {
    SuiteConfig sc;
    sc.num_envs = 1;
    EXPECT_THROW(make_suite(sc, 0), std::invalid_argument);
}

TEST(MakeSuite, SweepConfiguration) {
    const auto s = testutil::suite_2d(5, 1.0, 1.0, 10000, 0);
    ASSERT_EQ(s.size(), 5u);
    for (const auto& e : s.envs) EXPECT_EQ(e.size(), 10000u);
}

TEST(MakeSuite, RotationIsOrthogonal) {
    SuiteConfig sc;
    sc.num_envs = 2;
    sc.mu_c = {1.0, 0.5};
    sc.d_e = 2;
    sc.n_samples = 50;
    sc.rotate = true;
    const auto s = make_suite(sc, 8);
    const auto& R = s.rotation;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double d = 0;
            for (std::size_t k = 0; k < 4; ++k) d += R(i, k) * R(j, k);
            EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-12);
        }
    sc.rotate = false;
    const auto plain = make_suite(sc, 8);
    // Row norms are preserved by the rotation.
    for (std::size_t i = 0; i < 50; ++i) {
        double a = 0, b = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            a += s.envs[1].features(i, k) * s.envs[1].features(i, k);
            b += plain.envs[1].features(i, k) * plain.envs[1].features(i, k);
        }
        EXPECT_NEAR(a, b, 1e-10);
    }
}

TEST(Mixture, OneHotAndUniform) {
    const auto s = testutil::suite_2d(3, 1.0, 0.0, 100, 1);
    SimplexWeights w;
    w.weights = {0.0, 1.0, 0.0};
    const auto per_env = [](const Dataset& d) { return static_cast<double>(d.env_id) * 0.2 + 0.2; };
    EXPECT_DOUBLE_EQ(mixture_view(s, w, 0).expect(per_env), 0.4);
    w.weights = {0.5, 0.0, 0.5};
    const auto losses = [](const Dataset& d) { return d.env_id == 0 ? 0.2 : 0.4; };
    EXPECT_NEAR(mixture_view(s, w, 1).expect(losses), 0.3, 1e-15);
}

TEST(Mixture, WeightOnExcludedEnvironmentRejected) {
    const auto s = testutil::suite_2d(3, 1.0, 0.0, 10, 1);
    SimplexWeights w;
    w.weights = {0.5, 0.5, 0.0};
    EXPECT_THROW(mixture_view(s, w, 0), std::invalid_argument);
}

TEST(Mixture, MatchesResampledMixture) {
    const auto s = testutil::suite_2d(4, 1.0, 1.0, 20000, 2);
    Philox rng(31);
    SimplexWeights w;
    w.weights = {0.0, 0.2, 0.5, 0.3};
    // f(x) = y * z_e: its mixture expectation weights each environment's mean.
    const auto f = [](const Dataset& d, std::size_t i) { return d.labels[i] * d.features(i, 1); };
    const double view = mixture_view(s, w, 0).expect([&](const Dataset& d) {
        double m = 0;
        for (std::size_t i = 0; i < d.size(); ++i) m += f(d, i);
        return m / static_cast<double>(d.size());
    });
    const int N = 1000000;
    double m = 0, m2 = 0;
    for (int k = 0; k < N; ++k) {
        const double u = rng.uniform();
        const std::size_t e = u < 0.2 ? 1 : u < 0.7 ? 2 : 3;
        const auto& d = s.envs[e];
        const double v = f(d, rng.below(d.size()));
        m += v;
        m2 += v * v;
    }
    m /= N;
    const double sd = std::sqrt((m2 / N - m * m) / N);
    EXPECT_NEAR(view, m, 3 * sd);
}

TEST(DatasetFiles, BinaryRoundTripIsBitExact) {
    const auto s = testutil::suite_2d(3, 1.2, 0.5, 200, 17);
    std::stringstream ss;
    write_binary(ss, s.envs);
    const auto back = read_binary(ss);
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t e = 0; e < 3; ++e) EXPECT_TRUE(back[e] == s.envs[e]);
    EXPECT_EQ(ss.str().substr(0, 5), "XRSK1");
}

TEST(DatasetFiles, CsvRoundTripIsBitExact) {
    const auto s = testutil::suite_2d(2, 1.2, 0.5, 100, 18);
    std::stringstream ss;
    write_csv(ss, s.envs);
    EXPECT_EQ(ss.str().substr(0, ss.str().find('\n', 16)), "# trm suite v1\nenv_id,y,z_1,z_2");
    const auto back = read_csv(ss, 1);
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t e = 0; e < 2; ++e) EXPECT_TRUE(back[e] == s.envs[e]);
}

TEST(DatasetFiles, CorruptBinaryRejected) {
    std::stringstream ss("XRSK2 garbage");
    EXPECT_THROW(read_binary(ss), DataError);
}

}  // namespace
