#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <regex>
#include <sstream>


#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace trm;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

RunResult run_cli(const std::string& args, const fs::path& scratch) {
    const auto o = scratch / "stdout.txt", e = scratch / "stderr.txt";
    const std::string cmd = std::string(TRM_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int st = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    r.out = testutil::slurp(o.string());
    r.err = testutil::slurp(e.string());
    return r;
}

std::string bundled(const std::string& name) { return std::string(TRM_CONFIG_DIR) + "/" + name; }

fs::path write_cfg(const fs::path& dir, const std::string& name, const std::string& text) {
    const auto p = dir / name;
    std::ofstream(p) << text;
    return p;
}

// Replace `key = ...` lines in a config, appending keys not present.
std::string with(std::string text, const std::vector<std::pair<std::string, std::string>>& kv) {
    for (const auto& [k, v] : kv) {
        const std::regex re("(^|\n)" + k + " = [^\n]*");
        if (std::regex_search(text, re))
            text = std::regex_replace(text, re, "$1" + k + " = " + v);
        else
            text += "\n" + k + " = " + v + "\n";
    }
    return text;
}

std::string without(const std::string& text, const std::string& key) {
    return std::regex_replace(text, std::regex("(^|\n)" + key + " = [^\n]*"), "$1");
}

std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> v;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) v.push_back(l);
    return v;
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(testutil::slurp((dir / "manifest.json").string())); }

TEST(Cli, GenerateRoundTrips) {
    const auto dir = testutil::scratch_dir("cli_generate");
    const auto before = testutil::slurp(bundled("suite.cfg"));
    const auto r = run_cli("generate " + bundled("suite.cfg") + " --out " + (dir / "out").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(testutil::slurp(bundled("suite.cfg")), before);
    const auto loaded = load_suite((dir / "out" / "suite.bin").string());
    const auto expect = make_suite(parse_suite_config(Config::load(bundled("suite.cfg"))), 0);
    ASSERT_EQ(loaded.size(), expect.size());
    for (std::size_t e = 0; e < loaded.size(); ++e) {
        EXPECT_EQ(loaded.envs[e].features.values(), expect.envs[e].features.values());
        EXPECT_EQ(loaded.envs[e].labels, expect.envs[e].labels);
        EXPECT_EQ(loaded.envs[e].env_id, expect.envs[e].env_id);
    }
    const auto m = manifest(dir / "out");
    EXPECT_EQ(m["command"], "generate");
    EXPECT_EQ(m["seed"], 0);
    EXPECT_TRUE(m["files"].contains("suite.bin"));
    EXPECT_TRUE(m.contains("config_hash"));
}

TEST(Cli, SameSeedSameFiles) {
    const auto dir = testutil::scratch_dir("cli_seed");
    for (const char* d : {"a", "b"})
        ASSERT_EQ(run_cli("generate " + bundled("suite.cfg") + " --seed 9 --out " + (dir / d).string(), dir).code, 0);
    EXPECT_EQ(manifest(dir / "a")["files"], manifest(dir / "b")["files"]);
    ASSERT_EQ(run_cli("generate " + bundled("suite.cfg") + " --seed 10 --out " + (dir / "c").string(), dir).code, 0);
    EXPECT_NE(manifest(dir / "a")["files"]["suite.bin"], manifest(dir / "c")["files"]["suite.bin"]);
}

TEST(Cli, MissingKeyIsNamed) {
    const auto dir = testutil::scratch_dir("cli_missing");
    const auto cfg = write_cfg(dir, "bad.cfg", without(testutil::slurp(bundled("suite.cfg")), "sigma_c"));
    const auto r = run_cli("generate " + cfg.string() + " --out " + (dir / "out").string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("sigma_c"), std::string::npos) << r.err;
}

TEST(Cli, UnknownKeyAndBadValueRejected) {
    const auto dir = testutil::scratch_dir("cli_unknown");
    const auto base = testutil::slurp(bundled("suite.cfg"));
    auto r = run_cli("generate " + write_cfg(dir, "a.cfg", base + "\nsigma_x = 1\n").string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("sigma_x"), std::string::npos) << r.err;
    r = run_cli("generate " + write_cfg(dir, "b.cfg", with(base, {{"sigma_e", "-1"}})).string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("sigma_e"), std::string::npos) << r.err;
    r = run_cli("generate " + (dir / "nope.cfg").string(), dir);
    EXPECT_EQ(r.code, 2);
    r = run_cli("frobnicate " + bundled("suite.cfg"), dir);
    EXPECT_EQ(r.code, 2);
}

TEST(Cli, TrainWritesMetricsAndIsReproducible) {
    const auto dir = testutil::scratch_dir("cli_train");
    const auto cfg = write_cfg(dir, "t.cfg", with(testutil::slurp(bundled("train_trm.cfg")), {{"iterations", "40"}}));
    for (const char* d : {"a", "b"}) {
        const auto r = run_cli("train " + cfg.string() + " --out " + (dir / d).string(), dir);
        ASSERT_EQ(r.code, 0) << r.err;
    }
    const auto m = testutil::slurp((dir / "a" / "metrics.csv").string());
    EXPECT_EQ(m, testutil::slurp((dir / "b" / "metrics.csv").string()));
    EXPECT_EQ(testutil::slurp((dir / "a" / "alpha.csv").string()), testutil::slurp((dir / "b" / "alpha.csv").string()));
    const auto ls = lines(m);
    ASSERT_GE(ls.size(), 3u);
    EXPECT_EQ(ls[0], "# trm metrics v1");
    for (const char* col : {"iter", "env", "env_loss", "transfer_risk_sumsup", "transfer_risk_sumsum", "irmv1_penalty",
                            "weight_ratio", "pred_distance"})
        EXPECT_NE(ls[1].find(col), std::string::npos) << col;
    for (const char* f : {"checkpoint.bin", "checkpoint.json", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_EQ(manifest(dir / "a")["files"], manifest(dir / "b")["files"]);
}

TEST(Cli, TrainFromGeneratedData) {
    const auto dir = testutil::scratch_dir("cli_data");
    ASSERT_EQ(run_cli("generate " + bundled("suite.cfg") + " --out " + (dir / "g").string(), dir).code, 0);
    const std::string body = "algorithm = erm\niterations = 20\nmetrics_every = 5\neval_samples = 200\ndata = \"" +
                             (dir / "g" / "suite.bin").string() + "\"\n";
    auto r = run_cli("train " + write_cfg(dir, "d.cfg", body).string() + " --out " + (dir / "t").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "t" / "metrics.csv"));
    EXPECT_FALSE(fs::exists(dir / "t" / "alpha.csv"));
    r = run_cli("train " + write_cfg(dir, "e.cfg", body + "num_envs = 3\n").string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("num_envs"), std::string::npos) << r.err;
}

TEST(Cli, IrmWithZeroPenaltyMatchesErm) {
    const auto dir = testutil::scratch_dir("cli_irm0");
    const auto base = with(testutil::slurp(bundled("train_trm.cfg")), {{"iterations", "40"}});
    const auto erm = write_cfg(dir, "erm.cfg", with(base, {{"algorithm", "erm"}}));
    const auto irm = write_cfg(dir, "irm.cfg", with(base, {{"algorithm", "irmv1"}, {"lambda_irm", "0"}}));
    ASSERT_EQ(run_cli("train " + erm.string() + " --out " + (dir / "erm").string(), dir).code, 0);
    ASSERT_EQ(run_cli("train " + irm.string() + " --out " + (dir / "irm").string(), dir).code, 0);
    EXPECT_EQ(testutil::slurp((dir / "erm" / "metrics.csv").string()), testutil::slurp((dir / "irm" / "metrics.csv").string()));
}

TEST(Cli, DivergenceExitsWithNumericCode) {
    const auto dir = testutil::scratch_dir("cli_diverge");
    const auto cfg = write_cfg(dir, "x.cfg",
                               with(testutil::slurp(bundled("train_trm.cfg")),
                                    {{"algorithm", "erm"}, {"optimizer", "sgd"}, {"lr_w", "1e305"}, {"lr_phi", "1e305"},
                                     {"constrained", "false"}, {"iterations", "50"}}));
    const auto r = run_cli("train " + cfg.string() + " --out " + (dir / "o").string(), dir);
    EXPECT_EQ(r.code, 3) << r.err;
    EXPECT_TRUE(fs::exists(dir / "o" / "last_good.json"));
}

std::string small_sweep(const std::string& bundled_name) {
    return with(testutil::slurp(bundled(bundled_name)),
                {{"iterations", "20"}, {"n_samples", "200"}, {"num_seeds", "2"}, {"eval_samples", "100"}, {"penalty_warmup", "5"}});
}

TEST(Cli, SweepRowsAndParallelDeterminism) {
    const auto dir = testutil::scratch_dir("cli_sweep");
    const auto cfg = write_cfg(dir, "s.cfg", with(small_sweep("sweep_num_envs.cfg"), {{"values", "[3, 5]"}}));
    ASSERT_EQ(run_cli("sweep " + cfg.string() + " --jobs 1 --out " + (dir / "j1").string(), dir).code, 0);
    const auto r = run_cli("sweep " + cfg.string() + " --jobs 2 --out " + (dir / "j2").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto a = testutil::slurp((dir / "j1" / "sweep.csv").string());
    EXPECT_EQ(a, testutil::slurp((dir / "j2" / "sweep.csv").string()));
    const auto ls = lines(a);
    ASSERT_EQ(ls.size(), 2u + 2 * 3 * 2);
    EXPECT_EQ(ls[1], "num_envs,algorithm,seed,ratio,a,b,k_diag");
    EXPECT_NE(r.out.find("inversions"), std::string::npos);
}

TEST(Cli, BundledMuCSweepShape) {
    const auto dir = testutil::scratch_dir("cli_sweep_mu");
    const auto cfg = write_cfg(dir, "s.cfg", small_sweep("sweep_mu_c.cfg"));
    const auto r = run_cli("sweep " + cfg.string() + " --out " + (dir / "o").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ls = lines(testutil::slurp((dir / "o" / "sweep.csv").string()));
    ASSERT_EQ(ls.size(), 2u + 4 * 3 * 2);
    EXPECT_EQ(ls[1].substr(0, 5), "mu_c,");
    std::set<std::string> keys;
    for (std::size_t i = 2; i < ls.size(); ++i) keys.insert(ls[i].substr(0, ls[i].find(',', ls[i].find(',', ls[i].find(',') + 1) + 1)));
    EXPECT_EQ(keys.size(), 4u * 3 * 2);
}

TEST(Cli, MalformedSweepRejected) {
    const auto dir = testutil::scratch_dir("cli_sweep_bad");
    const auto base = small_sweep("sweep_num_envs.cfg");
    auto r = run_cli("sweep " + write_cfg(dir, "a.cfg", with(base, {{"axis", "sigma"}})).string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("axis"), std::string::npos) << r.err;
    r = run_cli("sweep " + write_cfg(dir, "b.cfg", with(base, {{"values", "[2.5]"}})).string(), dir);
    EXPECT_EQ(r.code, 2);
    r = run_cli("sweep " + write_cfg(dir, "c.cfg", with(base, {{"num_envs", "4"}})).string(), dir);
    EXPECT_EQ(r.code, 2);
}

TEST(Cli, CertifyLowDimensionReportsFailingClause) {
    const auto dir = testutil::scratch_dir("cli_cert2");
    const auto cfg = write_cfg(dir, "c.cfg", with(testutil::slurp(bundled("certify_de2.cfg")), {{"mc_samples", "100000"}}));
    const auto r = run_cli("certify " + cfg.string() + " --out " + (dir / "o").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("certificate: FAIL"), std::string::npos) << r.out;
    const auto csv = testutil::slurp((dir / "o" / "certificate.csv").string());
    EXPECT_NE(csv.find(",0\n"), std::string::npos) << csv;
}

TEST(Cli, CertifyInvalidGeometryQuotesBound) {
    const auto dir = testutil::scratch_dir("cli_cert_bad");
    const auto r = run_cli("certify " + bundled("certify_invalid.cfg") + " --out " + (dir / "o").string(), dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("sqrt(d_e) <= ||mu_c||"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "o" / "certificate.csv"));
}

TEST(Cli, CertifyHighDimensionPasses) {
    const auto dir = testutil::scratch_dir("cli_cert256");
    const auto r = run_cli("certify " + bundled("certify_de256.cfg") + " --out " + (dir / "o").string(), dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("certificate: PASS"), std::string::npos) << r.out;
    EXPECT_EQ(manifest(dir / "o")["command"], "certify");
}

}  // namespace
