// trm: generate suites, train, sweep weight ratios, certify the counterexample.
//
//   trm generate <config> [--seed N] [--out DIR]
//   trm train    <config> [--seed N] [--out DIR]
//   trm sweep    <config> [--seed N] [--out DIR] [--jobs N]
//   trm certify  <config> [--seed N] [--out DIR] [--jobs N]
//
// Exit codes: 0 ok, 2 invalid config or input, 3 numeric failure, 1 other.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "trm/trm.hpp"

namespace {

int run(const std::string& command, const std::string& path, const trm::Overrides& ov, bool verbose) {
    if (verbose) trm::Log::instance().set_level(trm::LogLevel::info);
    const auto cfg = trm::Config::load(path);
    if (command == "generate") {
        const auto suite = trm::cmd_generate(cfg, ov);
        std::cout << "generated " << suite.size() << " environments\n";
    } else if (command == "train") {
        const auto res = trm::cmd_train(cfg, ov);
        const auto& last = res.metrics.rows.back();
        std::cout << "trained " << res.iterations << " iterations; transfer risk (sum-sup) " << last.transfer_sumsup
                  << ", irmv1 penalty " << last.irmv1_penalty << '\n';
    } else if (command == "sweep") {
        trm::cmd_sweep(cfg, ov).write_summary(std::cout);
    } else {
        trm::cmd_certify(cfg, ov).write_summary(std::cout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transfer risk minimization experiments"};
    app.require_subcommand(1, 1);

    std::string path;
    trm::Overrides ov;
    std::uint64_t seed = 0;
    std::size_t jobs = 0;
    std::string out;
    bool verbose = false;

    for (const char* name : {"generate", "train", "sweep", "certify"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("config", path, "config file")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "seed, overrides the config");
        sub->add_option("--out", out, "output directory, overrides the config");
        sub->add_option("--jobs", jobs, "parallel jobs (default: all cores)");
        sub->add_flag("-v,--verbose", verbose, "log progress to stderr");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    const auto* sub = app.get_subcommands().front();
    if (sub->count("--seed")) ov.seed = seed;
    if (sub->count("--out")) ov.out = out;
    if (sub->count("--jobs")) ov.jobs = jobs;

    try {
        return run(sub->get_name(), path, ov, verbose);
    } catch (const trm::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const trm::ad::NonFiniteError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const trm::ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return 2;
    } catch (const trm::DataError& e) {
        std::cerr << "invalid data: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
