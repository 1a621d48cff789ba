// Command-line front end. Every RunConfig key can be overridden with
// --key=value, where nested keys use dots: --model.fusion=add.

#include <cmath>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "ecf/harness.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides parse_overrides(const std::vector<std::string>& extras) {
    Overrides out;
    for (const std::string& arg : extras) {
        if (arg.rfind("--", 0) != 0) throw std::invalid_argument("unexpected argument: " + arg);
        const auto eq = arg.find('=');
        if (eq == std::string::npos || eq == 2) throw std::invalid_argument("expected --key=value, got " + arg);
        out.emplace_back(arg.substr(2, eq - 2), arg.substr(eq + 1));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"energy-driven frame/event fusion: data, training and checks"};
    app.require_subcommand(1);
    std::optional<std::string> config_file;
    app.add_option("--config", config_file, "JSON run configuration");

    auto* gen = app.add_subcommand("gen-data", "render, filter and split a synthetic dataset");
    auto* train = app.add_subcommand("train", "train one model; writes metrics.csv and checkpoint/");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split; writes predictions.csv");
    auto* grad = app.add_subcommand("grad-check", "finite-difference check of every op and composite graph");
    auto* score = app.add_subcommand("score", "energy-score estimators against the closed form");
    auto* ablation = app.add_subcommand("ablation", "fusion and decoder sweeps; writes ablation.csv and traces.svg");
    auto* dump = app.add_subcommand("dump-activations", "write ECFM attention maps of one sample as PGM");
    for (auto* sub : {gen, train, eval, ablation, dump}) sub->allow_extras();

    bool corrupt = false;
    grad->add_flag("--corrupt", corrupt, "inject a wrong backward rule (negative control)");

    double mu = 0.0;
    double sigma = 1.0;
    double z = 0.0;
    std::size_t m = 1000;
    std::size_t trials = 200;
    std::uint64_t score_seed = 0;
    bool check = false;
    score->add_option("--mu", mu);
    score->add_option("--sigma", sigma);
    score->add_option("--z", z);
    score->add_option("--M", m, "samples per estimate");
    score->add_option("--trials", trials);
    score->add_option("--seed", score_seed);
    score->add_flag("--check", check, "fail unless both means are within 1% of the closed form and agree to 2 SE");

    std::size_t sample = 0;
    dump->add_option("--sample", sample, "manifest index of the sample");

    CLI11_PARSE(app, argc, argv);

    namespace h = ecf::harness;
    try {
        if (*grad) return h::cmd_gradcheck(corrupt, std::cout);
        if (*score) {
            h::cmd_score(mu, sigma, z, m, trials, score_seed, std::cout);
            if (!check) return 0;
            const h::ScoreReport r = h::score_estimators(mu, sigma, z, m, trials, score_seed);
            const double se = std::hypot(r.full_stderr, r.fast_stderr);
            const bool ok = std::abs(r.fast_mean / r.closed_form - 1.0) < 0.01 &&
                            std::abs(r.full_mean / r.closed_form - 1.0) < 0.01 &&
                            std::abs(r.full_mean - r.fast_mean) < 2.0 * se;
            std::cout << (ok ? "PASS" : "FAIL") << " estimator check\n";
            return ok ? 0 : 1;
        }

        CLI::App* sub = app.get_subcommands().front();
        std::optional<std::filesystem::path> file;
        if (config_file) file = *config_file;
        const h::RunConfig cfg = h::load_run_config(file, parse_overrides(sub->remaining()));
        if (*gen) {
            h::cmd_gen_data(cfg, std::cout);
            return 0;
        }
        if (*train) return h::cmd_train(cfg, std::cout);
        if (*eval) return h::cmd_eval(cfg, std::cout);
        if (*ablation) return h::cmd_ablation(cfg, std::cout);
        if (*dump) return h::cmd_dump_activations(cfg, sample, std::cout);
    } catch (const h::DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
