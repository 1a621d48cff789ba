#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "ecf/harness.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace ecf;
using namespace ecf::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(is, line);) out.push_back(line);
    return out;
}

double logged_value(const std::string& log, const std::string& key) {
    std::istringstream is(log);
    for (std::string k; is >> k;) {
        if (k == key) {
            double v;
            is >> v;
            return v;
        }
    }
    throw std::runtime_error("no " + key + " in log");
}

// Tiny 16x16 dataset with a matching model, for fast training runs.
RunConfig tiny_run(const fs::path& dir) {
    RunConfig cfg;
    cfg.data_dir = dir / "data";
    cfg.out_dir = dir / "run";
    cfg.samples = 160;
    cfg.scenario.height = cfg.scenario.width = 16;
    cfg.scenario.samples_per_drive = 4;
    cfg.model.backbone.height = cfg.model.backbone.width = 16;
    cfg.model.decoder.hidden = 32;
    cfg.filters.prune = false;
    cfg.batch = 16;
    return cfg;
}

}  // namespace

TEST_CASE("regression metrics: hand cases") {
    auto m = regression_metrics({1, 2, 3}, {2, 2, 2});
    CHECK(std::fabs(m.rmse - std::sqrt(2.0 / 3.0)) < 1e-12);
    CHECK(std::fabs(m.mae - 2.0 / 3.0) < 1e-12);
    m = regression_metrics({0, 0}, {1, 1});
    CHECK(m.rmse == 1.0);
    CHECK(m.mae == 1.0);
    m = regression_metrics({0.3, -0.2}, {0.3, -0.2});
    CHECK(m.rmse == 0.0);
    CHECK(m.mae == 0.0);
    CHECK_THROWS((void)regression_metrics({1, 2}, {1}));
    CHECK_THROWS((void)regression_metrics({}, {}));
}

TEST_CASE("regression metrics: rmse >= mae") {
    Rng rng(41);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<double> y(n), y_hat(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = rng.uniform(-1, 1);
            y_hat[i] = rng.uniform(-1, 1);
        }
        const auto m = regression_metrics(y, y_hat);
        CHECK(m.rmse >= m.mae);
        CHECK(m.mae >= 0.0);
    }
}

TEST_CASE("config: defaults, file and overrides") {
    const RunConfig d = load_run_config(std::nullopt, {});
    CHECK(d.optim.lr == 1e-3);
    CHECK(d.optim.weight_decay == 1e-2);
    CHECK(d.batch == 32);
    CHECK(d.epochs == 20);
    CHECK(d.model.fusion == model::FusionVariant::ecfm);

    const auto dir = testing::scratch_dir("config");
    std::ofstream(dir / "c.json") << R"({"epochs": 3, "model": {"fusion": "add"}})";
    const RunConfig c =
        load_run_config(dir / "c.json", {{"optim.lr", "0.01"}, {"model.decoder.integrate", "false"}, {"out_dir", "elsewhere"}});
    CHECK(c.epochs == 3);
    CHECK(c.model.fusion == model::FusionVariant::add);
    CHECK(c.optim.lr == 0.01);
    CHECK(!c.model.decoder.integrate);
    CHECK(c.out_dir == fs::path("elsewhere"));
    CHECK(load_run_config(dir / "c.json", {{"model.fusion", "events_only"}}).model.fusion ==
          model::FusionVariant::events_only);

    // every key of the serialized config is reachable by an override
    const auto j = to_json(d);
    CHECK(to_json(run_config_from_json(j)) == j);
    std::size_t leaves = 0;
    const auto flat = j.flatten();
    for (const auto& item : flat.items()) {
        const auto& value = item.value();
        std::string key = item.key().substr(1);
        std::replace(key.begin(), key.end(), '/', '.');
        if (key.find(".0") != std::string::npos || key.find("ablation_seeds") == 0 || key.find("channels") != std::string::npos)
            continue;
        CHECK_NOTHROW((void)load_run_config(std::nullopt, {{key, value.is_string() ? value.get<std::string>() : value.dump()}}));
        ++leaves;
    }
    CHECK(leaves > 40);

    CHECK_THROWS_AS((void)load_run_config(std::nullopt, {{"optim.learning_rate", "0.1"}}), std::invalid_argument);
    CHECK_THROWS((void)load_run_config(std::nullopt, {{"model.fusion", "concat"}}));
    CHECK_THROWS((void)load_run_config(std::nullopt, {{"optim.lr", "-1"}}));
    CHECK_THROWS((void)load_run_config(std::nullopt, {{"epochs", "many"}}));
    CHECK_THROWS((void)load_run_config(dir / "missing.json", {}));
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS((void)load_run_config(dir / "bad.json", {}));
}

TEST_CASE("shipped default config matches the built-in defaults") {
    std::ifstream is(fs::path(ECF_SOURCE_DIR) / "configs" / "default.json");
    REQUIRE(is);
    CHECK(nlohmann::json::parse(is) == nlohmann::json(to_json(RunConfig{})));
}

TEST_CASE("eval reproduces hand-computed metrics") {
    const auto dir = testing::scratch_dir("eval");
    RunConfig cfg = testing::constant_eval_fixture(dir, {1.0, 2.0, 3.0}, 2.0);
    std::ostringstream log;
    CHECK(cmd_eval(cfg, log) == 0);
    CHECK(std::fabs(logged_value(log.str(), "rmse") - std::sqrt(2.0 / 3.0)) < 1e-12);
    CHECK(std::fabs(logged_value(log.str(), "mae") - 2.0 / 3.0) < 1e-12);
    const auto rows = lines_of(cfg.out_dir / "predictions.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == "id,y,y_hat,sigma");
    CHECK(rows[1].rfind("0,1,2,", 0) == 0);

    cfg = testing::constant_eval_fixture(testing::scratch_dir("eval_zero"), {0.25, -0.5}, 0.0);
    log.str("");
    CHECK(cmd_eval(cfg, log) == 0);
    CHECK(std::fabs(logged_value(log.str(), "rmse") - std::sqrt((0.0625 + 0.25) / 2.0)) < 1e-12);
    CHECK(std::fabs(logged_value(log.str(), "mae") - 0.375) < 1e-12);

    // 32x32 checkpoint against a 16x16 dataset
    const auto other = testing::scratch_dir("eval_mismatch");
    data::ScenarioParams p;
    p.height = p.width = 16;
    auto m = data::gen_dataset(3, 1, p, other);
    m = data::split_dataset(m, 0.5, 0);
    data::write_manifest(m);
    cfg.data_dir = other;
    CHECK_THROWS((void)cmd_eval(cfg, log));
}

TEST_CASE("training: zero epochs, determinism, progress") {
    const auto dir = testing::scratch_dir("train");
    RunConfig cfg = tiny_run(dir);
    std::ostringstream log;
    const auto m = cmd_gen_data(cfg, log);
    CHECK(m.count(data::Split::train) > 0);
    CHECK(m.count(data::Split::test) > 0);

    cfg.epochs = 0;
    CHECK(cmd_train(cfg, log) == 0);
    CHECK(fs::exists(cfg.out_dir / "checkpoint"));
    CHECK(lines_of(cfg.out_dir / "metrics.csv") == std::vector<std::string>{"epoch,train_loss,val_rmse,val_mae"});
    CHECK(model::load_checkpoint(cfg.out_dir / "checkpoint").epoch == 0);

    cfg.epochs = 6;
    cfg.out_dir = dir / "a";
    CHECK(cmd_train(cfg, log) == 0);
    cfg.out_dir = dir / "b";
    CHECK(cmd_train(cfg, log) == 0);
    const std::string a = slurp(dir / "a" / "metrics.csv");
    CHECK(a == slurp(dir / "b" / "metrics.csv"));
    CHECK(lines_of(dir / "a" / "metrics.csv").size() == 7);
    for (const auto& e : fs::directory_iterator(dir / "a" / "checkpoint")) {
        CHECK(slurp(e.path()) == slurp(dir / "b" / "checkpoint" / e.path().filename()));
    }

    cfg.seed = 1;
    cfg.out_dir = dir / "c";
    CHECK(cmd_train(cfg, log) == 0);
    CHECK(slurp(dir / "c" / "metrics.csv") != a);

    const auto man = data::read_manifest(cfg.data_dir);
    const Tensors tr = load_split(man, data::Split::train, cfg.normalize);
    const Tensors te = load_split(man, data::Split::test, cfg.normalize);
    cfg.write_checkpoints = false;
    cfg.seed = 0;
    cfg.epochs = 12;
    model::ModelConfig mc = cfg.model;
    model::Model init(mc);
    const double initial = evaluate(init, te).metrics.rmse;
    const TrainResult r = train(cfg, tr, te);
    CHECK(r.epochs.back().val_rmse < initial);
    CHECK(r.best.rmse <= r.epochs.back().val_rmse);
    CHECK(r.epochs.back().train_loss < r.epochs.front().train_loss);
    for (const auto& e : r.epochs) CHECK(e.val_rmse >= e.val_mae);
}

TEST_CASE("training aborts on divergence") {
    const auto dir = testing::scratch_dir("diverge");
    RunConfig cfg = tiny_run(dir);
    std::ostringstream log;
    cmd_gen_data(cfg, log);
    cfg.optim.lr = 1e6;
    cfg.epochs = 5;
    cfg.write_checkpoints = false;
    const auto man = data::read_manifest(cfg.data_dir);
    const Tensors tr = load_split(man, data::Split::train, cfg.normalize);
    try {
        // a huge step need not blow up every model, but it must never finish with NaN metrics
        const TrainResult r = train(cfg, tr, tr);
        for (const auto& e : r.epochs) CHECK(std::isfinite(e.val_rmse));
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("gradient-check suite") {
    const auto items = run_gradcheck_suite(false);
    std::set<std::string> names;
    std::size_t ops = 0;
    for (const auto& it : items) {
        INFO(it.name);
        CHECK(it.passed());
        CHECK(it.name.find("uncovered") == std::string::npos);
        CHECK(it.threshold <= (it.kind == "op" ? 1e-5 : 1e-4));
        CHECK(it.coords > 0);
        ops += it.kind == "op";
        names.insert(it.name);
    }
    CHECK(registered_ops().size() == 33);
    CHECK(ops >= registered_ops().size());
    CHECK(names.size() == items.size());

    const auto bad = run_gradcheck_suite(true);
    std::size_t failed = 0;
    for (const auto& it : bad) failed += !it.passed();
    CHECK(failed == 1);
    std::ostringstream log;
    CHECK(cmd_gradcheck(true, log) != 0);
    CHECK(log.str().find("FAIL") != std::string::npos);
}

TEST_CASE("score estimators against the closed form") {
    auto r = score_estimators(0.0, 1.0, 0.0, 1000, 200, 7);
    CHECK(r.closed_form == doctest::Approx(0.233695).epsilon(1e-6));
    CHECK(std::fabs(r.fast_mean / r.closed_form - 1.0) < 0.01);
    CHECK(std::fabs(r.full_mean / r.closed_form - 1.0) < 0.01);

    r = score_estimators(0.3, 0.01, 0.3, 1000, 200, 8);
    const double expected = 0.01 * (2.0 * testing::phi(0.0) - 1.0 / std::sqrt(M_PI));
    CHECK(expected == doctest::Approx(0.00234).epsilon(0.01));
    CHECK(r.closed_form == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::fabs(r.fast_mean / expected - 1.0) < 0.01);

    r = score_estimators(0.0, 1.0, 0.5, 2, 1, 9);
    CHECK(std::isfinite(r.fast_mean));
    CHECK(std::isinf(r.fast_stderr));

    CHECK_THROWS((void)score_estimators(0.0, 0.0, 0.0, 10, 10, 1));
    std::ostringstream log;
    CHECK(cmd_score(0.0, 1.0, 0.0, 1000, 200, 1, log) == 0);
    CHECK(log.str().find("0.2336") != std::string::npos);
}

TEST_CASE("ablation writers") {
    AblationResult r;
    auto cell = [](std::string group, std::string label, double reference, std::vector<double> rmse) {
        AblationCell c{std::move(group), std::move(label), model::FusionVariant::ecfm, true, true, reference, rmse, rmse};
        for (double& v : c.mae) v *= 0.8;
        return c;
    };
    r.cells = {cell("fusion", "ecfm", 0.0801, {0.2, 0.3, 0.25}), cell("fusion", "add", 0.3499, {0.1, 0.1, 0.1}),
               cell("decoder", "none", 0.1016, {0.5, 0.5, 0.5})};
    CHECK(r.cells[0].mean_rmse() == doctest::Approx(0.25));
    CHECK(r.cells[0].mean_mae() == doctest::Approx(0.2));
    const auto dir = testing::scratch_dir("ablation_out");
    write_ablation_csv(dir / "ablation.csv", r);
    const auto rows = lines_of(dir / "ablation.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == "group,variant,integrate,energy_loss,rmse_run0,rmse_run1,rmse_run2,rmse_mean,mae_mean,rank,reference_rmse,reference_rank");
    CHECK(rows[1] == "fusion,ecfm,1,1,0.200000,0.300000,0.250000,0.250000,0.200000,2,0.0801,1");
    CHECK(rows[2].find(",1,0.3499,2") != std::string::npos);
    CHECK(rows[3].find(",1,0.1016,1") != std::string::npos);

    std::vector<Prediction> p;
    for (std::size_t i = 0; i < 20; ++i) p.push_back({i, std::sin(0.3 * i), 0.9 * std::sin(0.3 * i), 0.1});
    write_traces_svg(dir / "traces.svg", {{"ecfm", p}, {"add", p}});
    const std::string svg = slurp(dir / "traces.svg");
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
    std::size_t polylines = 0;
    for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++polylines;
    CHECK(polylines == 3);
    CHECK(svg.find("ecfm") != std::string::npos);
    CHECK_THROWS(write_traces_svg(dir / "empty.svg", {}));
}
