#include "ecf/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace ecf::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

}  // namespace

// ---- configuration --------------------------------------------------------

void RunConfig::validate() const {
    scenario.validate();
    model.validate();
    loss.validate();
    if (batch == 0) throw std::invalid_argument("config: batch must be positive");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("config: test_fraction must lie in (0, 1)");
    if (!(optim.lr > 0.0) || optim.weight_decay < 0.0) throw std::invalid_argument("config: bad optimizer settings");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
        throw std::invalid_argument("config: betas must lie in [0, 1)");
    }
    if (scenario.height != model.backbone.height || scenario.width != model.backbone.width) {
        throw std::invalid_argument("config: scenario geometry " + std::to_string(scenario.height) + "x" +
                                    std::to_string(scenario.width) + " differs from model input " +
                                    std::to_string(model.backbone.height) + "x" + std::to_string(model.backbone.width));
    }
    if (ablation_seeds.empty()) throw std::invalid_argument("config: ablation_seeds is empty");
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["data_dir"] = c.data_dir.string();
    j["out_dir"] = c.out_dir.string();
    j["checkpoint"] = c.checkpoint.string();
    j["seed"] = c.seed;
    j["samples"] = c.samples;
    j["test_fraction"] = c.test_fraction;
    j["normalize"] = events::to_string(c.normalize);
    j["batch"] = c.batch;
    j["epochs"] = c.epochs;
    j["write_checkpoints"] = c.write_checkpoints;
    j["ablation_seeds"] = c.ablation_seeds;
    j["scenario"] = data::to_json(c.scenario);
    j["filters"] = {{"speed", c.filters.speed},
                    {"min_speed_kmh", c.filters.min_speed_kmh},
                    {"prune", c.filters.prune},
                    {"band_degrees", c.filters.band_degrees},
                    {"prune_fraction", c.filters.prune_fraction},
                    {"outliers", c.filters.outliers},
                    {"sigma_multiple", c.filters.sigma_multiple},
                    {"seed", c.filters.seed}};
    ordered_json m = model::to_json(c.model);
    m.erase("seed");  // the run seed drives initialization
    j["model"] = m;
    j["loss"] = {{"samples", c.loss.samples},
                 {"smooth_l1_beta", c.loss.smooth_l1_beta},
                 {"energy_weight", c.loss.energy_weight},
                 {"estimator", losses::to_string(c.loss.estimator)},
                 {"energy_grad_to_mu", c.loss.energy_grad_to_mu}};
    j["optim"] = {{"lr", c.optim.lr},
                  {"weight_decay", c.optim.weight_decay},
                  {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2},
                  {"eps", c.optim.eps},
                  {"cosine", c.optim.cosine}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    c.data_dir = j.at("data_dir").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    c.checkpoint = j.at("checkpoint").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.samples = j.at("samples").get<std::size_t>();
    c.test_fraction = j.at("test_fraction").get<double>();
    c.normalize = events::parse_normalize(j.at("normalize").get<std::string>());
    c.batch = j.at("batch").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.write_checkpoints = j.at("write_checkpoints").get<bool>();
    c.ablation_seeds = j.at("ablation_seeds").get<std::vector<std::uint64_t>>();
    c.scenario = data::scenario_from_json(j.at("scenario"));
    const json& f = j.at("filters");
    c.filters.speed = f.at("speed").get<bool>();
    c.filters.min_speed_kmh = f.at("min_speed_kmh").get<double>();
    c.filters.prune = f.at("prune").get<bool>();
    c.filters.band_degrees = f.at("band_degrees").get<double>();
    c.filters.prune_fraction = f.at("prune_fraction").get<double>();
    c.filters.outliers = f.at("outliers").get<bool>();
    c.filters.sigma_multiple = f.at("sigma_multiple").get<double>();
    c.filters.seed = f.at("seed").get<std::uint64_t>();
    json m = j.at("model");
    m["seed"] = c.seed;
    c.model = model::model_config_from_json(m);
    const json& l = j.at("loss");
    c.loss.samples = l.at("samples").get<std::size_t>();
    c.loss.smooth_l1_beta = l.at("smooth_l1_beta").get<double>();
    c.loss.energy_weight = l.at("energy_weight").get<double>();
    c.loss.estimator = losses::parse_estimator(l.at("estimator").get<std::string>());
    c.loss.energy_grad_to_mu = l.at("energy_grad_to_mu").get<bool>();
    const json& o = j.at("optim");
    c.optim.lr = o.at("lr").get<double>();
    c.optim.weight_decay = o.at("weight_decay").get<double>();
    c.optim.beta1 = o.at("beta1").get<double>();
    c.optim.beta2 = o.at("beta2").get<double>();
    c.optim.eps = o.at("eps").get<double>();
    c.optim.cosine = o.at("cosine").get<bool>();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::optional<fs::path>& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides) {
    json j = to_json(RunConfig{});
    if (file) {
        std::ifstream is(*file);
        if (!is) throw std::runtime_error("cannot open config " + file->string());
        json user;
        try {
            user = json::parse(is);
        } catch (const json::exception& e) {
            throw std::runtime_error("config " + file->string() + ": " + e.what());
        }
        j.merge_patch(user);
    }
    for (const auto& [key, text] : overrides) {
        std::string pointer = "/" + key;
        std::replace(pointer.begin(), pointer.end(), '.', '/');
        const json::json_pointer ptr(pointer);
        if (!j.contains(ptr)) throw std::invalid_argument("unknown config key '" + key + "'");
        json value;
        try {
            value = json::parse(text);
        } catch (const json::exception&) {
            value = text;
        }
        j[ptr] = value;
    }
    try {
        return run_config_from_json(j);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
}

// ---- metrics --------------------------------------------------------------

Metrics regression_metrics(const std::vector<double>& y, const std::vector<double>& y_hat) {
    if (y.size() != y_hat.size()) throw std::invalid_argument("metrics: length mismatch");
    if (y.empty()) throw std::invalid_argument("metrics: no predictions");
    double sq = 0.0;
    double ab = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - y_hat[i];
        sq += d * d;
        ab += std::fabs(d);
    }
    const auto n = static_cast<double>(y.size());
    return {std::sqrt(sq / n), ab / n};
}

void write_predictions_csv(const fs::path& path, const std::vector<Prediction>& predictions) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "id,y,y_hat,sigma\n";
    for (const Prediction& p : predictions) {
        os << p.id << ',' << fmt(p.y) << ',' << fmt(p.y_hat) << ',' << fmt(p.sigma) << '\n';
    }
}

// ---- in-memory data -------------------------------------------------------

Tensors load_split(const data::DatasetManifest& manifest, data::Split split, events::Normalize normalize) {
    const auto idx = manifest.indices_of(split);
    if (idx.empty()) throw std::runtime_error(std::string("dataset has no ") + data::to_string(split) + " samples");
    const data::Batch b = data::load_batch(manifest, idx, normalize);
    Tensors t;
    t.frames = b.frames;
    t.events = b.events;
    t.steering = b.steering.to_vector();
    t.ids = b.ids;
    for (std::size_t i : idx) t.t_us.push_back(manifest.samples[i].t_us);
    return t;
}

namespace {

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    Shape shape = x.shape();
    const std::size_t stride = x.numel() / shape[0];
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * stride);
    const auto src = x.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * stride), stride,
                    out.begin() + static_cast<std::ptrdiff_t>(r * stride));
    }
    return Tensor::from(std::move(shape), std::move(out));
}

}  // namespace

Tensors gather(const Tensors& all, const std::vector<std::size_t>& rows) {
    Tensors t;
    t.frames = gather_rows(all.frames, rows);
    t.events = gather_rows(all.events, rows);
    for (std::size_t r : rows) {
        t.steering.push_back(all.steering[r]);
        t.ids.push_back(all.ids[r]);
        t.t_us.push_back(all.t_us[r]);
    }
    return t;
}

EvalResult evaluate(model::Model& model, const Tensors& data, std::size_t chunk) {
    NoGradGuard guard;
    Rng unused(0);
    EvalResult r;
    std::vector<double> y_hat;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(start + chunk, data.size());
        std::vector<std::size_t> rows(end - start);
        std::iota(rows.begin(), rows.end(), start);
        const Tensors part = gather(data, rows);
        const auto out = model.forward(part.frames, part.events, Mode::eval, unused);
        const auto mu = out.prediction.mu.data();
        const auto sigma = out.prediction.sigma();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            r.predictions.push_back({part.ids[i], part.steering[i], mu[i], sigma.data()[i]});
            y_hat.push_back(mu[i]);
        }
    }
    r.metrics = regression_metrics(data.steering, y_hat);
    return r;
}

// ---- optimizer ------------------------------------------------------------

AdamW::AdamW(const ParameterSet& params, OptimConfig cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params.params) {
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
    }
}

void AdamW::step(ParameterSet& params) {
    if (params.params.size() != m_.size()) throw std::logic_error("AdamW: parameter set changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.params.size(); ++k) {
        Tensor& p = params.params[k].second;
        if (!p.has_grad()) continue;
        auto w = p.mutable_data();
        const auto g = p.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            w[i] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
        p.zero_grad();
    }
}

// ---- training -------------------------------------------------------------

namespace {

model::Model copy_model(const model::Model& src) {
    model::Model dst(src.config());
    auto copy_group = [](const auto& from, auto& to) {
        for (std::size_t k = 0; k < from.size(); ++k) {
            const auto s = from[k].second.data();
            auto d = to[k].second.mutable_data();
            std::copy(s.begin(), s.end(), d.begin());
        }
    };
    copy_group(src.parameters().params, dst.parameters().params);
    copy_group(src.parameters().buffers, dst.parameters().buffers);
    return dst;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Tensors& train_set, const Tensors& val, std::ostream* log) {
    cfg.validate();
    model::ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    model::Model model(mc);
    AdamW opt(model.parameters(), cfg.optim);

    const Rng root(cfg.seed);
    Rng dropout_rng = root.fork(hash_name("dropout"));
    Rng loss_rng = root.fork(hash_name("loss"));

    std::ofstream metrics;
    std::ofstream timing;
    const fs::path ckpt = cfg.out_dir / "checkpoint";
    if (cfg.write_checkpoints) {
        fs::create_directories(cfg.out_dir);
        metrics.open(cfg.out_dir / "metrics.csv");
        timing.open(cfg.out_dir / "timing.csv");
        if (!metrics || !timing) throw std::runtime_error("cannot write metrics under " + cfg.out_dir.string());
        metrics << "epoch,train_loss,val_rmse,val_mae\n";
        timing << "epoch,wall_seconds\n";
        model::save_checkpoint(model, ckpt, 0);
    }

    TrainResult result;
    result.best = evaluate(model, val).metrics;
    result.best_model = copy_model(model);

    const std::size_t n = train_set.size();
    std::vector<std::size_t> order(n);
    const std::size_t steps_per_epoch = n % cfg.batch == 1 ? n / cfg.batch : (n + cfg.batch - 1) / cfg.batch;
    const double total_steps = static_cast<double>(steps_per_epoch * cfg.epochs);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = root.fork(hash_name("shuffle") ^ mix64(epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        double loss_sum = 0.0;
        std::size_t step = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const std::size_t end = std::min(start + cfg.batch, n);
            // a 1-sample tail would make batchnorm degenerate
            if (end - start < 2) break;
            ++step;
            const Tensors b = gather(train_set, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(end)});
            const auto out = model.forward(b.frames, b.events, Mode::train, dropout_rng);
            const Tensor target = Tensor::from({b.size(), 1}, b.steering);
            const Tensor loss = losses::total_loss(out.prediction, target, cfg.loss, loss_rng);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step));
            }
            loss.backward();
            if (cfg.optim.cosine) {
                const double frac = static_cast<double>(opt.steps()) / total_steps;
                opt.set_lr(cfg.optim.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
            }
            opt.step(model.parameters());
            loss_sum += value;
        }
        const Metrics m = evaluate(model, val).metrics;
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const EpochRecord rec{epoch, step ? loss_sum / static_cast<double>(step) : 0.0, m.rmse, m.mae, seconds};
        result.epochs.push_back(rec);
        if (m.rmse < result.best.rmse) {
            result.best = m;
            result.best_epoch = epoch;
            result.best_model = copy_model(model);
            if (cfg.write_checkpoints) model::save_checkpoint(model, ckpt, epoch);
        }
        if (cfg.write_checkpoints) {
            metrics << epoch << ',' << fmt(rec.train_loss) << ',' << fmt(m.rmse) << ',' << fmt(m.mae) << '\n';
            timing << epoch << ',' << fixed(seconds, 3) << '\n';
        }
        if (log) {
            *log << "epoch " << epoch << "  loss " << fixed(rec.train_loss, 5) << "  val rmse " << fixed(m.rmse, 5)
                 << "  mae " << fixed(m.mae, 5) << "  (" << fixed(seconds, 1) << " s)\n";
        }
    }
    return result;
}

// ---- commands -------------------------------------------------------------

data::DatasetManifest cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
    cfg.validate();
    const data::DatasetManifest raw = data::gen_dataset(cfg.samples, cfg.seed, cfg.scenario, cfg.data_dir);
    data::FilterRules first = cfg.filters;
    first.outliers = false;
    data::DatasetManifest m = data::filter_dataset(raw, first);
    m = data::split_dataset(m, cfg.test_fraction, cfg.seed);
    if (cfg.filters.outliers) {
        data::FilterRules second = cfg.filters;
        second.speed = false;
        second.prune = false;
        m = data::filter_dataset(m, second);
    }
    data::write_manifest(m);
    log << "generated " << raw.samples.size() << " samples into " << cfg.data_dir.string() << "\n"
        << "dropped: speed " << m.filters.dropped_speed << ", pruned " << m.filters.dropped_pruned << ", outliers "
        << m.filters.dropped_outlier << "\n"
        << "kept " << m.samples.size() << " (train " << m.count(data::Split::train) << ", test "
        << m.count(data::Split::test) << ")\n";
    return m;
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
    const data::DatasetManifest m = data::read_manifest(cfg.data_dir);
    const Tensors tr = load_split(m, data::Split::train, cfg.normalize);
    const Tensors te = load_split(m, data::Split::test, cfg.normalize);
    log << "train " << tr.size() << ", validation " << te.size() << ", fusion " << model::to_string(cfg.model.fusion)
        << "\n";
    const TrainResult r = train(cfg, tr, te, &log);
    log << "best epoch " << r.best_epoch << ": rmse " << fixed(r.best.rmse, 5) << ", mae " << fixed(r.best.mae, 5)
        << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& log) {
    const fs::path ckpt = cfg.checkpoint.empty() ? cfg.out_dir / "checkpoint" : cfg.checkpoint;
    auto loaded = model::load_checkpoint(ckpt);
    const data::DatasetManifest m = data::read_manifest(cfg.data_dir);
    const auto& bb = loaded.model.config().backbone;
    if (bb.height != m.scenario.height || bb.width != m.scenario.width) {
        throw std::runtime_error("eval: checkpoint expects " + std::to_string(bb.height) + "x" +
                                 std::to_string(bb.width) + " inputs, dataset is " + std::to_string(m.scenario.height) +
                                 "x" + std::to_string(m.scenario.width));
    }
    const Tensors te = load_split(m, data::Split::test, cfg.normalize);
    const EvalResult r = evaluate(loaded.model, te);
    fs::create_directories(cfg.out_dir);
    write_predictions_csv(cfg.out_dir / "predictions.csv", r.predictions);
    log << "samples " << te.size() << "\nrmse " << fmt(r.metrics.rmse) << "\nmae " << fmt(r.metrics.mae) << "\n";
    return r.metrics.rmse >= r.metrics.mae ? 0 : 1;
}

ScoreReport score_estimators(double mu, double sigma, double z, std::size_t m, std::size_t trials,
                             std::uint64_t seed) {
    if (!(sigma > 0.0)) throw std::invalid_argument("score: sigma must be positive");
    if (trials == 0 || m < 2) throw std::invalid_argument("score: need trials >= 1 and M >= 2");
    NoGradGuard guard;
    const losses::GaussianPrediction pred{Tensor::from({1, 1}, {mu}),
                                          Tensor::from({1, 1}, {2.0 * std::log(sigma)})};
    const Tensor target = Tensor::from({1, 1}, {z});
    const Rng root(seed);
    Rng full_rng = root.fork(hash_name("full"));
    Rng fast_rng = root.fork(hash_name("fast"));
    auto stats = [&](losses::Estimator est, Rng& rng) {
        double sum = 0.0;
        double sq = 0.0;
        for (std::size_t t = 0; t < trials; ++t) {
            const double v = losses::energy_score(est, losses::sample_gaussian(pred, m, rng), target).item();
            sum += v;
            sq += v * v;
        }
        const auto n = static_cast<double>(trials);
        const double mean = sum / n;
        const double var = trials > 1 ? std::max(sq - n * mean * mean, 0.0) / (n - 1.0) : 0.0;
        return std::pair{mean, trials > 1 ? std::sqrt(var / n) : std::numeric_limits<double>::infinity()};
    };
    ScoreReport r{};
    r.closed_form = losses::energy_score_closed_form_1d(mu, sigma, z);
    std::tie(r.full_mean, r.full_stderr) = stats(losses::Estimator::full, full_rng);
    std::tie(r.fast_mean, r.fast_stderr) = stats(losses::Estimator::fast, fast_rng);
    return r;
}

int cmd_score(double mu, double sigma, double z, std::size_t m, std::size_t trials, std::uint64_t seed,
              std::ostream& log) {
    const ScoreReport r = score_estimators(mu, sigma, z, m, trials, seed);
    log << "mu " << mu << "  sigma " << sigma << "  z " << z << "  M " << m << "  trials " << trials << "\n"
        << "closed form      " << fixed(r.closed_form, 6) << "\n"
        << "full estimator   " << fixed(r.full_mean, 6) << " +- " << fixed(r.full_stderr, 6) << "\n"
        << "fast estimator   " << fixed(r.fast_mean, 6) << " +- " << fixed(r.fast_stderr, 6) << "\n";
    return 0;
}

int cmd_dump_activations(const RunConfig& cfg, std::size_t sample, std::ostream& log) {
    const fs::path ckpt = cfg.checkpoint.empty() ? cfg.out_dir / "checkpoint" : cfg.checkpoint;
    auto loaded = model::load_checkpoint(ckpt);
    if (loaded.model.config().fusion != model::FusionVariant::ecfm) {
        throw std::runtime_error("dump-activations needs an ECFM checkpoint, got " +
                                 std::string(model::to_string(loaded.model.config().fusion)));
    }
    const data::DatasetManifest m = data::read_manifest(cfg.data_dir);
    if (sample >= m.samples.size()) throw std::out_of_range("dump-activations: sample index out of range");
    const data::Batch b = data::load_batch(m, {sample}, cfg.normalize);
    NoGradGuard guard;
    Rng unused(0);
    const auto out = loaded.model.forward(b.frames, b.events, Mode::eval, unused);
    const fs::path dir = cfg.out_dir / "activations";
    std::vector<fusion::DumpedMap> all;
    for (std::size_t s = 0; s < out.bundles.size(); ++s) {
        auto maps = fusion::dump_activations(out.bundles[s], 0, s + 1, dir);
        all.insert(all.end(), maps.begin(), maps.end());
    }
    fusion::write_activation_index(dir, all);
    log << "wrote " << all.size() << " maps for sample id " << m.samples[sample].id << " to " << dir.string() << "\n";
    return 0;
}

}  // namespace ecf::harness
