#pragma once

// Training, evaluation, estimator checks, the gradient-check suite and the
// ablation sweep behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecf/data.hpp"
#include "ecf/model.hpp"

namespace ecf::harness {

struct OptimConfig {
    double lr = 1e-3;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool cosine = true;  // decay lr to 0 over the run
};

struct RunConfig {
    std::filesystem::path data_dir = "data";
    std::filesystem::path out_dir = "run";
    std::filesystem::path checkpoint;  // eval / dump-activations input; defaults to out_dir/checkpoint
    std::uint64_t seed = 0;

    // dataset generation and preparation
    std::size_t samples = 2000;
    data::ScenarioParams scenario;
    data::FilterRules filters;
    double test_fraction = 0.3;
    events::Normalize normalize = events::Normalize::log1p;

    model::ModelConfig model;
    losses::LossConfig loss;
    OptimConfig optim;
    std::size_t batch = 32;
    std::size_t epochs = 20;
    bool write_checkpoints = true;

    std::vector<std::uint64_t> ablation_seeds{0, 1, 2};

    void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Defaults, then the optional JSON file, then `key=value` overrides where
/// key is a dotted path into the config object (e.g. model.fusion=add).
/// Values parse as JSON when they can and as strings otherwise.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides);

// ---- metrics --------------------------------------------------------------

struct Metrics {
    double rmse = 0.0;
    double mae = 0.0;
};

/// sqrt(mean((y - y_hat)^2)) and mean(|y - y_hat|).
Metrics regression_metrics(const std::vector<double>& y, const std::vector<double>& y_hat);

struct Prediction {
    std::size_t id;
    double y;
    double y_hat;
    double sigma;
};

struct EvalResult {
    Metrics metrics;
    std::vector<Prediction> predictions;
};

void write_predictions_csv(const std::filesystem::path& path, const std::vector<Prediction>& predictions);

// ---- in-memory dataset ----------------------------------------------------

struct Tensors {
    Tensor frames;
    Tensor events;
    std::vector<double> steering;
    std::vector<std::size_t> ids;
    std::vector<std::int64_t> t_us;

    std::size_t size() const { return steering.size(); }
};

Tensors load_split(const data::DatasetManifest& manifest, data::Split split, events::Normalize normalize);
/// Rows of a loaded split, in the given order.
Tensors gather(const Tensors& all, const std::vector<std::size_t>& rows);

/// Eval-mode forward in chunks, no tape.
EvalResult evaluate(model::Model& model, const Tensors& data, std::size_t chunk = 64);

// ---- training -------------------------------------------------------------

/// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
  public:
    AdamW(const ParameterSet& params, OptimConfig cfg);
    void step(ParameterSet& params);
    std::size_t steps() const { return t_; }
    void set_lr(double lr) { cfg_.lr = lr; }

  private:
    OptimConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

struct EpochRecord {
    std::size_t epoch;
    double train_loss;
    double val_rmse;
    double val_mae;
    double wall_seconds;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0: the initial parameters
    Metrics best;
    std::optional<model::Model> best_model;
};

class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Trains on `train`, validates on `val` after every epoch and keeps the
/// parameters with the lowest validation RMSE. Writes metrics.csv,
/// timing.csv and checkpoint/ under cfg.out_dir when write_checkpoints is
/// set. Throws DivergenceError on a non-finite loss.
TrainResult train(const RunConfig& cfg, const Tensors& train, const Tensors& val, std::ostream* log = nullptr);

// ---- commands -------------------------------------------------------------

/// gen-data: render, filter, split, filter outliers per split.
data::DatasetManifest cmd_gen_data(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_eval(const RunConfig& cfg, std::ostream& log);

struct ScoreReport {
    double closed_form;
    double full_mean, full_stderr;
    double fast_mean, fast_stderr;
};

ScoreReport score_estimators(double mu, double sigma, double z, std::size_t m, std::size_t trials,
                             std::uint64_t seed);
int cmd_score(double mu, double sigma, double z, std::size_t m, std::size_t trials, std::uint64_t seed,
              std::ostream& log);

struct GradCheckItem {
    std::string name;
    std::string kind;  // "op" or "composite"
    double max_rel_error;
    double threshold;
    std::size_t coords;
    bool passed() const { return max_rel_error < threshold; }
};

/// Every registered differentiable op plus composite graphs, each checked by
/// central differences. `corrupt` injects a wrong backward rule into one item
/// (negative control).
std::vector<GradCheckItem> run_gradcheck_suite(bool corrupt = false);
/// Names of the differentiable ops the suite must cover.
const std::vector<std::string>& registered_ops();
int cmd_gradcheck(bool corrupt, std::ostream& log);

struct AblationCell {
    std::string group;  // "fusion" or "decoder"
    std::string label;
    model::FusionVariant fusion;
    bool integrate;
    bool energy_loss;
    double reference_rmse;
    std::vector<double> rmse;  // per seed
    std::vector<double> mae;
    double mean_rmse() const;
    double mean_mae() const;
};

struct Trace {
    std::string label;
    std::vector<Prediction> predictions;  // validation set, time order
};

struct AblationResult {
    std::vector<AblationCell> cells;
    std::vector<Trace> traces;  // fusion variants, first seed
    bool fusion_order_ok = false;
    bool decoder_order_ok = false;
};

AblationResult run_ablation(const RunConfig& cfg, std::ostream& log);
void write_ablation_csv(const std::filesystem::path& path, const AblationResult& r);
/// Predicted vs ground-truth steering over the validation samples.
void write_traces_svg(const std::filesystem::path& path, const std::vector<Trace>& traces);
int cmd_ablation(const RunConfig& cfg, std::ostream& log);

int cmd_dump_activations(const RunConfig& cfg, std::size_t sample, std::ostream& log);

}  // namespace ecf::harness
