#include "ecf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ecf::losses {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct ScoreLayout {
    std::size_t rows;
    std::size_t m;
};

ScoreLayout check_score_inputs(const Tensor& samples, const Tensor& target, const char* op) {
    ScoreLayout l{};
    if (samples.rank() == 1) {
        l = {1, samples.dim(0)};
    } else if (samples.rank() == 2) {
        l = {samples.dim(0), samples.dim(1)};
    } else {
        throw ShapeError(std::string(op) + ": samples must be (M) or (B, M), got " + shape_str(samples.shape()));
    }
    if (l.m < 2) throw std::invalid_argument(std::string(op) + ": needs at least 2 samples");
    if (target.numel() != l.rows) {
        throw ShapeError(std::string(op) + ": target " + shape_str(target.shape()) + " does not match " +
                         std::to_string(l.rows) + " rows");
    }
    return l;
}

}  // namespace

GaussianPrediction GaussianPrediction::from_raw(const Tensor& mu, const Tensor& raw_log_var) {
    if (mu.shape() != raw_log_var.shape()) throw ShapeError("prediction heads differ in shape");
    return {mu, clamp(raw_log_var, kLogVarMin, kLogVarMax)};
}

Tensor GaussianPrediction::sigma() const { return exp(mul_scalar(log_var, 0.5)); }

Estimator parse_estimator(const std::string& name) {
    if (name == "full") return Estimator::full;
    if (name == "fast") return Estimator::fast;
    throw std::invalid_argument("unknown estimator '" + name + "'");
}

const char* to_string(Estimator e) { return e == Estimator::full ? "full" : "fast"; }

void LossConfig::validate() const {
    if (samples < 2) throw std::invalid_argument("loss: sample count M must be at least 2");
    if (!(smooth_l1_beta > 0.0)) throw std::invalid_argument("loss: smooth L1 beta must be positive");
    if (!(energy_weight >= 0.0)) throw std::invalid_argument("loss: energy weight must be non-negative");
}

Tensor sample_gaussian(const GaussianPrediction& pred, std::size_t m, Rng& rng) {
    if (m == 0) throw std::invalid_argument("sample_gaussian: M must be positive");
    const std::size_t b = pred.mu.numel();
    std::vector<double> eps(b * m);
    for (double& e : eps) e = rng.normal();
    const Tensor noise = Tensor::from({b, m}, std::move(eps));
    const Tensor mu = reshape(pred.mu, {b, 1});
    const Tensor sigma = reshape(pred.sigma(), {b, 1});
    return add(mul(noise, sigma), mu);
}

Tensor energy_score_fast(const Tensor& samples, const Tensor& target) {
    const auto [rows, m] = check_score_inputs(samples, target, "energy_score_fast");
    const auto s = samples.data();
    const auto z = target.data();
    const double inv_m = 1.0 / static_cast<double>(m);
    const double inv_pairs = 1.0 / (2.0 * static_cast<double>(m - 1));
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = s.data() + r * m;
        double first = 0.0;
        for (std::size_t i = 0; i < m; ++i) first += std::fabs(row[i] - z[r]);
        double spread = 0.0;
        for (std::size_t i = 0; i + 1 < m; ++i) spread += std::fabs(row[i] - row[i + 1]);
        total += first * inv_m - spread * inv_pairs;
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    return record_op("energy_score_fast", {1}, {total * inv_rows}, {samples, target},
                     [samples, target, rows, m, inv_m, inv_pairs, inv_rows](std::span<const double> g,
                                                                             std::span<std::span<double>> grads) {
                         const auto s = samples.data();
                         const auto z = target.data();
                         const double scale = g[0] * inv_rows;
                         for (std::size_t r = 0; r < rows; ++r) {
                             const double* row = s.data() + r * m;
                             for (std::size_t i = 0; i < m; ++i) {
                                 const double d = sign(row[i] - z[r]) * inv_m * scale;
                                 if (!grads[0].empty()) grads[0][r * m + i] += d;
                                 if (!grads[1].empty()) grads[1][r] -= d;
                             }
                             if (grads[0].empty()) continue;
                             for (std::size_t i = 0; i + 1 < m; ++i) {
                                 const double d = sign(row[i] - row[i + 1]) * inv_pairs * scale;
                                 grads[0][r * m + i] -= d;
                                 grads[0][r * m + i + 1] += d;
                             }
                         }
                     });
}

Tensor energy_score_full(const Tensor& samples, const Tensor& target) {
    const auto [rows, m] = check_score_inputs(samples, target, "energy_score_full");
    const auto s = samples.data();
    const auto z = target.data();
    const double md = static_cast<double>(m);
    // Sorted, sum_{i<j} |s_i - s_j| = sum_k s_(k) (2k - M + 1). The derivative
    // of the double sum w.r.t. s_k is 2 (#{s_j < s_k} - #{s_j > s_k}), which
    // gives tied pairs the zero subgradient.
    std::vector<double> pair_coef(rows * m);
    double total = 0.0;
    std::vector<std::size_t> order(m);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = s.data() + r * m;
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
        double first = 0.0;
        for (std::size_t i = 0; i < m; ++i) first += std::fabs(row[i] - z[r]);
        double half_pairs = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            half_pairs += row[order[k]] * (2.0 * static_cast<double>(k) - md + 1.0);
        }
        for (std::size_t a = 0; a < m;) {
            std::size_t b = a;
            while (b < m && row[order[b]] == row[order[a]]) ++b;
            const double less = static_cast<double>(a);
            const double greater = static_cast<double>(m - b);
            for (std::size_t k = a; k < b; ++k) pair_coef[r * m + order[k]] = 2.0 * (less - greater);
            a = b;
        }
        total += first / md - half_pairs / (md * md);
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    return record_op("energy_score_full", {1}, {total * inv_rows}, {samples, target},
                     [samples, target, rows, m, md, inv_rows, pair_coef = std::move(pair_coef)](
                         std::span<const double> g, std::span<std::span<double>> grads) {
                         const auto s = samples.data();
                         const auto z = target.data();
                         const double scale = g[0] * inv_rows;
                         for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t i = 0; i < m; ++i) {
                                 const double d = sign(s[r * m + i] - z[r]) / md * scale;
                                 if (!grads[0].empty()) {
                                     grads[0][r * m + i] += d - pair_coef[r * m + i] / (2.0 * md * md) * scale;
                                 }
                                 if (!grads[1].empty()) grads[1][r] -= d;
                             }
                         }
                     });
}

Tensor energy_score(Estimator estimator, const Tensor& samples, const Tensor& target) {
    return estimator == Estimator::full ? energy_score_full(samples, target) : energy_score_fast(samples, target);
}

double energy_score_closed_form_1d(double mu, double sigma, double z) {
    if (!(sigma > 0.0)) throw std::invalid_argument("energy_score_closed_form_1d: sigma must be positive");
    const double d = (z - mu) / sigma;
    const double cdf = 0.5 * std::erfc(-d / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * d * d) / std::sqrt(2.0 * std::numbers::pi);
    return sigma * (d * (2.0 * cdf - 1.0) + 2.0 * pdf - std::numbers::inv_sqrtpi);
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
    if (pred.numel() != target.numel()) {
        throw ShapeError("smooth_l1: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    const auto p = pred.data();
    const auto t = target.data();
    const std::size_t n = p.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = p[i] - t[i];
        acc += std::fabs(x) < beta ? 0.5 * x * x / beta : std::fabs(x) - 0.5 * beta;
    }
    return record_op("smooth_l1", {1}, {acc / static_cast<double>(n)}, {pred, target},
                     [pred, target, beta, n](std::span<const double> g, std::span<std::span<double>> grads) {
                         const auto p = pred.data();
                         const auto t = target.data();
                         for (std::size_t i = 0; i < n; ++i) {
                             const double x = p[i] - t[i];
                             const double d = (std::fabs(x) < beta ? x / beta : sign(x)) * g[0] / static_cast<double>(n);
                             if (!grads[0].empty()) grads[0][i] += d;
                             if (!grads[1].empty()) grads[1][i] -= d;
                         }
                     });
}

Tensor total_loss(const GaussianPrediction& pred, const Tensor& target, const LossConfig& cfg, Rng& rng) {
    cfg.validate();
    Tensor loss = smooth_l1(pred.mu, target, cfg.smooth_l1_beta);
    if (cfg.energy_weight == 0.0) return loss;
    const GaussianPrediction sampled{cfg.energy_grad_to_mu ? pred.mu : pred.mu.detach(), pred.log_var};
    const Tensor draws = sample_gaussian(sampled, cfg.samples, rng);
    const Tensor z = reshape(target, {target.numel(), 1});
    return add(loss, mul_scalar(energy_score(cfg.estimator, draws, z), cfg.energy_weight));
}

}  // namespace ecf::losses
