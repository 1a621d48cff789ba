#pragma once

// Energy-score loss for a 1-D Gaussian steering prediction, its closed form,
// smooth L1, and the combined training objective.

#include <cstdint>
#include <string>

#include "ecf/ops.hpp"

namespace ecf::losses {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 4.0;

/// Per-sample mean and log-variance, both (B, 1); log_var is clamped to
/// [-10, 4] on construction.
struct GaussianPrediction {
    Tensor mu;
    Tensor log_var;

    static GaussianPrediction from_raw(const Tensor& mu, const Tensor& raw_log_var);
    Tensor sigma() const;  // exp(log_var / 2)
};

enum class Estimator { full, fast };

Estimator parse_estimator(const std::string& name);
const char* to_string(Estimator e);

struct LossConfig {
    std::size_t samples = 1000;  // M
    double smooth_l1_beta = 1.0;
    double energy_weight = 1.0;
    Estimator estimator = Estimator::fast;
    // When false the energy term sees mu detached and only trains the
    // variance head.
    bool energy_grad_to_mu = true;

    void validate() const;
};

/// z_ij = mu_i + sigma_i * eps_ij with eps drawn from rng as constants;
/// returns (B, M).
Tensor sample_gaussian(const GaussianPrediction& pred, std::size_t m, Rng& rng);

/// (1/M) sum_i |s_i - z| - (1/2M^2) sum_i sum_j |s_i - s_j|, averaged over
/// rows. samples (B, M) or (M); target (B, 1) or (1). |.| has subgradient 0
/// at 0. Runs in O(M log M) per row.
Tensor energy_score_full(const Tensor& samples, const Tensor& target);

/// Same first term; spread term (1/2(M-1)) sum_i |s_i - s_{i+1}|.
Tensor energy_score_fast(const Tensor& samples, const Tensor& target);

Tensor energy_score(Estimator estimator, const Tensor& samples, const Tensor& target);

/// Expected energy score of N(mu, sigma^2) at z:
/// sigma [d (2 Phi(d) - 1) + 2 phi(d) - 1/sqrt(pi)], d = (z - mu) / sigma.
double energy_score_closed_form_1d(double mu, double sigma, double z);

/// Mean over elements of 0.5 x^2 / beta (|x| < beta) or |x| - beta / 2.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta);

/// smooth_l1(mu, z) + w * energy_score(sample_gaussian(pred, M), z).
Tensor total_loss(const GaussianPrediction& pred, const Tensor& target, const LossConfig& cfg, Rng& rng);

}  // namespace ecf::losses
