#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ecf/rng.hpp"
#include "ecf/tensor.hpp"

namespace testing {

inline ecf::Tensor random_tensor(ecf::Rng& rng, ecf::Shape shape, double lo = -1.0, double hi = 1.0,
                                 bool requires_grad = false) {
    std::vector<double> v(ecf::numel_of(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return ecf::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline ecf::Tensor normal_tensor(ecf::Rng& rng, ecf::Shape shape, bool requires_grad = false) {
    std::vector<double> v(ecf::numel_of(shape));
    for (double& x : v) x = rng.normal();
    return ecf::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("ecf_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
inline double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace testing
