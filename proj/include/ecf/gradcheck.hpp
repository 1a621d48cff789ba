#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ecf/tensor.hpp"

namespace ecf {

struct GradCheckOptions {
    double h = 1e-6;
    // Check at most this many coordinates per input, evenly spaced; 0 = all.
    std::size_t max_coords_per_input = 0;
};

struct NonFiniteProbe {
    std::size_t input;
    std::size_t coord;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::vector<NonFiniteProbe> non_finite;

    bool passed(double tolerance) const { return non_finite.empty() && max_rel_error < tolerance; }
};

using ScalarProgram = std::function<Tensor(const std::vector<Tensor>& inputs)>;

/// Compares tape gradients of a scalar program against central differences
/// (f(x + h e) - f(x - h e)) / 2h, coordinate by coordinate. The relative
/// error of a coordinate is |a - n| / max(|a|, |n|, 1e-8). The program must
/// be deterministic (reseed any Rng inside it). Inputs are perturbed in place
/// and restored.
GradCheckReport grad_check(const ScalarProgram& f, std::vector<Tensor> inputs, GradCheckOptions opts = {});

}  // namespace ecf
