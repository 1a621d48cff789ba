#include "ecf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ecf {

GradCheckReport grad_check(const ScalarProgram& f, std::vector<Tensor> inputs, GradCheckOptions opts) {
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = f(inputs);
    if (loss.numel() != 1) throw ShapeError("grad_check: program must return a scalar");
    loss.backward();

    GradCheckReport report;
    NoGradGuard no_grad;
    // a probe that leaves an op's domain counts as non-finite
    auto probe = [&]() {
        try {
            return f(inputs).item();
        } catch (const DomainError&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor& t = inputs[k];
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        const std::size_t n = t.numel();
        const std::size_t step =
            opts.max_coords_per_input == 0 || n <= opts.max_coords_per_input ? 1 : n / opts.max_coords_per_input;
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < n; i += step) {
            const double saved = values[i];
            values[i] = saved + opts.h;
            const double up = probe();
            values[i] = saved - opts.h;
            const double down = probe();
            values[i] = saved;
            ++report.coords_checked;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                report.non_finite.push_back({k, i});
                continue;
            }
            const double numeric = (up - down) / (2.0 * opts.h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel >= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = k;
                report.worst_coord = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace ecf
