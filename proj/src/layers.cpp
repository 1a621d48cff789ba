#include "ecf/layers.hpp"

#include <cmath>

namespace ecf {

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

Tensor init_uniform(const Rng& root, const std::string& name, Shape shape, std::size_t fan_in) {
    Rng rng = root.fork(hash_name(name.c_str()));
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
    return t;
}

Conv Conv::make(ParameterSet& ps, const Rng& root, const std::string& name, std::size_t c_in, std::size_t c_out,
                std::size_t kernel, Conv2dOptions opts, bool bias) {
    const std::size_t fan_in = c_in * kernel * kernel;
    Conv c{init_uniform(root, name + ".weight", {c_out, c_in, kernel, kernel}, fan_in), Tensor{}, opts};
    ps.params.emplace_back(name + ".weight", c.weight);
    if (bias) {
        c.bias = init_uniform(root, name + ".bias", {c_out}, fan_in);
        ps.params.emplace_back(name + ".bias", c.bias);
    }
    return c;
}

BatchNorm BatchNorm::make(ParameterSet& ps, const std::string& name, std::size_t channels) {
    BatchNorm bn{Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true),
                 BatchNormState::fresh(channels)};
    ps.params.emplace_back(name + ".gamma", bn.gamma);
    ps.params.emplace_back(name + ".beta", bn.beta);
    ps.buffers.emplace_back(name + ".running_mean", bn.state.running_mean);
    ps.buffers.emplace_back(name + ".running_var", bn.state.running_var);
    return bn;
}

Linear Linear::make(ParameterSet& ps, const Rng& root, const std::string& name, std::size_t in, std::size_t out) {
    Linear l{init_uniform(root, name + ".weight", {out, in}, in), init_uniform(root, name + ".bias", {out}, in)};
    ps.params.emplace_back(name + ".weight", l.weight);
    ps.params.emplace_back(name + ".bias", l.bias);
    return l;
}

}  // namespace ecf
