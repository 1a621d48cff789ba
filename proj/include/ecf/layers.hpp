#pragma once

// Small parameter bundles shared by the fusion blocks and the model.

#include <string>
#include <utility>
#include <vector>

#include "ecf/ops.hpp"

namespace ecf {

/// Named tensors, in registration order. Parameters take gradients; buffers
/// (batchnorm running statistics) do not.
struct ParameterSet {
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;

    std::size_t parameter_count() const;
};

/// Fan-in uniform init in +-sqrt(1 / fan_in). The stream is keyed by the
/// parameter name so a parameter gets the same values whatever else exists.
Tensor init_uniform(const Rng& root, const std::string& name, Shape shape, std::size_t fan_in);

struct Conv {
    Tensor weight;
    Tensor bias;  // undefined when the layer has none
    Conv2dOptions opts;

    static Conv make(ParameterSet& ps, const Rng& root, const std::string& name, std::size_t c_in,
                     std::size_t c_out, std::size_t kernel, Conv2dOptions opts = {}, bool bias = true);
    Tensor operator()(const Tensor& x) const {
        return conv2d(x, weight, bias.defined() ? std::optional<Tensor>(bias) : std::nullopt, opts);
    }
};

struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    BatchNormState state;

    static BatchNorm make(ParameterSet& ps, const std::string& name, std::size_t channels);
    Tensor operator()(const Tensor& x, Mode mode) { return batchnorm2d(x, gamma, beta, state, mode); }
};

struct Linear {
    Tensor weight;
    Tensor bias;

    static Linear make(ParameterSet& ps, const Rng& root, const std::string& name, std::size_t in, std::size_t out);
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

}  // namespace ecf
