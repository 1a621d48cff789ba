#pragma once

// Differentiable tensor operations. Feature maps are laid out (N, C, H, W).

#include <optional>
#include <utility>
#include <vector>

#include "ecf/rng.hpp"
#include "ecf/tensor.hpp"

namespace ecf {

enum class UnaryKind { relu, sigmoid, exp, log, sqrt, abs, neg, reciprocal };
enum class BinaryKind { add, sub, mul, div };

const char* to_string(UnaryKind kind);
const char* to_string(BinaryKind kind);

// log and sqrt require every entry > 0, reciprocal every entry != 0; a
// violation throws DomainError with the first offending flat index.
// abs uses subgradient 0 at 0.
Tensor unary(UnaryKind kind, const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor reciprocal(const Tensor& x);

// b must equal a's shape or be a singleton-expansion of it (same rank, each
// extent either equal or 1). div rejects zero divisors with DomainError.
Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor square(const Tensor& x);
/// Gradient is passed through inside [lo, hi] and zero outside.
Tensor clamp(const Tensor& x, double lo, double hi);

/// Softmax jointly over the listed axes (max-subtracted).
Tensor softmax(const Tensor& x, const std::vector<std::size_t>& axes);

struct Moments {
    Tensor mean;
    Tensor var;
};
/// Per-(sample, channel) mean and biased variance over H*W; each (N, C, 1, 1).
Moments reduce_moments(const Tensor& x);

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};
/// Cross-correlation. x (N, Cin, H, W), weight (Cout, Cin, k, k), bias (Cout).
Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias, Conv2dOptions opts = {});

/// Running statistics are plain tensors updated in place during train mode.
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;

    static BatchNormState fresh(std::size_t channels);
};

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode,
                   double eps = 1e-5);

/// Inverted dropout: survivors scaled by 1/(1-p). Identity in eval mode.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

/// x (N, in), weight (out, in), bias (out).
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
/// (N, ...) -> (N, rest).
Tensor flatten(const Tensor& x);
/// Slice [start, start + length) along one axis.
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Adaptive average pooling of a 4-D map to (out_h, out_w).
Tensor mean_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace ecf
