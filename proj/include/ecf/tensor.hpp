#pragma once

// Dense row-major float64 tensors with a reverse-mode differentiation tape.
//
// Every operation that has at least one input with requires_grad (and runs
// while gradient recording is enabled) records a node holding its inputs and
// a backward closure. backward() orders the reachable nodes topologically and
// runs the closures in reverse, accumulating into each input's grad buffer.
//
// Implicit broadcasting is limited to one rule: in a binary op the second
// operand may have extent 1 where the first has extent n, on any axis, as long
// as both have the same rank. Nothing else broadcasts.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecf {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an input lies outside an op's domain; carries the flat index.
class DomainError : public std::domain_error {
  public:
    DomainError(const std::string& what, std::size_t index)
        : std::domain_error(what + " at index " + std::to_string(index)), index_(index) {}
    std::size_t index() const { return index_; }

  private:
    std::size_t index_;
};

enum class Mode { train, eval };

struct TensorImpl;
class Tensor;

/// Backward closure: receives dLoss/dOutput and one span per input. The span
/// is empty when that input does not take a gradient; otherwise the closure
/// must add (never assign) its contribution.
using BackwardFn = std::function<void(std::span<const double> out_grad, std::span<std::span<double>> in_grads)>;

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Writable view of the values. Only meaningful on leaves (parameters,
    // inputs); mutating a recorded intermediate invalidates its backward rule.
    std::span<double> mutable_data();
    std::vector<double> to_vector() const;
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Populates grad on every requires_grad tensor reachable from this
    /// one-element tensor. Leaf gradients accumulate across calls.
    void backward() const;

    /// Same values, cut from the tape.
    Tensor detach() const;
    /// Deep copy of the values as a fresh leaf.
    Tensor clone() const;

    const char* op_name() const;
    bool is_leaf() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    TensorImpl* impl() const { return impl_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend Tensor record_op(const char*, Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
};

/// Creates an op output and, when recording is active and some input needs a
/// gradient, records the node. All differentiable ops are built on this.
Tensor record_op(const char* name, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                 BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

/// Row-major strides for a shape.
std::vector<std::size_t> strides_of(const Shape& shape);

}  // namespace ecf
