#include "ecf/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace ecf {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
    for (std::size_t extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    const std::size_t n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    if (numel_of(shape) != values.size()) {
        throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(numel_of(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }
std::vector<double> Tensor::to_vector() const { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() needs a one-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
    const auto strides = strides_of(shape());
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= shape()[axis]) throw ShapeError("index out of range for " + shape_str(shape()));
        flat += i * strides[axis++];
    }
    return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

const char* Tensor::op_name() const { return impl_->op; }
bool Tensor::is_leaf() const { return !impl_->backward; }

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor record_op(const char* name, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                 BackwardFn backward) {
    Tensor out = Tensor::from(std::move(shape), std::move(values));
    out.impl_->op = name;
    const bool track = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                           return t.defined() && t.requires_grad();
                       });
    if (track) {
        out.impl_->requires_grad = true;
        out.impl_->inputs = std::move(inputs);
        out.impl_->backward = std::move(backward);
    }
    return out;
}

void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward() needs a one-element loss, got " + shape_str(shape()));
    if (!requires_grad()) return;

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorImpl* child = node->inputs[next++].impl();
            if (child && child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorImpl* node : order) {
        if (node->backward) node->grad.assign(node->data.size(), 0.0);
    }
    if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;

    std::vector<std::span<double>> in_grads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->backward) continue;
        in_grads.clear();
        for (const Tensor& input : node->inputs) {
            TensorImpl* in = input.impl();
            if (in && in->requires_grad) {
                if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
                in_grads.emplace_back(in->grad);
            } else {
                in_grads.emplace_back();
            }
        }
        node->backward(node->grad, in_grads);
        if (node != impl_.get()) std::vector<double>().swap(node->grad);
    }
}

}  // namespace ecf
