// SPDX-License-Identifier: Apache-2.0

#include "mote/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

namespace mote {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_macs = 0;

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_to_string(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " elements but " +
                             std::to_string(data.size()) + " were given");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged rows in Tensor::matrix");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
}

TensorImpl& Tensor::impl() const {
    if (!impl_) throw std::logic_error("use of an undefined tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_to_string(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows() on non-matrix shape " + shape_to_string(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols() on non-matrix shape " + shape_to_string(shape()));
    return shape()[1];
}

std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
    }
    return impl().data[0];
}

double Tensor::at(std::size_t i) const { return impl().data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const { return impl().data.at(r * cols() + c); }

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl().requires_grad = flag; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return impl().grad;
}

std::span<double> Tensor::mutable_grad() const {
    auto& im = impl();
    if (im.grad.size() != im.data.size()) im.grad.assign(im.data.size(), 0.0);
    return im.grad;
}

void Tensor::zero_grad() {
    auto& g = impl().grad;
    std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::clear_grad() {
    impl().grad.clear();
    impl().grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl().data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), impl().data, requires_grad()); }

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw DimensionError("backward() needs a single-element loss, got shape " +
                             shape_to_string(loss.shape()));
    }
    Tensor seed = loss;
    seed.mutable_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.impl().grad.empty()) continue;  // unreachable from the loss
        for (auto& in : it->inputs) {
            if (in.requires_grad()) in.mutable_grad();
        }
        it->backward();
    }
    clear();
}

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::uint64_t mac_count() { return t_macs; }
void add_macs(std::uint64_t n) { t_macs += n; }

}  // namespace mote
