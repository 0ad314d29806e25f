// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle: copying it aliases the same storage, like a
// framework tensor. Operations in ops.hpp record themselves on the calling
// thread's Tape whenever an input requires a gradient and grad mode is on.
// backward() replays the tape in exact reverse recording order and then
// frees it.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mote {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until populated by backward()
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    /// Row-major matrix from nested rows; all rows must have equal length.
    static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    /// Row count of a matrix (rank 2).
    std::size_t rows() const;
    /// Column count of a matrix (rank 2).
    std::size_t cols() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t i) const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    bool has_grad() const;
    std::span<const double> grad() const;
    /// Allocates a zero gradient buffer if none exists. Gradients belong to
    /// the shared storage, so this is available through const handles.
    std::span<double> mutable_grad() const;
    void zero_grad();
    void clear_grad();

    /// Copy of the values with no tape participation.
    Tensor detach() const;
    /// Deep copy preserving requires_grad (gradient is not copied).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl);
    TensorImpl& impl() const;

    std::shared_ptr<TensorImpl> impl_;

    friend class Tape;
};

/// Ordered record of differentiable operations on one thread.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };

    /// The tape owned by the calling thread.
    static Tape& current();

    void record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

    /// Seeds d(loss)/d(loss) = 1 and runs every node whose output received a
    /// gradient, newest first. The tape is cleared afterwards.
    void backward(const Tensor& loss);
    void clear();

private:
    std::vector<Node> nodes_;
};

/// Runs backward on the current thread's tape. `loss` must hold one element.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Multiply-accumulate count of matmul-like kernels executed on this thread.
std::uint64_t mac_count();
void add_macs(std::uint64_t n);

/// Measures MACs executed between construction and count().
class MacCounter {
public:
    MacCounter() : start_(mac_count()) {}
    std::uint64_t count() const { return mac_count() - start_; }

private:
    std::uint64_t start_;
};

}  // namespace mote
