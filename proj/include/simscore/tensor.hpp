#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "simscore/errors.hpp"
#include "simscore/rng.hpp"

namespace simscore {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;   // row-major
    std::vector<double> grad;   // empty until a gradient is accumulated
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Dense float64 tensor participating in a reverse-mode gradient tape.
// Value-semantic handle: copies share the underlying buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape[axis]; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    // Scalar value; ContractError unless numel() == 1.
    double value() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const;
    void zero_grad() const { impl_->grad.clear(); }

    bool all_finite() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Wengert list for one forward pass. Ops append backward closures in
// execution order; replaying them in reverse visits each node once.
// Rebuilt per forward pass (define-by-run); a thread-local pointer marks
// the tape currently recording, if any.
class Tape {
public:
    struct Node {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> fn) { nodes_.push_back({op, std::move(fn)}); }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and replays the list backwards. Gradients
    // accumulate additively into every requires_grad tensor reached.
    void backward(const Tensor& loss);

    static Tape* current();
    static bool recording() { return current() != nullptr; }

private:
    friend class TapeScope;
    std::vector<Node> nodes_;
};

// RAII activation of a fresh tape on this thread.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

// backward on the tape currently recording; ContractError if none.
void backward(const Tensor& loss);

}  // namespace simscore
