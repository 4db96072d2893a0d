#include "simscore/tensor.hpp"

#include <cmath>
#include <sstream>

namespace simscore {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape shape) : impl_(std::make_shared<TensorImpl>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
        throw DimError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, {v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data()) x = v;
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.data()) x = rng.uniform(lo, hi);
    return t;
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value() requires a scalar tensor, got shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw ContractError("tensor has no gradient populated");
    }
    return impl_->grad;
}

bool Tensor::all_finite() const {
    for (double v : impl_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss tensor");
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward called on a tensor disconnected from the tape");
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward();
    }
}

TapeScope::TapeScope() : prev_(g_current_tape) { g_current_tape = &tape_; }

TapeScope::~TapeScope() { g_current_tape = prev_; }

void backward(const Tensor& loss) {
    Tape* t = Tape::current();
    if (t == nullptr) {
        throw ContractError("backward called with no tape recording");
    }
    t->backward(loss);
}

}  // namespace simscore
