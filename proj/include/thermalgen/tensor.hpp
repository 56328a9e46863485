#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "thermalgen/error.hpp"

namespace thermalgen {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// 64-byte aligned allocation. Vectorized reductions peel leading elements
/// according to the address, so a fixed alignment keeps summation order, and
/// therefore every result, independent of where the heap places a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlignment = 64;

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kAlignment)); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

struct TensorNode {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until backward touches the node
    bool requires_grad = false;
    bool is_leaf = true;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline void check_finite(std::span<const double> values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
    }
}

}  // namespace detail

/// Dense row-major tensor of doubles. Copies of a Tensor share storage, the way
/// autograd handles usually do; use `detach()` for an independent copy.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer(values), requires_grad) {}

    Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

    Tensor(Shape shape, Buffer values, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (thermalgen::numel(shape) != values.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = thermalgen::numel(shape);
        return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = thermalgen::numel(shape);
        return Tensor(std::move(shape), Buffer(n, value), requires_grad);
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
    std::size_t numel() const { return node().value.size(); }

    std::span<const double> values() const { return node().value; }
    /// Direct write access for initializers and optimizers. Not recorded on any tape.
    std::span<double> mutable_values() { return node().value; }
    double operator[](std::size_t i) const { return node().value[i]; }

    double item() const {
        if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
        return node().value[0];
    }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool on) {
        if (!node().is_leaf) throw ContractError("requires_grad can only be changed on leaf tensors");
        node_->requires_grad = on;
    }
    bool is_leaf() const { return node().is_leaf; }

    bool has_grad() const { return node().grad.size() == node().value.size(); }
    std::span<const double> grad() const {
        if (!has_grad()) throw ContractError("tensor has no gradient");
        return node().grad;
    }
    void zero_grad() { node().grad.clear(); }
    /// Allocates a zero gradient if none exists yet.
    void ensure_grad() { node().ensure_grad(); }

    Tensor detach() const { return Tensor(shape(), node().value); }

    bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

private:
    detail::TensorNode& node() const {
        if (!node_) throw ContractError("use of an undefined tensor");
        return *node_;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of differentiable operations. Operations are recorded only
/// while a tape is active on the current thread (see TapeScope) and at least
/// one input requires a gradient.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(std::vector<std::shared_ptr<detail::TensorNode>> inputs,
                std::shared_ptr<detail::TensorNode> output, BackwardFn fn) {
        output->requires_grad = true;
        output->is_leaf = false;
        records_.push_back(Record{std::move(inputs), std::move(output), std::move(fn)});
    }

    std::size_t size() const noexcept { return records_.size(); }
    void clear() noexcept { records_.clear(); }

    /// Populates `grad` on every requires-grad leaf reachable from `loss`.
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch each time.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        }
        auto* target = loss.node_ptr().get();
        if (target->is_leaf) {
            if (!target->requires_grad) throw ContractError("loss does not require grad");
            target->ensure_grad();
            target->grad[0] += 1.0;
            return;
        }
        std::size_t end = records_.size();
        while (end > 0 && records_[end - 1].output.get() != target) --end;
        if (end == 0) throw ContractError("loss was not produced on this tape");

        for (std::size_t i = 0; i < end; ++i) {
            auto& out = *records_[i].output;
            out.grad.assign(out.value.size(), 0.0);
            for (auto& in : records_[i].inputs) {
                if (in->is_leaf && in->requires_grad) in->ensure_grad();
            }
        }
        target->grad[0] = 1.0;
        for (std::size_t i = end; i-- > 0;) records_[i].backward();
    }

private:
    struct Record {
        std::vector<std::shared_ptr<detail::TensorNode>> inputs;
        std::shared_ptr<detail::TensorNode> output;
        BackwardFn backward;
    };
    std::vector<Record> records_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// Activates a tape on the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
    ~TapeScope() { detail::active_tape = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording on the current thread (inference, target computation).
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
    ~NoGradScope() { detail::active_tape = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

inline Tape* active_tape() noexcept { return detail::active_tape; }

inline void backward(const Tensor& loss) {
    if (!detail::active_tape) throw ContractError("backward called without an active tape");
    detail::active_tape->backward(loss);
}

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!active_tape) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline Tensor make_output(Shape shape, Buffer values, const char* op) {
    check_finite(values, op);
    return Tensor(std::move(shape), std::move(values));
}

/// Records `fn` for `out` on the active tape with the given inputs.
inline void record(std::vector<const Tensor*> inputs, const Tensor& out, Tape::BackwardFn fn) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(inputs.size());
    for (const Tensor* t : inputs) nodes.push_back(t->node_ptr());
    active_tape->record(std::move(nodes), out.node_ptr(), std::move(fn));
}

/// Gradient buffer of an input node, or nullptr when the input needs none.
inline double* grad_of(TensorNode* node) {
    if (!node->requires_grad) return nullptr;
    node->ensure_grad();
    return node->grad.data();
}

}  // namespace detail

}  // namespace thermalgen
