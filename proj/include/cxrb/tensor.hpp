#pragma once

// Dense row-major tensors and the tape that records operations on them for
// reverse-mode differentiation.
//
// A Tensor is a handle: copies share storage. Use clone() for a deep copy.
// Leaves created with requires_grad(true) own a zero-filled gradient buffer;
// intermediate results get one lazily while the graph runs backward.

#include "cxrb/errors.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cxrb {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

template <class T>
struct Buffer {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    void ensure_grad()
    {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

} // namespace detail

template <class T = float>
class Tensor {
public:
    using value_type = T;

    Tensor() : Tensor(Shape{0}) {}

    explicit Tensor(Shape shape, T fill = T(0)) : buf_(std::make_shared<detail::Buffer<T>>())
    {
        validate(shape);
        buf_->data.assign(numel_of(shape), fill);
        buf_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : buf_(std::make_shared<detail::Buffer<T>>())
    {
        validate(shape);
        if (numel_of(shape) != values.size())
            throw ShapeError("tensor of shape " + to_string(shape) + " cannot hold "
                             + std::to_string(values.size()) + " values");
        buf_->data = std::move(values);
        buf_->shape = std::move(shape);
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    const Shape& shape() const { return buf_->shape; }
    std::size_t rank() const { return buf_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return buf_->shape.at(axis); }
    std::size_t numel() const { return buf_->data.size(); }

    std::span<T> data() { return buf_->data; }
    std::span<const T> data() const { return buf_->data; }
    T& operator[](std::size_t i) { return buf_->data[i]; }
    const T& operator[](std::size_t i) const { return buf_->data[i]; }

    T item() const
    {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
        return buf_->data[0];
    }

    bool requires_grad() const { return buf_->requires_grad; }

    /// Marks this tensor as a differentiable leaf and allocates its gradient.
    Tensor& requires_grad(bool on)
    {
        buf_->requires_grad = on;
        if (on) buf_->ensure_grad();
        return *this;
    }

    bool has_grad() const { return buf_->grad.size() == buf_->data.size() && numel() > 0; }
    std::span<T> grad() { return buf_->grad; }
    std::span<const T> grad() const { return buf_->grad; }

    void zero_grad()
    {
        std::fill(buf_->grad.begin(), buf_->grad.end(), T(0));
    }

    /// Deep copy of shape and values; the copy is a fresh leaf.
    Tensor clone() const { return Tensor(shape(), buf_->data); }

    bool same_storage(const Tensor& other) const { return buf_ == other.buf_; }

    const std::shared_ptr<detail::Buffer<T>>& storage() const { return buf_; }

private:
    static void validate(const Shape& shape)
    {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    }

    std::shared_ptr<detail::Buffer<T>> buf_;
};

/// Ordered record of the operations executed on differentiable tensors.
///
/// Ops append themselves after computing their output, so the tape is always
/// topologically ordered. backward() replays it once in reverse and then
/// clears it.
template <class T = float>
class Graph {
public:
    using BufferPtr = std::shared_ptr<detail::Buffer<T>>;

    struct Op {
        std::string kind;
        std::vector<BufferPtr> inputs;
        BufferPtr output;
        std::function<void()> backward;
    };

    const std::vector<Op>& ops() const { return ops_; }
    bool empty() const { return ops_.empty(); }
    void clear() { ops_.clear(); }

    std::size_t count(std::string_view kind) const
    {
        std::size_t n = 0;
        for (const auto& op : ops_) n += op.kind == kind;
        return n;
    }

    void record(std::string kind, std::vector<BufferPtr> inputs, BufferPtr output,
                std::function<void()> backward)
    {
        output->requires_grad = true;
        ops_.push_back({std::move(kind), std::move(inputs), std::move(output), std::move(backward)});
    }

    /// Propagates d(loss)/d(x) into every differentiable tensor the loss depends on.
    ///
    /// Leaf gradients accumulate across calls; zero them (or let the optimizer
    /// do it) between steps. The tape is consumed.
    void backward(const Tensor<T>& loss)
    {
        if (loss.numel() != 1)
            throw UsageError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
        const auto& target = loss.storage();
        bool produced = false;
        for (const auto& op : ops_) produced = produced || op.output == target;
        if (!produced) {
            ops_.clear();
            return;
        }
        target->ensure_grad();
        target->grad[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            for (const auto& in : it->inputs)
                if (in->requires_grad) in->ensure_grad();
            it->backward();
        }
        ops_.clear();
    }

private:
    std::vector<Op> ops_;
};

namespace detail {

template <class T>
bool records(const Graph<T>* graph, std::initializer_list<const Tensor<T>*> inputs)
{
    if (graph == nullptr) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class T>
void check_finite(const Tensor<T>& t, std::string_view op)
{
    // v - v is NaN exactly when v is NaN or +-Inf; the sum propagates it.
    T acc = T(0);
    for (T v : t.data()) acc += v - v;
    if (acc != T(0)) throw NumericError(std::string(op) + " produced a non-finite value");
}

} // namespace detail

} // namespace cxrb
