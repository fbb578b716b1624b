#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace irst {

#ifdef IRST_REAL_DOUBLE
using real_t = double;
#else
using real_t = float;
#endif

/// Shape of a rank-4 tensor in (batch, channels, height, width) order.
struct Shape4 {
    std::int64_t n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const { return n * c * h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorNode {
    Shape4 shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until requested
    bool requires_grad = false;
};

/// Dense rank-4 tensor, row-major (n,c,h,w). Copying a TensorT copies the
/// handle, not the storage; ops always allocate fresh outputs.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape4 s, bool requires_grad = false) {
        return filled(s, T(0), requires_grad);
    }
    static TensorT filled(Shape4 s, T v, bool requires_grad = false) {
        check_shape(s);
        TensorT t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = s;
        t.node_->value.assign(static_cast<std::size_t>(s.numel()), v);
        t.node_->requires_grad = requires_grad;
        return t;
    }
    static TensorT from(Shape4 s, std::vector<T> data, bool requires_grad = false) {
        check_shape(s);
        if (static_cast<std::int64_t>(data.size()) != s.numel())
            throw TensorError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + s.str());
        TensorT t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = s;
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }
    static TensorT scalar(T v, bool requires_grad = false) {
        return filled({1, 1, 1, 1}, v, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape4& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->shape.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::span<T> values() { return node_->value; }
    std::span<const T> values() const { return node_->value; }

    /// Gradient buffer, allocated to zeros on first access.
    std::span<T> grad() {
        ensure_grad();
        return node_->grad;
    }
    std::span<const T> grad() const {
        const_cast<TensorT*>(this)->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        const Shape4& s = node_->shape;
        return ((n * s.c + c) * s.h + h) * s.w + w;
    }
    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return node_->value[static_cast<std::size_t>(offset(n, c, h, w))];
    }
    T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return node_->value[static_cast<std::size_t>(offset(n, c, h, w))];
    }

    /// Value of a single-element tensor.
    T item() const {
        if (numel() != 1) throw TensorError("item() on tensor of shape " + shape().str());
        return node_->value[0];
    }

    TensorNode<T>* node() const { return node_.get(); }
    bool same_node(const TensorT& o) const { return node_ == o.node_; }

private:
    static void check_shape(const Shape4& s) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw TensorError("negative dimension in shape " + s.str());
    }
    void ensure_grad() {
        if (node_->grad.size() != node_->value.size())
            node_->grad.assign(node_->value.size(), T(0));
    }

    std::shared_ptr<TensorNode<T>> node_;
};

/// Reverse-mode tape: ops push one backward closure per executed step and
/// backward() replays them in exact reverse order. One tape serves one
/// forward/backward pass; reset() rewinds it for the next step.
template <typename T>
class TapeT {
public:
    void record(std::function<void()> back) { steps_.push_back(std::move(back)); }

    /// Seeds d(loss)/d(loss)=1 and replays the tape backward, accumulating
    /// into the grad buffers of every tensor that took part.
    void backward(TensorT<T>& loss) {
        if (consumed_) throw TensorError("tape already consumed; call reset() first");
        if (loss.numel() != 1)
            throw TensorError("backward() needs a scalar loss, got " + loss.shape().str());
        consumed_ = true;
        loss.grad()[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    void reset() {
        steps_.clear();
        consumed_ = false;
    }

    bool consumed() const { return consumed_; }
    std::size_t size() const { return steps_.size(); }

private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
};

using Tensor = TensorT<real_t>;
using Tape = TapeT<real_t>;

}  // namespace irst
