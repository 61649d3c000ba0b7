#pragma once

// Reverse-mode automatic differentiation over dense N-d arrays.
//
// A Tensor<T> is a cheap handle onto a graph node. Operations build new
// nodes; calling backward() on a scalar result walks the graph once in
// reverse topological order and accumulates gradients into every node that
// requires them. Leaves keep accumulating across backward() calls until
// zero_grad(); interior gradients are recomputed from scratch each call.
//
// T is float for training and double for gradient checking.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fundus/error.hpp"

namespace fundus::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Result shape of broadcasting a against b (trailing dims aligned,
/// extent-1 dims stretch). Throws ShapeError when incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    /// Gradient buffer, zero-allocated on first use.
    std::span<T> grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);
    static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1),
                        bool requires_grad = false);
    static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi,
                          bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    /// Writable storage. Only leaves may be mutated; graph values are immutable.
    std::span<T> mutable_data();
    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool is_leaf() const { return node_->is_leaf(); }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad();

    /// A new leaf holding a copy of the value and no history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    void backward() const;

    const char* op() const { return node_->op; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Gradient recording switch, per thread. While a guard is alive, operations
/// produce detached leaves.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

// ---- elementwise -----------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Throws DomainError when any divisor is zero.
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
/// a^b with broadcasting. Requires a > 0 wherever b is not an integer.
template <typename T> Tensor<T> pow(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> pow(const Tensor<T>& a, std::type_identity_t<T> exponent);

template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
/// Throws DomainError on non-positive input.
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, std::type_identity_t<T> slope);
/// Exact (erf-based) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, std::type_identity_t<T> c);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, std::type_identity_t<T> c);

// ---- reductions ------------------------------------------------------------

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false);

// ---- shape -----------------------------------------------------------------

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::size_t a0, std::size_t a1);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// ---- linear algebra / convolution ----------------------------------------

/// [m,k]x[k,n]; [...,m,k]x[k,n] (leading dims flattened); [b,m,k]x[b,k,n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};
/// x[N,C,H,W] * w[O,C,kh,kw] (+ bias[O]) -> [N,O,H',W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt = {});
/// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor);

// ---- normalisation / probabilistic ---------------------------------------

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);
/// Zero-mean / unit-variance over the trailing axes starting at from_axis.
template <typename T>
Tensor<T> standardize(const Tensor<T>& x, std::size_t from_axis,
                      std::type_identity_t<T> eps = T(1e-5));
/// Mean cross-entropy of logits[B,C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);
/// Mean binary cross-entropy on logits against constant targets in [0,1].
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets);

// ---- operators -------------------------------------------------------------

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& x) { return neg(x); }
template <typename T> Tensor<T> operator+(const Tensor<T>& x, std::type_identity_t<T> c) { return add_scalar(x, c); }
template <typename T> Tensor<T> operator-(const Tensor<T>& x, std::type_identity_t<T> c) { return add_scalar(x, -c); }
template <typename T> Tensor<T> operator*(const Tensor<T>& x, std::type_identity_t<T> c) { return mul_scalar(x, c); }
template <typename T> Tensor<T> operator*(std::type_identity_t<T> c, const Tensor<T>& x) { return mul_scalar(x, c); }

}  // namespace fundus::ad
