#include "fundus/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "ops_common.hpp"

namespace fundus::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = da == 1 ? db : da;
    }
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (ad::numel(shape) != values.size())
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    const auto n = ad::numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(1), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = ad::numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, std::mt19937_64& rng, T stddev, bool requires_grad) {
    std::normal_distribution<double> dist{0.0, double(stddev)};
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = T(dist(rng));
    return from(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, std::mt19937_64& rng, T lo, T hi, bool requires_grad) {
    std::uniform_real_distribution<double> dist{double(lo), double(hi)};
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = T(dist(rng));
    return from(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
    if (!node_->is_leaf())
        throw std::logic_error(std::string("in-place write to graph value of op ") + node_->op);
    return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch");
    std::size_t off = 0, i = 0;
    for (auto v : index) {
        if (v >= node_->shape[i]) throw ShapeError("index out of range");
        off = off * node_->shape[i] + v;
        ++i;
    }
    return node_->value[off];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be set on leaves");
    node_->requires_grad = on;
    return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(node_->shape, node_->value, false);
}

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got " + shape_str(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS: `order` ends up parents-before-children.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node<T>* n : order) {
        if (n->is_leaf())
            n->grad_buffer();
        else
            n->grad.assign(n->value.size(), T(0));
    }
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->is_leaf()) n->backward_fn(*n);
    }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace fundus::ad
