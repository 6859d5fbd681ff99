#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pfmda/errors.hpp"

namespace pfmda {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// Global toggles. Both are thread-local so that independent graphs on
// different threads do not interfere.
namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& finite_check_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Enables or disables the NaN/Inf scan that runs after every forward op.
inline void set_finite_checks(bool on) { detail::finite_check_flag() = on; }
inline bool finite_checks_enabled() { return detail::finite_check_flag(); }

/// RAII scope in which no graph is recorded.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// One vertex of the compute graph. `backward` reads this node's grad and
/// accumulates into the grads of those parents that require one.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
};

/// Handle to a dense row-major array of doubles. Copies share storage;
/// use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                                 std::to_string(values.size()) + " values");
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        Tensor t(std::move(node));
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    template <class Rng>
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = dist(rng);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    template <class Rng>
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = dist(rng);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t extent(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<double> data() { return node_->value; }
    std::span<const double> data() const { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    std::span<double> grad() { return node_->grad; }
    std::span<const double> grad() const { return node_->grad; }
    bool has_grad() const { return node_->requires_grad; }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }
    const std::string& op() const { return node_->op; }

    void set_requires_grad(bool on) {
        if (!node_->is_leaf) throw ContractError("requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = on;
        if (on)
            node_->grad.assign(node_->value.size(), 0.0);
        else
            node_->grad.clear();
    }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    double operator[](std::size_t i) const { return node_->value[i]; }

    /// Deep copy of values (and grad flag), detached from any graph.
    Tensor clone() const {
        auto t = from(shape(), node_->value);
        if (node_->requires_grad) t.set_requires_grad(true);
        return t;
    }

    /// Shares no graph history; values are copied.
    Tensor detach() const { return from(shape(), node_->value); }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }
    bool same_storage(const Tensor& o) const { return node_ == o.node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline void check_finite(const std::string& op, const std::vector<double>& v) {
    if (!finite_checks_enabled()) return;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw NumericalError("non-finite value " + std::to_string(v[i]) + " produced by " + op +
                                 " at element " + std::to_string(i));
    }
}

}  // namespace detail

/// Builds the result node of a differentiable operation. The graph edge is
/// recorded only when grad mode is on and some parent requires a gradient.
inline Tensor make_result(std::string op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
    detail::check_finite(op, values);
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->shape = std::move(shape);
    node->value = std::move(values);
    bool needs = false;
    if (grad_enabled())
        for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->grad.assign(node->value.size(), 0.0);
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

namespace detail {

// Iterative post-order DFS; returns nodes with every node after its parents.
inline std::vector<Node*> topo_order(Node* root) {
    enum class Mark { InProgress, Done };
    std::unordered_map<Node*, Mark> marks;
    std::vector<Node*> order;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    marks[root] = Mark::InProgress;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (!parent->requires_grad) continue;
            auto it = marks.find(parent);
            if (it == marks.end()) {
                marks[parent] = Mark::InProgress;
                stack.emplace_back(parent, 0);
            } else if (it->second == Mark::InProgress) {
                throw std::logic_error("cycle detected in compute graph at op " + parent->op);
            }
        } else {
            marks[node] = Mark::Done;
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are reset at the start of every sweep.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) throw ContractError("backward on a tensor that was not recorded in a graph");
    Node* root = &loss.node();
    const auto order = detail::topo_order(root);
    for (Node* n : order)
        if (!n->is_leaf) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->is_leaf && n->backward) n->backward(*n);
    }
}

}  // namespace pfmda
