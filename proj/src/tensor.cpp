#include "fedssl/tensor.hpp"

#include <atomic>
#include <mutex>
#include <sstream>
#include <unordered_set>

#include "fedssl/errors.hpp"

namespace fedssl {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace detail {

double* Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
}

void Node::accumulate(std::span<const double> g) {
    double* dst = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Node::accumulate(std::size_t i, double g) { grad_buffer()[i] += g; }

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->data, node_->requires_grad); }

namespace {

std::atomic<bool> g_fault_active{false};
std::mutex g_fault_mu;
std::string g_fault_op;

thread_local bool t_grad_enabled = true;

bool fault_matches(const char* op) {
    if (!g_fault_active.load(std::memory_order_relaxed)) return false;
    std::lock_guard lock(g_fault_mu);
    return g_fault_op == op;
}

}  // namespace

Tape Tape::record(const Tensor& root) {
    Tape tape;
    if (!root.defined()) return tape;
    // iterative post-order DFS
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    auto* r = root.node();
    if (!r->backward) return tape;
    stack.emplace_back(r, 0);
    seen.insert(r);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* in = node->inputs[next++].get();
            if (in->backward && seen.insert(in).second) stack.emplace_back(in, 0);
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::run_backward(const Tensor& root) const {
    if (order_.empty()) return;
    auto* r = root.node();
    r->grad.assign(r->data.size(), 1.0);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        detail::Node* node = *it;
        if (node->grad.empty()) continue;  // no path from root
        if (fault_matches(node->op)) {
            for (auto& g : node->grad) g = -g;
        }
        node->backward(*node);
    }
    // release the graph; interior grads are no longer needed
    for (auto* node : order_) {
        node->backward = nullptr;
        node->inputs.clear();
        if (node != r) node->grad.clear();
    }
}

void Tensor::backward() const {
    if (!defined()) throw ContractError("backward() on undefined tensor");
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) return;  // constant: nothing to differentiate
    if (!node_->backward) {
        node_->accumulate(0, 1.0);
        return;
    }
    Tape::record(*this).run_backward(*this);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

namespace testing {

void inject_backward_fault(const std::string& op) {
    std::lock_guard lock(g_fault_mu);
    g_fault_op = op;
    g_fault_active = true;
}

void clear_backward_fault() {
    std::lock_guard lock(g_fault_mu);
    g_fault_op.clear();
    g_fault_active = false;
}

}  // namespace testing

}  // namespace fedssl
