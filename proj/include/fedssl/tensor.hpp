#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fedssl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the autodiff graph. Leaves have no backward rule; interior
// nodes hold their inputs and a closure that pushes `grad` into them.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty == absent
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    // Adds `g` into this node's grad, allocating it on first use.
    void accumulate(std::span<const double> g);
    void accumulate(std::size_t i, double g);
    double* grad_buffer();
};

}  // namespace detail

// Dense row-major float64 array with shared-handle semantics: copying a
// Tensor aliases the same storage. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double at(std::size_t flat) const { return node_->data.at(flat); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }
    const char* op() const { return node_->op; }

    // Same values, no graph history, requires_grad = false.
    Tensor detach() const;
    // Deep copy of values; keeps requires_grad, drops grad and history.
    Tensor clone() const;

    // Reverse pass from a scalar. Populates grad on every requires_grad leaf
    // reachable from here and releases the recorded graph.
    void backward() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Recorded operations reachable from a root, inputs before outputs.
class Tape {
public:
    static Tape record(const Tensor& root);

    const std::vector<detail::Node*>& nodes() const { return order_; }
    std::size_t size() const { return order_.size(); }
    // Seeds d(root)/d(root) = 1 and runs every backward rule once, in reverse.
    void run_backward(const Tensor& root) const;

private:
    std::vector<detail::Node*> order_;
};

// Graph recording toggle, per thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace testing {
// Negates the incoming gradient of every node whose op name equals `op`
// before its backward rule runs. Used to check that gradcheck catches a
// broken rule.
void inject_backward_fault(const std::string& op);
void clear_backward_fault();
}  // namespace testing

}  // namespace fedssl
