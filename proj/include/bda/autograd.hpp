#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bda/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor values. Each operator
// records a node holding its output, its inputs, and a closure that pushes the
// output gradient to the inputs. Nodes whose inputs all lack requires_grad are
// recorded without a closure, so teacher/inference passes build no graph.
namespace bda::ag {

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    // Gradient accumulated by backward(); empty tensor if none reached this node.
    const Tensor& grad() const { return node_->grad; }
    double item() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

Var leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

// Creates an output node for an operator. `fn` runs during backward only when
// at least one input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

// Runs the reverse sweep from a scalar (size-1) root with seed gradient 1.
void backward(const Var& root);

// Named parameter leaves bound for one forward pass.
class VarTable {
public:
    VarTable() = default;

    void add(const std::string& name, Var v);
    const Var& at(const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    const std::map<std::string, Var>& items() const { return vars_; }

private:
    std::map<std::string, Var> vars_;
};

}  // namespace bda::ag
