#include "bda/autograd.hpp"

#include <unordered_set>

#include "bda/error.hpp"

namespace bda::ag {

Tensor& Node::grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

double Var::item() const {
    if (value().size() != 1) throw ShapeError("item() on non-scalar of shape " + shape_str(shape()));
    return value()[0];
}

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.ptr());
        n->backward = std::move(fn);
    }
    return Var(std::move(n));
}

void backward(const Var& root) {
    if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.shape() == n->value.shape()) n->backward(*n);
    }
}

void VarTable::add(const std::string& name, Var v) {
    if (!vars_.emplace(name, std::move(v)).second) throw Error("duplicate parameter name: " + name);
}

const Var& VarTable::at(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ShapeError("missing parameter: " + name);
    return it->second;
}

}  // namespace bda::ag
