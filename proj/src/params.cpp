#include "bda/params.hpp"

#include <cmath>

#include "bda/error.hpp"

namespace bda {

void ParameterSet::add(const std::string& name, Tensor value) {
    if (!tensors_.emplace(name, std::move(value)).second) throw Error("duplicate parameter name: " + name);
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing parameter: " + name);
    return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing parameter: " + name);
    return it->second;
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
}

ParameterSet ParameterSet::with_prefix(const std::string& prefix) const {
    ParameterSet out;
    for (auto it = tensors_.lower_bound(prefix); it != tensors_.end() && it->first.starts_with(prefix); ++it) {
        out.add(it->first, it->second);
    }
    return out;
}

void ParameterSet::merge(const ParameterSet& other) {
    for (const auto& [name, t] : other) add(name, t);
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
        if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    }
    return true;
}

bool ParameterSet::all_finite() const {
    for (const auto& [_, t] : tensors_)
        if (!t.all_finite()) return false;
    return true;
}

ag::VarTable ParameterSet::bind(bool requires_grad) const {
    ag::VarTable table;
    for (const auto& [name, t] : tensors_) table.add(name, ag::leaf(t, requires_grad));
    return table;
}

ParameterSet collect_gradients(const ag::VarTable& bound) {
    ParameterSet out;
    for (const auto& [name, v] : bound.items()) {
        if (!v.requires_grad()) continue;
        out.add(name, v.grad().shape() == v.shape() ? v.grad() : Tensor(v.shape(), 0.0));
    }
    return out;
}

Tensor truncated_normal(const Shape& shape, double stddev, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.values()) v = rng.truncated_normal(stddev);
    return t;
}

Tensor he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
    Tensor t(shape);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

bool Adam::step(ParameterSet& params, const ParameterSet& grads) {
    if (!grads.all_finite()) return false;
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(options_.beta1, t);
    const double bc2 = 1.0 - std::pow(options_.beta2, t);
    for (const auto& [name, g] : grads) {
        Tensor& p = params.at(name);
        if (p.shape() != g.shape()) throw ShapeError("gradient shape mismatch for " + name);
        if (!m_.contains(name)) {
            m_.add(name, Tensor(g.shape(), 0.0));
            v_.add(name, Tensor(g.shape(), 0.0));
        }
        Tensor& m = m_.at(name);
        Tensor& v = v_.at(name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
            v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.eps);
        }
    }
    return true;
}

}  // namespace bda
