#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "bda/autograd.hpp"
#include "bda/rng.hpp"
#include "bda/tensor.hpp"

namespace bda {

// Named tensors in name order. Iteration order is deterministic, which the
// checkpoint format and every seeded initializer rely on.
class ParameterSet {
public:
    using Map = std::map<std::string, Tensor>;

    void add(const std::string& name, Tensor value);
    void set(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    std::size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }
    std::size_t parameter_count() const;

    Map::iterator begin() { return tensors_.begin(); }
    Map::iterator end() { return tensors_.end(); }
    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }

    // Every entry whose name starts with prefix.
    ParameterSet with_prefix(const std::string& prefix) const;
    // Adds every entry of other; names must not collide.
    void merge(const ParameterSet& other);
    bool same_layout(const ParameterSet& other) const;
    bool all_finite() const;

    ag::VarTable bind(bool requires_grad) const;

    friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.tensors_ == b.tensors_; }

private:
    Map tensors_;
};

// Gradients of every bound leaf that requires one; zero-filled when backward
// never reached the leaf.
ParameterSet collect_gradients(const ag::VarTable& bound);

// Weight initializers.
Tensor truncated_normal(const Shape& shape, double stddev, Rng& rng);
Tensor he_normal(const Shape& shape, std::size_t fan_in, Rng& rng);

// Adaptive moment estimation. Moments are kept per parameter name so the
// state can be checkpointed and resumed exactly.
class Adam {
public:
    struct Options {
        double learning_rate = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam() = default;
    explicit Adam(Options options) : options_(options) {}

    // Updates every parameter named in grads. Returns false and leaves all
    // state untouched if any gradient is non-finite.
    bool step(ParameterSet& params, const ParameterSet& grads);

    const Options& options() const { return options_; }
    void set_learning_rate(double lr) { options_.learning_rate = lr; }
    std::int64_t steps() const { return steps_; }
    void set_steps(std::int64_t s) { steps_ = s; }
    ParameterSet& first_moments() { return m_; }
    ParameterSet& second_moments() { return v_; }
    const ParameterSet& first_moments() const { return m_; }
    const ParameterSet& second_moments() const { return v_; }

private:
    Options options_;
    std::int64_t steps_ = 0;
    ParameterSet m_;
    ParameterSet v_;
};

}  // namespace bda
