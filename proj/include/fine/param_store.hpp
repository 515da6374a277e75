#pragma once

#include <string>
#include <vector>

#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine {

enum class Init { zeros, ones, normal_002 };

// Flat registry of learnable tensors plus their momentum buffers. Layers
// hold indices; a Binding re-registers every value on a fresh tape at the
// start of each forward pass.
class ParamStore {
public:
    int add(std::string name, std::vector<int> shape, Init init, Rng& rng);

    int count() const { return static_cast<int>(params_.size()); }
    const std::string& name(int id) const { return params_[static_cast<std::size_t>(id)].name; }
    Tensor& value(int id) { return params_[static_cast<std::size_t>(id)].value; }
    const Tensor& value(int id) const { return params_[static_cast<std::size_t>(id)].value; }
    Tensor& momentum(int id) { return params_[static_cast<std::size_t>(id)].momentum; }

    std::size_t total_scalars() const;

private:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor momentum;
    };
    std::vector<Entry> params_;
};

// Tape-bound views of every store entry for one forward/backward pass.
class Binding {
public:
    Binding(Tape& tape, ParamStore& store);
    const Tensor& operator[](int id) const { return bound_[static_cast<std::size_t>(id)]; }
    Tape& tape() const { return *tape_; }

private:
    Tape* tape_;
    std::vector<Tensor> bound_;
};

Tensor init_tensor(std::vector<int> shape, Init init, Rng& rng);

} // namespace fine
