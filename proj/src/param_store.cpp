#include "fine/param_store.hpp"

namespace fine {

Tensor init_tensor(std::vector<int> shape, Init init, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    switch (init) {
        case Init::zeros:
            break;
        case Init::ones:
            std::fill(t.data(), t.data() + t.size(), 1.0);
            break;
        case Init::normal_002:
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.02 * rng.gaussian();
            break;
    }
    return t;
}

int ParamStore::add(std::string name, std::vector<int> shape, Init init, Rng& rng) {
    Entry e;
    e.name = std::move(name);
    e.value = init_tensor(shape, init, rng);
    e.momentum = Tensor::zeros(shape);
    params_.push_back(std::move(e));
    return static_cast<int>(params_.size()) - 1;
}

std::size_t ParamStore::total_scalars() const {
    std::size_t n = 0;
    for (const Entry& e : params_) n += e.value.size();
    return n;
}

Binding::Binding(Tape& tape, ParamStore& store) : tape_(&tape) {
    bound_.reserve(static_cast<std::size_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) bound_.push_back(tape.leaf(store.value(i)));
}

} // namespace fine
