#include "hcseg/params.hpp"

#include <random>

namespace hcseg {

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Tensor ParameterSet::create(const std::string& name, Shape shape, Init init, double stddev, bool decay) {
    if (contains(name)) throw ContractError("ParameterSet: duplicate parameter '" + name + "'");
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    switch (init) {
    case Init::zeros:
        break;
    case Init::ones:
        std::fill(values.begin(), values.end(), 1.0);
        break;
    case Init::constant:
        std::fill(values.begin(), values.end(), stddev);
        break;
    case Init::normal: {
        std::mt19937_64 rng(seed_ ^ fnv1a64(name));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : values) v = dist(rng);
        break;
    }
    }
    entries_.push_back({name, Tensor::from(std::move(shape), std::move(values), true), decay});
    return entries_.back().value;
}

Tensor& ParameterSet::get(const std::string& name) {
    for (auto& e : entries_)
        if (e.name == name) return e.value;
    throw ContractError("ParameterSet: no parameter named '" + name + "'");
}

const Tensor& ParameterSet::get(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.value;
    throw ContractError("ParameterSet: no parameter named '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

std::size_t ParameterSet::count_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
}

} // namespace hcseg
