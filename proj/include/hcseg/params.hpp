#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcseg/tensor.hpp"

namespace hcseg {

enum class Init { zeros, ones, normal, constant };

struct NamedParameter {
    std::string name;
    Tensor value;
    bool decay = true; // subject to decoupled weight decay
};

// Ordered registry of trainable tensors. Every tensor is initialized from its
// own RNG stream derived from (seed, name), so adding or removing a
// parameter never perturbs the initial values of the others.
class ParameterSet {
public:
    explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

    // normal: N(0, stddev²); constant: every entry equals `stddev`.
    Tensor create(const std::string& name, Shape shape, Init init, double stddev = 0.0, bool decay = true);

    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<NamedParameter>& entries() { return entries_; }
    const std::vector<NamedParameter>& entries() const { return entries_; }

    std::size_t count_scalars() const;
    void zero_grad();
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<NamedParameter> entries_;
};

std::uint64_t fnv1a64(std::string_view bytes);

} // namespace hcseg
