#pragma once

#include <functional>

#include "hcseg/tensor.hpp"

namespace hcseg {

// Five-point central differences
// (8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h for every coordinate.
// f receives a perturbed, untracked copy of x.
Tensor finite_difference_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8);

} // namespace hcseg
