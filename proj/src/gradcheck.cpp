#include "hcseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hcseg {

Tensor finite_difference_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw DomainError("finite_difference_oracle: h must be positive");
    Tensor probe = x.detach();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = probe[i];
        const auto at = [&](double offset) {
            probe.mutable_data()[i] = saved + offset;
            return f(probe);
        };
        const double p1 = at(h), m1 = at(-h), p2 = at(2 * h), m2 = at(-2 * h);
        probe.mutable_data()[i] = saved;
        out[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    return Tensor::from(x.shape(), std::move(out));
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
    if (a.size() != b.size()) throw DimensionError("max_relative_error: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

} // namespace hcseg
