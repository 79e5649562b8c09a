#pragma once

#include "npml/npml.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace npml::testing {

inline ModelSpec pk_spec(double sigma = 0.2, std::size_t n = 4) {
    ModelSpec spec;
    spec.p = 2;
    spec.n = n;
    spec.sigma = sigma;
    spec.function = PkExp{};
    for (std::size_t j = 0; j < n; ++j)
        spec.time_design.intervals.push_back({static_cast<double>(j), static_cast<double>(j + 1)});
    return spec;
}

inline ModelSpec identity_spec(double sigma = 1.0, std::size_t n = 1) {
    ModelSpec spec;
    spec.p = 1;
    spec.n = n;
    spec.sigma = sigma;
    spec.function = IdentityLocation{};
    for (std::size_t j = 0; j < n; ++j)
        spec.time_design.intervals.push_back({static_cast<double>(j), static_cast<double>(j + 1)});
    return spec;
}

/// Random N x m kernel matrix with log entries in [lo, 0].
inline KernelMatrix random_kernel(Rng& rng, std::size_t N, std::size_t m, double lo = -6.0) {
    std::vector<double> v(N * m);
    for (auto& x : v) x = rng.uniform(lo, 0.0);
    return KernelMatrix(N, m, std::move(v));
}

inline std::vector<double> random_simplex(Rng& rng, std::size_t m) {
    std::vector<double> w(m);
    double total = 0.0;
    for (auto& x : w) {
        x = -std::log(rng.uniform());
        total += x;
    }
    for (auto& x : w) x /= total;
    return w;
}

inline KernelMatrix kernel_from_rows(const std::vector<std::vector<double>>& linear_rows) {
    const std::size_t m = linear_rows.front().size();
    std::vector<double> v;
    for (const auto& r : linear_rows)
        for (double k : r) v.push_back(std::log(k));
    return KernelMatrix(linear_rows.size(), m, std::move(v));
}

} // namespace npml::testing
