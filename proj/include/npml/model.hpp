#pragma once

#include "npml/error.hpp"

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace npml {

using Point = std::vector<double>;

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    double length() const noexcept { return hi - lo; }
    bool contains(double x) const noexcept { return lo <= x && x <= hi; }
    friend bool operator==(const Interval&, const Interval&) = default;
};

/// A product of closed intervals, one per axis.
using Box = std::vector<Interval>;

// ---------------------------------------------------------------------------
// Model functions

/// q_{(A,alpha)}(t) = A exp(-alpha t); parameter s = (A, alpha).
struct PkExp {
    friend bool operator==(const PkExp&, const PkExp&) = default;
};

/// f(s, t)_j = s for every j; p = 1.
struct IdentityLocation {
    friend bool operator==(const IdentityLocation&, const IdentityLocation&) = default;
};

/// f(s, t)_j = sum_k B_k(t_j) s_k with B_k(t) = sum_d coefficients[k][d] t^d.
struct LinearInS {
    std::size_t degree = 0;
    std::vector<std::vector<double>> coefficients; // p rows, degree + 1 columns

    /// Monomial basis B_k(t) = t^k for k < p.
    static LinearInS monomial(std::size_t p) {
        LinearInS out;
        out.degree = p == 0 ? 0 : p - 1;
        out.coefficients.assign(p, std::vector<double>(out.degree + 1, 0.0));
        for (std::size_t k = 0; k < p; ++k) out.coefficients[k][k] = 1.0;
        return out;
    }

    double basis(std::size_t k, double t) const noexcept {
        // Horner
        const auto& c = coefficients[k];
        double acc = 0.0;
        for (std::size_t d = c.size(); d-- > 0;) acc = acc * t + c[d];
        return acc;
    }

    friend bool operator==(const LinearInS&, const LinearInS&) = default;
};

using ModelFunction = std::variant<PkExp, IdentityLocation, LinearInS>;

/// Heteroscedastic scale g = sigma_prime * f.
struct CoLinearScale {
    double sigma_prime = 0.0;
    friend bool operator==(const CoLinearScale&, const CoLinearScale&) = default;
};

enum class NoiseKind { gaussian, laplace };

// ---------------------------------------------------------------------------

/// Measurement-time design: n consecutive, disjoint intervals; the law of T
/// is the tensor product of uniforms on them.
struct TimeDesign {
    std::vector<Interval> intervals;

    std::size_t size() const noexcept { return intervals.size(); }

    void validate() const {
        require(!intervals.empty(), "time design needs at least one interval");
        for (std::size_t j = 0; j < intervals.size(); ++j) {
            const auto& iv = intervals[j];
            require(std::isfinite(iv.lo) && std::isfinite(iv.hi), "time interval bounds must be finite");
            require(iv.lo >= 0.0, "time intervals must lie in [0, inf)");
            require(iv.lo < iv.hi, "time interval " + std::to_string(j + 1) + " must satisfy a < b");
            if (j + 1 < intervals.size())
                require(iv.hi <= intervals[j + 1].lo, "time intervals must be ordered and disjoint");
        }
    }

    friend bool operator==(const TimeDesign&, const TimeDesign&) = default;
};

/// Sorted subset of the measurement indices {1, ..., n} (1-based).
class CensorMask {
public:
    CensorMask() = default;

    CensorMask(std::vector<std::size_t> indices, std::size_t n) : indices_(std::move(indices)) {
        for (std::size_t k = 0; k < indices_.size(); ++k) {
            require(indices_[k] >= 1 && indices_[k] <= n, "censor mask index out of range [1, n]");
            if (k > 0) require(indices_[k - 1] < indices_[k], "censor mask indices must be strictly increasing");
        }
    }

    static CensorMask full(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t j = 0; j < n; ++j) idx[j] = j + 1;
        return CensorMask(std::move(idx), n);
    }

    static CensorMask empty() { return {}; }

    const std::vector<std::size_t>& indices() const noexcept { return indices_; }
    std::size_t size() const noexcept { return indices_.size(); }
    bool is_full(std::size_t n) const noexcept { return indices_.size() == n; }

    friend bool operator==(const CensorMask&, const CensorMask&) = default;
    friend auto operator<=>(const CensorMask&, const CensorMask&) = default;

private:
    std::vector<std::size_t> indices_;
};

struct ModelSpec {
    std::size_t p = 1;
    std::size_t n = 1;
    double sigma = 1.0;
    ModelFunction function = IdentityLocation{};
    std::optional<CoLinearScale> g;
    NoiseKind noise = NoiseKind::gaussian;
    TimeDesign time_design;

    /// Checks the structural invariants. sigma = 0 is accepted here so that
    /// noiseless data can be simulated; density evaluation requires sigma > 0.
    void validate() const {
        require(p >= 1, "parameter dimension p must be >= 1");
        require(n >= 1, "observations per individual n must be >= 1");
        require(std::isfinite(sigma) && sigma >= 0.0, "sigma must be finite and >= 0");
        require(time_design.size() == n, "time design must have n intervals");
        time_design.validate();
        if (g) require(std::isfinite(g->sigma_prime) && g->sigma_prime >= 0.0, "sigma' must be >= 0");
        std::visit(
            [&](const auto& fn) {
                using F = std::decay_t<decltype(fn)>;
                if constexpr (std::is_same_v<F, PkExp>) {
                    require(p == 2, "PkExp requires p = 2");
                } else if constexpr (std::is_same_v<F, IdentityLocation>) {
                    require(p == 1, "IdentityLocation requires p = 1");
                } else {
                    require(fn.coefficients.size() == p, "LinearInS needs one coefficient row per parameter");
                    for (const auto& row : fn.coefficients)
                        require(row.size() == fn.degree + 1, "LinearInS coefficient rows must have degree + 1 entries");
                }
            },
            function);
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline std::string function_name(const ModelFunction& f) {
    switch (f.index()) {
    case 0: return "pk_exp";
    case 1: return "identity_location";
    default: return "linear_in_s";
    }
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

inline void check_point(const ModelSpec& spec, std::span<const double> s, std::span<const double> t) {
    if (s.size() != spec.p)
        throw InvalidArgument("parameter point has dimension " + std::to_string(s.size()) + ", expected " +
                              std::to_string(spec.p));
    if (t.size() != spec.n)
        throw InvalidArgument("time vector has length " + std::to_string(t.size()) + ", expected " +
                              std::to_string(spec.n));
}

} // namespace detail

/// Writes f(s, t) into out (size n). No allocation; used on hot paths.
inline void eval_f_into(const ModelSpec& spec, std::span<const double> s, std::span<const double> t,
                        std::span<double> out) {
    const std::size_t n = t.size();
    switch (spec.function.index()) {
    case 0: {
        const double amplitude = s[0];
        const double rate = s[1];
        for (std::size_t j = 0; j < n; ++j) out[j] = amplitude * std::exp(-rate * t[j]);
        break;
    }
    case 1:
        for (std::size_t j = 0; j < n; ++j) out[j] = s[0];
        break;
    default: {
        const auto& lin = std::get<LinearInS>(spec.function);
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < s.size(); ++k) acc += lin.basis(k, t[j]) * s[k];
            out[j] = acc;
        }
        break;
    }
    }
}

inline std::vector<double> eval_f(const ModelSpec& spec, std::span<const double> s, std::span<const double> t) {
    detail::check_point(spec, s, t);
    std::vector<double> out(t.size());
    eval_f_into(spec, s, t, out);
    return out;
}

/// g(s, t); the zero vector for a homoscedastic spec.
inline std::vector<double> eval_g(const ModelSpec& spec, std::span<const double> s, std::span<const double> t) {
    detail::check_point(spec, s, t);
    std::vector<double> out(t.size(), 0.0);
    if (!spec.g) return out;
    eval_f_into(spec, s, t, out);
    for (auto& v : out) {
        v *= spec.g->sigma_prime;
        if (v < 0.0) throw ModelViolation("heteroscedastic scale g has a negative component");
        if (v == 0.0) v = 0.0; // normalize -0
    }
    return out;
}

/// Per-component conditional standard deviation sqrt(sigma^2 + g_j^2).
inline std::vector<double> conditional_sd(const ModelSpec& spec, std::span<const double> s,
                                          std::span<const double> t) {
    auto g = eval_g(spec, s, t);
    for (auto& v : g) v = std::sqrt(spec.sigma * spec.sigma + v * v);
    return g;
}

/// log of (2 pi sigma^2)^{-n/2} exp(-|u|^2 / (2 sigma^2)).
inline double gaussian_log_density(std::span<const double> u, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("sigma must be finite and > 0");
    double sq = 0.0;
    for (double v : u) {
        if (!std::isfinite(v)) throw InvalidArgument("non-finite residual");
        sq += v * v;
    }
    const double n = static_cast<double>(u.size());
    return -0.5 * n * std::log(2.0 * std::numbers::pi * sigma * sigma) - sq / (2.0 * sigma * sigma);
}

/// Variance-matched Laplace: scale b = sigma / sqrt(2).
inline double laplace_log_density(std::span<const double> u, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("sigma must be finite and > 0");
    const double b = sigma / std::numbers::sqrt2;
    double abs_sum = 0.0;
    for (double v : u) {
        if (!std::isfinite(v)) throw InvalidArgument("non-finite residual");
        abs_sum += std::abs(v);
    }
    return -static_cast<double>(u.size()) * std::log(2.0 * b) - abs_sum / b;
}

inline double time_density(const TimeDesign& design, std::span<const double> t) {
    if (t.size() != design.size()) return 0.0;
    double density = 1.0;
    for (std::size_t j = 0; j < t.size(); ++j) {
        const auto& iv = design.intervals[j];
        if (!iv.contains(t[j])) return 0.0;
        density /= iv.length();
    }
    return density;
}

template <class T>
std::vector<T> project_mask(std::span<const T> v, const CensorMask& mask) {
    std::vector<T> out;
    out.reserve(mask.size());
    for (std::size_t idx : mask.indices()) out.push_back(v[idx - 1]);
    return out;
}

inline std::vector<double> project_mask(const std::vector<double>& v, const CensorMask& mask) {
    return project_mask(std::span<const double>(v), mask);
}

namespace detail {

/// Log density of residual y_j - fs_j, components selected by `index` (0-based),
/// with the model's noise family and per-component scale. fs holds f(s, t).
template <class IndexFn>
double residual_log_density(const ModelSpec& spec, std::span<const double> y, std::span<const double> fs,
                            std::size_t count, IndexFn index) {
    const double sigma2 = spec.sigma * spec.sigma;
    const double sp = spec.g ? spec.g->sigma_prime : 0.0;
    const bool hetero = spec.g && sp != 0.0;
    const bool laplace = spec.noise == NoiseKind::laplace;
    constexpr double log_2pi = 1.8378770664093454835606594728112;

    if (!hetero) {
        double acc = 0.0;
        for (std::size_t k = 0; k < count; ++k) {
            const double u = y[k] - fs[index(k)];
            acc += laplace ? std::abs(u) : u * u;
        }
        const double c = static_cast<double>(count);
        if (laplace) {
            const double b = spec.sigma / std::numbers::sqrt2;
            return -c * std::log(2.0 * b) - acc / b;
        }
        return -0.5 * c * (log_2pi + std::log(sigma2)) - acc / (2.0 * sigma2);
    }

    double acc = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
        const double f = fs[index(k)];
        const double g = sp * f;
        if (g < 0.0) throw ModelViolation("heteroscedastic scale g has a negative component");
        const double var = sigma2 + g * g;
        const double u = y[k] - f;
        if (laplace) {
            const double b = std::sqrt(var / 2.0);
            acc += -std::log(2.0 * b) - std::abs(u) / b;
        } else {
            acc += -0.5 * (log_2pi + std::log(var)) - u * u / (2.0 * var);
        }
    }
    return acc;
}

inline void check_density_spec(const ModelSpec& spec) {
    if (!(spec.sigma > 0.0)) throw InvalidArgument("density evaluation needs sigma > 0");
}

} // namespace detail

/// Reusable buffer for repeated kernel evaluations on one thread.
struct EvalScratch {
    std::vector<double> fs;
};

/// log k_x(s) for a fully observed x = (y, t), without argument checks.
inline double conditional_log_density_unchecked(const ModelSpec& spec, std::span<const double> s,
                                                std::span<const double> y, std::span<const double> t,
                                                EvalScratch& scratch) {
    scratch.fs.resize(t.size());
    eval_f_into(spec, s, t, scratch.fs);
    return detail::residual_log_density(spec, y, scratch.fs, y.size(), [](std::size_t k) { return k; });
}

/// log k_x(s) for a censored x = (z, t, mask), without argument checks.
inline double censored_log_density_unchecked(const ModelSpec& spec, std::span<const double> s,
                                             std::span<const double> z, std::span<const double> t,
                                             const CensorMask& mask, EvalScratch& scratch) {
    if (mask.size() == 0) return 0.0;
    scratch.fs.resize(t.size());
    eval_f_into(spec, s, t, scratch.fs);
    const auto& idx = mask.indices();
    return detail::residual_log_density(spec, z, scratch.fs, z.size(),
                                        [&](std::size_t k) { return idx[k] - 1; });
}

inline double conditional_log_density(const ModelSpec& spec, std::span<const double> s,
                                      std::span<const double> y, std::span<const double> t) {
    detail::check_density_spec(spec);
    detail::check_point(spec, s, t);
    if (y.size() != spec.n) throw InvalidArgument("observation y must have length n");
    for (double v : s)
        if (!std::isfinite(v)) throw InvalidArgument("parameter point must be finite");
    EvalScratch scratch;
    return conditional_log_density_unchecked(spec, s, y, t, scratch);
}

inline double conditional_log_density(const ModelSpec& spec, std::span<const double> s,
                                      std::span<const double> z, std::span<const double> t,
                                      const CensorMask& mask) {
    detail::check_density_spec(spec);
    detail::check_point(spec, s, t);
    if (z.size() != mask.size()) throw InvalidArgument("censored observation must have |mask| components");
    if (!mask.indices().empty() && mask.indices().back() > spec.n)
        throw InvalidArgument("censor mask index exceeds n");
    for (double v : s)
        if (!std::isfinite(v)) throw InvalidArgument("parameter point must be finite");
    EvalScratch scratch;
    return censored_log_density_unchecked(spec, s, z, t, mask, scratch);
}

} // namespace npml
