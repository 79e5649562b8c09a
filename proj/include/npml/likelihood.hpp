#pragma once

#include "npml/data.hpp"
#include "npml/error.hpp"
#include "npml/measures.hpp"
#include "npml/model.hpp"
#include "npml/parallel.hpp"
#include "npml/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace npml {

/// N x m table of log k_{x_i}(s_j) (or log of the basis-averaged kernel for
/// sieves), stored row-major.
class KernelMatrix {
public:
    KernelMatrix() = default;

    KernelMatrix(std::size_t rows, std::size_t cols, std::vector<double> log_k, bool censored = false)
        : rows_(rows), cols_(cols), log_k_(std::move(log_k)), censored_(censored) {
        require(rows_ >= 1 && cols_ >= 1, "kernel matrix needs at least one row and one column");
        require(log_k_.size() == rows_ * cols_, "kernel matrix buffer has the wrong size");
        for (double v : log_k_)
            if (!std::isfinite(v)) throw NumericDomain("kernel matrix entries must be finite");
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool censored() const noexcept { return censored_; }

    double operator()(std::size_t i, std::size_t j) const noexcept { return log_k_[i * cols_ + j]; }
    std::span<const double> row(std::size_t i) const noexcept { return {log_k_.data() + i * cols_, cols_}; }
    const std::vector<double>& values() const noexcept { return log_k_; }

    /// Column locations (atoms or sieve nodes); may be empty for synthetic matrices.
    const std::vector<Point>& atoms() const noexcept { return atoms_; }
    void set_atoms(std::vector<Point> atoms) {
        require(atoms.empty() || atoms.size() == cols_, "one atom per column");
        atoms_ = std::move(atoms);
    }

    KernelMatrix select_columns(const std::vector<std::size_t>& keep) const {
        require(!keep.empty(), "cannot select zero columns");
        std::vector<double> out(rows_ * keep.size());
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t c = 0; c < keep.size(); ++c) out[i * keep.size() + c] = (*this)(i, keep[c]);
        KernelMatrix km(rows_, keep.size(), std::move(out), censored_);
        if (!atoms_.empty()) {
            std::vector<Point> atoms;
            for (std::size_t c : keep) atoms.push_back(atoms_[c]);
            km.atoms_ = std::move(atoms);
        }
        return km;
    }

    KernelMatrix select_rows(const std::vector<std::size_t>& order) const {
        std::vector<double> out;
        out.reserve(order.size() * cols_);
        for (std::size_t i : order) {
            const auto r = row(i);
            out.insert(out.end(), r.begin(), r.end());
        }
        KernelMatrix km(order.size(), cols_, std::move(out), censored_);
        km.atoms_ = atoms_;
        return km;
    }

    /// Appends columns given as a rows x extra block (row-major).
    void append_columns(std::size_t extra, std::span<const double> block, std::vector<Point> atoms = {}) {
        require(block.size() == rows_ * extra, "appended block has the wrong size");
        std::vector<double> out(rows_ * (cols_ + extra));
        for (std::size_t i = 0; i < rows_; ++i) {
            std::copy_n(log_k_.begin() + static_cast<std::ptrdiff_t>(i * cols_), cols_,
                        out.begin() + static_cast<std::ptrdiff_t>(i * (cols_ + extra)));
            std::copy_n(block.begin() + static_cast<std::ptrdiff_t>(i * extra), extra,
                        out.begin() + static_cast<std::ptrdiff_t>(i * (cols_ + extra) + cols_));
        }
        for (double v : block)
            if (!std::isfinite(v)) throw NumericDomain("kernel matrix entries must be finite");
        log_k_ = std::move(out);
        cols_ += extra;
        if (!atoms_.empty() || !atoms.empty()) {
            require(atoms.size() == extra && atoms_.size() + extra == cols_, "one atom per appended column");
            atoms_.insert(atoms_.end(), atoms.begin(), atoms.end());
        }
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> log_k_;
    bool censored_ = false;
    std::vector<Point> atoms_;
};

namespace detail {

/// log k_{x_i}(s) for row i of a dataset of either kind.
inline double observation_log_density(const Dataset& ds, std::size_t i, std::span<const double> s,
                                      EvalScratch& scratch) {
    if (ds.censored()) {
        const auto& o = ds.censored_observations()[i];
        return censored_log_density_unchecked(ds.spec, s, o.z, o.t, o.mask, scratch);
    }
    const auto& o = ds.uncensored()[i];
    return conditional_log_density_unchecked(ds.spec, s, o.y, o.t, scratch);
}

inline void check_atoms(const Dataset& ds, const std::vector<Point>& atoms) {
    require(!atoms.empty(), "need at least one atom");
    for (const auto& a : atoms) {
        require(a.size() == ds.spec.p, "atom dimension must equal p");
        for (double v : a) require(std::isfinite(v), "atom lies outside the model domain (non-finite)");
    }
}

inline void check_weights(std::span<const double> w, std::size_t m) {
    require(w.size() == m, "need one weight per kernel column");
    double total = 0.0;
    for (double v : w) {
        require(std::isfinite(v) && v >= 0.0, "weights must be finite and >= 0");
        total += v;
    }
    require(total > 0.0, "weights must not all be zero");
}

/// log sum_j exp(log w_j + row_j) over the positive weights.
inline double log_mixture(std::span<const double> row, std::span<const double> log_w) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < row.size(); ++j) mx = std::max(mx, log_w[j] + row[j]);
    if (!std::isfinite(mx)) return mx;
    double acc = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (log_w[j] == -std::numeric_limits<double>::infinity()) continue;
        acc += std::exp(log_w[j] + row[j] - mx);
    }
    return mx + std::log(acc);
}

inline std::vector<double> log_weights(std::span<const double> w) {
    std::vector<double> out(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) out[j] = w[j] > 0.0 ? std::log(w[j]) : -std::numeric_limits<double>::infinity();
    return out;
}

} // namespace detail

inline KernelMatrix build_kernel_matrix(const Dataset& ds, const std::vector<Point>& atoms) {
    ds.validate();
    detail::check_density_spec(ds.spec);
    detail::check_atoms(ds, atoms);
    const std::size_t N = ds.size();
    const std::size_t m = atoms.size();
    std::vector<double> values(N * m);
    parallel_for_chunks(N, 16, [&](std::size_t lo, std::size_t hi) {
        EvalScratch scratch;
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < m; ++j) values[i * m + j] = detail::observation_log_density(ds, i, atoms[j], scratch);
    });
    KernelMatrix km(N, m, std::move(values), ds.censored());
    km.set_atoms(atoms);
    return km;
}

inline KernelMatrix build_kernel_matrix(const Dataset& ds, const MixingMeasure& mu) {
    return build_kernel_matrix(ds, mu.atoms());
}

/// Entry (i, j) approximates log of the integral of k_{x_i} against phi_j, by
/// fixed-order tensor Gauss-Legendre quadrature on each support cell.
inline KernelMatrix build_sieve_kernel_matrix(const Dataset& ds, const SieveBasis& basis,
                                              std::size_t quad_points_per_cell) {
    require(quad_points_per_cell >= 1, "quadrature needs at least one point per cell");
    ds.validate();
    detail::check_density_spec(ds.spec);
    require(basis.dim() == ds.spec.p, "sieve basis dimension must equal p");
    const std::size_t p = basis.dim();
    const auto rule = gauss_legendre(quad_points_per_cell);

    // Per axis: the union of quadrature points over all cells, and for each
    // axis factor the (point, log(weight * phi)) pairs on its support.
    struct Term {
        std::size_t point;
        double log_weight;
    };
    std::vector<std::vector<double>> axis_points(p);
    std::vector<std::vector<std::vector<Term>>> axis_terms(p);
    for (std::size_t a = 0; a < p; ++a) {
        const auto& factors = basis.axis(a);
        std::vector<Interval> cells;
        for (const auto& f : factors)
            for (const auto& c : f.cells())
                if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
        std::sort(cells.begin(), cells.end(), [](const Interval& x, const Interval& y) { return x.lo < y.lo; });
        std::vector<double> cell_weights;
        for (const auto& c : cells) {
            const double half = 0.5 * c.length();
            const double mid = 0.5 * (c.lo + c.hi);
            for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
                axis_points[a].push_back(mid + half * rule.nodes[q]);
                cell_weights.push_back(half * rule.weights[q]);
            }
        }
        for (const auto& f : factors) {
            std::vector<Term> terms;
            for (const auto& c : f.cells()) {
                const auto pos = static_cast<std::size_t>(std::find(cells.begin(), cells.end(), c) - cells.begin());
                for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
                    const std::size_t idx = pos * rule.nodes.size() + q;
                    const double value = cell_weights[idx] * f(axis_points[a][idx]);
                    if (value > 0.0) terms.push_back({idx, std::log(value)});
                }
            }
            require(!terms.empty(), "sieve basis function has no quadrature support");
            axis_terms[a].push_back(std::move(terms));
        }
    }

    std::vector<std::size_t> stride(p, 1);
    for (std::size_t a = p - 1; a-- > 0;) stride[a] = stride[a + 1] * axis_points[a + 1].size();
    const std::size_t grid_size = stride[0] * axis_points[0].size();
    const auto grid = detail::tensor_grid(axis_points);

    const std::size_t N = ds.size();
    const std::size_t m = basis.size();
    std::vector<double> values(N * m);
    parallel_for_chunks(N, 4, [&](std::size_t lo, std::size_t hi) {
        EvalScratch scratch;
        std::vector<double> log_k(grid_size);
        std::vector<std::size_t> idx(p);
        std::vector<double> partial(p + 1);
        for (std::size_t i = lo; i < hi; ++i) {
            for (std::size_t g = 0; g < grid_size; ++g) log_k[g] = detail::observation_log_density(ds, i, grid[g], scratch);
            for (std::size_t j = 0; j < m; ++j) {
                const auto factor = basis.multi_index(j);
                // enumerate the tensor product of per-axis supports twice: max, then sum
                auto visit = [&](auto&& fn) {
                    std::fill(idx.begin(), idx.end(), 0);
                    for (;;) {
                        std::size_t g = 0;
                        double lw = 0.0;
                        for (std::size_t a = 0; a < p; ++a) {
                            const auto& t = axis_terms[a][factor[a]][idx[a]];
                            g += t.point * stride[a];
                            lw += t.log_weight;
                        }
                        fn(lw + log_k[g]);
                        std::size_t a = p;
                        while (a-- > 0) {
                            if (++idx[a] < axis_terms[a][factor[a]].size()) break;
                            idx[a] = 0;
                        }
                        if (a == static_cast<std::size_t>(-1)) break;
                    }
                };
                double mx = -std::numeric_limits<double>::infinity();
                visit([&](double v) { mx = std::max(mx, v); });
                double acc = 0.0;
                visit([&](double v) { acc += std::exp(v - mx); });
                values[i * m + j] = mx + std::log(acc);
            }
        }
    });
    KernelMatrix km(N, m, std::move(values), ds.censored());
    km.set_atoms(basis.nodes());
    return km;
}

/// log K^#(mu)(x_i) for every row.
inline std::vector<double> row_log_mixture(const KernelMatrix& km, std::span<const double> w) {
    detail::check_weights(w, km.cols());
    const auto log_w = detail::log_weights(w);
    std::vector<double> out(km.rows());
    for (std::size_t i = 0; i < km.rows(); ++i) out[i] = detail::log_mixture(km.row(i), log_w);
    return out;
}

/// (1/N) sum_i log sum_j w_j k_ij, with a per-row max shift.
inline double log_likelihood(const KernelMatrix& km, std::span<const double> w) {
    const auto rows = row_log_mixture(km, w);
    double acc = 0.0;
    for (double v : rows) acc += v;
    return acc / static_cast<double>(km.rows());
}

/// Adds the mu-independent terms (1/N) sum log psi(T_i) and, for censored
/// data with a known design, (1/N) sum log p_kappa.
inline double log_likelihood_full(const Dataset& ds, const KernelMatrix& km, std::span<const double> w,
                                  const std::optional<CensoringDesign>& design = std::nullopt) {
    require(ds.size() == km.rows(), "dataset and kernel matrix disagree on N");
    double shift = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double psi = time_density(ds.spec.time_design, ds.times(i));
        if (!(psi > 0.0)) throw SupportViolation("observation " + std::to_string(i) + " lies outside the time design");
        shift += std::log(psi);
        if (ds.censored() && design) {
            const double pk = design->probability(ds.censored_observations()[i].mask);
            if (!(pk > 0.0)) throw SupportViolation("observed mask has zero design probability");
            shift += std::log(pk);
        }
    }
    return log_likelihood(km, w) + shift / static_cast<double>(ds.size());
}

enum class Contrast { log, linear, inverse }; // L(t) = log t, t - 1, 1 - 1/t

inline const char* contrast_name(Contrast c) {
    switch (c) {
    case Contrast::log: return "log";
    case Contrast::linear: return "t-1";
    default: return "1-1/t";
    }
}

/// (1/N) sum_i L(K(mu)(x_i) / K(mu_hat)(x_i)).
inline double contrast_value(const KernelMatrix& km, std::span<const double> w_mu, std::span<const double> w_hat,
                             Contrast contrast) {
    const auto num = row_log_mixture(km, w_mu);
    const auto den = row_log_mixture(km, w_hat);
    double acc = 0.0;
    for (std::size_t i = 0; i < km.rows(); ++i) {
        if (!std::isfinite(den[i])) throw NumericDomain("reference mixture density vanishes on a row");
        if (!std::isfinite(num[i])) throw NumericDomain("nonpositive density ratio");
        const double log_ratio = num[i] - den[i];
        switch (contrast) {
        case Contrast::log: acc += log_ratio; break;
        case Contrast::linear: acc += std::expm1(log_ratio); break;
        case Contrast::inverse: acc += -std::expm1(-log_ratio); break;
        }
    }
    return acc / static_cast<double>(km.rows());
}

struct KlEstimate {
    double value = 0.0;     // Monte Carlo mean
    double std_dev = 0.0;   // empirical standard deviation of the summands
    double std_error = 0.0; // std_dev / sqrt(M)
};

/// Monte Carlo estimate of Ent(K(mu_true) | K(mu)) from M fresh draws of K(mu_true).
inline KlEstimate kl_diagnostic(const ModelSpec& spec, const MixingMeasure& mu_true, const MixingMeasure& mu,
                                std::size_t M, std::uint64_t seed) {
    require(M >= 1, "M must be >= 1");
    const auto ds = simulate_dataset(spec, mu_true, M, splitmix64(seed ^ static_cast<std::uint64_t>(StreamTag::monte_carlo)));
    const auto num = row_log_mixture(build_kernel_matrix(ds, mu_true), mu_true.weights());
    const auto den = row_log_mixture(build_kernel_matrix(ds, mu), mu.weights());
    double mean = 0.0;
    for (std::size_t i = 0; i < M; ++i) mean += num[i] - den[i];
    mean /= static_cast<double>(M);
    double var = 0.0;
    for (std::size_t i = 0; i < M; ++i) var += (num[i] - den[i] - mean) * (num[i] - den[i] - mean);
    var = M > 1 ? var / static_cast<double>(M - 1) : 0.0;
    const double sd = std::sqrt(var);
    return {mean, sd, sd / std::sqrt(static_cast<double>(M))};
}

} // namespace npml
