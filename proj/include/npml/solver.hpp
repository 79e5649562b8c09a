#pragma once

#include "npml/data.hpp"
#include "npml/error.hpp"
#include "npml/likelihood.hpp"
#include "npml/measures.hpp"
#include "npml/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace npml {

struct FitOptions {
    double tol_rel_loglik = 1e-10;
    std::size_t max_em_iters = 10000;
    double prune_eps = 1e-8;
    std::size_t refine_grid = 64;
    double refine_tol = 1e-6;
    std::size_t max_refinements = 50;
    std::size_t quad_points = 8;
    // Vertex-exchange polishing of the support weights: stop once every
    // support atom has |d - 1| <= polish_tol, or after max_polish_iters.
    double polish_tol = 1e-9;
    std::size_t max_polish_iters = 20000;

    void validate() const {
        require(tol_rel_loglik > 0.0, "tol_rel_loglik must be > 0");
        require(max_em_iters >= 1, "max_em_iters must be >= 1");
        require(prune_eps > 0.0 && prune_eps < 1.0, "prune_eps must lie in (0, 1)");
        require(refine_grid >= 1, "refine_grid must be >= 1");
        require(refine_tol > 0.0, "refine_tol must be > 0");
        require(quad_points >= 1, "quad_points must be >= 1");
        require(polish_tol > 0.0, "polish_tol must be > 0");
    }
};

enum class FitStatus { converged, iter_limit };

inline const char* status_name(FitStatus s) { return s == FitStatus::converged ? "converged" : "iter-limit"; }

struct Certificate {
    double sup_dir_derivative = 0.0;
    Point argmax_point;
    std::size_t grid_resolution = 0;

    bool optimal(double tol) const noexcept { return sup_dir_derivative <= 1.0 + tol; }
};

struct FitResult {
    std::variant<MixingMeasure, SieveDensity> measure;
    std::vector<double> loglik_trace;
    double final_loglik = 0.0;
    std::size_t iterations = 0;
    Certificate certificate;
    FitStatus status = FitStatus::iter_limit;
    std::size_t refinements = 0;
    Box box;

    bool is_sieve() const noexcept { return measure.index() == 1; }
    const MixingMeasure& discrete() const { return std::get<MixingMeasure>(measure); }
    const SieveDensity& sieve() const { return std::get<SieveDensity>(measure); }

    /// Discrete view: the measure itself, or the sieve's node representation.
    MixingMeasure as_measure() const { return is_sieve() ? sieve_to_measure(sieve()) : discrete(); }
};

struct EmResult {
    std::vector<double> weights;
    std::vector<double> loglik_trace;
    std::size_t iterations = 0;
    FitStatus status = FitStatus::iter_limit;
};

namespace detail {

/// Row-scaled linear copy of a kernel matrix: scaled(i, j) = exp(log_k(i, j) - shift_i)
/// with shift_i the row maximum. Rows whose mixture underflows in this form
/// are recomputed in log space.
class EmWorkspace {
public:
    explicit EmWorkspace(const KernelMatrix& km) : km_(km), rows_(km.rows()), cols_(km.cols()) {
        scaled_.resize(rows_ * cols_);
        shift_.resize(rows_);
        for (std::size_t i = 0; i < rows_; ++i) {
            const auto r = km.row(i);
            const double mx = *std::max_element(r.begin(), r.end());
            shift_[i] = mx;
            for (std::size_t j = 0; j < cols_; ++j) scaled_[i * cols_ + j] = std::exp(r[j] - mx);
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    /// One pass at weights w: returns L(w). Fills `posterior_mean` (if non-null)
    /// with the EM update and `derivative` (if non-null) with
    /// d_j = (1/N) sum_i k_ij / K_i for every column.
    double pass(std::span<const double> w, std::vector<double>* posterior_mean, std::vector<double>* derivative) const {
        if (posterior_mean) posterior_mean->assign(cols_, 0.0);
        if (derivative) derivative->assign(cols_, 0.0);
        double loglik = 0.0;
        constexpr double tiny = 1e-280;
        for (std::size_t i = 0; i < rows_; ++i) {
            const double* row = scaled_.data() + i * cols_;
            double mix = 0.0;
            for (std::size_t j = 0; j < cols_; ++j) mix += w[j] * row[j];
            if (mix > tiny) {
                loglik += std::log(mix) + shift_[i];
                const double inv = 1.0 / mix;
                if (derivative)
                    for (std::size_t j = 0; j < cols_; ++j) (*derivative)[j] += row[j] * inv;
                if (posterior_mean)
                    for (std::size_t j = 0; j < cols_; ++j) (*posterior_mean)[j] += w[j] * row[j] * inv;
                continue;
            }
            // log-space fallback
            const auto lrow = km_.row(i);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < cols_; ++j)
                if (w[j] > 0.0) mx = std::max(mx, std::log(w[j]) + lrow[j]);
            double acc = 0.0;
            for (std::size_t j = 0; j < cols_; ++j)
                if (w[j] > 0.0) acc += std::exp(std::log(w[j]) + lrow[j] - mx);
            const double log_mix = mx + std::log(acc);
            loglik += log_mix;
            for (std::size_t j = 0; j < cols_; ++j) {
                const double ratio = std::exp(lrow[j] - log_mix);
                if (derivative) (*derivative)[j] += ratio;
                if (posterior_mean && w[j] > 0.0) (*posterior_mean)[j] += w[j] * ratio;
            }
        }
        const double inv_n = 1.0 / static_cast<double>(rows_);
        if (derivative)
            for (auto& v : *derivative) v *= inv_n;
        if (posterior_mean) {
            double total = 0.0;
            for (auto& v : *posterior_mean) total += v;
            for (auto& v : *posterior_mean) v /= total;
        }
        return loglik * inv_n;
    }

    /// Mixture values in scaled space, K_i / exp(shift_i).
    void scaled_mixture(std::span<const double> w, std::vector<double>& mix) const {
        mix.assign(rows_, 0.0);
        for (std::size_t i = 0; i < rows_; ++i) {
            const double* row = scaled_.data() + i * cols_;
            double acc = 0.0;
            for (std::size_t j = 0; j < cols_; ++j) acc += w[j] * row[j];
            mix[i] = acc;
        }
    }

    double scaled(std::size_t i, std::size_t j) const noexcept { return scaled_[i * cols_ + j]; }

private:
    const KernelMatrix& km_;
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> scaled_;
    std::vector<double> shift_;
};

inline std::vector<double> normalized_weights(std::span<const double> w, std::size_t m) {
    check_weights(w, m);
    std::vector<double> out(w.begin(), w.end());
    const double total = std::accumulate(out.begin(), out.end(), 0.0);
    for (auto& v : out) v /= total;
    return out;
}

inline bool converged_rel(double previous, double current, double tol) {
    return current - previous <= tol * std::max(1.0, std::abs(previous));
}

/// Solves a dense square system in place by Gaussian elimination with
/// partial pivoting. Returns false if it is numerically singular.
inline bool solve_dense(std::vector<double>& a, std::vector<double>& b, std::size_t n) {
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
        if (!(std::abs(a[piv * n + c]) > 1e-300)) return false;
        if (piv != c) {
            for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
            std::swap(b[c], b[piv]);
        }
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = a[r * n + c] / a[c * n + c];
            if (f == 0.0) continue;
            for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
            b[r] -= f * b[c];
        }
    }
    for (std::size_t c = n; c-- > 0;) {
        double acc = b[c];
        for (std::size_t k = c + 1; k < n; ++k) acc -= a[c * n + k] * b[k];
        b[c] = acc / a[c * n + c];
    }
    return std::all_of(b.begin(), b.end(), [](double v) { return std::isfinite(v); });
}

/// Newton step for L restricted to the face {w_j > 0}, with a backtracking
/// line search kept inside the simplex. Replaces w and returns true only if
/// L strictly increases from `current`.
inline bool newton_support_step(const EmWorkspace& ws, std::vector<double>& w, double current) {
    constexpr std::size_t max_support = 256;
    std::vector<std::size_t> support;
    for (std::size_t j = 0; j < w.size(); ++j)
        if (w[j] > 0.0) support.push_back(j);
    const std::size_t s = support.size();
    if (s < 2 || s > max_support) return false;
    std::vector<double> mix;
    ws.scaled_mixture(w, mix);
    const std::size_t N = ws.rows();
    for (double v : mix)
        if (!(v > 1e-280)) return false;

    const std::size_t n = s + 1;
    std::vector<double> a(n * n, 0.0), b(n, 0.0), r(s);
    for (std::size_t i = 0; i < N; ++i) {
        const double inv = 1.0 / mix[i];
        for (std::size_t p = 0; p < s; ++p) r[p] = ws.scaled(i, support[p]) * inv;
        for (std::size_t p = 0; p < s; ++p) {
            b[p] -= r[p];
            for (std::size_t q = p; q < s; ++q) a[p * n + q] -= r[p] * r[q];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(N);
    double diag = 0.0;
    for (std::size_t p = 0; p < s; ++p) {
        b[p] *= inv_n;
        for (std::size_t q = p; q < s; ++q) a[q * n + p] = (a[p * n + q] *= inv_n);
        diag = std::max(diag, std::abs(a[p * n + p]));
    }
    for (std::size_t p = 0; p < s; ++p) {
        a[p * n + p] -= 1e-13 * diag;
        a[p * n + s] = a[s * n + p] = 1.0;
    }
    if (!solve_dense(a, b, n)) return false;

    double alpha_max = 1.0;
    for (std::size_t p = 0; p < s; ++p)
        if (b[p] < 0.0) alpha_max = std::min(alpha_max, w[support[p]] / -b[p]);
    std::vector<double> trial(w.size(), 0.0);
    double alpha = alpha_max;
    for (int k = 0; k < 40; ++k, alpha *= 0.5) {
        double total = 0.0;
        for (std::size_t p = 0; p < s; ++p) {
            const std::size_t j = support[p];
            double v = w[j] + alpha * b[p];
            if (v <= 8.0 * std::numeric_limits<double>::epsilon() * w[j]) v = 0.0;
            trial[j] = v;
            total += v;
        }
        if (!(total > 0.0)) continue;
        for (std::size_t p = 0; p < s; ++p) trial[support[p]] /= total;
        if (ws.pass(trial, nullptr, nullptr) > current) {
            w = trial;
            return true;
        }
    }
    return false;
}

} // namespace detail

/// One EM (Bayes-rule fixed point) update: w'_j = w_j (1/N) sum_i k_ij / K_i.
/// Zero weights stay exactly zero.
inline std::vector<double> em_step(const KernelMatrix& km, std::span<const double> w) {
    const auto w0 = detail::normalized_weights(w, km.cols());
    detail::EmWorkspace ws(km);
    std::vector<double> next;
    ws.pass(w0, &next, nullptr);
    return next;
}

/// Iterates em_step until the relative log-likelihood gain drops below
/// tol_rel_loglik or max_em_iters is reached.
inline EmResult em_fit(const KernelMatrix& km, std::span<const double> w0, const FitOptions& opts) {
    opts.validate();
    EmResult res;
    res.weights = detail::normalized_weights(w0, km.cols());
    detail::EmWorkspace ws(km);
    std::vector<double> next;
    double current = ws.pass(res.weights, &next, nullptr);
    res.loglik_trace.push_back(current);
    for (std::size_t it = 1; it <= opts.max_em_iters; ++it) {
        std::vector<double> candidate = next;
        const double value = ws.pass(candidate, &next, nullptr);
        res.weights = std::move(candidate);
        res.loglik_trace.push_back(value);
        res.iterations = it;
        const bool done = detail::converged_rel(current, value, opts.tol_rel_loglik);
        current = value;
        if (done) {
            res.status = FitStatus::converged;
            break;
        }
    }
    return res;
}

/// d_j for every column of km at weights w.
inline std::vector<double> column_derivatives(const KernelMatrix& km, std::span<const double> w) {
    const auto w0 = detail::normalized_weights(w, km.cols());
    detail::EmWorkspace ws(km);
    std::vector<double> d;
    ws.pass(w0, nullptr, &d);
    return d;
}

/// Vertex-exchange polishing: alternates an exact line search moving mass
/// from the support column of smallest derivative to the column of largest
/// derivative, with a Newton step on the support (EM step as fallback).
/// All moves are monotone. Returns the trace.
inline std::vector<double> exchange_polish(const KernelMatrix& km, std::vector<double>& w, const FitOptions& opts) {
    detail::EmWorkspace ws(km);
    const std::size_t N = ws.rows();
    const std::size_t m = ws.cols();
    std::vector<double> trace;
    std::vector<double> d, next, mix;
    for (std::size_t it = 0; it < opts.max_polish_iters; ++it) {
        const double value = ws.pass(w, &next, &d);
        trace.push_back(value);
        std::size_t best = 0, worst = m;
        double worst_dev = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (d[j] > d[best]) best = j;
            if (w[j] > 0.0 && (worst == m || d[j] < d[worst])) worst = j;
            if (w[j] > 0.0) worst_dev = std::max(worst_dev, std::abs(d[j] - 1.0));
        }
        const double sup_excess = d[best] - 1.0;
        if (worst_dev <= opts.polish_tol && sup_excess <= opts.polish_tol) break;

        if (best != worst && worst < m && d[best] > d[worst]) {
            // maximize phi(delta) = mean log(K_i + delta (k_ia - k_ib)) on [0, w_b]
            ws.scaled_mixture(w, mix);
            std::vector<double> diff(N);
            for (std::size_t i = 0; i < N; ++i) diff[i] = ws.scaled(i, best) - ws.scaled(i, worst);
            auto slope = [&](double delta, double* curv) {
                double g = 0.0, h = 0.0;
                for (std::size_t i = 0; i < N; ++i) {
                    const double denom = mix[i] + delta * diff[i];
                    const double r = diff[i] / denom;
                    g += r;
                    h -= r * r;
                }
                if (curv) *curv = h;
                return g;
            };
            const double hi_bound = w[worst];
            double delta;
            if (slope(hi_bound, nullptr) >= 0.0) {
                delta = hi_bound;
            } else {
                double lo = 0.0, hi = hi_bound;
                delta = 0.5 * hi_bound;
                for (int k = 0; k < 100; ++k) {
                    double curv = 0.0;
                    const double g = slope(delta, &curv);
                    if (g > 0.0) lo = delta; else hi = delta;
                    double cand = curv < 0.0 ? delta - g / curv : 0.5 * (lo + hi);
                    if (!(cand > lo && cand < hi)) cand = 0.5 * (lo + hi);
                    if (std::abs(cand - delta) <= 1e-17 + 1e-15 * delta || hi - lo <= 1e-18) {
                        delta = cand;
                        break;
                    }
                    delta = cand;
                }
            }
            w[best] += delta;
            w[worst] = delta == hi_bound ? 0.0 : w[worst] - delta;
        }
        // Newton on the current support, EM step if it makes no progress
        if (!detail::newton_support_step(ws, w, ws.pass(w, nullptr, nullptr))) {
            ws.pass(w, &next, nullptr);
            w = next;
        }
    }
    trace.push_back(ws.pass(w, nullptr, nullptr));
    return trace;
}

/// Directional derivatives d(s) = (1/N) sum_i k_{x_i}(s) / K^#(mu)(x_i) at
/// arbitrary points, with log K^#(mu)(x_i) cached.
class DerivativeScanner {
public:
    DerivativeScanner(const Dataset& ds, const MixingMeasure& mu) : ds_(ds) {
        const auto km = build_kernel_matrix(ds, mu);
        log_mix_ = row_log_mixture(km, mu.weights());
        for (double v : log_mix_)
            if (!std::isfinite(v)) throw NumericDomain("mixture density vanishes on an observation");
    }

    /// From precomputed log K^#(x_i), e.g. of a sieve density.
    DerivativeScanner(const Dataset& ds, std::vector<double> log_mix) : ds_(ds), log_mix_(std::move(log_mix)) {
        require(log_mix_.size() == ds.size(), "one log mixture value per observation");
        for (double v : log_mix_)
            if (!std::isfinite(v)) throw NumericDomain("mixture density vanishes on an observation");
    }

    double operator()(const Point& s) const {
        require(s.size() == ds_.spec.p, "candidate point dimension must equal p");
        EvalScratch scratch;
        return eval(s, scratch);
    }

    std::vector<double> scan(const std::vector<Point>& points) const {
        std::vector<double> out(points.size());
        parallel_for_chunks(points.size(), 32, [&](std::size_t lo, std::size_t hi) {
            EvalScratch scratch;
            for (std::size_t g = lo; g < hi; ++g) out[g] = eval(points[g], scratch);
        });
        return out;
    }

private:
    double eval(const Point& s, EvalScratch& scratch) const {
        double acc = 0.0;
        for (std::size_t i = 0; i < log_mix_.size(); ++i)
            acc += std::exp(detail::observation_log_density(ds_, i, s, scratch) - log_mix_[i]);
        return acc / static_cast<double>(log_mix_.size());
    }

    const Dataset& ds_;
    std::vector<double> log_mix_;
};

inline double directional_derivative(const Dataset& ds, const MixingMeasure& mu, const Point& s) {
    return DerivativeScanner(ds, mu)(s);
}

namespace detail {

/// Scan order: grid points (row-major) then atoms; ties keep the first index.
inline Certificate certificate_from_scan(const std::vector<Point>& grid, const std::vector<double>& grid_d,
                                         const MixingMeasure& mu, const std::vector<double>& atom_d,
                                         std::size_t resolution) {
    Certificate cert;
    cert.grid_resolution = resolution;
    cert.sup_dir_derivative = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < grid.size(); ++g)
        if (grid_d[g] > cert.sup_dir_derivative) {
            cert.sup_dir_derivative = grid_d[g];
            cert.argmax_point = grid[g];
        }
    for (std::size_t j = 0; j < mu.size(); ++j)
        if (atom_d[j] > cert.sup_dir_derivative) {
            cert.sup_dir_derivative = atom_d[j];
            cert.argmax_point = mu.atoms()[j];
        }
    return cert;
}

} // namespace detail

/// Evaluates d on a uniform grid with `grid_resolution` nodes per axis of
/// `box`, plus at mu's atoms; records the sup and its location.
inline Certificate certify(const Dataset& ds, const MixingMeasure& mu, const Box& box, std::size_t grid_resolution) {
    require(mu.dim() == ds.spec.p, "measure dimension must equal p");
    require(box.size() == ds.spec.p, "box dimension must equal p");
    const auto grid = uniform_grid(box, std::vector<std::size_t>(box.size(), grid_resolution));
    DerivativeScanner scanner(ds, mu);
    const auto grid_d = scanner.scan(grid);
    const auto atom_d = scanner.scan(mu.atoms());
    return detail::certificate_from_scan(grid, grid_d, mu, atom_d, grid_resolution);
}

/// Same scan for a sieve density over its basis box (no atoms).
inline Certificate certify(const Dataset& ds, const SieveDensity& density, std::size_t grid_resolution,
                           std::size_t quad_points) {
    const auto& box = density.basis.box();
    require(box.size() == ds.spec.p, "box dimension must equal p");
    const auto km = build_sieve_kernel_matrix(ds, density.basis, quad_points);
    const auto grid = uniform_grid(box, std::vector<std::size_t>(box.size(), grid_resolution));
    const auto grid_d = DerivativeScanner(ds, row_log_mixture(km, density.coefficients)).scan(grid);
    Certificate cert;
    cert.grid_resolution = grid_resolution;
    cert.sup_dir_derivative = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < grid.size(); ++g)
        if (grid_d[g] > cert.sup_dir_derivative) {
            cert.sup_dir_derivative = grid_d[g];
            cert.argmax_point = grid[g];
        }
    return cert;
}

struct RefineResult {
    MixingMeasure measure;
    std::vector<double> loglik_trace;
    std::size_t iterations = 0;
    std::size_t refinements = 0;
    bool certified = false;
};

namespace detail {

struct SupportFit {
    MixingMeasure measure;
    KernelMatrix km;
    std::vector<double> trace;
    std::size_t iterations = 0;
};

/// em_fit, prune, vertex-exchange polish and a final prune, on the columns of km.
inline SupportFit optimize_support(const KernelMatrix& km, std::span<const double> w0, const FitOptions& opts) {
    auto em = em_fit(km, w0, opts);
    SupportFit out;
    out.trace = std::move(em.loglik_trace);
    out.iterations = em.iterations;

    auto keep_positive = [&](const KernelMatrix& src, const std::vector<double>& w) {
        std::vector<std::size_t> keep;
        std::vector<double> kept;
        for (std::size_t j = 0; j < w.size(); ++j)
            if (w[j] >= opts.prune_eps) {
                keep.push_back(j);
                kept.push_back(w[j]);
            }
        if (keep.empty()) throw DegenerateMeasure("every atom has weight below the prune threshold");
        return std::pair{src.select_columns(keep), renormalized(std::move(kept))};
    };

    auto [pruned_km, w] = keep_positive(km, em.weights);
    out.trace.push_back(log_likelihood(pruned_km, w));
    auto polish = exchange_polish(pruned_km, w, opts);
    out.iterations += polish.size();
    out.trace.insert(out.trace.end(), polish.begin(), polish.end());
    auto [final_km, final_w] = keep_positive(pruned_km, w);
    out.trace.push_back(log_likelihood(final_km, final_w));
    out.measure = MixingMeasure(final_km.atoms(), final_w);
    out.km = std::move(final_km);
    return out;
}

} // namespace detail

namespace detail {

/// Weight for a new column: maximizes the log-likelihood along
/// (1 - delta) w + delta e_new on [0, 1). d(new) > 1 makes the optimum
/// positive, so the insertion never lowers the objective.
inline double insertion_weight(const KernelMatrix& km, std::span<const double> w, std::span<const double> column) {
    const auto log_mix = row_log_mixture(km, w);
    const std::size_t N = km.rows();
    // ratio_i = k_new(x_i) / K(x_i); objective mean log(1 + delta (ratio_i - 1))
    std::vector<double> ratio(N);
    for (std::size_t i = 0; i < N; ++i) ratio[i] = std::exp(column[i] - log_mix[i]);
    auto slope = [&](double delta) {
        double g = 0.0;
        for (std::size_t i = 0; i < N; ++i) g += (ratio[i] - 1.0) / (1.0 + delta * (ratio[i] - 1.0));
        return g;
    };
    if (!(slope(0.0) > 0.0)) return 1.0 / static_cast<double>(w.size() + 1);
    constexpr double cap = 1.0 - 1e-9;
    if (slope(cap) >= 0.0) return cap;
    double lo = 0.0, hi = cap;
    for (int k = 0; k < 200 && hi - lo > 1e-15; ++k) {
        const double mid = 0.5 * (lo + hi);
        (slope(mid) > 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace detail

/// Adds the certificate's argmax point as a new atom (weight chosen by line
/// search) and refits, until sup d <= 1 + refine_tol or max_refinements is reached.
/// Candidate points come from a uniform grid of refine_grid nodes per axis.
inline RefineResult refine_support(const Dataset& ds, const MixingMeasure& mu, const Box& box, const FitOptions& opts) {
    opts.validate();
    require(box.size() == ds.spec.p && mu.dim() == ds.spec.p, "box and measure dimension must equal p");
    const auto grid = uniform_grid(box, std::vector<std::size_t>(box.size(), opts.refine_grid));
    const auto grid_km = build_kernel_matrix(ds, grid);
    const detail::EmWorkspace grid_ws(grid_km);
    std::vector<double> grid_shift(grid_km.rows());
    for (std::size_t i = 0; i < grid_km.rows(); ++i) {
        const auto r = grid_km.row(i);
        grid_shift[i] = *std::max_element(r.begin(), r.end());
    }

    RefineResult res;
    res.measure = mu;
    auto km = build_kernel_matrix(ds, mu);
    res.loglik_trace.push_back(log_likelihood(km, mu.weights()));
    const std::size_t N = ds.size();

    for (;;) {
        const auto log_mix = row_log_mixture(km, res.measure.weights());
        std::vector<double> grid_d(grid.size(), 0.0);
        for (std::size_t i = 0; i < N; ++i) {
            const double factor = std::exp(grid_shift[i] - log_mix[i]);
            for (std::size_t g = 0; g < grid.size(); ++g) grid_d[g] += grid_ws.scaled(i, g) * factor;
        }
        for (auto& v : grid_d) v /= static_cast<double>(N);
        const auto atom_d = column_derivatives(km, res.measure.weights());
        const auto cert = detail::certificate_from_scan(grid, grid_d, res.measure, atom_d, opts.refine_grid);
        if (cert.optimal(opts.refine_tol)) {
            res.certified = true;
            break;
        }
        if (res.refinements >= opts.max_refinements) break;
        ++res.refinements;

        const auto& atoms = res.measure.atoms();
        const bool existing = std::find(atoms.begin(), atoms.end(), cert.argmax_point) != atoms.end();
        std::vector<double> w = res.measure.weights();
        KernelMatrix candidate_km = km;
        if (!existing) {
            const auto g = static_cast<std::size_t>(std::find(grid.begin(), grid.end(), cert.argmax_point) - grid.begin());
            std::vector<double> column(N);
            for (std::size_t i = 0; i < N; ++i) column[i] = grid_km(i, g);
            candidate_km.append_columns(1, column, {cert.argmax_point});
            const double share = detail::insertion_weight(km, res.measure.weights(), column);
            for (auto& v : w) v *= 1.0 - share;
            w.push_back(share);
        }
        auto fit = detail::optimize_support(candidate_km, w, opts);
        res.loglik_trace.insert(res.loglik_trace.end(), fit.trace.begin(), fit.trace.end());
        res.iterations += fit.iterations;
        res.measure = std::move(fit.measure);
        km = std::move(fit.km);
    }
    return res;
}

namespace detail {

inline FitResult finish_npml(const Dataset& ds, const Box& box, const MixingMeasure& start, std::vector<double> trace,
                             std::size_t iterations, const FitOptions& opts) {
    auto refined = refine_support(ds, start, box, opts);
    FitResult out;
    out.box = box;
    out.loglik_trace = std::move(trace);
    out.loglik_trace.insert(out.loglik_trace.end(), refined.loglik_trace.begin() + 1, refined.loglik_trace.end());
    out.iterations = iterations + refined.iterations;
    out.refinements = refined.refinements;
    out.certificate = certify(ds, refined.measure, box, opts.refine_grid);
    out.final_loglik = log_likelihood(build_kernel_matrix(ds, refined.measure), refined.measure.weights());
    out.status = out.certificate.optimal(opts.refine_tol) ? FitStatus::converged : FitStatus::iter_limit;
    out.measure = std::move(refined.measure);
    return out;
}

} // namespace detail

/// NPML over discrete measures, started from an arbitrary measure.
inline FitResult fit_npml(const Dataset& ds, const Box& box, const MixingMeasure& initial, const FitOptions& opts) {
    opts.validate();
    ds.validate();
    require(initial.dim() == ds.spec.p, "initial measure dimension must equal p");
    const auto km = build_kernel_matrix(ds, initial);
    auto fit = detail::optimize_support(km, initial.weights(), opts);
    return detail::finish_npml(ds, box, fit.measure, std::move(fit.trace), fit.iterations, opts);
}

/// NPML over discrete measures: uniform grid start, EM, prune, support
/// refinement, certificate.
inline FitResult fit_npml(const Dataset& ds, const Box& box, const std::vector<std::size_t>& initial_counts,
                          const FitOptions& opts) {
    return fit_npml(ds, box, new_uniform_grid_measure(box, initial_counts), opts);
}

/// Maximum likelihood over the convex hull of a sieve basis.
inline FitResult fit_sieve(const Dataset& ds, const SieveBasis& basis, const FitOptions& opts) {
    opts.validate();
    const auto km = build_sieve_kernel_matrix(ds, basis, opts.quad_points);
    const std::size_t m = basis.size();
    std::vector<double> w(m, 1.0 / static_cast<double>(m));
    auto em = em_fit(km, w, opts);
    w = em.weights;
    auto polish = exchange_polish(km, w, opts);

    FitResult out;
    out.box = basis.box();
    out.loglik_trace = std::move(em.loglik_trace);
    out.loglik_trace.insert(out.loglik_trace.end(), polish.begin(), polish.end());
    out.iterations = em.iterations + polish.size();
    out.final_loglik = log_likelihood(km, w);

    const auto d = column_derivatives(km, w);
    const auto best = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    out.certificate = {d[best], basis.node(best), 0};
    out.status = out.certificate.optimal(opts.refine_tol) ? FitStatus::converged : FitStatus::iter_limit;
    out.measure = SieveDensity(basis, renormalized(std::move(w)));
    return out;
}

// ---------------------------------------------------------------------------
// Independent checks

/// Exhaustive search over the simplex lattice {k / resolution}; returns the
/// lexicographically smallest maximizer of log_likelihood.
inline std::vector<double> brute_force_oracle(const KernelMatrix& km, std::size_t resolution) {
    const std::size_t m = km.cols();
    require(resolution >= 1, "resolution must be >= 1");
    require(m <= 4, "brute-force oracle supports at most 4 columns");
    require(static_cast<double>(resolution) * static_cast<double>(m) <= 1e7, "brute-force budget exceeded");
    double lattice = 1.0;
    for (std::size_t k = 1; k < m; ++k)
        lattice *= static_cast<double>(resolution + k) / static_cast<double>(k);
    require(lattice <= 2e8, "brute-force budget exceeded (lattice too large)");

    const std::size_t N = km.rows();
    std::vector<double> shift(N), scaled(N * m);
    for (std::size_t i = 0; i < N; ++i) {
        const auto r = km.row(i);
        shift[i] = *std::max_element(r.begin(), r.end());
        for (std::size_t j = 0; j < m; ++j) scaled[i * m + j] = std::exp(r[j] - shift[i]);
    }
    auto objective = [&](const std::vector<std::size_t>& counts) {
        double acc = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            double mix = 0.0;
            for (std::size_t j = 0; j < m; ++j) mix += static_cast<double>(counts[j]) * scaled[i * m + j];
            acc += std::log(mix);
        }
        return acc;
    };

    std::vector<std::size_t> counts(m, 0), best_counts;
    double best = -std::numeric_limits<double>::infinity();
    // lexicographic enumeration of compositions of `resolution` into m parts
    auto recurse = [&](auto&& self, std::size_t j, std::size_t remaining) -> void {
        if (j + 1 == m) {
            counts[j] = remaining;
            const double v = objective(counts);
            if (v > best) {
                best = v;
                best_counts = counts;
            }
            return;
        }
        for (std::size_t c = 0; c <= remaining; ++c) {
            counts[j] = c;
            self(self, j + 1, remaining - c);
        }
    };
    recurse(recurse, 0, resolution);
    std::vector<double> w(m);
    for (std::size_t j = 0; j < m; ++j) w[j] = static_cast<double>(best_counts[j]) / static_cast<double>(resolution);
    return w;
}

struct ConcavityDefect {
    double lambda = 0.0;
    double defect = 0.0;
};

/// defect(lambda) = L(lambda w1 + (1 - lambda) w2) - [lambda L(w1) + (1 - lambda) L(w2)].
inline std::vector<ConcavityDefect> concavity_probe(const KernelMatrix& km, std::span<const double> w1,
                                                    std::span<const double> w2, std::span<const double> lambdas) {
    detail::check_weights(w1, km.cols());
    detail::check_weights(w2, km.cols());
    const bool same = std::equal(w1.begin(), w1.end(), w2.begin(), w2.end());
    const double l1 = log_likelihood(km, w1);
    const double l2 = log_likelihood(km, w2);
    std::vector<ConcavityDefect> out;
    std::vector<double> mix(km.cols());
    for (double lambda : lambdas) {
        require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
        if (same || lambda == 0.0 || lambda == 1.0) {
            out.push_back({lambda, 0.0});
            continue;
        }
        for (std::size_t j = 0; j < mix.size(); ++j) mix[j] = lambda * w1[j] + (1.0 - lambda) * w2[j];
        out.push_back({lambda, log_likelihood(km, mix) - (lambda * l1 + (1.0 - lambda) * l2)});
    }
    return out;
}

} // namespace npml
