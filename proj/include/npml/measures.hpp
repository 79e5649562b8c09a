#pragma once

#include "npml/error.hpp"
#include "npml/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace npml {

/// Discrete probability measure on R^p: sum_j weights[j] delta_{atoms[j]}.
class MixingMeasure {
public:
    MixingMeasure() = default;

    MixingMeasure(std::vector<Point> atoms, std::vector<double> weights)
        : atoms_(std::move(atoms)), weights_(std::move(weights)) {
        require(!atoms_.empty(), "a mixing measure needs at least one atom");
        require(atoms_.size() == weights_.size(), "atoms and weights must have equal length");
        const std::size_t p = atoms_.front().size();
        require(p >= 1, "atoms must have dimension >= 1");
        double total = 0.0;
        for (std::size_t j = 0; j < atoms_.size(); ++j) {
            require(atoms_[j].size() == p, "all atoms must have the same dimension");
            for (double v : atoms_[j]) require(std::isfinite(v), "atoms must be finite");
            require(std::isfinite(weights_[j]) && weights_[j] >= 0.0, "weights must be finite and >= 0");
            total += weights_[j];
        }
        require(std::abs(total - 1.0) <= 1e-12, "weights must sum to 1 (got " + std::to_string(total) + ")");
    }

    static MixingMeasure dirac(Point atom) { return MixingMeasure({std::move(atom)}, {1.0}); }

    const std::vector<Point>& atoms() const noexcept { return atoms_; }
    const std::vector<double>& weights() const noexcept { return weights_; }
    std::size_t size() const noexcept { return atoms_.size(); }
    std::size_t dim() const noexcept { return atoms_.empty() ? 0 : atoms_.front().size(); }

    Point mean() const {
        Point m(dim(), 0.0);
        for (std::size_t j = 0; j < size(); ++j)
            for (std::size_t a = 0; a < dim(); ++a) m[a] += weights_[j] * atoms_[j][a];
        return m;
    }

    /// One-dimensional marginal along `axis`.
    MixingMeasure marginal(std::size_t axis) const {
        require(axis < dim(), "marginal axis out of range");
        std::vector<Point> atoms;
        atoms.reserve(size());
        for (const auto& a : atoms_) atoms.push_back({a[axis]});
        return MixingMeasure(std::move(atoms), weights_);
    }

    friend bool operator==(const MixingMeasure&, const MixingMeasure&) = default;

private:
    std::vector<Point> atoms_;
    std::vector<double> weights_;
};

namespace detail {

inline void check_box(const Box& box) {
    require(!box.empty(), "box must have at least one axis");
    for (const auto& iv : box)
        require(std::isfinite(iv.lo) && std::isfinite(iv.hi) && iv.lo <= iv.hi, "box intervals must satisfy lo <= hi");
}

/// Node coordinates along one axis: endpoints for count >= 2, midpoint for 1.
inline std::vector<double> axis_nodes(const Interval& iv, std::size_t count) {
    std::vector<double> nodes(count);
    if (count == 1) {
        nodes[0] = 0.5 * (iv.lo + iv.hi);
        return nodes;
    }
    const double h = iv.length() / static_cast<double>(count - 1);
    for (std::size_t k = 0; k < count; ++k) nodes[k] = iv.lo + h * static_cast<double>(k);
    nodes.back() = iv.hi;
    return nodes;
}

/// Row-major tensor grid (last axis varies fastest).
inline std::vector<Point> tensor_grid(const std::vector<std::vector<double>>& axes) {
    std::size_t total = 1;
    for (const auto& ax : axes) total *= ax.size();
    std::vector<Point> out;
    out.reserve(total);
    std::vector<std::size_t> idx(axes.size(), 0);
    for (std::size_t c = 0; c < total; ++c) {
        Point pt(axes.size());
        for (std::size_t a = 0; a < axes.size(); ++a) pt[a] = axes[a][idx[a]];
        out.push_back(std::move(pt));
        for (std::size_t a = axes.size(); a-- > 0;) {
            if (++idx[a] < axes[a].size()) break;
            idx[a] = 0;
        }
    }
    return out;
}

inline double squared_distance(const Point& a, const Point& b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
    return acc;
}

} // namespace detail

/// Grid points over `box` with counts[a] nodes per axis.
inline std::vector<Point> uniform_grid(const Box& box, const std::vector<std::size_t>& counts) {
    detail::check_box(box);
    require(counts.size() == box.size(), "need one grid count per axis");
    std::vector<std::vector<double>> axes;
    for (std::size_t a = 0; a < box.size(); ++a) {
        require(counts[a] >= 1, "grid counts must be >= 1");
        axes.push_back(detail::axis_nodes(box[a], counts[a]));
    }
    return detail::tensor_grid(axes);
}

inline MixingMeasure new_uniform_grid_measure(const Box& box, const std::vector<std::size_t>& counts) {
    auto atoms = uniform_grid(box, counts);
    const std::size_t m = atoms.size();
    return MixingMeasure(std::move(atoms), std::vector<double>(m, 1.0 / static_cast<double>(m)));
}

/// Renormalizes weights to sum to one after removals.
inline std::vector<double> renormalized(std::vector<double> w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) throw DegenerateMeasure("weights have zero total mass");
    for (auto& v : w) v /= total;
    return w;
}

/// Drops atoms of weight < eps and renormalizes.
inline MixingMeasure prune(const MixingMeasure& mu, double eps) {
    require(eps > 0.0 && eps < 1.0, "prune threshold must lie in (0, 1)");
    std::vector<Point> atoms;
    std::vector<double> weights;
    for (std::size_t j = 0; j < mu.size(); ++j) {
        if (mu.weights()[j] >= eps) {
            atoms.push_back(mu.atoms()[j]);
            weights.push_back(mu.weights()[j]);
        }
    }
    if (atoms.empty()) throw DegenerateMeasure("every atom has weight below the prune threshold");
    if (atoms.size() == mu.size()) return mu;
    return MixingMeasure(std::move(atoms), renormalized(std::move(weights)));
}

/// Merges atoms within Euclidean `radius` of a heavier seed atom into their
/// weighted centroid; repeats until no two atoms are within radius.
inline MixingMeasure merge_close_atoms(const MixingMeasure& mu, double radius) {
    require(radius >= 0.0 && std::isfinite(radius), "merge radius must be finite and >= 0");
    std::vector<Point> atoms = mu.atoms();
    std::vector<double> weights = mu.weights();
    const double r2 = radius * radius;
    for (bool changed = true; changed;) {
        changed = false;
        std::vector<std::size_t> order(atoms.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });

        std::vector<bool> taken(atoms.size(), false);
        std::vector<Point> merged_atoms;
        std::vector<double> merged_weights;
        for (std::size_t seed : order) {
            if (taken[seed]) continue;
            taken[seed] = true;
            std::vector<std::size_t> cluster{seed};
            for (std::size_t other : order) {
                if (taken[other]) continue;
                if (detail::squared_distance(atoms[seed], atoms[other]) <= r2) {
                    taken[other] = true;
                    cluster.push_back(other);
                }
            }
            if (cluster.size() == 1) {
                merged_atoms.push_back(atoms[seed]);
                merged_weights.push_back(weights[seed]);
                continue;
            }
            changed = true;
            std::sort(cluster.begin(), cluster.end());
            double mass = 0.0;
            Point centroid(atoms[seed].size(), 0.0);
            for (std::size_t j : cluster) {
                mass += weights[j];
                for (std::size_t a = 0; a < centroid.size(); ++a) centroid[a] += weights[j] * atoms[j][a];
            }
            if (mass > 0.0)
                for (auto& c : centroid) c /= mass;
            else
                centroid = atoms[seed];
            merged_atoms.push_back(std::move(centroid));
            merged_weights.push_back(mass);
        }
        atoms = std::move(merged_atoms);
        weights = std::move(merged_weights);
    }
    return MixingMeasure(std::move(atoms), std::move(weights));
}

/// Exact W1 between two discrete measures on R: integral of |F - G|.
inline double wasserstein1_1d(const MixingMeasure& mu, const MixingMeasure& nu) {
    require(mu.dim() == 1 && nu.dim() == 1, "wasserstein1_1d needs one-dimensional measures");
    struct Event {
        double x;
        double dmass; // +w for mu, -w for nu
    };
    std::vector<Event> events;
    events.reserve(mu.size() + nu.size());
    for (std::size_t j = 0; j < mu.size(); ++j) events.push_back({mu.atoms()[j][0], mu.weights()[j]});
    for (std::size_t j = 0; j < nu.size(); ++j) events.push_back({nu.atoms()[j][0], -nu.weights()[j]});
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.x < b.x; });
    double cdf_gap = 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k + 1 < events.size(); ++k) {
        cdf_gap += events[k].dmass;
        total += std::abs(cdf_gap) * (events[k + 1].x - events[k].x);
    }
    return total;
}

/// Mean over coordinates of the marginal W1 distances.
inline double measure_distance(const MixingMeasure& mu, const MixingMeasure& nu) {
    require(mu.dim() == nu.dim(), "measures must have the same dimension");
    double acc = 0.0;
    for (std::size_t a = 0; a < mu.dim(); ++a) acc += wasserstein1_1d(mu.marginal(a), nu.marginal(a));
    return acc / static_cast<double>(mu.dim());
}

// ---------------------------------------------------------------------------
// Hat-function sieve

/// One-dimensional factor of a sieve basis element: a normalized hat on the
/// axis grid, or the uniform density when the axis has a single cell.
struct AxisBasisFunction {
    double node = 0.0;
    double left = 0.0;  // support [left, right]
    double right = 0.0;
    double peak = 0.0;  // value at node (after normalization)
    double h = 0.0;     // grid spacing; 0 for the uniform factor
    bool uniform = false;

    double operator()(double x) const noexcept {
        if (x < left || x > right) return 0.0;
        if (uniform) return peak;
        return peak * std::max(0.0, 1.0 - std::abs(x - node) / h);
    }

    /// sup |d/dx|.
    double slope() const noexcept { return uniform ? 0.0 : peak / h; }

    /// Support split at the node into at most two cells.
    std::vector<Interval> cells() const {
        if (uniform) return {{left, right}};
        std::vector<Interval> out;
        if (left < node) out.push_back({left, node});
        if (node < right) out.push_back({node, right});
        return out;
    }
};

/// Tensor-product hat densities on a regular grid of `cells[a]` cells per
/// axis. An axis with a single cell contributes the uniform density; with
/// c >= 2 cells it contributes c + 1 hats, halved at the box boundary.
/// Refining every axis by an integer factor gives a nested family, since the
/// uniform density and every coarse hat are nonnegative combinations of
/// finer hats.
class SieveBasis {
public:
    SieveBasis() = default;

    SieveBasis(Box box, std::vector<std::size_t> cells) : box_(std::move(box)), cells_(std::move(cells)) {
        detail::check_box(box_);
        require(cells_.size() == box_.size(), "need one cell count per axis");
        for (std::size_t a = 0; a < box_.size(); ++a) {
            require(cells_[a] >= 1, "cell counts must be >= 1");
            require(box_[a].lo < box_[a].hi, "sieve box intervals must have positive length");
            axes_.push_back(make_axis(box_[a], cells_[a]));
        }
        size_ = 1;
        for (const auto& ax : axes_) size_ *= ax.size();
    }

    static SieveBasis uniform_cells(const Box& box, std::size_t cells) {
        return SieveBasis(box, std::vector<std::size_t>(box.size(), cells));
    }

    const Box& box() const noexcept { return box_; }
    const std::vector<std::size_t>& cells() const noexcept { return cells_; }
    std::size_t dim() const noexcept { return box_.size(); }
    std::size_t size() const noexcept { return size_; }
    const std::vector<AxisBasisFunction>& axis(std::size_t a) const { return axes_[a]; }

    /// Per-axis factor indices of basis element j (row-major, last fastest).
    std::vector<std::size_t> multi_index(std::size_t j) const {
        std::vector<std::size_t> idx(dim());
        for (std::size_t a = dim(); a-- > 0;) {
            idx[a] = j % axes_[a].size();
            j /= axes_[a].size();
        }
        return idx;
    }

    Point node(std::size_t j) const {
        const auto idx = multi_index(j);
        Point pt(dim());
        for (std::size_t a = 0; a < dim(); ++a) pt[a] = axes_[a][idx[a]].node;
        return pt;
    }

    std::vector<Point> nodes() const {
        std::vector<Point> out;
        out.reserve(size_);
        for (std::size_t j = 0; j < size_; ++j) out.push_back(node(j));
        return out;
    }

    /// phi_j(x).
    double eval(std::size_t j, std::span<const double> x) const {
        const auto idx = multi_index(j);
        double v = 1.0;
        for (std::size_t a = 0; a < dim(); ++a) v *= axes_[a][idx[a]](x[a]);
        return v;
    }

    /// max_j sup |grad phi_j|, a Lipschitz bound for every convex combination.
    double lipschitz_bound() const {
        double best = 0.0;
        for (std::size_t j = 0; j < size_; ++j) {
            const auto idx = multi_index(j);
            double sq = 0.0;
            for (std::size_t a = 0; a < dim(); ++a) {
                double term = axes_[a][idx[a]].slope();
                for (std::size_t b = 0; b < dim(); ++b)
                    if (b != a) term *= axes_[b][idx[b]].peak;
                sq += term * term;
            }
            best = std::max(best, std::sqrt(sq));
        }
        return best;
    }

private:
    static std::vector<AxisBasisFunction> make_axis(const Interval& iv, std::size_t cells) {
        std::vector<AxisBasisFunction> out;
        if (cells == 1) {
            AxisBasisFunction u;
            u.node = 0.5 * (iv.lo + iv.hi);
            u.left = iv.lo;
            u.right = iv.hi;
            u.peak = 1.0 / iv.length();
            u.uniform = true;
            out.push_back(u);
            return out;
        }
        const auto nodes = detail::axis_nodes(iv, cells + 1);
        const double h = iv.length() / static_cast<double>(cells);
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            AxisBasisFunction hat;
            hat.node = nodes[k];
            hat.h = h;
            hat.left = k == 0 ? iv.lo : nodes[k - 1];
            hat.right = k + 1 == nodes.size() ? iv.hi : nodes[k + 1];
            const bool boundary = k == 0 || k + 1 == nodes.size();
            hat.peak = boundary ? 2.0 / h : 1.0 / h;
            out.push_back(hat);
        }
        return out;
    }

    Box box_;
    std::vector<std::size_t> cells_;
    std::vector<std::vector<AxisBasisFunction>> axes_;
    std::size_t size_ = 0;
};

/// Convex combination sum_j coefficients[j] phi_j.
struct SieveDensity {
    SieveBasis basis;
    std::vector<double> coefficients;

    SieveDensity() = default;
    SieveDensity(SieveBasis b, std::vector<double> beta) : basis(std::move(b)), coefficients(std::move(beta)) {
        require(coefficients.size() == basis.size(), "one coefficient per basis element");
        double total = 0.0;
        for (double c : coefficients) {
            require(std::isfinite(c) && c >= 0.0, "sieve coefficients must be >= 0");
            total += c;
        }
        require(std::abs(total - 1.0) <= 1e-12, "sieve coefficients must sum to 1");
    }

    double density(std::span<const double> x) const {
        double v = 0.0;
        for (std::size_t j = 0; j < coefficients.size(); ++j)
            if (coefficients[j] > 0.0) v += coefficients[j] * basis.eval(j, x);
        return v;
    }
};

/// Node representation: weight beta_j at node j.
inline MixingMeasure sieve_to_measure(const SieveDensity& d) {
    return MixingMeasure(d.basis.nodes(), d.coefficients);
}

} // namespace npml
