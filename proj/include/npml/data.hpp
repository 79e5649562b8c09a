#pragma once

#include "npml/error.hpp"
#include "npml/measures.hpp"
#include "npml/model.hpp"
#include "npml/parallel.hpp"
#include "npml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

namespace npml {

struct Observation {
    std::vector<double> y;
    std::vector<double> t;
    friend bool operator==(const Observation&, const Observation&) = default;
};

struct CensoredObservation {
    std::vector<double> z; // components of y indexed by mask
    std::vector<double> t;
    CensorMask mask;
    friend bool operator==(const CensoredObservation&, const CensoredObservation&) = default;
};

using ObservationList = std::variant<std::vector<Observation>, std::vector<CensoredObservation>>;

struct Dataset {
    ModelSpec spec;
    ObservationList observations = std::vector<Observation>{};
    std::uint64_t seed = 0;
    std::optional<MixingMeasure> truth;

    bool censored() const noexcept { return observations.index() == 1; }

    std::size_t size() const noexcept {
        return std::visit([](const auto& v) { return v.size(); }, observations);
    }

    const std::vector<Observation>& uncensored() const { return std::get<0>(observations); }
    const std::vector<CensoredObservation>& censored_observations() const { return std::get<1>(observations); }

    const std::vector<double>& times(std::size_t i) const {
        return std::visit([i](const auto& v) -> const std::vector<double>& { return v[i].t; }, observations);
    }

    void validate() const {
        spec.validate();
        require(size() >= 1, "a dataset needs at least one observation");
        std::visit(
            [&](const auto& list) {
                for (const auto& obs : list) {
                    require(obs.t.size() == spec.n, "every observation needs n measurement times");
                    if constexpr (std::is_same_v<std::decay_t<decltype(obs)>, Observation>) {
                        require(obs.y.size() == spec.n, "every observation needs n measurements");
                    } else {
                        require(obs.z.size() == obs.mask.size(), "censored observation needs |mask| measurements");
                        if (!obs.mask.indices().empty()) require(obs.mask.indices().back() <= spec.n, "mask index exceeds n");
                    }
                }
            },
            observations);
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Mask probabilities p_kappa.
struct CensoringDesign {
    std::vector<std::pair<CensorMask, double>> masks;

    void validate(std::size_t n) const {
        require(!masks.empty(), "censoring design needs at least one mask");
        double total = 0.0;
        for (const auto& [mask, prob] : masks) {
            require(std::isfinite(prob) && prob >= 0.0, "mask probabilities must be >= 0");
            if (!mask.indices().empty()) require(mask.indices().back() <= n, "mask index exceeds n");
            total += prob;
        }
        require(std::abs(total - 1.0) <= 1e-12, "mask probabilities must sum to 1");
        for (std::size_t a = 0; a < masks.size(); ++a)
            for (std::size_t b = a + 1; b < masks.size(); ++b)
                require(!(masks[a].first == masks[b].first), "censoring design lists a mask twice");
    }

    double probability(const CensorMask& mask) const {
        for (const auto& [m, p] : masks)
            if (m == mask) return p;
        return 0.0;
    }
};

namespace detail {

inline std::size_t draw_index(Rng& rng, const std::vector<double>& weights) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t j = 0; j < weights.size(); ++j) {
        acc += weights[j];
        if (u < acc) return j;
    }
    // u fell in the rounding slack at the top; take the last positive weight
    for (std::size_t j = weights.size(); j-- > 0;)
        if (weights[j] > 0.0) return j;
    return weights.size() - 1;
}

} // namespace detail

/// Latent draws S_i; identical to the draws simulate_dataset makes.
inline std::vector<Point> simulate_latent(const MixingMeasure& mu, std::size_t N, std::uint64_t seed) {
    std::vector<Point> out(N);
    for (std::size_t i = 0; i < N; ++i) {
        auto rng = Rng::substream(seed, StreamTag::simulation, i);
        out[i] = mu.atoms()[detail::draw_index(rng, mu.weights())];
    }
    return out;
}

/// Simulates N individuals. Individual i uses its own substream of `seed`,
/// drawing S_i, then T_i, then the noise, so growing N keeps earlier
/// individuals unchanged. Heteroscedastic noise is drawn with conditional
/// standard deviation sqrt(sigma^2 + g_j^2) per component.
inline Dataset simulate_dataset(const ModelSpec& spec, const MixingMeasure& mu_true, std::size_t N,
                                std::uint64_t seed) {
    spec.validate();
    require(N >= 1, "N must be >= 1");
    require(mu_true.dim() == spec.p, "true measure dimension must equal p");

    std::vector<Observation> obs(N);
    parallel_for(N, [&](std::size_t i) {
        auto rng = Rng::substream(seed, StreamTag::simulation, i);
        const Point& s = mu_true.atoms()[detail::draw_index(rng, mu_true.weights())];
        Observation& o = obs[i];
        o.t.resize(spec.n);
        for (std::size_t j = 0; j < spec.n; ++j) {
            const auto& iv = spec.time_design.intervals[j];
            o.t[j] = rng.uniform(iv.lo, iv.hi);
        }
        o.y = eval_f(spec, s, o.t);
        const auto sd = conditional_sd(spec, s, o.t);
        for (std::size_t j = 0; j < spec.n; ++j) {
            const double eps = spec.noise == NoiseKind::laplace ? rng.laplace() : rng.normal();
            o.y[j] += sd[j] * eps;
        }
    });

    Dataset ds;
    ds.spec = spec;
    ds.observations = std::move(obs);
    ds.seed = seed;
    ds.truth = mu_true;
    return ds;
}

/// Replaces each Y_i by (pi_kappa(Y_i), T_i, kappa) with kappa drawn i.i.d.
/// from the design, independently of the data.
inline Dataset apply_censoring(const Dataset& ds, const CensoringDesign& design, std::uint64_t seed) {
    require(!ds.censored(), "dataset is already censored");
    design.validate(ds.spec.n);
    std::vector<double> probs;
    for (const auto& entry : design.masks) probs.push_back(entry.second);

    const auto& obs = ds.uncensored();
    std::vector<CensoredObservation> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) {
        auto rng = Rng::substream(seed, StreamTag::censoring, i);
        const auto& mask = design.masks[detail::draw_index(rng, probs)].first;
        out[i].z = project_mask(obs[i].y, mask);
        out[i].t = obs[i].t;
        out[i].mask = mask;
    }
    Dataset res;
    res.spec = ds.spec;
    res.observations = std::move(out);
    res.seed = ds.seed;
    res.truth = ds.truth;
    return res;
}

/// Censored copy keeping every coordinate of every observation.
inline Dataset full_mask_copy(const Dataset& ds) {
    CensoringDesign design{{{CensorMask::full(ds.spec.n), 1.0}}};
    return apply_censoring(ds, design, 0);
}

} // namespace npml
