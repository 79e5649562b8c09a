#pragma once

#include "npml/data.hpp"
#include "npml/io.hpp"
#include "npml/likelihood.hpp"
#include "npml/measures.hpp"
#include "npml/parallel.hpp"
#include "npml/rng.hpp"
#include "npml/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace npml {

enum class ExperimentKind { consistency, sieve, censoring, contrast };

inline const char* experiment_name(ExperimentKind k) {
    switch (k) {
    case ExperimentKind::consistency: return "consistency";
    case ExperimentKind::sieve: return "sieve";
    case ExperimentKind::censoring: return "censoring";
    default: return "contrast";
    }
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
    if (s == "consistency") return ExperimentKind::consistency;
    if (s == "sieve") return ExperimentKind::sieve;
    if (s == "censoring") return ExperimentKind::censoring;
    if (s == "contrast") return ExperimentKind::contrast;
    throw InvalidArgument("unknown experiment kind \"" + s + "\"");
}

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::consistency;
    ModelSpec model;
    MixingMeasure truth;
    Box box;
    std::vector<std::size_t> initial_grid;  // per-axis node counts of the starting grid
    std::vector<std::size_t> n_schedule;
    std::vector<std::size_t> m_schedule;    // sieve cells per axis
    std::vector<std::uint64_t> seeds;
    FitOptions fit_options;
    std::optional<CensoringDesign> censoring;
    std::size_t competitors = 50;           // contrast experiment
    std::string output;

    // single-dataset commands (simulate, sieve experiment)
    std::size_t N() const { return n_schedule.front(); }
    std::uint64_t seed() const { return seeds.front(); }

    void validate() const {
        model.validate();
        fit_options.validate();
        require(truth.dim() == model.p, "truth dimension must equal p");
        require(box.size() == model.p, "box dimension must equal p");
        for (const auto& iv : box) require(iv.lo < iv.hi, "box intervals must have positive length");
        require(initial_grid.size() == model.p, "initial_grid needs one count per axis");
        for (auto c : initial_grid) require(c >= 1, "initial_grid counts must be >= 1");
        require(!n_schedule.empty(), "n_schedule must be nonempty");
        require(!seeds.empty(), "seeds must be nonempty");
        for (std::size_t k = 0; k < n_schedule.size(); ++k) {
            require(n_schedule[k] >= 1, "n_schedule entries must be >= 1");
            if (k > 0) require(n_schedule[k - 1] < n_schedule[k], "n_schedule must be increasing");
        }
        require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds must be distinct");
        if (kind == ExperimentKind::sieve) {
            require(!m_schedule.empty(), "sieve experiment needs an m_schedule");
            for (std::size_t k = 0; k < m_schedule.size(); ++k) {
                require(m_schedule[k] >= 1, "m_schedule entries must be >= 1");
                if (k > 0) {
                    require(m_schedule[k - 1] < m_schedule[k], "m_schedule must be increasing");
                    require(m_schedule[k] % m_schedule[k - 1] == 0, "m_schedule must be nested (each entry divides the next)");
                }
            }
        }
        if (kind == ExperimentKind::censoring) require(censoring.has_value(), "censoring experiment needs a censoring design");
        if (censoring) censoring->validate(model.n);
        require(competitors >= 1, "competitors must be >= 1");
    }
};

inline ExperimentConfig config_from_json(const io::json& j) {
    using io::detail::get;
    using io::detail::get_or;
    if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
    ExperimentConfig cfg;
    cfg.kind = parse_experiment_kind(get_or<std::string>(j, "experiment", "consistency"));
    cfg.model = io::read_model(get<io::json>(j, "model"));
    cfg.truth = io::measure_from_json(get<io::json>(j, "truth"));
    cfg.box = io::intervals_from_json(get<io::json>(j, "box"));
    if (j.contains("initial_grid") && j.at("initial_grid").is_number())
        cfg.initial_grid.assign(cfg.model.p, get<std::size_t>(j, "initial_grid"));
    else
        cfg.initial_grid = get_or<std::vector<std::size_t>>(j, "initial_grid", std::vector<std::size_t>(cfg.model.p, 10));
    if (j.contains("N")) cfg.n_schedule = {get<std::size_t>(j, "N")};
    if (j.contains("n_schedule")) cfg.n_schedule = get<std::vector<std::size_t>>(j, "n_schedule");
    cfg.m_schedule = get_or<std::vector<std::size_t>>(j, "m_schedule", {});
    if (j.contains("seed")) cfg.seeds = {get<std::uint64_t>(j, "seed")};
    if (j.contains("seeds")) cfg.seeds = get<std::vector<std::uint64_t>>(j, "seeds");
    cfg.fit_options = io::options_from_json(j.value("fit_options", io::json()));
    if (j.contains("censoring") && !j.at("censoring").is_null())
        cfg.censoring = io::design_from_json(j.at("censoring"), cfg.model.n);
    cfg.competitors = get_or<std::size_t>(j, "competitors", cfg.competitors);
    cfg.output = get_or<std::string>(j, "output", "");
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct ExperimentReport {
    std::vector<io::ReportRow> rows;
    std::vector<CheckResult> checks;
    bool all_converged = true;

    bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
    }
};

/// Observer for every discrete NPML fit an experiment performs.
using FitObserver = std::function<void(const Dataset&, const FitResult&)>;

namespace detail {

inline double wall_ms_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

inline double median(std::vector<double> v) {
    require(!v.empty(), "median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size() / 2;
    return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

inline void sort_rows(std::vector<io::ReportRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.N != b.N) return a.N < b.N;
        if (a.m != b.m) return a.m < b.m;
        return a.seed < b.seed;
    });
}

inline io::ReportRow npml_row(ExperimentKind kind, std::string variant, std::size_t N, std::uint64_t seed,
                              const FitResult& fit, const MixingMeasure& truth, double wall_ms) {
    io::ReportRow r;
    r.experiment = experiment_name(kind);
    r.variant = std::move(variant);
    r.N = N;
    r.seed = seed;
    r.final_loglik = fit.final_loglik;
    r.distance = measure_distance(fit.as_measure(), truth);
    r.atom_count = fit.as_measure().size();
    r.certificate_sup = fit.certificate.sup_dir_derivative;
    r.value = static_cast<double>(fit.refinements);
    r.wall_ms = wall_ms;
    return r;
}

struct Cell {
    std::size_t N;
    std::uint64_t seed;
};

inline std::vector<Cell> cells(const ExperimentConfig& cfg) {
    std::vector<Cell> out;
    for (auto N : cfg.n_schedule)
        for (auto s : cfg.seeds) out.push_back({N, s});
    return out;
}

/// Runs body(cell, rows&) over every (N, seed) cell, possibly in parallel.
template <class Body>
std::vector<io::ReportRow> run_cells(const ExperimentConfig& cfg, Body&& body) {
    const auto all = cells(cfg);
    std::vector<std::vector<io::ReportRow>> per_cell(all.size());
    parallel_for_chunks(all.size(), 1, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t c = lo; c < hi; ++c) body(all[c], per_cell[c]);
    });
    std::vector<io::ReportRow> rows;
    for (auto& v : per_cell) rows.insert(rows.end(), v.begin(), v.end());
    sort_rows(rows);
    return rows;
}

inline std::string fmt(double v) { return io::format_double(v); }

inline void record_convergence(ExperimentReport& rep, const std::vector<char>& flags) {
    for (char f : flags) rep.all_converged = rep.all_converged && f;
}

inline std::vector<double> medians_by_N(const ExperimentConfig& cfg, const std::vector<io::ReportRow>& rows,
                                        const std::string& variant) {
    std::vector<double> out;
    for (auto N : cfg.n_schedule) {
        std::vector<double> d;
        for (const auto& r : rows)
            if (r.N == N && r.variant == variant) d.push_back(r.distance);
        out.push_back(median(d));
    }
    return out;
}

} // namespace detail

/// For every N in the schedule and every seed: simulate, fit the NPML, and
/// record its marginal W1 distance to the truth.
inline ExperimentReport run_consistency(const ExperimentConfig& cfg, const FitObserver& observe = {}) {
    cfg.validate();
    ExperimentReport rep;
    const auto all = detail::cells(cfg);
    std::vector<char> converged(all.size(), 1);
    std::mutex observe_mutex;
    std::size_t index = 0;
    std::map<std::pair<std::size_t, std::uint64_t>, std::size_t> cell_index;
    for (const auto& c : all) cell_index[{c.N, c.seed}] = index++;
    rep.rows = detail::run_cells(cfg, [&](const detail::Cell& c, std::vector<io::ReportRow>& out) {
        const auto start = std::chrono::steady_clock::now();
        const auto ds = simulate_dataset(cfg.model, cfg.truth, c.N, c.seed);
        const auto fit = fit_npml(ds, cfg.box, cfg.initial_grid, cfg.fit_options);
        out.push_back(detail::npml_row(cfg.kind, "npml", c.N, c.seed, fit, cfg.truth, detail::wall_ms_since(start)));
        converged[cell_index.at({c.N, c.seed})] = fit.status == FitStatus::converged;
        if (observe) {
            std::lock_guard lock(observe_mutex);
            observe(ds, fit);
        }
    });
    detail::record_convergence(rep, converged);

    const auto med = detail::medians_by_N(cfg, rep.rows, "npml");
    bool decreasing = true;
    std::string detail_text = "medians";
    for (std::size_t k = 0; k < med.size(); ++k) {
        detail_text += " " + detail::fmt(med[k]);
        if (k > 0) decreasing = decreasing && med[k] < med[k - 1];
    }
    rep.checks.push_back({"median distance strictly decreasing", decreasing, detail_text});
    rep.checks.push_back({"last median <= half of first", med.back() <= 0.5 * med.front(),
                          detail::fmt(med.back()) + " vs " + detail::fmt(0.5 * med.front())});
    bool nonnegative = true;
    for (const auto& r : rep.rows) nonnegative = nonnegative && r.distance >= 0.0;
    rep.checks.push_back({"distances nonnegative", nonnegative, ""});
    return rep;
}

/// One dataset; sieve fits for every m plus the discrete NPML reference.
/// value = L(npml) - L(sieve_m).
inline ExperimentReport run_sieve(const ExperimentConfig& cfg, const FitObserver& observe = {}) {
    cfg.validate();
    ExperimentReport rep;
    const std::size_t N = cfg.N();
    const std::uint64_t seed = cfg.seed();
    const auto ds = simulate_dataset(cfg.model, cfg.truth, N, seed);

    auto start = std::chrono::steady_clock::now();
    const auto ref = fit_npml(ds, cfg.box, cfg.initial_grid, cfg.fit_options);
    rep.rows.push_back(detail::npml_row(cfg.kind, "npml", N, seed, ref, cfg.truth, detail::wall_ms_since(start)));
    rep.all_converged = ref.status == FitStatus::converged;
    if (observe) observe(ds, ref);

    std::vector<double> gaps;
    for (auto m : cfg.m_schedule) {
        start = std::chrono::steady_clock::now();
        const auto fit = fit_sieve(ds, SieveBasis::uniform_cells(cfg.box, m), cfg.fit_options);
        auto row = detail::npml_row(cfg.kind, "sieve", N, seed, fit, cfg.truth, detail::wall_ms_since(start));
        row.m = m;
        row.value = ref.final_loglik - fit.final_loglik;
        gaps.push_back(row.value);
        rep.rows.push_back(row);
        rep.all_converged = rep.all_converged && fit.status == FitStatus::converged;
    }
    detail::sort_rows(rep.rows);

    std::string text = "gaps";
    bool feasible = true, monotone = true;
    for (std::size_t k = 0; k < gaps.size(); ++k) {
        text += " " + detail::fmt(gaps[k]);
        feasible = feasible && gaps[k] >= -1e-9;
        if (k > 0) monotone = monotone && gaps[k] <= gaps[k - 1] + 1e-9;
    }
    rep.checks.push_back({"gap >= -1e-9", feasible, text});
    rep.checks.push_back({"gap nonincreasing in m", monotone, text});
    rep.checks.push_back({"last gap <= first gap", gaps.back() <= gaps.front() + 1e-9, text});
    return rep;
}

/// Per cell: (a) uncensored fit, (b) fully-masked copy, (c) randomly censored
/// copy under the configured design.
inline ExperimentReport run_censoring(const ExperimentConfig& cfg, const FitObserver& observe = {}) {
    cfg.validate();
    ExperimentReport rep;
    const auto all = detail::cells(cfg);
    std::map<std::pair<std::size_t, std::uint64_t>, std::size_t> cell_index;
    for (std::size_t k = 0; k < all.size(); ++k) cell_index[{all[k].N, all[k].seed}] = k;
    std::vector<char> converged(all.size(), 1);
    std::vector<double> reduction_error(all.size(), 0.0);
    std::mutex observe_mutex;

    rep.rows = detail::run_cells(cfg, [&](const detail::Cell& c, std::vector<io::ReportRow>& out) {
        const std::size_t k = cell_index.at({c.N, c.seed});
        const auto ds = simulate_dataset(cfg.model, cfg.truth, c.N, c.seed);
        const auto full = full_mask_copy(ds);
        const auto cens = apply_censoring(ds, *cfg.censoring, c.seed);
        const Dataset* sets[] = {&ds, &full, &cens};
        const char* names[] = {"uncensored", "full-mask", "censored"};
        std::vector<FitResult> fits;
        for (int v = 0; v < 3; ++v) {
            const auto start = std::chrono::steady_clock::now();
            fits.push_back(fit_npml(*sets[v], cfg.box, cfg.initial_grid, cfg.fit_options));
            out.push_back(detail::npml_row(cfg.kind, names[v], c.N, c.seed, fits.back(), cfg.truth, detail::wall_ms_since(start)));
            converged[k] = converged[k] && fits.back().status == FitStatus::converged;
            if (observe) {
                std::lock_guard lock(observe_mutex);
                observe(*sets[v], fits.back());
            }
        }
        const auto& mu_a = fits[0].discrete();
        const double la = log_likelihood(build_kernel_matrix(ds, mu_a), mu_a.weights());
        const double lb = log_likelihood(build_kernel_matrix(full, mu_a), mu_a.weights());
        reduction_error[k] = std::abs(la - lb);
    });
    detail::record_convergence(rep, converged);

    const double worst = *std::max_element(reduction_error.begin(), reduction_error.end());
    rep.checks.push_back({"full-mask likelihood equals uncensored", worst <= 1e-12, "max |diff| " + detail::fmt(worst)});
    const auto med_a = detail::medians_by_N(cfg, rep.rows, "uncensored");
    const auto med_c = detail::medians_by_N(cfg, rep.rows, "censored");
    bool within = true;
    std::string text;
    for (std::size_t k = 0; k < med_a.size(); ++k) {
        within = within && med_c[k] <= 2.0 * med_a[k];
        text += "N=" + std::to_string(cfg.n_schedule[k]) + ": " + detail::fmt(med_c[k]) + " vs " + detail::fmt(med_a[k]) + " ";
    }
    rep.checks.push_back({"censored median distance within 2x of uncensored", within, text});
    return rep;
}

/// Per cell: fit, then evaluate the three contrasts against random measures on
/// the fitted support. value = max contrast over the competitors.
inline ExperimentReport run_contrast(const ExperimentConfig& cfg, const FitObserver& observe = {}) {
    cfg.validate();
    ExperimentReport rep;
    const auto all = detail::cells(cfg);
    std::map<std::pair<std::size_t, std::uint64_t>, std::size_t> cell_index;
    for (std::size_t k = 0; k < all.size(); ++k) cell_index[{all[k].N, all[k].seed}] = k;
    std::vector<char> converged(all.size(), 1), signs_agree(all.size(), 1), self_zero(all.size(), 1);
    std::mutex observe_mutex;
    const double tol = cfg.fit_options.refine_tol;
    constexpr Contrast contrasts[] = {Contrast::log, Contrast::linear, Contrast::inverse};

    rep.rows = detail::run_cells(cfg, [&](const detail::Cell& c, std::vector<io::ReportRow>& out) {
        const std::size_t k = cell_index.at({c.N, c.seed});
        const auto start = std::chrono::steady_clock::now();
        const auto ds = simulate_dataset(cfg.model, cfg.truth, c.N, c.seed);
        const auto fit = fit_npml(ds, cfg.box, cfg.initial_grid, cfg.fit_options);
        converged[k] = fit.status == FitStatus::converged;
        if (observe) {
            std::lock_guard lock(observe_mutex);
            observe(ds, fit);
        }
        const auto& mu = fit.discrete();
        const auto km = build_kernel_matrix(ds, mu);
        const std::size_t m = mu.size();

        for (auto ct : contrasts) self_zero[k] = self_zero[k] && contrast_value(km, mu.weights(), mu.weights(), ct) == 0.0;
        auto rng = Rng::substream(c.seed, StreamTag::experiment, c.N);
        double maxima[3] = {-HUGE_VAL, -HUGE_VAL, -HUGE_VAL};
        for (std::size_t r = 0; r < cfg.competitors; ++r) {
            std::vector<double> w(m);
            double total = 0.0;
            for (auto& x : w) total += (x = -std::log(rng.uniform()));
            for (auto& x : w) x /= total;
            bool below[3];
            for (int q = 0; q < 3; ++q) {
                const double v = contrast_value(km, w, mu.weights(), contrasts[q]);
                maxima[q] = std::max(maxima[q], v);
                below[q] = v <= tol;
            }
            signs_agree[k] = signs_agree[k] && below[0] == below[1] && below[1] == below[2];
        }
        const double ms = detail::wall_ms_since(start);
        for (int q = 0; q < 3; ++q) {
            auto row = detail::npml_row(cfg.kind, contrast_name(contrasts[q]), c.N, c.seed, fit, cfg.truth, ms);
            row.value = maxima[q];
            out.push_back(row);
        }
    });
    detail::record_convergence(rep, converged);

    double worst = -HUGE_VAL;
    for (const auto& r : rep.rows) worst = std::max(worst, r.value);
    rep.checks.push_back({"contrast maxima <= refine_tol", worst <= tol, "max " + detail::fmt(worst)});
    rep.checks.push_back({"contrast at the fit itself is 0",
                          std::all_of(self_zero.begin(), self_zero.end(), [](char v) { return v; }), ""});
    rep.checks.push_back({"contrasts agree on every comparison",
                          std::all_of(signs_agree.begin(), signs_agree.end(), [](char v) { return v; }), ""});
    return rep;
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const FitObserver& observe = {}) {
    switch (cfg.kind) {
    case ExperimentKind::consistency: return run_consistency(cfg, observe);
    case ExperimentKind::sieve: return run_sieve(cfg, observe);
    case ExperimentKind::censoring: return run_censoring(cfg, observe);
    default: return run_contrast(cfg, observe);
    }
}

/// Dataset for the simulate command: first N and seed of the config, censored
/// when a design is present.
inline Dataset simulate_from_config(const ExperimentConfig& cfg) {
    auto ds = simulate_dataset(cfg.model, cfg.truth, cfg.N(), cfg.seed());
    if (cfg.censoring) ds = apply_censoring(ds, *cfg.censoring, cfg.seed());
    return ds;
}

} // namespace npml
