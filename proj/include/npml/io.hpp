#pragma once

#include "npml/data.hpp"
#include "npml/error.hpp"
#include "npml/measures.hpp"
#include "npml/model.hpp"
#include "npml/solver.hpp"

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace npml::io {

using nlohmann::json;

inline constexpr int dataset_format_version = 1;
inline constexpr int fit_format_version = 1;

namespace detail {

template <class T>
T get(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw InvalidArgument(std::string("missing field \"") + key + "\"");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("field \"") + key + "\": " + e.what());
    }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    return get<T>(j, key);
}

} // namespace detail

// -- geometry ---------------------------------------------------------------

inline json intervals_to_json(const std::vector<Interval>& ivs) {
    json out = json::array();
    for (const auto& iv : ivs) out.push_back({iv.lo, iv.hi});
    return out;
}

inline std::vector<Interval> intervals_from_json(const json& j) {
    if (!j.is_array()) throw InvalidArgument("intervals must be an array of [lo, hi] pairs");
    std::vector<Interval> out;
    for (const auto& e : j) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number())
            throw InvalidArgument("each interval must be a [lo, hi] pair of numbers");
        out.push_back({e[0].get<double>(), e[1].get<double>()});
    }
    return out;
}

/// Parses "lo,hi;lo,hi".
inline Box parse_box(const std::string& text) {
    Box box;
    std::stringstream axes(text);
    std::string axis;
    while (std::getline(axes, axis, ';')) {
        const auto comma = axis.find(',');
        if (comma == std::string::npos) throw InvalidArgument("box axis \"" + axis + "\" must be lo,hi");
        try {
            std::size_t used = 0;
            const double lo = std::stod(axis.substr(0, comma), &used);
            const double hi = std::stod(axis.substr(comma + 1));
            box.push_back({lo, hi});
        } catch (const std::exception&) {
            throw InvalidArgument("box axis \"" + axis + "\" is not numeric");
        }
    }
    if (box.empty()) throw InvalidArgument("box must have at least one axis");
    for (const auto& iv : box)
        if (!(iv.lo <= iv.hi)) throw InvalidArgument("box axis must satisfy lo <= hi");
    return box;
}

// -- model ------------------------------------------------------------------

/// Writes the model header fields into `out`.
inline void write_model(json& out, const ModelSpec& spec) {
    out["p"] = spec.p;
    out["n"] = spec.n;
    out["sigma"] = spec.sigma;
    out["f_kind"] = function_name(spec.function);
    if (const auto* lin = std::get_if<LinearInS>(&spec.function))
        out["f_params"] = {{"degree", lin->degree}, {"coefficients", lin->coefficients}};
    else
        out["f_params"] = json::object();
    if (spec.g) out["g"] = {{"kind", "colinear"}, {"sigma_prime", spec.g->sigma_prime}};
    out["noise"] = spec.noise == NoiseKind::laplace ? "laplace" : "gaussian";
    out["time_design"] = intervals_to_json(spec.time_design.intervals);
}

inline ModelSpec read_model(const json& j) {
    ModelSpec spec;
    spec.p = detail::get<std::size_t>(j, "p");
    spec.n = detail::get<std::size_t>(j, "n");
    spec.sigma = detail::get<double>(j, "sigma");
    const auto kind = detail::get<std::string>(j, "f_kind");
    if (kind == "pk_exp") {
        spec.function = PkExp{};
    } else if (kind == "identity_location") {
        spec.function = IdentityLocation{};
    } else if (kind == "linear_in_s") {
        const json params = j.value("f_params", json::object());
        if (params.contains("coefficients")) {
            LinearInS lin;
            lin.degree = detail::get<std::size_t>(params, "degree");
            lin.coefficients = detail::get<std::vector<std::vector<double>>>(params, "coefficients");
            spec.function = lin;
        } else {
            spec.function = LinearInS::monomial(spec.p);
        }
    } else {
        throw InvalidArgument("unknown f_kind \"" + kind + "\"");
    }
    if (j.contains("g") && !j.at("g").is_null()) {
        const auto& g = j.at("g");
        if (detail::get_or<std::string>(g, "kind", "colinear") != "colinear")
            throw InvalidArgument("only the colinear g is supported");
        spec.g = CoLinearScale{detail::get<double>(g, "sigma_prime")};
    }
    const auto noise = detail::get_or<std::string>(j, "noise", "gaussian");
    if (noise == "laplace")
        spec.noise = NoiseKind::laplace;
    else if (noise != "gaussian")
        throw InvalidArgument("unknown noise \"" + noise + "\"");
    spec.time_design.intervals = intervals_from_json(detail::get<json>(j, "time_design"));
    spec.validate();
    return spec;
}

// -- measures ---------------------------------------------------------------

inline json measure_to_json(const MixingMeasure& mu) {
    return {{"atoms", mu.atoms()}, {"weights", mu.weights()}};
}

inline MixingMeasure measure_from_json(const json& j) {
    auto atoms = detail::get<std::vector<Point>>(j, "atoms");
    auto weights = detail::get<std::vector<double>>(j, "weights");
    return MixingMeasure(std::move(atoms), std::move(weights));
}

inline json mask_to_json(const CensorMask& mask) { return mask.indices(); }

inline CensorMask mask_from_json(const json& j, std::size_t n) {
    try {
        return CensorMask(j.get<std::vector<std::size_t>>(), n);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("mask: ") + e.what());
    }
}

inline CensoringDesign design_from_json(const json& j, std::size_t n) {
    if (!j.is_array()) throw InvalidArgument("censoring design must be an array of {mask, p}");
    CensoringDesign design;
    for (const auto& e : j) design.masks.push_back({mask_from_json(detail::get<json>(e, "mask"), n), detail::get<double>(e, "p")});
    design.validate(n);
    return design;
}

// -- datasets ---------------------------------------------------------------

inline json dataset_to_json(const Dataset& ds) {
    json out;
    out["format"] = "npml-dataset";
    out["version"] = dataset_format_version;
    write_model(out, ds.spec);
    out["seed"] = ds.seed;
    json obs = json::array();
    if (ds.censored()) {
        for (const auto& o : ds.censored_observations()) obs.push_back({{"y", o.z}, {"t", o.t}, {"mask", mask_to_json(o.mask)}});
    } else {
        for (const auto& o : ds.uncensored()) obs.push_back({{"y", o.y}, {"t", o.t}});
    }
    out["observations"] = std::move(obs);
    if (ds.truth) out["truth"] = measure_to_json(*ds.truth);
    return out;
}

inline Dataset dataset_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("dataset must be a JSON object");
    Dataset ds;
    ds.spec = read_model(j);
    ds.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
    const auto obs = detail::get<json>(j, "observations");
    if (!obs.is_array() || obs.empty()) throw InvalidArgument("observations must be a nonempty array");
    const bool censored = obs.front().contains("mask");
    if (censored) {
        std::vector<CensoredObservation> list;
        for (const auto& o : obs) {
            if (!o.contains("mask")) throw InvalidArgument("observations must all be censored or all uncensored");
            list.push_back({detail::get<std::vector<double>>(o, "y"), detail::get<std::vector<double>>(o, "t"),
                            mask_from_json(o.at("mask"), ds.spec.n)});
        }
        ds.observations = std::move(list);
    } else {
        std::vector<Observation> list;
        for (const auto& o : obs) {
            if (o.contains("mask")) throw InvalidArgument("observations must all be censored or all uncensored");
            list.push_back({detail::get<std::vector<double>>(o, "y"), detail::get<std::vector<double>>(o, "t")});
        }
        ds.observations = std::move(list);
    }
    if (j.contains("truth") && !j.at("truth").is_null()) ds.truth = measure_from_json(j.at("truth"));
    ds.validate();
    return ds;
}

// -- options and fits -------------------------------------------------------

inline FitOptions options_from_json(const json& j) {
    FitOptions o;
    if (j.is_null()) return o;
    if (!j.is_object()) throw InvalidArgument("fit_options must be an object");
    o.tol_rel_loglik = detail::get_or(j, "tol_rel_loglik", o.tol_rel_loglik);
    o.max_em_iters = detail::get_or(j, "max_em_iters", o.max_em_iters);
    o.prune_eps = detail::get_or(j, "prune_eps", o.prune_eps);
    o.refine_grid = detail::get_or(j, "refine_grid", o.refine_grid);
    o.refine_tol = detail::get_or(j, "refine_tol", o.refine_tol);
    o.max_refinements = detail::get_or(j, "max_refinements", o.max_refinements);
    o.quad_points = detail::get_or(j, "quad_points", o.quad_points);
    o.polish_tol = detail::get_or(j, "polish_tol", o.polish_tol);
    o.max_polish_iters = detail::get_or(j, "max_polish_iters", o.max_polish_iters);
    o.validate();
    return o;
}

inline json options_to_json(const FitOptions& o) {
    return {{"tol_rel_loglik", o.tol_rel_loglik}, {"max_em_iters", o.max_em_iters}, {"prune_eps", o.prune_eps},
            {"refine_grid", o.refine_grid},       {"refine_tol", o.refine_tol},     {"max_refinements", o.max_refinements},
            {"quad_points", o.quad_points},       {"polish_tol", o.polish_tol},     {"max_polish_iters", o.max_polish_iters}};
}

inline json certificate_to_json(const Certificate& c) {
    return {{"sup", c.sup_dir_derivative}, {"argmax", c.argmax_point}, {"grid_resolution", c.grid_resolution}};
}

inline Certificate certificate_from_json(const json& j) {
    Certificate c;
    c.sup_dir_derivative = detail::get<double>(j, "sup");
    c.argmax_point = detail::get<Point>(j, "argmax");
    c.grid_resolution = detail::get<std::size_t>(j, "grid_resolution");
    return c;
}

inline json fit_to_json(const FitResult& fit, bool include_trace) {
    json out;
    out["format"] = "npml-fit";
    out["version"] = fit_format_version;
    out["method"] = fit.is_sieve() ? "sieve" : "npml";
    json measure = measure_to_json(fit.as_measure());
    if (fit.is_sieve()) {
        const auto& s = fit.sieve();
        measure["sieve"] = {{"box", intervals_to_json(s.basis.box())}, {"cells", s.basis.cells()}, {"coefficients", s.coefficients}};
    }
    out["measure"] = std::move(measure);
    out["box"] = intervals_to_json(fit.box);
    out["final_loglik"] = fit.final_loglik;
    out["iterations"] = fit.iterations;
    out["refinements"] = fit.refinements;
    out["status"] = status_name(fit.status);
    out["certificate"] = certificate_to_json(fit.certificate);
    if (include_trace) out["loglik_trace"] = fit.loglik_trace;
    return out;
}

inline FitResult fit_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("fit must be a JSON object");
    FitResult fit;
    const auto method = detail::get<std::string>(j, "method");
    const auto measure = detail::get<json>(j, "measure");
    if (method == "sieve") {
        const auto sieve = detail::get<json>(measure, "sieve");
        SieveBasis basis(intervals_from_json(detail::get<json>(sieve, "box")), detail::get<std::vector<std::size_t>>(sieve, "cells"));
        fit.measure = SieveDensity(std::move(basis), detail::get<std::vector<double>>(sieve, "coefficients"));
    } else if (method == "npml") {
        fit.measure = measure_from_json(measure);
    } else {
        throw InvalidArgument("unknown fit method \"" + method + "\"");
    }
    fit.box = intervals_from_json(detail::get<json>(j, "box"));
    fit.final_loglik = detail::get<double>(j, "final_loglik");
    fit.iterations = detail::get<std::size_t>(j, "iterations");
    fit.refinements = detail::get_or<std::size_t>(j, "refinements", 0);
    const auto status = detail::get<std::string>(j, "status");
    if (status != "converged" && status != "iter-limit") throw InvalidArgument("unknown status \"" + status + "\"");
    fit.status = status == "converged" ? FitStatus::converged : FitStatus::iter_limit;
    fit.certificate = certificate_from_json(detail::get<json>(j, "certificate"));
    fit.loglik_trace = detail::get_or<std::vector<double>>(j, "loglik_trace", {});
    return fit;
}

// -- files ------------------------------------------------------------------

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open \"" + path + "\"");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InvalidArgument("\"" + path + "\" is not valid JSON: " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write \"" + path + "\"");
    out << text;
    if (!out) throw InvalidArgument("failed writing \"" + path + "\"");
}

inline void write_json_file(const std::string& path, const json& j) { write_text_file(path, j.dump(1) + "\n"); }

// -- CSV reports ------------------------------------------------------------

inline constexpr const char* report_version_line = "# npml-report v1";
inline constexpr const char* report_header =
    "experiment,variant,N,m,seed,final_loglik,distance,atom_count,certificate_sup,value,wall_ms";

struct ReportRow {
    std::string experiment;
    std::string variant;  // experiment-specific label (sieve level, censoring arm, contrast)
    std::size_t N = 0;
    std::size_t m = 0;    // 0 when not applicable
    std::uint64_t seed = 0;
    double final_loglik = 0.0;
    double distance = 0.0;
    std::size_t atom_count = 0;
    double certificate_sup = 0.0;
    double value = 0.0;   // experiment-specific metric (sieve gap, contrast maximum)
    double wall_ms = 0.0;

    friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string format_row(const ReportRow& r) {
    std::string out = r.experiment + "," + r.variant + "," + std::to_string(r.N) + "," + std::to_string(r.m) + "," +
                      std::to_string(r.seed) + "," + format_double(r.final_loglik) + "," + format_double(r.distance) + "," +
                      std::to_string(r.atom_count) + "," + format_double(r.certificate_sup) + "," + format_double(r.value) +
                      "," + format_double(r.wall_ms);
    return out;
}

inline std::string format_report(const std::vector<ReportRow>& rows) {
    std::string out = std::string(report_version_line) + "\n" + report_header + "\n";
    for (const auto& r : rows) out += format_row(r) + "\n";
    return out;
}

inline std::vector<ReportRow> parse_report(const std::string& text) {
    std::vector<ReportRow> rows;
    std::stringstream in(text);
    std::string line;
    bool header_seen = false;
    auto to_double = [](const std::string& s) {
        double v = 0.0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw InvalidArgument("bad number \"" + s + "\" in report");
        return v;
    };
    auto to_uint = [](const std::string& s) {
        std::uint64_t v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw InvalidArgument("bad integer \"" + s + "\" in report");
        return v;
    };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.front() == '#') {
            if (line != report_version_line) throw InvalidArgument("unsupported report version line: " + line);
            continue;
        }
        if (!header_seen) {
            if (line != report_header) throw InvalidArgument("unexpected report header");
            header_seen = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream cells(line);
        std::string cell;
        while (std::getline(cells, cell, ',')) f.push_back(cell);
        if (f.size() != 11) throw InvalidArgument("report row must have 11 fields");
        ReportRow r;
        r.experiment = f[0];
        r.variant = f[1];
        r.N = to_uint(f[2]);
        r.m = to_uint(f[3]);
        r.seed = to_uint(f[4]);
        r.final_loglik = to_double(f[5]);
        r.distance = to_double(f[6]);
        r.atom_count = to_uint(f[7]);
        r.certificate_sup = to_double(f[8]);
        r.value = to_double(f[9]);
        r.wall_ms = to_double(f[10]);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::string gnuplot_script(const std::string& csv_path, const std::string& experiment) {
    std::string s = "# gnuplot script for " + csv_path + "\n";
    s += "set datafile separator ','\nset key autotitle columnhead\nset grid\n";
    if (experiment == "consistency" || experiment == "censoring") {
        s += "set logscale x\nset xlabel 'N'\nset ylabel 'marginal W1 distance to truth'\n";
        s += "plot '" + csv_path + "' every ::2 using 3:7 with points pt 7 title 'distance'\n";
    } else if (experiment == "sieve") {
        s += "set logscale xy\nset xlabel 'm (cells per axis)'\nset ylabel 'loglik gap to NPML'\n";
        s += "plot '" + csv_path + "' every ::2 using 4:10 with linespoints title 'gap'\n";
    } else {
        s += "set xlabel 'seed'\nset ylabel 'max contrast'\n";
        s += "plot '" + csv_path + "' every ::2 using 5:10 with points title 'max contrast'\n";
    }
    return s;
}

} // namespace npml::io
