#pragma once

#include "npml/experiments.hpp"
#include "npml/io.hpp"
#include "npml/solver.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace npml::cli {

enum ExitCode : int { ok = 0, input_error = 1, not_converged = 2 };

struct FitCommand {
    std::string data;
    std::string method = "npml";
    std::string box;
    std::size_t grid = 10;
    std::optional<std::size_t> sieve_m;
    std::string out;
    std::string init;       // previous fit whose measure seeds the NPML run
    bool trace = false;
    FitOptions options;
};

struct CertifyCommand {
    std::string data;
    std::string fit;
    std::size_t resolution = 64;
    double tol = 1e-6;
    std::size_t quad_points = 8;
};

inline int cmd_simulate(const std::string& config_path, const std::string& out, std::ostream& log) {
    const auto cfg = config_from_json(io::read_json_file(config_path));
    const auto ds = simulate_from_config(cfg);
    io::write_json_file(out, io::dataset_to_json(ds));
    log << "N=" << ds.size() << " n=" << ds.spec.n << " p=" << ds.spec.p << " seed=" << ds.seed
        << (ds.censored() ? " censored" : "") << "\n";
    return ok;
}

inline int cmd_fit(const FitCommand& c, std::ostream& log) {
    c.options.validate();
    const auto ds = io::dataset_from_json(io::read_json_file(c.data));
    const Box box = io::parse_box(c.box);
    require(box.size() == ds.spec.p, "--box must have p axes");
    require(c.grid >= 1, "--grid must be >= 1");

    FitResult fit;
    if (c.method == "npml") {
        if (!c.init.empty()) {
            const auto prev = io::fit_from_json(io::read_json_file(c.init));
            fit = fit_npml(ds, box, prev.as_measure(), c.options);
        } else {
            fit = fit_npml(ds, box, std::vector<std::size_t>(ds.spec.p, c.grid), c.options);
        }
    } else if (c.method == "sieve") {
        for (const auto& iv : box) require(iv.lo < iv.hi, "sieve box intervals must have positive length");
        fit = fit_sieve(ds, SieveBasis::uniform_cells(box, c.sieve_m.value_or(c.grid)), c.options);
    } else {
        throw InvalidArgument("--method must be npml or sieve");
    }
    io::write_json_file(c.out, io::fit_to_json(fit, c.trace));
    log << "method=" << c.method << " status=" << status_name(fit.status) << " loglik=" << io::format_double(fit.final_loglik)
        << " atoms=" << fit.as_measure().size() << " sup_d=" << io::format_double(fit.certificate.sup_dir_derivative)
        << " iterations=" << fit.iterations << "\n";
    const bool good = fit.status == FitStatus::converged && fit.certificate.optimal(c.options.refine_tol);
    return good ? ok : not_converged;
}

inline int cmd_certify(const CertifyCommand& c, std::ostream& log) {
    require(c.resolution >= 1, "--resolution must be >= 1");
    const auto ds = io::dataset_from_json(io::read_json_file(c.data));
    const auto fit = io::fit_from_json(io::read_json_file(c.fit));
    require(fit.box.size() == ds.spec.p, "fit box dimension must equal p");
    const auto cert = fit.is_sieve() ? certify(ds, fit.sieve(), c.resolution, c.quad_points)
                                     : certify(ds, fit.discrete(), fit.box, c.resolution);
    log << "sup_d=" << io::format_double(cert.sup_dir_derivative) << " argmax=";
    for (std::size_t a = 0; a < cert.argmax_point.size(); ++a)
        log << (a ? "," : "") << io::format_double(cert.argmax_point[a]);
    const bool good = cert.optimal(c.tol);
    log << " resolution=" << c.resolution << " " << (good ? "optimal" : "not-optimal") << "\n";
    return good ? ok : not_converged;
}

inline std::string gnuplot_path(const std::string& csv) {
    const auto dot = csv.rfind('.');
    const auto slash = csv.find_last_of('/');
    const bool has_ext = dot != std::string::npos && (slash == std::string::npos || dot > slash);
    return (has_ext ? csv.substr(0, dot) : csv) + ".gp";
}

inline int cmd_experiment(const std::string& config_path, std::string out, bool emit_gnuplot, std::ostream& log) {
    const auto cfg = config_from_json(io::read_json_file(config_path));
    if (out.empty()) out = cfg.output;
    require(!out.empty(), "--out is required (or set \"output\" in the config)");
    const auto rep = run_experiment(cfg);
    io::write_text_file(out, io::format_report(rep.rows));
    if (emit_gnuplot) io::write_text_file(gnuplot_path(out), io::gnuplot_script(out, experiment_name(cfg.kind)));
    log << experiment_name(cfg.kind) << ": " << rep.rows.size() << " rows -> " << out << "\n";
    for (const auto& ch : rep.checks)
        log << (ch.passed ? "  ok   " : "  FAIL ") << ch.name << (ch.detail.empty() ? "" : ": " + ch.detail) << "\n";
    if (!rep.all_converged) log << "  some fits did not converge\n";
    return rep.passed() && rep.all_converged ? ok : not_converged;
}

inline void add_fit_options(CLI::App& app, FitOptions& o) {
    app.add_option("--tol", o.tol_rel_loglik, "relative log-likelihood tolerance for EM");
    app.add_option("--max-iters", o.max_em_iters, "EM iteration cap");
    app.add_option("--prune-eps", o.prune_eps, "weight below which atoms are dropped");
    app.add_option("--refine-grid", o.refine_grid, "candidate grid nodes per axis for support refinement");
    app.add_option("--refine-tol", o.refine_tol, "certificate tolerance");
    app.add_option("--max-refinements", o.max_refinements, "support refinement cap");
    app.add_option("--quad-points", o.quad_points, "Gauss-Legendre points per sieve cell and axis");
}

/// Parses argv and dispatches; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Nonparametric maximum likelihood for mixed-effects models"};
    app.require_subcommand(1);

    std::string sim_config, sim_out;
    auto* sim = app.add_subcommand("simulate", "simulate a dataset from a config");
    sim->add_option("--config", sim_config, "config JSON")->required();
    sim->add_option("--out", sim_out, "dataset JSON to write")->required();

    FitCommand fit;
    auto* fit_cmd = app.add_subcommand("fit", "fit a mixing measure");
    fit_cmd->add_option("--data", fit.data, "dataset JSON")->required();
    fit_cmd->add_option("--method", fit.method, "npml or sieve")->check(CLI::IsMember({"npml", "sieve"}));
    fit_cmd->add_option("--box", fit.box, "parameter box \"lo,hi;lo,hi\"")->required();
    fit_cmd->add_option("--grid", fit.grid, "initial grid nodes per axis (npml); default cells for sieve");
    fit_cmd->add_option("--sieve-m", fit.sieve_m, "sieve cells per axis");
    fit_cmd->add_option("--out", fit.out, "fit JSON to write")->required();
    fit_cmd->add_option("--init", fit.init, "start the NPML run from this fit's measure");
    fit_cmd->add_flag("--trace", fit.trace, "store the log-likelihood trace");
    add_fit_options(*fit_cmd, fit.options);

    CertifyCommand cert;
    auto* cert_cmd = app.add_subcommand("certify", "evaluate the optimality certificate of a fit");
    cert_cmd->add_option("--data", cert.data, "dataset JSON")->required();
    cert_cmd->add_option("--fit", cert.fit, "fit JSON")->required();
    cert_cmd->add_option("--resolution", cert.resolution, "grid nodes per axis")->required();
    cert_cmd->add_option("--tol", cert.tol, "certificate tolerance");
    cert_cmd->add_option("--quad-points", cert.quad_points, "quadrature points for sieve fits");

    std::string exp_config, exp_out;
    bool emit_gnuplot = false;
    auto* exp = app.add_subcommand("experiment", "run a scripted experiment and write a CSV report");
    exp->add_option("--config", exp_config, "config JSON")->required();
    exp->add_option("--out", exp_out, "CSV report to write");
    exp->add_flag("--emit-gnuplot", emit_gnuplot, "also write a gnuplot script next to the CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? ok : input_error;
    }

    try {
        if (*sim) return cmd_simulate(sim_config, sim_out, out);
        if (*fit_cmd) return cmd_fit(fit, out);
        if (*cert_cmd) return cmd_certify(cert, out);
        return cmd_experiment(exp_config, exp_out, emit_gnuplot, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return input_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return input_error;
    }
}

} // namespace npml::cli
