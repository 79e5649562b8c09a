#include "test_helpers.hpp"
#include "npml/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace npml;
using namespace npml::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("npml_io_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string scratch(const std::string& name) { return (scratch_dir() / name).string(); }

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(NPML_CLI_PATH) + " " + args + " > " + scratch("cli.log") + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const MixingMeasure two_point({{1.0, 0.3}, {2.0, 0.8}}, {0.5, 0.5});

std::string pk_config(std::size_t N, std::uint64_t seed, const std::string& extra = "") {
    return R"({"model": {"p": 2, "n": 4, "sigma": 0.2, "f_kind": "pk_exp",
                "time_design": [[0,1],[1,2],[2,3],[3,4]]},
               "truth": {"atoms": [[1,0.3],[2,0.8]], "weights": [0.5,0.5]},
               "box": [[0.5,2.5],[0,1.2]], "initial_grid": 6,
               "N": )" + std::to_string(N) + R"(, "seed": )" + std::to_string(seed) + extra + "}";
}

} // namespace

TEST(Io, DatasetRoundTripUncensored) {
    auto spec = pk_spec();
    spec.g = CoLinearScale{0.1};
    spec.noise = NoiseKind::laplace;
    const auto ds = simulate_dataset(spec, two_point, 25, 3);
    const auto back = io::dataset_from_json(io::json::parse(io::dataset_to_json(ds).dump()));
    EXPECT_EQ(back.spec.p, 2u);
    EXPECT_EQ(back.spec.noise, NoiseKind::laplace);
    ASSERT_TRUE(back.spec.g.has_value());
    EXPECT_EQ(back.spec.g->sigma_prime, 0.1);
    EXPECT_EQ(back.seed, 3u);
    ASSERT_TRUE(back.truth.has_value());
    EXPECT_EQ(*back.truth, two_point);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.uncensored()[i].y, ds.uncensored()[i].y);
        EXPECT_EQ(back.uncensored()[i].t, ds.uncensored()[i].t);
    }
}

TEST(Io, DatasetRoundTripCensored) {
    const auto spec = pk_spec();
    const auto ds = simulate_dataset(spec, two_point, 40, 5);
    CensoringDesign design;
    design.masks = {{CensorMask({1, 3}, 4), 0.5}, {CensorMask::full(4), 0.3}, {CensorMask::empty(), 0.2}};
    const auto cens = apply_censoring(ds, design, 5);
    const auto back = io::dataset_from_json(io::json::parse(io::dataset_to_json(cens).dump()));
    ASSERT_TRUE(back.censored());
    for (std::size_t i = 0; i < cens.size(); ++i) {
        EXPECT_EQ(back.censored_observations()[i].z, cens.censored_observations()[i].z);
        EXPECT_EQ(back.censored_observations()[i].mask, cens.censored_observations()[i].mask);
    }
}

TEST(Io, LinearModelRoundTrip) {
    ModelSpec spec = identity_spec(0.5, 3);
    spec.p = 2;
    spec.function = LinearInS{1, {{1.0, 0.0}, {0.0, 2.0}}};
    io::json j;
    io::write_model(j, spec);
    const auto back = io::read_model(j);
    const auto& lin = std::get<LinearInS>(back.function);
    EXPECT_EQ(lin.degree, 1u);
    EXPECT_EQ(lin.coefficients, (std::vector<std::vector<double>>{{1.0, 0.0}, {0.0, 2.0}}));
}

TEST(Io, ModelErrors) {
    io::json j;
    io::write_model(j, pk_spec());
    auto bad = j;
    bad["f_kind"] = "spline";
    EXPECT_THROW(io::read_model(bad), InvalidArgument);
    bad = j;
    bad.erase("sigma");
    EXPECT_THROW(io::read_model(bad), InvalidArgument);
    bad = j;
    bad["sigma"] = "wide";
    EXPECT_THROW(io::read_model(bad), InvalidArgument);
    bad = j;
    bad["time_design"] = {{0.0, 1.0}};
    EXPECT_THROW(io::read_model(bad), InvalidArgument);
}

TEST(Io, MeasureRoundTripIsExact) {
    Rng rng(17);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t m = 1 + rep % 7;
        std::vector<Point> atoms;
        for (std::size_t j = 0; j < m; ++j) atoms.push_back({rng.uniform(-1e3, 1e3), rng.uniform(0, 1e-9)});
        const MixingMeasure mu(atoms, random_simplex(rng, m));
        EXPECT_EQ(io::measure_from_json(io::json::parse(io::measure_to_json(mu).dump())), mu);
    }
}

TEST(Io, FitRoundTrip) {
    const auto ds = simulate_dataset(pk_spec(), two_point, 30, 2);
    FitOptions opts;
    opts.refine_grid = 12;
    const Box box{{0.5, 2.5}, {0.0, 1.2}};
    const auto fit = fit_npml(ds, box, std::vector<std::size_t>{4, 4}, opts);
    const auto back = io::fit_from_json(io::json::parse(io::fit_to_json(fit, true).dump()));
    EXPECT_EQ(back.discrete(), fit.discrete());
    EXPECT_EQ(back.final_loglik, fit.final_loglik);
    EXPECT_EQ(back.loglik_trace, fit.loglik_trace);
    EXPECT_EQ(back.status, fit.status);
    EXPECT_EQ(back.certificate.sup_dir_derivative, fit.certificate.sup_dir_derivative);
    EXPECT_EQ(back.certificate.argmax_point, fit.certificate.argmax_point);

    const auto sieve = fit_sieve(ds, SieveBasis(box, {2, 3}), opts);
    const auto sback = io::fit_from_json(io::json::parse(io::fit_to_json(sieve, false).dump()));
    ASSERT_TRUE(sback.is_sieve());
    EXPECT_EQ(sback.sieve().coefficients, sieve.sieve().coefficients);
    EXPECT_EQ(sback.sieve().basis.cells(), (std::vector<std::size_t>{2, 3}));
    EXPECT_TRUE(sback.loglik_trace.empty());
}

TEST(Io, ParseBox) {
    const auto box = io::parse_box("0.5,2.5;0,1.2");
    ASSERT_EQ(box.size(), 2u);
    EXPECT_EQ(box[0].lo, 0.5);
    EXPECT_EQ(box[1].hi, 1.2);
    EXPECT_THROW(io::parse_box(""), InvalidArgument);
    EXPECT_THROW(io::parse_box("1;2"), InvalidArgument);
    EXPECT_THROW(io::parse_box("a,b"), InvalidArgument);
    EXPECT_THROW(io::parse_box("2,1"), InvalidArgument);
}

TEST(Io, ReportRoundTripIsLossless) {
    Rng rng(4);
    std::vector<io::ReportRow> rows;
    for (int k = 0; k < 40; ++k) {
        io::ReportRow r;
        r.experiment = "sieve";
        r.variant = k % 2 ? "sieve" : "npml";
        r.N = 100 + k;
        r.m = k % 5;
        r.seed = 0xffffffffffffull * k;
        r.final_loglik = -rng.uniform(0, 50) * std::pow(10.0, rng.uniform(-20, 20));
        r.distance = rng.uniform() * 1e-300;
        r.atom_count = k;
        r.certificate_sup = 1.0 + rng.uniform() * 1e-7;
        r.value = k == 3 ? -0.0 : std::nextafter(1.0, 2.0);
        r.wall_ms = rng.uniform(0, 1e6);
        rows.push_back(r);
    }
    const auto text = io::format_report(rows);
    EXPECT_EQ(text.substr(0, text.find('\n')), io::report_version_line);
    EXPECT_EQ(io::parse_report(text), rows);
}

TEST(Io, ReportRejectsForeignHeaders) {
    EXPECT_THROW(io::parse_report("# npml-report v9\n"), InvalidArgument);
    EXPECT_THROW(io::parse_report(std::string(io::report_version_line) + "\na,b,c\n"), InvalidArgument);
    const std::string good = std::string(io::report_version_line) + "\n" + io::report_header + "\n";
    EXPECT_TRUE(io::parse_report(good).empty());
    EXPECT_THROW(io::parse_report(good + "x,y,1,2\n"), InvalidArgument);
    EXPECT_THROW(io::parse_report(good + "x,y,1,2,3,nan?,0,0,0,0,0\n"), InvalidArgument);
}

TEST(Io, GnuplotScriptReferencesCsv) {
    const auto s = io::gnuplot_script("out/report.csv", "sieve");
    EXPECT_NE(s.find("'out/report.csv'"), std::string::npos);
    EXPECT_EQ(cli::gnuplot_path("out/report.csv"), "out/report.gp");
    EXPECT_EQ(cli::gnuplot_path("dir.v1/report"), "dir.v1/report.gp");
}

// -- command line -----------------------------------------------------------

TEST(Cli, SimulateWritesNObservationsDeterministically) {
    spit(scratch("sim.json"), pk_config(37, 11));
    ASSERT_EQ(run_cli("simulate --config " + scratch("sim.json") + " --out " + scratch("d1.json")), 0);
    ASSERT_EQ(run_cli("simulate --config " + scratch("sim.json") + " --out " + scratch("d2.json")), 0);
    const auto text = slurp(scratch("d1.json"));
    EXPECT_EQ(text, slurp(scratch("d2.json")));
    const auto ds = io::dataset_from_json(io::json::parse(text));
    EXPECT_EQ(ds.size(), 37u);
    EXPECT_FALSE(ds.censored());
    EXPECT_NE(slurp(scratch("cli.log")).find("N=37"), std::string::npos);
}

TEST(Cli, SimulateWithCensoringCarriesMasks) {
    spit(scratch("simc.json"), pk_config(20, 2, R"(, "censoring": [{"mask": [1,2], "p": 0.6}, {"mask": [1,2,3,4], "p": 0.4}])"));
    ASSERT_EQ(run_cli("simulate --config " + scratch("simc.json") + " --out " + scratch("dc.json")), 0);
    const auto ds = io::dataset_from_json(io::read_json_file(scratch("dc.json")));
    ASSERT_TRUE(ds.censored());
    for (const auto& o : ds.censored_observations()) EXPECT_TRUE(o.mask.size() == 2 || o.mask.size() == 4);
}

TEST(Cli, BadInputsExitOne) {
    spit(scratch("broken.json"), "{ not json");
    EXPECT_EQ(run_cli("simulate --config " + scratch("broken.json") + " --out " + scratch("x.json")), 1);
    EXPECT_EQ(run_cli("simulate --config " + scratch("missing.json") + " --out " + scratch("x.json")), 1);
    spit(scratch("nosigma.json"), R"({"model": {"p": 1, "n": 1, "f_kind": "identity_location", "time_design": [[0,1]]}})");
    EXPECT_EQ(run_cli("simulate --config " + scratch("nosigma.json") + " --out " + scratch("x.json")), 1);
    EXPECT_EQ(run_cli("fit --data " + scratch("broken.json") + " --box 0,1 --out " + scratch("x.json")), 1);
    EXPECT_EQ(run_cli("fit --method simplex --data a --box 0,1 --out b"), 1);
    EXPECT_EQ(run_cli("frobnicate"), 1);
    EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, SingleObservationFitConcentrates) {
    const double y = 0.3;
    spit(scratch("toy.json"), R"({"p": 1, "n": 1, "sigma": 1, "f_kind": "identity_location", "time_design": [[0,1]],
                                  "seed": 0, "observations": [{"y": [0.3], "t": [0.5]}]})");
    ASSERT_EQ(run_cli("fit --data " + scratch("toy.json") + " --method npml --box=-2,2 --grid 5 --out " + scratch("toyfit.json")), 0);
    const auto fit = io::fit_from_json(io::read_json_file(scratch("toyfit.json")));
    ASSERT_EQ(fit.discrete().size(), 1u);
    EXPECT_EQ(fit.discrete().weights()[0], 1.0);

    // oracle: the candidate node closest to y maximizes the single Gaussian density
    std::vector<double> nodes{-2, -1, 0, 1, 2};
    for (int k = 0; k < 64; ++k) nodes.push_back(-2.0 + 4.0 * k / 63.0);
    double best = nodes[0];
    for (double v : nodes)
        if (std::abs(v - y) < std::abs(best - y)) best = v;
    EXPECT_DOUBLE_EQ(fit.discrete().atoms()[0][0], best);
    EXPECT_NEAR(fit.final_loglik, -0.5 * std::log(2 * std::numbers::pi) - 0.5 * (best - y) * (best - y), 1e-12);
    EXPECT_LE(fit.certificate.sup_dir_derivative, 1.0 + 1e-12);
}

TEST(Cli, SieveWithOneCellIsUniform) {
    spit(scratch("s.json"), pk_config(15, 4));
    ASSERT_EQ(run_cli("simulate --config " + scratch("s.json") + " --out " + scratch("sd.json")), 0);
    ASSERT_EQ(run_cli("fit --data " + scratch("sd.json") + " --method sieve --box \"0.5,2.5;0,1.2\" --sieve-m 1 --out " +
                      scratch("sf.json")), 0);
    const auto fit = io::fit_from_json(io::read_json_file(scratch("sf.json")));
    ASSERT_TRUE(fit.is_sieve());
    EXPECT_EQ(fit.sieve().coefficients, (std::vector<double>{1.0}));
}

TEST(Cli, RefitFromOwnOutputKeepsLoglik) {
    spit(scratch("r.json"), pk_config(60, 8));
    ASSERT_EQ(run_cli("simulate --config " + scratch("r.json") + " --out " + scratch("rd.json")), 0);
    const std::string common = "fit --data " + scratch("rd.json") + " --box \"0.5,2.5;0,1.2\" --grid 5 --refine-grid 20";
    ASSERT_EQ(run_cli(common + " --out " + scratch("rf1.json")), 0);
    ASSERT_EQ(run_cli(common + " --init " + scratch("rf1.json") + " --out " + scratch("rf2.json")), 0);
    const auto a = io::fit_from_json(io::read_json_file(scratch("rf1.json")));
    const auto b = io::fit_from_json(io::read_json_file(scratch("rf2.json")));
    EXPECT_NEAR(a.final_loglik, b.final_loglik, 1e-12);

    ASSERT_EQ(run_cli("certify --data " + scratch("rd.json") + " --fit " + scratch("rf1.json") + " --resolution 20"), 0);
    const auto log = slurp(scratch("cli.log"));
    EXPECT_NE(log.find("optimal"), std::string::npos);

    // an iteration cap that cannot be met is reported as non-converged
    EXPECT_EQ(run_cli(common + " --max-iters 1 --max-refinements 0 --out " + scratch("rf3.json")), 2);
}

TEST(Cli, ExperimentWritesParseableReport) {
    spit(scratch("e.json"), R"({"experiment": "consistency",
        "model": {"p": 1, "n": 2, "sigma": 0.5, "f_kind": "identity_location", "time_design": [[0,1],[1,2]]},
        "truth": {"atoms": [[-1],[1]], "weights": [0.5,0.5]}, "box": [[-3,3]], "initial_grid": 8,
        "n_schedule": [30, 300], "seeds": [1, 2, 3], "fit_options": {"refine_grid": 40}})");
    const std::string csv = scratch("e.csv");
    const int code = run_cli("experiment --config " + scratch("e.json") + " --out " + csv + " --emit-gnuplot");
    EXPECT_TRUE(code == 0 || code == 2);
    const auto rows = io::parse_report(slurp(csv));
    EXPECT_EQ(rows.size(), 6u);
    EXPECT_TRUE(fs::exists(scratch("e.gp")));
    const std::string first = slurp(csv);
    run_cli("experiment --config " + scratch("e.json") + " --out " + csv);
    auto again = io::parse_report(slurp(csv));
    auto before = io::parse_report(first);
    for (auto* v : {&again, &before})
        for (auto& r : *v) r.wall_ms = 0;
    EXPECT_EQ(again, before);
}
