#include "test_helpers.hpp"

#include <gtest/gtest.h>

using namespace npml;
using namespace npml::testing;

namespace {

const MixingMeasure two_point({{1.0, 0.3}, {2.0, 0.8}}, {0.5, 0.5});
const Box pk_box{{0.5, 2.5}, {0.0, 1.2}};

FitOptions quick_options() {
    FitOptions opts;
    opts.refine_grid = 22;
    return opts;
}

} // namespace

TEST(EmStep, Cases) {
    Rng rng(1);
    const auto single = random_kernel(rng, 10, 1);
    EXPECT_EQ(em_step(single, std::vector<double>{1.0}), (std::vector<double>{1.0}));

    std::vector<double> dup;
    for (int i = 0; i < 6; ++i) {
        const double v = rng.uniform(-3, 0);
        dup.push_back(v);
        dup.push_back(v);
    }
    const KernelMatrix twin(6, 2, dup);
    const auto same = em_step(twin, std::vector<double>{0.5, 0.5});
    EXPECT_NEAR(same[0], 0.5, 1e-15);
    EXPECT_NEAR(same[1], 0.5, 1e-15);

    const auto km = kernel_from_rows({{2.0, 1.0}});
    const auto next = em_step(km, std::vector<double>{0.5, 0.5});
    EXPECT_NEAR(next[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(next[1], 1.0 / 3.0, 1e-15);
}

TEST(EmStep, ZeroWeightsStayZero) {
    Rng rng(2);
    for (int k = 0; k < 50; ++k) {
        const auto km = random_kernel(rng, 20, 6, -30.0);
        auto w = random_simplex(rng, 6);
        w[k % 6] = 0.0;
        const auto next = em_step(km, renormalized(w));
        EXPECT_EQ(next[k % 6], 0.0);
    }
}

TEST(EmStep, UnderflowingRowsUseLogSpace) {
    // the only positive-weight column is 900 nats below the row maximum
    const KernelMatrix km(2, 2, {-1.0, -901.0, -2.0, -903.0});
    const auto next = em_step(km, std::vector<double>{0.0, 1.0});
    EXPECT_EQ(next[0], 0.0);
    EXPECT_NEAR(next[1], 1.0, 1e-15);
    const auto d = column_derivatives(km, std::vector<double>{0.0, 1.0});
    EXPECT_NEAR(d[1], 1.0, 1e-12);
    EXPECT_GT(d[0], 1e300);
}

TEST(EmFit, FixedPointTakesOneIteration) {
    Rng rng(3);
    const auto km = random_kernel(rng, 10, 1);
    const auto res = em_fit(km, std::vector<double>{1.0}, FitOptions{});
    EXPECT_EQ(res.iterations, 1u);
    EXPECT_EQ(res.status, FitStatus::converged);
}

TEST(EmFit, SingleObservationConcentrates) {
    const auto km = kernel_from_rows({{2.0, 1.0}});
    const auto res = em_fit(km, std::vector<double>{0.5, 0.5}, FitOptions{});
    EXPECT_GT(res.weights[0], 1.0 - 1e-6);
    EXPECT_NEAR(res.loglik_trace.back(), std::log(2.0), 1e-6);
}

TEST(EmFit, MonotoneOnRandomInstances) {
    Rng rng(4);
    FitOptions opts;
    opts.max_em_iters = 300;
    for (int k = 0; k < 100; ++k) {
        const auto km = random_kernel(rng, 5 + k, 2 + k % 10, -15.0);
        const auto res = em_fit(km, random_simplex(rng, km.cols()), opts);
        for (std::size_t t = 1; t < res.loglik_trace.size(); ++t)
            EXPECT_GE(res.loglik_trace[t] - res.loglik_trace[t - 1], -1e-12);
    }
}

TEST(EmFit, PermutationEquivariance) {
    Rng rng(5);
    const auto km = random_kernel(rng, 40, 5);
    const auto w0 = random_simplex(rng, 5);
    const std::vector<std::size_t> perm{2, 4, 0, 3, 1};
    std::vector<double> wp;
    for (auto j : perm) wp.push_back(w0[j]);
    FitOptions opts;
    opts.max_em_iters = 500;
    const auto a = em_fit(km, w0, opts);
    const auto b = em_fit(km.select_columns(perm), wp, opts);
    for (std::size_t c = 0; c < perm.size(); ++c) EXPECT_NEAR(b.weights[c], a.weights[perm[c]], 1e-12);
}

TEST(ExchangePolish, ReachesStationarity) {
    Rng rng(6);
    for (int k = 0; k < 20; ++k) {
        const auto km = random_kernel(rng, 30, 6, -4.0);
        auto w = random_simplex(rng, 6);
        const auto trace = exchange_polish(km, w, FitOptions{});
        for (std::size_t t = 1; t < trace.size(); ++t) EXPECT_GE(trace[t] - trace[t - 1], -1e-12);
        const auto d = column_derivatives(km, w);
        for (std::size_t j = 0; j < 6; ++j) {
            EXPECT_LE(d[j], 1.0 + 1e-9);
            if (w[j] > 1e-8) {
                EXPECT_NEAR(d[j], 1.0, 1e-9);
            }
        }
    }
}

TEST(ExchangePolish, NewtonStepMonotoneOnSimplex) {
    Rng rng(16);
    for (int k = 0; k < 20; ++k) {
        const auto km = random_kernel(rng, 80, 5, -3.0);
        detail::EmWorkspace ws(km);
        std::vector<double> w(5, 0.2);
        double current = ws.pass(w, nullptr, nullptr);
        for (int step = 0; step < 30; ++step) {
            if (!detail::newton_support_step(ws, w, current)) break;
            const double next = ws.pass(w, nullptr, nullptr);
            EXPECT_GT(next, current);
            current = next;
            double total = 0.0;
            for (double v : w) {
                EXPECT_GE(v, 0.0);
                total += v;
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
        // on the final face d_j is constant across the support, up to the
        // resolution at which L can still strictly increase
        const auto d = column_derivatives(km, w);
        double lo = HUGE_VAL, hi = -HUGE_VAL;
        for (std::size_t j = 0; j < 5; ++j)
            if (w[j] > 0.0) {
                lo = std::min(lo, d[j]);
                hi = std::max(hi, d[j]);
            }
        EXPECT_LT(hi - lo, 1e-7);
    }
}

TEST(DirectionalDerivative, Cases) {
    const auto spec = pk_spec(0.3, 3);
    const auto ds = simulate_dataset(spec, two_point, 60, 8);
    const Point s{1.3, 0.4};
    EXPECT_NEAR(directional_derivative(ds, MixingMeasure::dirac(s), s), 1.0, 1e-13);

    Rng rng(1);
    const MixingMeasure mu({{1.0, 0.3}, {2.0, 0.8}, {1.5, 0.1}}, random_simplex(rng, 3));
    double acc = 0.0;
    for (std::size_t j = 0; j < mu.size(); ++j) acc += mu.weights()[j] * directional_derivative(ds, mu, mu.atoms()[j]);
    EXPECT_NEAR(acc, 1.0, 1e-10);

    const auto km = kernel_from_rows({{2.0, 1.0}});
    EXPECT_NEAR(column_derivatives(km, std::vector<double>{0.5, 0.5})[0], 4.0 / 3.0, 1e-15);
}

TEST(DirectionalDerivative, FixedPointIdentityOnKernels) {
    Rng rng(7);
    for (int k = 0; k < 100; ++k) {
        const auto km = random_kernel(rng, 25, 7, -10.0);
        const auto w = random_simplex(rng, 7);
        const auto d = column_derivatives(km, w);
        double acc = 0.0;
        for (std::size_t j = 0; j < 7; ++j) acc += w[j] * d[j];
        EXPECT_NEAR(acc, 1.0, 1e-10);
    }
}

namespace {

// IdentityLocation, n = 1, sigma = 1, one observation y = 0.4: the NPML is the
// point mass at y.
Dataset single_observation() {
    Dataset ds;
    ds.spec = identity_spec(1.0, 1);
    ds.observations = std::vector<Observation>{{{0.4}, {0.5}}};
    return ds;
}

} // namespace

TEST(Certify, ConvergedSingleObservationFit) {
    const auto ds = single_observation();
    const Box box{{-1.0, 1.0}};
    FitOptions opts;
    opts.refine_grid = 51; // contains 0.4
    const auto fit = fit_npml(ds, box, {11}, opts);
    ASSERT_EQ(fit.discrete().size(), 1u);
    EXPECT_NEAR(fit.discrete().atoms()[0][0], 0.4, 1e-12);
    EXPECT_NEAR(fit.certificate.sup_dir_derivative, 1.0, 1e-12);
    EXPECT_EQ(fit.status, FitStatus::converged);
}

TEST(Certify, NonOptimalMeasureExceedsOne) {
    Dataset ds;
    ds.spec = identity_spec(1.0, 1);
    ds.observations = std::vector<Observation>{{{0.0}, {0.5}}};
    // atoms at 0 and log-density gap log 2 away from it
    const double far = std::sqrt(2.0 * std::log(2.0));
    const MixingMeasure mu({{0.0}, {far}}, {0.5, 0.5});
    const auto cert = certify(ds, mu, {{0.0, 0.0}}, 1);
    EXPECT_NEAR(cert.sup_dir_derivative, 4.0 / 3.0, 1e-12);
    EXPECT_EQ(cert.argmax_point, (Point{0.0}));
}

TEST(Certify, SupportOnlyGridOfConvergedFit) {
    const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, 100, 2);
    const auto fit = fit_npml(ds, pk_box, {8, 8}, quick_options());
    ASSERT_EQ(fit.status, FitStatus::converged);
    // certificate restricted to a one-point grid at the first atom plus support
    const auto& atom = fit.discrete().atoms()[0];
    const auto cert = certify(ds, fit.discrete(), {{atom[0], atom[0]}, {atom[1], atom[1]}}, 1);
    EXPECT_NEAR(cert.sup_dir_derivative, 1.0, 1e-6);
}

TEST(RefineSupport, CertifiedMeasureUnchanged) {
    const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, 80, 3);
    const auto fit = fit_npml(ds, pk_box, {8, 8}, quick_options());
    ASSERT_EQ(fit.status, FitStatus::converged);
    const auto again = refine_support(ds, fit.discrete(), pk_box, quick_options());
    EXPECT_EQ(again.refinements, 0u);
    EXPECT_EQ(again.measure, fit.discrete());
}

TEST(RefineSupport, MonotoneAndFindsMissingAtoms) {
    const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, 300, 4);
    // start from a single wrong atom; both true atoms must be found
    const MixingMeasure start = MixingMeasure::dirac({1.5, 0.55});
    const double before = log_likelihood(build_kernel_matrix(ds, start), start.weights());
    auto opts = quick_options();
    const auto res = refine_support(ds, start, pk_box, opts);
    const double after = log_likelihood(build_kernel_matrix(ds, res.measure), res.measure.weights());
    EXPECT_GE(after, before - 1e-12);
    EXPECT_TRUE(res.certified);
    for (std::size_t t = 1; t < res.loglik_trace.size(); ++t) EXPECT_GE(res.loglik_trace[t] - res.loglik_trace[t - 1], -1e-12);
    const double cell = std::hypot(2.0 / 21.0, 1.2 / 21.0);
    for (const auto& truth : two_point.atoms()) {
        double nearest = INFINITY;
        for (const auto& a : res.measure.atoms()) nearest = std::min(nearest, std::hypot(a[0] - truth[0], a[1] - truth[1]));
        EXPECT_LE(nearest, 3.0 * cell);
    }
}

TEST(FitNpml, SingleObservationLeavesOneAtom) {
    const auto fit = fit_npml(single_observation(), {{-1.0, 1.0}}, {5}, FitOptions{});
    EXPECT_EQ(fit.discrete().size(), 1u);
}

TEST(FitNpml, LindsayBoundAndCertificate) {
    for (std::size_t N : {1u, 2u, 3u, 5u, 8u, 13u, 40u}) {
        const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, N, 100 + N);
        const auto fit = fit_npml(ds, pk_box, {6, 6}, quick_options());
        EXPECT_LE(fit.discrete().size(), N + 1);
        for (std::size_t t = 1; t < fit.loglik_trace.size(); ++t) EXPECT_GE(fit.loglik_trace[t] - fit.loglik_trace[t - 1], -1e-12);
    }
}

TEST(FitNpml, Deterministic) {
    const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, 60, 1);
    const auto a = fit_npml(ds, pk_box, {6, 6}, quick_options());
    const auto b = fit_npml(ds, pk_box, {6, 6}, quick_options());
    EXPECT_EQ(a.discrete(), b.discrete());
    EXPECT_EQ(a.final_loglik, b.final_loglik);
}

TEST(FitNpml, MatchesOracleOnTinyInstances) {
    // three fixed atoms; a single refinement-free fit over them equals a
    // brute-force search over the simplex lattice
    Rng rng(12);
    for (int k = 0; k < 10; ++k) {
        const auto km = random_kernel(rng, 1 + k % 5, 3, -2.0);
        const auto em = em_fit(km, std::vector<double>(3, 1.0 / 3), FitOptions{});
        const auto oracle = brute_force_oracle(km, 400);
        EXPECT_NEAR(em.loglik_trace.back(), log_likelihood(km, oracle), 1e-4);
    }
}

TEST(FitSieve, SingleElement) {
    const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, 50, 1);
    const SieveBasis basis(pk_box, {1, 1});
    const auto fit = fit_sieve(ds, basis, FitOptions{});
    EXPECT_EQ(fit.sieve().coefficients, (std::vector<double>{1.0}));
    const auto km = build_sieve_kernel_matrix(ds, basis, 8);
    double mean = 0.0;
    for (std::size_t i = 0; i < km.rows(); ++i) mean += km(i, 0);
    EXPECT_NEAR(fit.final_loglik, mean / km.rows(), 1e-14);
}

TEST(FitSieve, NestedBasesAreMonotone) {
    const auto ds = simulate_dataset(pk_spec(0.2, 4), two_point, 150, 2);
    double previous = -INFINITY;
    for (std::size_t cells : {1u, 2u, 4u, 8u}) {
        const auto fit = fit_sieve(ds, SieveBasis::uniform_cells(pk_box, cells), FitOptions{});
        EXPECT_GE(fit.final_loglik, previous - 1e-9);
        previous = fit.final_loglik;
    }
    const auto npml = fit_npml(ds, pk_box, {8, 8}, quick_options());
    EXPECT_GE(npml.final_loglik, previous - 1e-9);
}

TEST(BruteForceOracle, Cases) {
    Rng rng(1);
    EXPECT_EQ(brute_force_oracle(random_kernel(rng, 3, 1), 10), (std::vector<double>{1.0}));
    EXPECT_EQ(brute_force_oracle(kernel_from_rows({{2.0, 1.0}}), 1000), (std::vector<double>{1.0, 0.0}));
    const auto sym = brute_force_oracle(kernel_from_rows({{2.0, 1.0}, {1.0, 2.0}}), 100);
    EXPECT_EQ(sym, (std::vector<double>{0.5, 0.5}));
    EXPECT_THROW(brute_force_oracle(random_kernel(rng, 2, 5), 10), InvalidArgument);
    EXPECT_THROW(brute_force_oracle(random_kernel(rng, 2, 2), 10000000), InvalidArgument);
}

TEST(ConcavityProbe, Cases) {
    Rng rng(2);
    const auto km = random_kernel(rng, 10, 4);
    const auto w = random_simplex(rng, 4);
    const std::vector<double> lambdas{0.0, 0.25, 0.5, 1.0};
    for (const auto& d : concavity_probe(km, w, w, lambdas)) EXPECT_EQ(d.defect, 0.0);
    const auto w2 = random_simplex(rng, 4);
    const auto ends = concavity_probe(km, w, w2, std::vector<double>{0.0, 1.0});
    EXPECT_EQ(ends[0].defect, 0.0);
    EXPECT_EQ(ends[1].defect, 0.0);

    const auto k2 = kernel_from_rows({{2.0, 1.0}});
    const auto half = concavity_probe(k2, std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}, std::vector<double>{0.5});
    EXPECT_NEAR(half[0].defect, std::log(1.5) - 0.5 * std::log(2.0), 1e-15);
}
