#include "test_helpers.hpp"

#include <gtest/gtest.h>

using namespace npml;
using namespace npml::testing;

namespace {
const MixingMeasure two_point({{1.0, 0.3}, {2.0, 0.8}}, {0.5, 0.5});
}

TEST(Simulate, ZeroNoiseGivesExactModel) {
    const auto spec = pk_spec(0.0, 4);
    const auto ds = simulate_dataset(spec, two_point, 50, 3);
    const auto latent = simulate_latent(two_point, 50, 3);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.uncensored()[i];
        EXPECT_EQ(o.y, eval_f(spec, latent[i], o.t));
    }
}

TEST(Simulate, DeterministicForSeed) {
    const auto spec = pk_spec(0.2, 4);
    EXPECT_EQ(simulate_dataset(spec, two_point, 100, 42), simulate_dataset(spec, two_point, 100, 42));
    EXPECT_NE(simulate_dataset(spec, two_point, 100, 42), simulate_dataset(spec, two_point, 100, 43));
}

TEST(Simulate, GrowingNKeepsEarlierIndividuals) {
    const auto spec = pk_spec(0.2, 4);
    const auto small = simulate_dataset(spec, two_point, 100, 5);
    const auto large = simulate_dataset(spec, two_point, 400, 5);
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(small.uncensored()[i], large.uncensored()[i]);
}

TEST(Simulate, MeanOfConstantSignal) {
    // f == 1 for alpha = 0; bound 3 sigma / sqrt(N n) < 0.01
    const auto spec = pk_spec(0.1, 4);
    const auto ds = simulate_dataset(spec, MixingMeasure::dirac({1.0, 0.0}), 10000, 17);
    double acc = 0.0;
    for (const auto& o : ds.uncensored())
        for (double y : o.y) acc += y;
    EXPECT_NEAR(acc / 40000.0, 1.0, 0.01);
}

TEST(Simulate, TimesInsideDesignBox) {
    const auto spec = pk_spec(0.2, 4);
    const auto ds = simulate_dataset(spec, two_point, 2000, 8);
    for (const auto& o : ds.uncensored()) EXPECT_GT(time_density(spec.time_design, o.t), 0.0);
}

TEST(Simulate, LatentMeanWithinStandardErrorBands) {
    const std::size_t N = 5000;
    const auto latent = simulate_latent(two_point, N, 99);
    const auto mean = two_point.mean();
    for (std::size_t a = 0; a < 2; ++a) {
        double m = 0.0, var = 0.0;
        for (const auto& s : latent) m += s[a];
        m /= N;
        for (const auto& atom : two_point.atoms()) var += 0.5 * (atom[a] - mean[a]) * (atom[a] - mean[a]);
        EXPECT_LE(std::abs(m - mean[a]), 4.0 * std::sqrt(var / N));
    }
}

TEST(Simulate, LaplaceNoiseIsVarianceMatched) {
    auto spec = identity_spec(0.5, 2);
    spec.noise = NoiseKind::laplace;
    const std::size_t N = 50000;
    const auto ds = simulate_dataset(spec, MixingMeasure::dirac({0.0}), N, 1);
    double sq = 0.0, abs_sum = 0.0;
    for (const auto& o : ds.uncensored())
        for (double y : o.y) {
            sq += y * y;
            abs_sum += std::abs(y);
        }
    const double var = sq / (2.0 * N);
    // Var(Y^2) = E Y^4 - sigma^4 = 6 b^4 * 4 - sigma^4 = 5 sigma^4 for Laplace
    EXPECT_NEAR(var, 0.25, 4.0 * std::sqrt(5.0 * 0.0625 / (2.0 * N)));
    // mean absolute deviation equals b = sigma / sqrt 2
    EXPECT_NEAR(abs_sum / (2.0 * N), 0.5 / std::sqrt(2.0), 0.005);
}

TEST(Simulate, RejectsZeroN) {
    EXPECT_THROW(simulate_dataset(pk_spec(), two_point, 0, 1), InvalidArgument);
}

TEST(Censoring, FullAndEmptyMasks) {
    const auto spec = pk_spec(0.2, 3);
    const auto ds = simulate_dataset(spec, two_point, 50, 1);
    const auto full = apply_censoring(ds, {{{CensorMask::full(3), 1.0}}}, 2);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(full.censored_observations()[i].z, ds.uncensored()[i].y);
        EXPECT_EQ(full.censored_observations()[i].t, ds.uncensored()[i].t);
    }
    const auto none = apply_censoring(ds, {{{CensorMask::empty(), 1.0}}}, 2);
    for (const auto& o : none.censored_observations()) EXPECT_TRUE(o.z.empty());
}

TEST(Censoring, MaskFrequencies) {
    const auto spec = pk_spec(0.2, 3);
    const auto ds = simulate_dataset(spec, two_point, 4000, 1);
    const CensoringDesign design{{{CensorMask({1}, 3), 0.5}, {CensorMask::full(3), 0.5}}};
    const auto cens = apply_censoring(ds, design, 77);
    std::size_t full = 0;
    for (std::size_t i = 0; i < cens.size(); ++i) {
        const auto& o = cens.censored_observations()[i];
        if (o.mask.is_full(3)) ++full;
        EXPECT_EQ(project_mask(ds.uncensored()[i].y, o.mask), o.z);
    }
    EXPECT_NEAR(static_cast<double>(full) / 4000.0, 0.5, 0.03);
    EXPECT_EQ(apply_censoring(ds, design, 77), cens);
}

TEST(Censoring, DesignMustSumToOne) {
    const auto ds = simulate_dataset(pk_spec(0.2, 3), two_point, 10, 1);
    EXPECT_THROW(apply_censoring(ds, {{{CensorMask::full(3), 0.7}}}, 1), InvalidArgument);
    EXPECT_THROW(apply_censoring(apply_censoring(ds, {{{CensorMask::full(3), 1.0}}}, 1), {{{CensorMask::full(3), 1.0}}}, 1),
                 InvalidArgument);
}
