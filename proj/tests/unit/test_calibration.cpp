#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "fundus/calibration.hpp"
#include "fundus/error.hpp"

using namespace fundus;
namespace cal = fundus::calibration;

namespace {

std::vector<double> normal_sample(std::size_t n, double mu, double sd, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(mu, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

std::vector<double> probes(const cal::CalibrationModel& m, std::size_t n) {
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i)
        p[i] = m.support_lo + (m.support_hi - m.support_lo) * double(i) / double(n - 1);
    return p;
}

}  // namespace

TEST(Calibration, IdenticalClassesGiveHalf) {
    auto s = normal_sample(80, 1.0, 0.3, 1);
    for (auto backend : {cal::Backend::kde, cal::Backend::histogram}) {
        auto m = cal::fit(s, s, {.backend = backend, .prior_pathology = 0.5});
        for (double a : probes(m, 501)) EXPECT_NEAR(cal::posterior(m, a), 0.5, 1e-9);
    }
}

TEST(Calibration, SeparatedClasses) {
    auto h = normal_sample(100, 0.0, 0.2, 2), p = normal_sample(100, 5.0, 0.2, 3);
    auto m = cal::fit(h, p);
    for (double a : {-0.5, 0.0, 0.5, 1.5}) EXPECT_LT(cal::posterior(m, a), 0.05) << a;
    for (double a : {3.5, 4.5, 5.0, 5.5}) EXPECT_GT(cal::posterior(m, a), 0.95) << a;
}

TEST(Calibration, DoublingScoresCommutesWithPosterior) {
    auto h = normal_sample(60, 1.0, 0.4, 4), p = normal_sample(40, 2.0, 0.5, 5);
    auto m = cal::fit(h, p);
    auto h2 = h, p2 = p;
    for (auto& x : h2) x *= 2;
    for (auto& x : p2) x *= 2;
    auto m2 = cal::fit(h2, p2);
    EXPECT_NEAR(m2.healthy.bandwidth(), 2 * m.healthy.bandwidth(), 1e-12);
    for (double a : probes(m, 301)) EXPECT_NEAR(cal::posterior(m2, 2 * a), cal::posterior(m, a), 1e-6);
}

TEST(Calibration, ClassSwapAntisymmetry) {
    auto h = normal_sample(50, 0.0, 1.0, 6), p = normal_sample(70, 1.5, 0.7, 7);
    for (auto backend : {cal::Backend::kde, cal::Backend::histogram}) {
        auto m = cal::fit(h, p, {.backend = backend, .prior_pathology = 0.3});
        auto w = cal::fit(p, h, {.backend = backend, .prior_pathology = 0.7});
        for (double a : probes(m, 1001)) EXPECT_NEAR(cal::posterior(w, a), 1 - cal::posterior(m, a), 1e-9);
    }
}

TEST(Calibration, PosteriorMonotoneInPrior) {
    auto h = normal_sample(50, 0.0, 1.0, 8), p = normal_sample(50, 1.0, 1.0, 9);
    std::vector<cal::CalibrationModel> models;
    for (double pi : {0.0, 0.1, 0.3, 0.5, 0.9, 1.0}) models.push_back(cal::fit(h, p, {.prior_pathology = pi}));
    for (double a : probes(models[0], 201))
        for (std::size_t i = 1; i < models.size(); ++i)
            EXPECT_GE(cal::posterior(models[i], a), cal::posterior(models[i - 1], a));
    for (double a : {-1e9, -3.0, 0.0, 2.0, 1e9}) EXPECT_EQ(cal::posterior(models.back(), a), 1.0);
}

TEST(Calibration, BayesHandCase) {
    // Histogram densities 0.2 (healthy) and 0.8 (pathology) in one bin.
    std::vector<double> h, p;
    for (int i = 0; i < 10; ++i) h.push_back(0.05 + 0.1 * i);
    for (int i = 0; i < 10; ++i) p.push_back(0.05 + 0.1 * i);
    auto m = cal::fit(h, p, {.backend = cal::Backend::histogram, .bins = 1, .prior_pathology = 0.5});
    m.healthy = cal::Density::histogram(std::vector<double>{0.5}, 1, 0.0, 5.0);
    m.pathology = cal::Density::histogram(std::vector<double>{0.5}, 1, 0.0, 1.25);
    EXPECT_NEAR(m.healthy(0.5), 0.2, 1e-15);
    EXPECT_NEAR(m.pathology(0.5), 0.8, 1e-15);
    EXPECT_NEAR(cal::posterior(m, 0.5), 0.8, 1e-15);
}

TEST(Calibration, UnderflowFallsBackToPrior) {
    auto h = normal_sample(30, 0.0, 0.1, 10), p = normal_sample(30, 1.0, 0.1, 11);
    auto m = cal::fit(h, p, {.prior_pathology = 0.25});
    EXPECT_EQ(cal::posterior(m, 1e6), 0.25);
    EXPECT_EQ(cal::posterior(m, -1e6), 0.25);
    auto hist = cal::fit(h, p, {.backend = cal::Backend::histogram, .prior_pathology = 0.25});
    EXPECT_EQ(cal::posterior(hist, 50.0), 0.25);
}

TEST(Calibration, DensitiesIntegrateToOne) {
    auto h = normal_sample(40, 0.0, 1.0, 12), p = normal_sample(25, 3.0, 0.2, 13);
    for (auto backend : {cal::Backend::kde, cal::Backend::histogram}) {
        auto m = cal::fit(h, p, {.backend = backend});
        EXPECT_NEAR(m.healthy.integral(), 1.0, 1e-3);
        EXPECT_NEAR(m.pathology.integral(), 1.0, 1e-3);
        EXPECT_NEAR(m.prior_healthy + m.prior_pathology, 1.0, 1e-15);
    }
    auto m = cal::fit(h, p);
    EXPECT_NEAR(m.prior_pathology, 25.0 / 65.0, 1e-15);
}

TEST(Calibration, PosteriorInUnitIntervalEverywhere) {
    auto h = normal_sample(30, 0.0, 1.0, 14), p = normal_sample(30, 0.5, 2.0, 15);
    auto m = cal::fit(h, p);
    std::mt19937_64 rng(16);
    std::uniform_real_distribution<double> u(-50, 50);
    for (int i = 0; i < 20000; ++i) {
        const double q = cal::posterior(m, u(rng));
        ASSERT_GE(q, 0.0);
        ASSERT_LE(q, 1.0);
    }
}

TEST(Calibration, FitErrors) {
    auto ok = normal_sample(20, 0, 1, 17);
    std::vector<double> few(9, 1.0), flat(20, 1.0);
    EXPECT_THROW(cal::fit(few, ok), DomainError);
    EXPECT_THROW(cal::fit(flat, ok), DomainError);
    EXPECT_NO_THROW(cal::fit(flat, ok, {.backend = cal::Backend::histogram}));
    EXPECT_THROW(cal::fit(ok, ok, {.prior_pathology = 1.5}), DomainError);
    auto bad = ok;
    bad[3] = std::nan("");
    EXPECT_THROW(cal::fit(bad, ok), DomainError);
    EXPECT_THROW(cal::parse_backend("isotonic"), ConfigError);
}

TEST(Summary, MeanStdFormatting) {
    std::vector<double> g{0.7, 0.9};
    auto ms = cal::mean_std(g);
    EXPECT_NEAR(ms.std, std::sqrt(0.02), 1e-15);
    EXPECT_EQ(cal::format_mean_std(ms), "0.80±0.14");
    std::vector<double> one{0.3};
    EXPECT_EQ(cal::mean_std(one).std, 0.0);
    std::vector<double> halves(5, 0.5);
    EXPECT_EQ(cal::format_mean_std(cal::mean_std(halves)), "0.50±0.00");
    EXPECT_THROW(cal::mean_std(std::span<const double>{}), DomainError);
}

TEST(Summary, PerClassTable) {
    auto s = normal_sample(30, 1.0, 0.3, 18);
    auto m = cal::fit(s, s, {.prior_pathology = 0.5});
    auto rows = cal::per_class_mean_posterior({{"Normal", {1.0, 1.1}}, {"DR", {0.9}}}, m);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].label, "DR");
    EXPECT_EQ(cal::format_mean_std(rows[1].posterior), "0.50±0.00");
    EXPECT_NE(cal::format_summary(rows).find("Normal\t2\t0.500000\t0.000000\t0.50±0.00\n"), std::string::npos);
    EXPECT_THROW(cal::per_class_mean_posterior({{"AMD", {}}}, m), DomainError);
}

TEST(Scores, RoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "fundus_scores_test.tsv";
    std::vector<cal::ScoreRecord> in{{"a.png", "Normal", 0.125}, {"b.png", "Lesion", 3.0e-7}};
    cal::write_scores(path, in);
    auto out = cal::read_scores(path);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[1].id, "b.png");
    EXPECT_EQ(out[1].label, "Lesion");
    EXPECT_EQ(out[1].score, 3.0e-7);
    std::filesystem::remove(path);
}
