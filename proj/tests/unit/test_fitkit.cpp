#include "qdspin/fitkit.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace qdspin;

namespace {

std::vector<double> grid(double lo, double hi, double step) {
    std::vector<double> t;
    const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step));
    for (std::size_t i = 0; i <= n; ++i) t.push_back(lo + static_cast<double>(i) * step);
    return t;
}

} // namespace

TEST(Zeeman, ExactLineGivesElectronG) {
    const std::vector<ZeemanPoint> pts{{0.05, zeeman_splitting(2.09, 0.05)},
                                       {0.10, zeeman_splitting(2.09, 0.10)},
                                       {0.15, zeeman_splitting(2.09, 0.15)}};
    const auto f = fit_linear_zeeman(pts);
    EXPECT_NEAR(f.g, 2.09, 1e-9);
    EXPECT_LT(f.sigma_g, 1e-6);
    EXPECT_LT(f.sse, 1e-24);
    // Rounded values as printed: 6.049e-6, 12.098e-6, 18.147e-6 eV.
    const std::vector<ZeemanPoint> printed{{0.05, 6.049e-6}, {0.10, 12.098e-6}, {0.15, 18.147e-6}};
    EXPECT_NEAR(fit_linear_zeeman(printed).g, 2.09, 1e-3);
}

TEST(Zeeman, ZeroSplittingGivesZero) {
    const std::vector<ZeemanPoint> pts{{0.1, 0.0}, {0.2, 0.0}};
    EXPECT_EQ(fit_linear_zeeman(pts).g, 0.0);
}

TEST(Zeeman, RankDeficientRejected) {
    const std::vector<ZeemanPoint> pts{{0.1, 1e-6}, {0.1, 1.1e-6}};
    EXPECT_THROW(fit_linear_zeeman(pts), Error);
    EXPECT_NO_THROW(fit_linear_zeeman(pts, Intercept::zero));
    const std::vector<ZeemanPoint> zero{{0.0, 0.0}};
    EXPECT_THROW(fit_linear_zeeman(zero, Intercept::zero), Error);
}

TEST(Zeeman, NoisyLineCoversTruth) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 1e-7);
    std::vector<ZeemanPoint> pts;
    for (double B = 0.5; B <= 5.0; B += 0.5) pts.push_back({B, zeeman_splitting(2.09, B) + n(rng), 1e-7});
    const auto f = fit_linear_zeeman(pts);
    EXPECT_NEAR(f.g, 2.09, 4 * f.sigma_g);
    EXPECT_GT(f.sigma_g, 0.0);
}

TEST(Zeeman, FourLineRecoversBothGFactors) {
    std::vector<FourLineSplitting> pts;
    for (double B : {1.0, 2.0, 3.0, 4.0}) pts.push_back(splittings_from_lines(B, four_line_spectrum(1.3, 2.13, 0.37, B)));
    const auto f = fit_four_line(pts);
    EXPECT_NEAR(f.g_e, 2.13, 1e-9);
    EXPECT_NEAR(f.g_h, 0.37, 1e-9);
}

TEST(Fft, SingleCosine) {
    const auto t = grid(0, 20e-9, 10e-12);
    std::vector<double> y;
    for (double x : t) y.push_back(std::cos(2 * std::numbers::pi * 0.5e9 * x));
    const auto e = fft_frequency(t, y);
    ASSERT_TRUE(e.oscillation);
    EXPECT_NEAR(e.frequency, 0.5e9, 1.0 / 20e-9);
}

TEST(Fft, ConstantHasNoOscillation) {
    const auto t = grid(0, 20e-9, 10e-12);
    std::vector<double> y(t.size(), 0.7);
    EXPECT_FALSE(fft_frequency(t, y).oscillation);
}

TEST(Fft, TwoToneLargerAmplitudeWins) {
    const auto t = grid(0, 20e-9, 10e-12);
    std::vector<double> y;
    for (double x : t)
        y.push_back(std::cos(2 * std::numbers::pi * 0.2e9 * x) + 3 * std::cos(2 * std::numbers::pi * 0.8e9 * x));
    const auto e = fft_frequency(t, y);
    EXPECT_NEAR(e.frequency, 0.8e9, 1.0 / 20e-9);
}

TEST(Fft, InvariantUnderScaleAndOffset) {
    const auto t = grid(0, 10e-9, 20e-12);
    std::vector<double> y, z;
    for (double x : t) {
        const double v = std::exp(-x / 8e-9) * std::cos(2 * std::numbers::pi * 0.761e9 * x + 0.3);
        y.push_back(v);
        z.push_back(5.0 * v - 2.0);
    }
    const auto a = fft_frequency(t, y), b = fft_frequency(t, z);
    EXPECT_EQ(a.peak_bin_frequency, b.peak_bin_frequency);
    EXPECT_NEAR(a.frequency, b.frequency, 1e-6 * a.frequency);
}

TEST(Fft, RejectsNonUniformBins) {
    std::vector<double> t{0, 1, 3, 4}, y{0, 1, 0, 1};
    EXPECT_THROW(fft_frequency(t, y), Error);
}

TEST(DampedCosine, JacobianMatchesFiniteDifferences) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 200; ++k) {
        DampedCosineModel m{u(rng) * 1e-9};
        std::vector<double> p{u(rng) - 0.5, 0.1 + u(rng), (1 + 20 * u(rng)) * 1e-9, 0.3 + 2.5 * u(rng),
                              u(rng) * 2e9, 6 * u(rng) - 3};
        const double t = u(rng) * 20e-9;
        std::vector<double> row(6);
        m.jacobian(t, p, row);
        for (std::size_t j = 0; j < 6; ++j) {
            const double h = p[j] != 0.0 ? 1e-6 * std::abs(p[j]) : 1e-9;
            auto pp = p, pm = p;
            pp[j] += h;
            pm[j] -= h;
            const double fd = (m.value(t, pp) - m.value(t, pm)) / (2 * h);
            // Absolute floor: derivatives that cancel to zero are compared
            // against the size of the model value per unit parameter.
            const double floor = 1e-3 * (std::abs(p[1]) + 1.0) / std::max(std::abs(p[j]), 1e-12);
            const double scale = std::max({std::abs(fd), std::abs(row[j]), floor});
            EXPECT_NEAR(row[j], fd, 1e-5 * scale) << "param " << j << " sample " << k;
        }
    }
}

TEST(DampedCosine, RecoversNoiselessPulsedModel) {
    const auto t = grid(0.6e-9, 10.5e-9, 0.1e-9);
    DampedCosineModel m;
    const std::vector<double> truth{0.0, 0.9, 16e-9, 1.0, 0.761e9, 0.0};
    std::vector<double> y;
    for (double x : t) y.push_back(m.value(x, truth));
    const auto r = fit_damped_cosine(make_trace(t, y), DampedCosineOptions::pulsed());
    ASSERT_TRUE(r.converged);
    EXPECT_NEAR(r.params[0], 0.0, 1e-6);
    for (std::size_t j : {1, 2, 4}) EXPECT_NEAR(r.params[j], truth[j], 1e-6 * truth[j]) << j;
    EXPECT_NEAR(r.params[5], 0.0, 1e-6);
    EXPECT_EQ(r.params[3], 1.0);
    EXPECT_TRUE(r.fixed[3]);
}

TEST(DampedCosine, CwVariantRecoversStretchedEnvelope) {
    const auto t = grid(0.0, 30e-9, 50e-12);
    DampedCosineModel m;
    const std::vector<double> truth{0.02, 0.7, 16.51e-9, 1.278, 183.7e6, 2.9};
    std::vector<double> y;
    for (double x : t) y.push_back(m.value(x, truth));
    const auto r = fit_damped_cosine(make_trace(t, y), DampedCosineOptions::cw());
    ASSERT_TRUE(r.converged);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(r.params[j], truth[j], 1e-6 * std::abs(truth[j]) + 1e-9) << j;
}

TEST(DampedCosine, SseNeverIncreasesAndSigmasPositive) {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n(0.0, 0.05);
    const auto t = grid(0.6e-9, 10.5e-9, 0.2e-9);
    DampedCosineModel m;
    const std::vector<double> truth{0.0, 0.8, 15.9e-9, 1.0, 0.76e9, 0.5};
    std::vector<double> y, e(t.size(), 0.05);
    for (double x : t) y.push_back(m.value(x, truth) + n(rng));
    const auto r = fit_damped_cosine(make_trace(t, y, e), DampedCosineOptions::pulsed());
    for (std::size_t i = 1; i < r.sse_history.size(); ++i) EXPECT_LE(r.sse_history[i], r.sse_history[i - 1]);
    EXPECT_TRUE(r.converged);
    EXPECT_LT(r.gradient_norm, 1e-6);
    for (double s : r.sigmas) EXPECT_GE(s, 0.0);
    EXPECT_GT(r.sigma("f"), 0.0);
    EXPECT_NEAR(r.param("f"), 0.76e9, 5 * r.sigma("f"));
}

TEST(DampedCosine, FlatDataTakesNoOscillationBranch) {
    const auto t = grid(0, 10e-9, 0.1e-9);
    std::vector<double> y(t.size(), 0.25);
    const auto r = fit_damped_cosine(make_trace(t, y), DampedCosineOptions::pulsed());
    EXPECT_TRUE(r.no_oscillation);
    EXPECT_NEAR(r.param("C"), 0.25, 1e-12);
    EXPECT_EQ(r.param("f"), 0.0);
}

TEST(DampedCosine, ExclusionWindowAndMinimumBins) {
    const auto t = grid(-1e-9, 1e-9, 0.05e-9);
    std::vector<double> y(t.size(), 0.1);
    auto o = DampedCosineOptions::cw(150e-12);
    const auto d = fit_data(make_trace(t, y), 0.0, 150e-12);
    for (double x : d.t) EXPECT_GE(std::abs(x), 150e-12 * (1 - 1e-6));
    EXPECT_EQ(d.t.size(), t.size() - 5);
    const auto few = grid(0, 1e-9, 0.1e-9);
    std::vector<double> fy(few.size(), 0.0);
    EXPECT_THROW(fit_damped_cosine(make_trace(few, fy), o), Error);
}

TEST(WindowAverage, Examples) {
    std::vector<ReadoutFit> same{{50e-12, 16e-9, 0.76e9}, {100e-12, 16e-9, 0.76e9}, {150e-12, 16e-9, 0.76e9}};
    const auto a = window_average(same, 0, 1e-9);
    EXPECT_EQ(a.mean_T2star, 16e-9);
    EXPECT_EQ(a.error_T2star, 0.0);
    std::vector<ReadoutFit> f{{50e-12, 1, 0.759e9}, {60e-12, 1, 0.761e9}, {70e-12, 1, 0.763e9}};
    const auto b = window_average(f, 0, 1e-9);
    EXPECT_NEAR(b.mean_f, 0.761e9, 1e-3);
    EXPECT_NEAR(b.error_f, 0.002e9 / std::sqrt(3.0), 1e-3);
    std::vector<ReadoutFit> spread{{50e-12, 10e-9, 0.76e9}, {60e-12, 20e-9, 0.76e9}, {70e-12, 40e-9, 0.76e9}};
    const auto c = window_average(spread, 0, 1e-9);
    EXPECT_NEAR(c.mean_T2star, 70e-9 / 3.0, 1e-18);
    EXPECT_NEAR(c.rate_T2star, 3.0 / (1 / 10e-9 + 1 / 20e-9 + 1 / 40e-9), 1e-18);
    EXPECT_THROW(window_average(f, 1e-9, 2e-9), Error);
    EXPECT_THROW(window_average(f, 0, 55e-12), Error);
}

TEST(LogLog, PowerLawSlope) {
    std::vector<double> x{1, 2, 4, 8}, y;
    for (double v : x) y.push_back(3.0 * std::pow(v, -0.5));
    const auto f = fit_loglog(x, y);
    EXPECT_NEAR(f.slope, -0.5, 1e-12);
}
