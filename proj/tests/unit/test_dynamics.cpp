#include "qdspin/dynamics.hpp"

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include <random>

using namespace qdspin;

namespace {

DeviceParams field(double B) {
    DeviceParams p;
    p.g_e = 2.09;
    p.g_h = 0.35;
    p.B_x = B;
    return p;
}

// exp(-i H t / hbar) with H = (delta/2) sigma_x computed by Eigen's general
// matrix exponential.
Eigen::Matrix2cd eigen_propagator(double frequency, double t) {
    Eigen::Matrix2cd H;
    const double w = 2.0 * std::numbers::pi * frequency;
    H << 0.0, w / 2.0, w / 2.0, 0.0;
    Eigen::Matrix2cd A = cplx{0.0, -t} * H;
    return A.exp();
}

} // namespace

TEST(Propagate, TrionFlipsAfterHalfPeriod) {
    const auto p = field(0.15);
    const double half = larmor_halfperiod(p.g_e, p.B_x);
    const auto s = propagate(SpinHalfState::up(Subspace::trion), p, half);
    EXPECT_NEAR(s.p_down(), 1.0, 1e-12);
    const auto s114 = propagate(SpinHalfState::up(Subspace::trion), p, 114e-12);
    EXPECT_GT(s114.p_down(), 0.999);
}

TEST(Propagate, HoleFlipsAtLowField) {
    const auto p = field(0.0375);
    const double half = larmor_halfperiod(p.g_h, p.B_x);
    EXPECT_NEAR(half, 2.72e-9, 0.01e-9);
    const auto s = propagate(SpinHalfState::down(Subspace::ground), p, half);
    EXPECT_NEAR(s.p_up(), 1.0, 1e-12);
}

TEST(Propagate, ZeroFieldIsIdentity) {
    const auto s0 = SpinHalfState::normalized(0.3, cplx{0.1, 0.7}, Subspace::ground);
    const auto s = propagate(s0, field(0.0), 5e-9);
    EXPECT_NEAR(s.overlap(s0), 1.0, 1e-15);
}

TEST(Propagate, MatchesMatrixExponential) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0), tt(0.0, 20e-9);
    for (int k = 0; k < 50; ++k) {
        const auto p = field(std::abs(u(rng)) * 0.5);
        const auto s0 = SpinHalfState::normalized(cplx{u(rng), u(rng)}, cplx{u(rng), u(rng)}, Subspace::ground);
        const double t = tt(rng);
        const auto s = propagate(s0, p, t);
        Eigen::Vector2cd v(s0.up_amp(), s0.down_amp());
        const Eigen::Vector2cd ref = eigen_propagator(larmor_frequency(p.g_h, p.B_x), t) * v;
        EXPECT_NEAR(std::abs(s.up_amp() - ref(0)), 0.0, 1e-10);
        EXPECT_NEAR(std::abs(s.down_amp() - ref(1)), 0.0, 1e-10);
    }
}

TEST(Propagate, UnitarityAndComposition) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> f(0.0, 5e9), t(0.0, 10e-9);
    for (int k = 0; k < 100; ++k) {
        const double fr = f(rng), t1 = t(rng), t2 = t(rng);
        const auto U1 = Propagator2::rotation(fr, t1, Subspace::trion);
        const auto U2 = Propagator2::rotation(fr, t2, Subspace::trion);
        const auto U12 = Propagator2::rotation(fr, t1 + t2, Subspace::trion);
        const Mat2 uu = matmul(adjoint(U1.matrix), U1.matrix);
        EXPECT_NEAR(std::abs(uu[0][0] - 1.0), 0.0, 1e-10);
        EXPECT_NEAR(std::abs(uu[0][1]), 0.0, 1e-10);
        EXPECT_NEAR(std::abs(uu[1][1] - 1.0), 0.0, 1e-10);
        const Mat2 c = matmul(U2.matrix, U1.matrix);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) EXPECT_NEAR(std::abs(c[i][j] - U12.matrix[i][j]), 0.0, 1e-10);
    }
}

TEST(Propagate, RejectsNegativeTime) {
    EXPECT_THROW(propagate(SpinHalfState::up(Subspace::ground), field(0.1), -1e-12), Error);
}

TEST(Optics, EmitWeightsFollowSpinPopulation) {
    const auto t = SpinHalfState::normalized(std::sqrt(0.3), std::sqrt(0.7), Subspace::trion);
    const auto b = emit_amplitudes(t);
    EXPECT_EQ(b[0].photon, Pol::L);
    EXPECT_EQ(b[1].photon, Pol::R);
    EXPECT_NEAR(b[0].weight, 0.3, 1e-15);
    EXPECT_NEAR(b[1].weight, 0.7, 1e-15);
    EXPECT_NEAR(b[0].weight + b[1].weight, 1.0, 1e-15);
    EXPECT_NEAR(b[0].ground.p_up(), 1.0, 0);
    EXPECT_NEAR(b[1].ground.p_down(), 1.0, 0);
}

TEST(Optics, CircularDetectionHeraldsZState) {
    const auto t = SpinHalfState::normalized(0.6, 0.8, Subspace::trion);
    const auto r = condition_on_photon(t, Pol::R);
    EXPECT_NEAR(r.probability, 0.64, 1e-14);
    EXPECT_NEAR(r.ground->p_down(), 1.0, 1e-14);
    const auto l = condition_on_photon(t, Pol::L);
    EXPECT_NEAR(l.probability, 0.36, 1e-14);
    EXPECT_NEAR(l.ground->p_up(), 1.0, 1e-14);
}

TEST(Optics, LinearDetectionKeepsCoherence) {
    const auto t = SpinHalfState::normalized(0.6, 0.8, Subspace::trion);
    const auto h = condition_on_photon(t, Pol::H);
    EXPECT_NEAR(h.probability, 0.5, 1e-14);
    EXPECT_NEAR(h.ground->p_up(), 0.36, 1e-14);
}

TEST(Optics, AbsorptionIsSpinSelective) {
    const auto up = SpinHalfState::up(Subspace::ground);
    const auto dn = SpinHalfState::down(Subspace::ground);
    EXPECT_NEAR(excite(dn, Pol::R).probability, 1.0, 1e-15);
    EXPECT_NEAR(excite(up, Pol::R).probability, 0.0, 1e-15);
    EXPECT_FALSE(excite(up, Pol::R).trion.has_value());
    EXPECT_NEAR(excite(up, Pol::L).probability, 1.0, 1e-15);
    EXPECT_NEAR(excite(up, Pol::H).probability, 0.5, 1e-15);
    EXPECT_NEAR(excite(dn, Pol::R).trion->p_down(), 1.0, 1e-15);
}

TEST(Envelope, Examples) {
    NoiseModel lor{NoiseKind::lorentzian_jitter, 1.0 / (2.0 * std::numbers::pi * 16.51e-9)};
    EXPECT_NEAR(envelope_factor(lor, 16.51e-9), std::exp(-1.0), 1e-12);
    EXPECT_NEAR(dephasing_time(lor), 16.51e-9, 1e-18);
    NoiseModel gau{NoiseKind::gaussian_jitter, noise_width_for(NoiseKind::gaussian_jitter, 15.9e-9)};
    EXPECT_NEAR(envelope_factor(gau, 15.9e-9), std::exp(-1.0), 1e-12);
    EXPECT_NEAR(envelope_factor(gau, 0.0), 1.0, 0.0);
    EXPECT_EQ(envelope_factor(NoiseModel{}, 1e-6), 1.0);
    EXPECT_TRUE(std::isinf(dephasing_time(NoiseModel{})));
    EXPECT_THROW(envelope_factor(lor, -1.0), Error);
}

TEST(Envelope, MonotoneNonIncreasing) {
    NoiseModel lor{NoiseKind::lorentzian_jitter, 5e6};
    NoiseModel gau{NoiseKind::gaussian_jitter, 5e6};
    double pl = 2.0, pg = 2.0;
    for (int i = 0; i < 200; ++i) {
        const double t = i * 1e-9;
        EXPECT_LE(envelope_factor(lor, t), pl);
        EXPECT_LE(envelope_factor(gau, t), pg);
        pl = envelope_factor(lor, t);
        pg = envelope_factor(gau, t);
    }
}

TEST(Lifetime, FirstMinimumAtHalfPeriod) {
    auto p = field(0.15);
    p.p_mem = 1.0;
    std::vector<double> grid;
    for (int i = 0; i <= 400; ++i) grid.push_back(i * 1e-12);
    const auto co = lifetime_trace(p, Pol::R, Pol::R, grid);
    std::size_t imin = 1;
    while (imin + 1 < co.size() && !(co[imin] < co[imin - 1] && co[imin] <= co[imin + 1])) ++imin;
    EXPECT_NEAR(grid[imin], 114e-12, 1.5e-12);
    const auto cross = lifetime_trace(p, Pol::R, Pol::L, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(co[i] + cross[i], std::exp(-grid[i] / p.T1), 1e-14);
}

TEST(Lifetime, ZeroFieldContrastIsMemory) {
    auto p = field(0.0);
    p.p_mem = 0.865;
    std::vector<double> g{0.0, 1e-10, 1e-9};
    const auto co = lifetime_trace(p, Pol::R, Pol::R, g);
    const auto cr = lifetime_trace(p, Pol::R, Pol::L, g);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR((co[i] - cr[i]) / (co[i] + cr[i]), 0.865, 1e-14);
}

TEST(Lifetime, RejectsBadGrid) {
    auto p = field(0.1);
    std::vector<double> g{1e-9, 0.0};
    EXPECT_THROW(lifetime_trace(p, Pol::R, Pol::R, g), Error);
    std::vector<double> ok{0.0};
    EXPECT_THROW(lifetime_trace(p, Pol::H, Pol::R, ok), Error);
}

TEST(Pumped, ZeroPumpIsFreePrecession) {
    const auto s0 = SpinHalfState::normalized(0.2, cplx{0.5, 0.3}, Subspace::ground);
    const double f = 183.7e6, t = 3.3e-9;
    const auto a = pumped_ground_step(s0, f, 0.0, Pol::R, t);
    const auto b = Propagator2::rotation(f, t, Subspace::ground)(s0);
    EXPECT_NEAR(a.overlap(b), 1.0, 1e-12);
}

TEST(Pumped, MatchesMatrixExponentialOfEffectiveHamiltonian) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Pol pump : {Pol::R, Pol::L, Pol::H}) {
        for (int k = 0; k < 20; ++k) {
            const double f = std::abs(u(rng)) * 1e9, r = std::abs(u(rng)) * 5e9, t = std::abs(u(rng)) * 5e-9;
            const auto s0 = SpinHalfState::normalized(cplx{u(rng), u(rng)}, cplx{u(rng), u(rng)}, Subspace::ground);
            const auto w = absorption_weights(pump);
            const double om = 2.0 * std::numbers::pi * f;
            Eigen::Matrix2cd H;
            H << cplx{0.0, -r * w[0] / 2.0}, om / 2.0, om / 2.0, cplx{0.0, -r * w[1] / 2.0};
            Eigen::Matrix2cd A = cplx{0.0, -t} * H;
            Eigen::Vector2cd v(s0.up_amp(), s0.down_amp());
            Eigen::Vector2cd ref = A.exp() * v;
            ref.normalize();
            const auto s = pumped_ground_step(s0, f, r, pump, t);
            const auto rs = SpinHalfState(ref(0), ref(1), Subspace::ground);
            EXPECT_NEAR(s.overlap(rs), 1.0, 1e-9) << "pump " << to_string(pump) << " k " << k;
        }
    }
}

TEST(Pumped, StrongPumpDrivesIntoDarkState) {
    const auto s0 = SpinHalfState::normalized(1.0, 1.0, Subspace::ground);
    const auto s = pumped_ground_step(s0, 1e6, 1e10, Pol::R, 1e-6);
    EXPECT_GT(s.p_up(), 0.999);
}

TEST(FourLine, OuterHInnerV) {
    const auto lines = four_line_spectrum(1.3, 2.13, 0.37, 1.0);
    EXPECT_EQ(lines[0].polarization, Pol::H);
    EXPECT_EQ(lines[3].polarization, Pol::H);
    EXPECT_EQ(lines[1].polarization, Pol::V);
    EXPECT_NEAR(lines[3].energy - lines[0].energy, zeeman_splitting(2.5, 1.0), 1e-15);
    EXPECT_NEAR(lines[2].energy - lines[1].energy, zeeman_splitting(1.76, 1.0), 1e-15);
}
