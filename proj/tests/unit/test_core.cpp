#include "qdspin/core.hpp"

#include <gtest/gtest.h>

using namespace qdspin;

TEST(Zeeman, ElectronSplittingAt150mT) {
    EXPECT_NEAR(zeeman_splitting(2.09, 0.15), 1.8147e-5, 1e-9);
    EXPECT_NEAR(larmor_frequency(2.09, 0.15), 4.388e9, 1e6);
}

TEST(Zeeman, HoleSplittings) {
    EXPECT_NEAR(zeeman_splitting(0.35, 0.0375), 7.597e-7, 1e-10);
    EXPECT_NEAR(larmor_frequency(0.35, 0.0375), 183.7e6, 0.1e6);
    EXPECT_NEAR(larmor_frequency(0.362, 0.15), 760e6, 1e6);
}

TEST(Zeeman, ZeroFieldHasNoPrecession) {
    EXPECT_EQ(zeeman_splitting(2.09, 0.0), 0.0);
    EXPECT_TRUE(is_no_precession(larmor_halfperiod(2.09, 0.0)));
    EXPECT_NEAR(larmor_halfperiod(2.09, 0.15), 114e-12, 0.5e-12);
}

TEST(Zeeman, LinearInField) {
    for (double g : {0.1, 0.35, 2.09})
        for (double B : {0.01, 0.1, 1.0}) EXPECT_NEAR(zeeman_splitting(g, 3 * B), 3 * zeeman_splitting(g, B), 1e-20);
}

TEST(Polarization, ProjectExamples) {
    EXPECT_NEAR(project(jones(Pol::R), Pol::R), 1.0, 1e-15);
    EXPECT_NEAR(project(jones(Pol::R), Pol::L), 0.0, 1e-15);
    EXPECT_NEAR(project(jones(Pol::H), Pol::R), 0.5, 1e-15);
}

TEST(Polarization, BasesAreOrthonormalAndMutuallyUnbiased) {
    const std::array<std::pair<Pol, Pol>, 3> bases{{{Pol::H, Pol::V}, {Pol::D, Pol::A}, {Pol::R, Pol::L}}};
    for (auto [a, b] : bases) {
        EXPECT_NEAR(project(jones(a), a), 1.0, 1e-15);
        EXPECT_NEAR(project(jones(a), b), 0.0, 1e-15);
        EXPECT_EQ(orthogonal(a), b);
        EXPECT_EQ(orthogonal(b), a);
    }
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            if (i == j) continue;
            EXPECT_NEAR(project(jones(bases[i].first), bases[j].first), 0.5, 1e-15);
            EXPECT_NEAR(project(jones(bases[i].second), bases[j].first), 0.5, 1e-15);
        }
}

TEST(Polarization, ProjectionIsCompleteInEveryBasis) {
    const Jones e{cplx{0.6, 0.1}, cplx{-0.3, 0.0}};
    const double n = std::sqrt(norm2(e));
    const Jones u{e[0] / n, e[1] / n};
    for (Pol p : kAllPols) EXPECT_NEAR(project(u, p) + project(u, orthogonal(p)), 1.0, 1e-14);
}

TEST(Polarization, RejectsUnnormalizedState) {
    EXPECT_THROW(project(Jones{cplx{1, 0}, cplx{1, 0}}, Pol::H), Error);
}

TEST(Polarization, LabelsRoundTrip) {
    for (Pol p : kAllPols) EXPECT_EQ(parse_pol(to_string(p)), p);
    EXPECT_FALSE(parse_pol("X").has_value());
}

TEST(SpinState, ValidatesNorm) {
    EXPECT_THROW(SpinHalfState(1.0, 1.0, Subspace::ground), Error);
    auto s = SpinHalfState::normalized(1.0, cplx{0, 1}, Subspace::trion);
    EXPECT_NEAR(s.p_up(), 0.5, 1e-15);
    EXPECT_EQ(s.basis(), Subspace::trion);
}

TEST(Device, ValidateNamesTheField) {
    DeviceParams d;
    d.p_mem = 1.5;
    try {
        d.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.path(), "device.p_mem");
    }
    d = {};
    d.T1 = 0;
    EXPECT_THROW(d.validate(), ConfigError);
}
