#include "qdspin/correlator.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace qdspin;

namespace {

std::vector<DetectionEvent> stream(std::initializer_list<double> ch0, std::initializer_list<double> ch1, Pol pol) {
    std::vector<DetectionEvent> ev;
    for (double t : ch0) ev.push_back({0, 0, pol, t});
    for (double t : ch1) ev.push_back({0, 1, pol, t});
    return ev;
}

// O(N^2) pair count of stop - start in [lo, hi).
std::vector<std::uint64_t> brute_force(const std::vector<double>& a, const std::vector<double>& b, const Histogram1D& h) {
    std::vector<std::uint64_t> c(h.size(), 0);
    for (double x : a)
        for (double y : b)
            if (auto i = h.locate(y - x)) ++c[*i];
    return c;
}

} // namespace

TEST(Correlate, HandExample) {
    const auto ev = stream({0.0}, {1e-9, 3e-9}, Pol::R);
    const auto c = correlate_cw(ev, CwPairing::RR, 5e-9, 1e-9, 10e-9);
    ASSERT_EQ(c.histogram.size(), 10u);
    EXPECT_EQ(c.histogram.total(), 2u);
    EXPECT_EQ(c.histogram.count(*c.histogram.locate(1e-9 + 1e-12)), 1u);
    EXPECT_EQ(c.histogram.count(*c.histogram.locate(3e-9 + 1e-12)), 1u);
    EXPECT_NEAR(c.histogram.edges().front(), -5e-9, 1e-21);
    EXPECT_NEAR(c.histogram.edges()[5], 0.0, 1e-21);
}

TEST(Correlate, EmptyStreamsGiveEmptyHistogram) {
    const auto ev = stream({1e-9}, {}, Pol::L);
    const auto c = correlate_cw(ev, CwPairing::RL, 5e-9, 1e-9, 1e-6);
    EXPECT_TRUE(c.empty);
    EXPECT_EQ(c.histogram.total(), 0u);
}

TEST(Correlate, MatchesBruteForce) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1e-6);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<double> a(700), b(900);
        for (auto& x : a) x = u(rng);
        for (auto& x : b) x = u(rng);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        const double window = 20e-9, bin = 0.5e-9;
        const auto h = correlate_times(a, b, window, bin);
        EXPECT_EQ(h.counts(), brute_force(a, b, h));
    }
}

TEST(Correlate, StartStopTakesFirstStopOnly) {
    const std::vector<double> a{0.0, 10e-9}, b{1e-9, 2e-9, 11.5e-9};
    const auto h = correlate_times(a, b, 5e-9, 1e-9, CorrelationMode::start_stop);
    // 0 -> 1 ns and 10 -> 11.5 ns; the 2 ns stop is never used.
    EXPECT_EQ(h.total(), 2u);
    EXPECT_EQ(h.count(*h.locate(1.2e-9)), 2u);
}

TEST(Correlate, IndependentStreamsAreFlat) {
    std::mt19937_64 rng(2);
    const double T = 10e-3, rate = 5e6;
    std::exponential_distribution<double> gap(rate);
    std::vector<DetectionEvent> ev;
    for (std::uint8_t ch : {0, 1})
        for (double t = gap(rng); t < T; t += gap(rng)) ev.push_back({0, ch, Pol::R, t});
    const auto c = correlate_cw(ev, CwPairing::RR, 50e-9, 1e-9, T);
    const auto g = c.normalized();
    double mean = 0.0;
    for (double v : g) mean += v;
    mean /= static_cast<double>(g.size());
    EXPECT_NEAR(mean, 1.0, 0.02);
    const double per_bin = c.plateau();
    for (double v : g) EXPECT_NEAR(v, 1.0, 5.0 / std::sqrt(per_bin));
}

TEST(Correlate, FoldSumsMirrorBins) {
    auto h = Histogram1D(uniform_edges(-3.0, 3.0, 1.0));
    for (std::size_t i = 0; i < h.size(); ++i) h.add_to_bin(i, i + 1);
    const auto f = fold_symmetric(h);
    ASSERT_EQ(f.size(), 3u);
    EXPECT_EQ(f.count(0), 3u + 4u);
    EXPECT_EQ(f.count(1), 2u + 5u);
    EXPECT_EQ(f.count(2), 1u + 6u);
    EXPECT_EQ(f.total(), h.total());
}

TEST(Docp, Examples) {
    EXPECT_EQ(integrated_docp(100, 100).value, 0.0);
    EXPECT_EQ(integrated_docp(400, 0).value, 1.0);
    EXPECT_NEAR(integrated_docp(373, 27).value, 0.865, 1e-12);
    const auto d = integrated_docp(373, 27);
    EXPECT_NEAR(d.error, std::sqrt((1 - 0.865 * 0.865) / 400), 1e-12);
}

TEST(Docp, AntisymmetricAndBounded) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> u(0, 1000);
    auto a = Histogram1D::uniform(0, 1, 20), b = Histogram1D::uniform(0, 1, 20);
    for (std::size_t i = 0; i < 20; ++i) {
        a.add_to_bin(i, u(rng));
        b.add_to_bin(i, u(rng));
    }
    const auto ab = docp(a, b), ba = docp(b, a);
    for (std::size_t i = 0; i < 20; ++i) {
        if (!ab.valid[i]) continue;
        EXPECT_NEAR(ab.docp[i], -ba.docp[i], 1e-15);
        EXPECT_LE(std::abs(ab.docp[i]), 1.0);
        EXPECT_NEAR(ab.error[i], ba.error[i], 1e-15);
    }
}

TEST(Docp, ScaledErrorReducesToBinomial) {
    EXPECT_NEAR(docp_error(300, 100, 1, 1), std::sqrt((1 - 0.25) / 400), 1e-14);
    EXPECT_NEAR(docp_value(300, 100, 1.0, 3.0), 0.0, 1e-15);
}

TEST(Docp, EmptyBinsAreInvalidAndMismatchRejected) {
    auto a = Histogram1D::uniform(0, 1, 4), b = Histogram1D::uniform(0, 1, 4);
    a.add_to_bin(0, 5);
    const auto t = docp(a, b);
    EXPECT_TRUE(t.valid[0]);
    EXPECT_FALSE(t.valid[1]);
    EXPECT_EQ(t.valid_count(), 1u);
    EXPECT_THROW(docp(a, Histogram1D::uniform(0, 1, 5)), Error);
}

TEST(Histogram, TotalInvariantUnderRefinement) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::vector<double> x(5000);
    for (auto& v : x) v = u(rng);
    auto coarse = Histogram1D::uniform(0, 10, 10), fine = Histogram1D::uniform(0, 10, 80);
    for (double v : x) {
        coarse.fill(v);
        fine.fill(v);
    }
    EXPECT_EQ(coarse.total(), fine.total());
    EXPECT_EQ(coarse.total(), x.size());
    for (std::size_t i = 0; i < 10; ++i) {
        std::uint64_t s = 0;
        for (std::size_t j = 0; j < 8; ++j) s += fine.count(8 * i + j);
        EXPECT_EQ(s, coarse.count(i));
    }
}

TEST(Histogram, MergeIsAssociative) {
    auto make = [](std::uint64_t k) {
        auto h = Histogram1D::uniform(0, 1, 5);
        for (std::size_t i = 0; i < 5; ++i) h.add_to_bin(i, k * (i + 1));
        return h;
    };
    auto a = make(1), b = make(2), c = make(5);
    auto left = a;
    left.merge(b).merge(c);
    auto bc = b;
    bc.merge(c);
    auto right = a;
    right.merge(bc);
    EXPECT_EQ(left, right);
    EXPECT_THROW(a.merge(Histogram1D::uniform(0, 2, 5)), Error);
}

TEST(Map2D, SingleShotLandsInOneCell) {
    const double rep = 12.5e-9;
    std::vector<DetectionEvent> ev{{3, 0, Pol::R, 3 * rep + 0.375e-9}, {3, 1, Pol::R, 3 * rep + 1.905e-9}};
    const auto r = build_map2d(ev, rep, uniform_edges(0, 5e-9, 10e-12), uniform_edges(0, 5e-9, 10e-12));
    EXPECT_EQ(r.map.total(), 1u);
    EXPECT_EQ(r.diagnostics.shots_used, 1u);
    const auto row = *r.map.t1_axis().locate(0.375e-9);
    const auto col = *r.map.t2_axis().locate(1.905e-9);
    EXPECT_EQ(r.map.at(row, col), 1u);
}

TEST(Map2D, DropsShotsWithoutExactlyOneClickPerChannel) {
    const double rep = 12.5e-9;
    std::vector<DetectionEvent> ev{{0, 0, Pol::R, 0.1e-9},       {0, 1, Pol::R, 2e-9},
                                   {1, 1, Pol::R, rep + 2e-9},   {2, 0, Pol::R, 2 * rep + 0.1e-9},
                                   {2, 0, Pol::R, 2 * rep + 0.2e-9}, {2, 1, Pol::R, 2 * rep + 2e-9}};
    const auto r = build_map2d(ev, rep, uniform_edges(0, 5e-9, 10e-12), uniform_edges(0, 5e-9, 10e-12));
    EXPECT_EQ(r.diagnostics.shots_seen, 3u);
    EXPECT_EQ(r.diagnostics.shots_used, 1u);
    EXPECT_EQ(r.diagnostics.shots_dropped, 2u);
    EXPECT_EQ(r.map.total(), 1u);
}

TEST(Map2D, SliceSumsNeighbouringRows) {
    Map2D m(uniform_edges(0, 1e-9, 10e-12), uniform_edges(0, 1e-9, 10e-12));
    m.fill(0.365e-9, 0.5e-9);
    m.fill(0.375e-9, 0.5e-9);
    m.fill(0.355e-9, 0.5e-9);
    m.fill(0.395e-9, 0.5e-9);
    EXPECT_EQ(m.slice(0.37e-9, 10e-12).total(), 2u);
    EXPECT_EQ(m.slice(0.365e-9, 10e-12).total(), 3u);
    EXPECT_EQ(m.marginal_t1().total(), 4u);
}

TEST(Csv, NineSignificantDigits) {
    auto h = Histogram1D::uniform(0, 1e-9, 3);
    h.add_to_bin(1, 7);
    std::ostringstream os;
    std::vector<std::string> hdr{"test"};
    write_histogram_csv(os, h, hdr);
    EXPECT_NE(os.str().find("# test\nbin_center_s,counts,error\n"), std::string::npos);
    EXPECT_NE(os.str().find("5e-10,7,2.64575131"), std::string::npos);
}
