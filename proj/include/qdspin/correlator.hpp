/**
 * @brief Event-stream reductions: lifetime histograms, full and start-stop
 * cross-correlations, two-photon time maps with slices, and the degree of
 * circular polarization with its counting error.
 */
#pragma once

#include "qdspin/core.hpp"
#include "qdspin/montecarlo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

namespace qdspin {

class Histogram1D {
public:
    Histogram1D() = default;

    explicit Histogram1D(std::vector<double> edges) : edges_(std::move(edges)) {
        if (edges_.size() < 2) throw Error("Histogram1D: need at least two edges");
        for (std::size_t i = 1; i < edges_.size(); ++i)
            if (!(edges_[i] > edges_[i - 1])) throw Error("Histogram1D: edges must be strictly increasing");
        counts_.assign(edges_.size() - 1, 0);
    }

    /// n equal bins over [lo, hi).
    static Histogram1D uniform(double lo, double hi, std::size_t n) {
        if (n == 0 || !(hi > lo)) throw Error("Histogram1D::uniform: bad range");
        std::vector<double> e(n + 1);
        for (std::size_t i = 0; i <= n; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n);
        return Histogram1D(std::move(e));
    }

    std::size_t size() const noexcept { return counts_.size(); }
    const std::vector<double>& edges() const noexcept { return edges_; }
    const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }
    std::uint64_t count(std::size_t i) const { return counts_.at(i); }
    double center(std::size_t i) const { return 0.5 * (edges_[i] + edges_[i + 1]); }
    double width(std::size_t i) const { return edges_[i + 1] - edges_[i]; }
    double error(std::size_t i) const { return std::sqrt(static_cast<double>(counts_.at(i))); }
    bool empty() const noexcept { return edges_.empty(); }

    std::uint64_t total() const noexcept {
        std::uint64_t s = 0;
        for (auto c : counts_) s += c;
        return s;
    }

    /// Bin holding x, or nullopt outside [edges.front(), edges.back()).
    std::optional<std::size_t> locate(double x) const noexcept {
        if (edges_.empty() || x < edges_.front() || x >= edges_.back()) return std::nullopt;
        auto it = std::upper_bound(edges_.begin(), edges_.end(), x);
        return static_cast<std::size_t>(it - edges_.begin()) - 1;
    }

    bool fill(double x, std::uint64_t weight = 1) noexcept {
        if (auto i = locate(x)) {
            counts_[*i] += weight;
            return true;
        }
        return false;
    }

    void add_to_bin(std::size_t i, std::uint64_t n) { counts_.at(i) += n; }

    bool same_binning(const Histogram1D& o) const noexcept { return edges_ == o.edges_; }

    /// Bin-wise sum; the reduction step for sharded histogramming.
    Histogram1D& merge(const Histogram1D& o) {
        if (!same_binning(o)) throw Error("Histogram1D::merge: binning mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

    friend bool operator==(const Histogram1D&, const Histogram1D&) = default;

private:
    std::vector<double> edges_;
    std::vector<std::uint64_t> counts_;
};

/// Detection-time histogram of one channel/projection, times taken relative
/// to each event's laser period.
inline Histogram1D lifetime_histogram(std::span<const DetectionEvent> events, double rep_period, double bin,
                                      double t_max, int channel = -1, std::optional<Pol> projection = {}) {
    auto h = Histogram1D::uniform(0.0, t_max, static_cast<std::size_t>(std::llround(t_max / bin)));
    for (const auto& e : events) {
        if (channel >= 0 && e.channel != channel) continue;
        if (projection && e.projection != *projection) continue;
        h.fill(e.time_tag - static_cast<double>(e.shot) * rep_period);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Cross-correlation

enum class CorrelationMode : std::uint8_t { full, start_stop };

/// Which click pairs a cw correlation uses. The excitation is R in both
/// cases; RR correlates R clicks on both channels, RL correlates L clicks on
/// both channels (polarizer before the beam splitter).
enum class CwPairing : std::uint8_t { RR, RL };

struct ChannelSelector {
    std::uint8_t channel;
    Pol projection;
};

inline std::pair<ChannelSelector, ChannelSelector> selectors(CwPairing p) {
    const Pol pol = p == CwPairing::RR ? Pol::R : Pol::L;
    return {{0, pol}, {1, pol}};
}

struct CwCorrelation {
    Histogram1D histogram;  ///< counts vs (t_stop - t_start), edges symmetric about 0
    std::uint64_t n_start = 0;
    std::uint64_t n_stop = 0;
    double span = 0.0;
    bool empty = true;  ///< set when either side had no events

    /// Expected accidental counts per bin for uncorrelated streams.
    double plateau(std::size_t bin) const {
        if (span <= 0.0) return 0.0;
        return static_cast<double>(n_start) * static_cast<double>(n_stop) * histogram.width(bin) / span;
    }

    /// Uniform-binning shortcut for plateau().
    double plateau() const { return histogram.empty() ? 0.0 : plateau(0); }

    std::vector<double> normalized() const {
        std::vector<double> out(histogram.size(), 0.0);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double p = plateau(i);
            out[i] = p > 0.0 ? static_cast<double>(histogram.count(i)) / p : 0.0;
        }
        return out;
    }
};

inline std::vector<double> select_times(std::span<const DetectionEvent> events, ChannelSelector sel) {
    std::vector<double> t;
    for (const auto& e : events)
        if (e.channel == sel.channel && e.projection == sel.projection) t.push_back(e.time_tag);
    std::sort(t.begin(), t.end());
    return t;
}

/// Histogram of stop - start delays in [-window, window). Full mode counts
/// every pair; start-stop mode counts only the first stop after each start.
inline Histogram1D correlate_times(std::span<const double> starts, std::span<const double> stops, double window,
                                   double bin, CorrelationMode mode = CorrelationMode::full) {
    if (!(bin > 0.0) || !(window > 0.0)) throw Error("correlate: bin and window must be > 0");
    const auto half = static_cast<std::size_t>(std::llround(window / bin));
    if (half == 0) throw Error("correlate: window shorter than one bin");
    const double w = static_cast<double>(half) * bin;
    std::vector<double> edges(2 * half + 1);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = (static_cast<double>(i) - static_cast<double>(half)) * bin;
    Histogram1D h(std::move(edges));
    const std::size_t nbins = 2 * half;
    std::size_t lo = 0;
    for (double ts : starts) {
        while (lo < stops.size() && stops[lo] < ts - w) ++lo;
        for (std::size_t j = lo; j < stops.size(); ++j) {
            const double d = stops[j] - ts;
            if (d >= w) break;
            if (mode == CorrelationMode::start_stop && d <= 0.0) continue;
            auto k = static_cast<std::ptrdiff_t>(std::floor((d + w) / bin));
            k = std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(nbins) - 1);
            h.add_to_bin(static_cast<std::size_t>(k), 1);
            if (mode == CorrelationMode::start_stop) break;
        }
    }
    return h;
}

inline CwCorrelation correlate_cw(std::span<const DetectionEvent> events, ChannelSelector start, ChannelSelector stop,
                                  double window, double bin, double span,
                                  CorrelationMode mode = CorrelationMode::full) {
    const auto a = select_times(events, start);
    const auto b = select_times(events, stop);
    CwCorrelation c;
    c.histogram = correlate_times(a, b, window, bin, mode);
    c.n_start = a.size();
    c.n_stop = b.size();
    c.span = span;
    c.empty = a.empty() || b.empty();
    return c;
}

inline CwCorrelation correlate_cw(std::span<const DetectionEvent> events, CwPairing pairing, double window,
                                  double bin, double span, CorrelationMode mode = CorrelationMode::full) {
    const auto [s, t] = selectors(pairing);
    return correlate_cw(events, s, t, window, bin, span, mode);
}

/// Folds a histogram with edges symmetric about zero onto [0, window):
/// bin k collects the delays +/-[k, k+1) bin widths.
inline Histogram1D fold_symmetric(const Histogram1D& h) {
    const auto& e = h.edges();
    const std::size_t n = h.size();
    if (n % 2 != 0) throw Error("fold_symmetric: odd bin count");
    const std::size_t half = n / 2;
    for (std::size_t i = 0; i <= n; ++i)
        if (std::abs(e[i] + e[n - i]) > 1e-9 * std::abs(e[n])) throw Error("fold_symmetric: edges not symmetric");
    Histogram1D f(std::vector<double>(e.begin() + static_cast<std::ptrdiff_t>(half), e.end()));
    for (std::size_t k = 0; k < half; ++k) f.add_to_bin(k, h.count(half + k) + h.count(half - 1 - k));
    return f;
}

// ---------------------------------------------------------------------------
// DOCP

struct DocpTrace {
    std::vector<double> times;
    std::vector<double> docp;
    std::vector<double> error;
    std::vector<double> n_total;  ///< co + cross counts in the bin
    std::vector<bool> valid;      ///< false where no counts were recorded

    std::size_t size() const noexcept { return times.size(); }
    std::size_t valid_count() const noexcept {
        return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
    }
};

/// S = (a x - b y) / (a x + b y) from raw counts x, y with optional scale
/// factors a, b (plateau normalization). The error propagates Poisson counts
/// and reduces to sqrt((1 - S^2)/N) for a = b = 1.
inline double docp_value(double x, double y, double a = 1.0, double b = 1.0) {
    const double u = a * x, v = b * y;
    return (u - v) / (u + v);
}

inline double docp_error(double x, double y, double a = 1.0, double b = 1.0) {
    const double u = a * x, v = b * y, s = u + v;
    const double var = 4.0 * (v * v * a * a * x + u * u * b * b * y) / (s * s * s * s);
    return std::sqrt(var);
}

inline DocpTrace docp(const Histogram1D& co, const Histogram1D& cross, double scale_co = 1.0, double scale_cross = 1.0) {
    if (!co.same_binning(cross)) throw Error("docp: histograms have different binning");
    DocpTrace t;
    const std::size_t n = co.size();
    t.times.resize(n);
    t.docp.resize(n);
    t.error.resize(n);
    t.n_total.resize(n);
    t.valid.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(co.count(i));
        const double y = static_cast<double>(cross.count(i));
        t.times[i] = co.center(i);
        t.n_total[i] = x + y;
        t.valid[i] = x + y > 0.0;
        if (!t.valid[i]) {
            t.docp[i] = std::numeric_limits<double>::quiet_NaN();
            t.error[i] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        t.docp[i] = docp_value(x, y, scale_co, scale_cross);
        t.error[i] = docp_error(x, y, scale_co, scale_cross);
    }
    return t;
}

/// Integrated DOCP over all bins, with the binomial error.
struct DocpValue {
    double value;
    double error;
    double n_total;
};

inline DocpValue integrated_docp(std::uint64_t co, std::uint64_t cross) {
    const double x = static_cast<double>(co), y = static_cast<double>(cross);
    if (x + y == 0.0) throw Error("integrated_docp: no counts");
    return {docp_value(x, y), docp_error(x, y), x + y};
}

// ---------------------------------------------------------------------------
// Two-photon maps

class Map2D {
public:
    Map2D(std::vector<double> t1_edges, std::vector<double> t2_edges)
        : rows_(std::move(t1_edges)), cols_(std::move(t2_edges)), counts_(rows_.size() * cols_.size(), 0) {}

    const Histogram1D& t1_axis() const noexcept { return rows_; }
    const Histogram1D& t2_axis() const noexcept { return cols_; }
    std::size_t rows() const noexcept { return rows_.size(); }
    std::size_t cols() const noexcept { return cols_.size(); }
    std::uint64_t at(std::size_t r, std::size_t c) const { return counts_.at(r * cols() + c); }

    bool fill(double t1, double t2) {
        auto r = rows_.locate(t1);
        auto c = cols_.locate(t2);
        if (!r || !c) return false;
        ++counts_[*r * cols() + *c];
        return true;
    }

    std::uint64_t total() const noexcept {
        std::uint64_t s = 0;
        for (auto v : counts_) s += v;
        return s;
    }

    /// Rows with |center(t1) - t1_fixed| <= tolerance, summed onto the t2 axis.
    Histogram1D slice(double t1_fixed, double tolerance) const {
        Histogram1D h(cols_.edges());
        for (std::size_t r = 0; r < rows(); ++r) {
            if (std::abs(rows_.center(r) - t1_fixed) > tolerance + 1e-15) continue;
            for (std::size_t c = 0; c < cols(); ++c) h.add_to_bin(c, at(r, c));
        }
        return h;
    }

    /// Sum over all t1 rows.
    Histogram1D marginal_t2() const {
        Histogram1D h(cols_.edges());
        for (std::size_t r = 0; r < rows(); ++r)
            for (std::size_t c = 0; c < cols(); ++c) h.add_to_bin(c, at(r, c));
        return h;
    }

    Histogram1D marginal_t1() const {
        Histogram1D h(rows_.edges());
        for (std::size_t r = 0; r < rows(); ++r)
            for (std::size_t c = 0; c < cols(); ++c) h.add_to_bin(r, at(r, c));
        return h;
    }

private:
    Histogram1D rows_;
    Histogram1D cols_;
    std::vector<std::uint64_t> counts_;
};

struct MapDiagnostics {
    std::uint64_t shots_seen = 0;      ///< shots with at least one click
    std::uint64_t shots_used = 0;      ///< exactly one click on each channel
    std::uint64_t shots_dropped = 0;
    std::uint64_t outside_range = 0;   ///< accepted pairs outside the map axes
};

struct Map2DResult {
    Map2D map;
    MapDiagnostics diagnostics;
};

/// Per-shot (t_CH1, t_CH2) map, both times relative to the pulse-1 trigger
/// of the shot. Shots without exactly one click per channel are dropped.
inline Map2DResult build_map2d(std::span<const DetectionEvent> events, double rep_period, std::vector<double> t1_edges,
                               std::vector<double> t2_edges, std::uint8_t ch1 = 0, std::uint8_t ch2 = 1) {
    Map2DResult out{Map2D(std::move(t1_edges), std::move(t2_edges)), {}};
    std::size_t i = 0;
    while (i < events.size()) {
        const std::uint32_t shot = events[i].shot;
        const double sync = static_cast<double>(shot) * rep_period;
        int n1 = 0, n2 = 0;
        double t1 = 0.0, t2 = 0.0;
        for (; i < events.size() && events[i].shot == shot; ++i) {
            if (events[i].channel == ch1) {
                ++n1;
                t1 = events[i].time_tag - sync;
            } else if (events[i].channel == ch2) {
                ++n2;
                t2 = events[i].time_tag - sync;
            }
        }
        ++out.diagnostics.shots_seen;
        if (n1 != 1 || n2 != 1) {
            ++out.diagnostics.shots_dropped;
            continue;
        }
        ++out.diagnostics.shots_used;
        if (!out.map.fill(t1, t2)) ++out.diagnostics.outside_range;
    }
    return out;
}

inline std::vector<double> uniform_edges(double lo, double hi, double bin) {
    const auto n = static_cast<std::size_t>(std::llround((hi - lo) / bin));
    return Histogram1D::uniform(lo, lo + static_cast<double>(n) * bin, n).edges();
}

// ---------------------------------------------------------------------------
// CSV emitters. 9 significant digits, '#'-prefixed header lines.

inline std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_comment_lines(std::ostream& os, std::span<const std::string> lines) {
    for (const auto& l : lines) os << "# " << l << '\n';
}

inline void write_histogram_csv(std::ostream& os, const Histogram1D& h, std::span<const std::string> header = {}) {
    write_comment_lines(os, header);
    os << "bin_center_s,counts,error\n";
    for (std::size_t i = 0; i < h.size(); ++i)
        os << fmt9(h.center(i)) << ',' << h.count(i) << ',' << fmt9(h.error(i)) << '\n';
}

inline void write_docp_csv(std::ostream& os, const DocpTrace& t, std::span<const std::string> header = {}) {
    write_comment_lines(os, header);
    os << "bin_center_s,docp,error,n_total\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!t.valid[i]) continue;
        os << fmt9(t.times[i]) << ',' << fmt9(t.docp[i]) << ',' << fmt9(t.error[i]) << ',' << fmt9(t.n_total[i]) << '\n';
    }
}

inline void write_map_csv(std::ostream& os, const Map2D& m, std::span<const std::string> header = {}) {
    write_comment_lines(os, header);
    os << "t1_s,t2_s,counts\n";
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c)
            if (m.at(r, c) > 0)
                os << fmt9(m.t1_axis().center(r)) << ',' << fmt9(m.t2_axis().center(c)) << ',' << m.at(r, c) << '\n';
}

} // namespace qdspin
