/**
 * @brief End-to-end reductions from event streams to fitted spin parameters
 * for the three measurement families: polarization-resolved lifetimes,
 * cw autocorrelations and pulsed two-photon delay sweeps.
 */
#pragma once

#include "qdspin/correlator.hpp"
#include "qdspin/fitkit.hpp"
#include "qdspin/montecarlo.hpp"

namespace qdspin {

struct AnalysisSpec {
    double bin = 10e-12;                 ///< histogram bin
    double window = 50e-9;               ///< cw correlation half-window
    double exclusion = 150e-12;          ///< cw: |tau| region left out of the DOCP fit
    double trace_exclusion = 2e-9;       ///< cw: region left out of the single-trace phase fits
    double slice_t1 = 370e-12;           ///< pulsed: CH1 time of the analyzed slice
    double slice_tol_bins = 1.0;
    double readout_start = 50e-12;       ///< pulsed: readout window after pulse 2
    double readout_end = 270e-12;
    std::optional<double> fit_alpha;     ///< overrides the variant default
    double max_time = 2e-9;              ///< lifetime / pulsed per-photon time range
    double map_delay = 1.6e-9;           ///< pulsed: delay whose full map is exported

    friend bool operator==(const AnalysisSpec&, const AnalysisSpec&) = default;
};

// ---------------------------------------------------------------------------
// Lifetime

struct LifetimeAnalysis {
    Histogram1D co;     ///< channel 0
    Histogram1D cross;  ///< channel 1 (empty for single-polarizer runs)
    DocpTrace docp;
    std::optional<FitResult> fit;
};

/// Histograms both analyzer outputs and, for two-channel runs, fits the DOCP
/// with an undamped cosine (the trion has no dephasing on the lifetime scale
/// unless `t2star` is given).
inline LifetimeAnalysis analyze_lifetime(std::span<const DetectionEvent> events, double rep_period,
                                         const AnalysisSpec& spec, std::optional<double> t2star = {}) {
    LifetimeAnalysis a;
    a.co = lifetime_histogram(events, rep_period, spec.bin, spec.max_time, 0);
    a.cross = lifetime_histogram(events, rep_period, spec.bin, spec.max_time, 1);
    if (a.cross.total() == 0) return a;
    a.docp = docp(a.co, a.cross);
    DampedCosineOptions o = DampedCosineOptions::pulsed();
    o.fixed_alpha = spec.fit_alpha.value_or(1.0);
    o.fixed_T2 = t2star.value_or(1e6 * spec.max_time);
    a.fit = fit_damped_cosine(a.docp, o);
    return a;
}

struct ZeemanRoundTrip {
    std::vector<ZeemanPoint> points;  ///< (B, h f) from each lifetime fit
    ZeemanFit fit;
};

/// Turns fitted precession frequencies at several fields into a g-factor.
inline ZeemanRoundTrip zeeman_from_frequencies(std::span<const double> fields, std::span<const FitResult> fits) {
    if (fields.size() != fits.size()) throw Error("zeeman_from_frequencies: size mismatch");
    ZeemanRoundTrip z;
    for (std::size_t i = 0; i < fields.size(); ++i)
        z.points.push_back({fields[i], PhysicalConstants::h * fits[i].param("f"),
                            PhysicalConstants::h * fits[i].sigma("f")});
    // Exact fits report zero uncertainty; fall back to an unweighted fit then.
    if (std::any_of(z.points.begin(), z.points.end(), [](const ZeemanPoint& p) { return p.sigma <= 0.0; }))
        for (auto& p : z.points) p.sigma = 0.0;
    z.fit = fit_linear_zeeman(z.points);
    return z;
}

// ---------------------------------------------------------------------------
// cw autocorrelation

struct CwAnalysis {
    CwCorrelation rr, rl;
    Histogram1D rr_folded, rl_folded;   ///< counts vs |tau|
    DocpTrace g_rr, g_rl;               ///< plateau-normalized folded traces
    DocpTrace docp;                     ///< from the plateau-normalized folded counts
    FitResult fit;                      ///< cw damped cosine on docp
    FitResult fit_rr, fit_rl;           ///< single-trace fits (f, T2*, alpha taken from `fit`)
    double phase_gap = 0.0;             ///< phi_RR - phi_RL wrapped to [0, 2 pi)
};

namespace detail {

inline DocpTrace normalized_trace(const Histogram1D& folded, double plateau_per_bin) {
    DocpTrace t;
    for (std::size_t i = 0; i < folded.size(); ++i) {
        const double n = static_cast<double>(folded.count(i));
        t.times.push_back(folded.center(i));
        t.docp.push_back(n / plateau_per_bin);
        t.error.push_back(std::sqrt(std::max(n, 1.0)) / plateau_per_bin);
        t.n_total.push_back(0.0);
        t.valid.push_back(true);
    }
    return t;
}

} // namespace detail

/// RR and RL are separate acquisitions, so each correlation is normalized
/// by its own accidental plateau before the DOCP is formed. Positive and
/// negative delays are folded together.
inline CwAnalysis analyze_cw(std::span<const DetectionEvent> rr_events, double rr_span,
                             std::span<const DetectionEvent> rl_events, double rl_span, const AnalysisSpec& spec) {
    CwAnalysis a;
    a.rr = correlate_cw(rr_events, CwPairing::RR, spec.window, spec.bin, rr_span);
    a.rl = correlate_cw(rl_events, CwPairing::RL, spec.window, spec.bin, rl_span);
    if (a.rr.empty || a.rl.empty) throw Error("analyze_cw: a correlation has no events");
    a.rr_folded = fold_symmetric(a.rr.histogram);
    a.rl_folded = fold_symmetric(a.rl.histogram);
    const double p_rr = 2.0 * a.rr.plateau(), p_rl = 2.0 * a.rl.plateau();
    a.docp = docp(a.rr_folded, a.rl_folded, 1.0 / p_rr, 1.0 / p_rl);
    a.fit = fit_damped_cosine(a.docp, [&] {
        auto o = DampedCosineOptions::cw(spec.exclusion);
        o.fixed_alpha = spec.fit_alpha;
        return o;
    }());

    a.g_rr = detail::normalized_trace(a.rr_folded, p_rr);
    a.g_rl = detail::normalized_trace(a.rl_folded, p_rl);
    auto single = DampedCosineOptions::pulsed();
    single.exclusion = std::max(spec.exclusion, spec.trace_exclusion);
    // Only offset, amplitude and phase are free: the shared precession and
    // envelope come from the DOCP fit, which has far better statistics.
    single.fixed_alpha = a.fit.param("alpha");
    if (!a.fit.no_oscillation) {
        single.fixed_f = a.fit.param("f");
        single.fixed_T2 = a.fit.param("T2star");
    }
    a.fit_rr = fit_damped_cosine(a.g_rr, single);
    a.fit_rl = fit_damped_cosine(a.g_rl, single);
    a.phase_gap = std::fmod(a.fit_rr.param("phi") - a.fit_rl.param("phi") + 4.0 * std::numbers::pi,
                            2.0 * std::numbers::pi);
    return a;
}

// ---------------------------------------------------------------------------
// Pulsed two-photon delay sweep

/// Readout histogram of one pulsed run: CH2 times (relative to pulse 2) of
/// heralded pairs whose CH1 time lies in the analyzed slice.
struct PulsedReduction {
    double delay = 0.0;
    Histogram1D readout;
    MapDiagnostics diagnostics;
    std::uint64_t pairs = 0;  ///< shots with one click on each channel
};

inline Map2DResult pulsed_map(std::span<const DetectionEvent> events, double rep_period, double delay,
                              const AnalysisSpec& spec) {
    return build_map2d(events, rep_period, uniform_edges(0.0, spec.max_time, spec.bin),
                       uniform_edges(delay, delay + spec.max_time, spec.bin));
}

inline PulsedReduction reduce_pulsed(std::span<const DetectionEvent> events, double rep_period, double delay,
                                     const AnalysisSpec& spec) {
    const auto m = pulsed_map(events, rep_period, delay, spec);
    const auto s = m.map.slice(spec.slice_t1, spec.slice_tol_bins * spec.bin);
    PulsedReduction r;
    r.delay = delay;
    r.readout = Histogram1D(uniform_edges(0.0, spec.max_time, spec.bin));
    for (std::size_t i = 0; i < s.size(); ++i) r.readout.add_to_bin(i, s.count(i));
    r.diagnostics = m.diagnostics;
    r.pairs = m.diagnostics.shots_used;
    return r;
}

struct PulsedAnalysis {
    std::vector<double> delays;
    std::vector<double> readout_t2;   ///< readout bin centers inside the window
    std::vector<DocpTrace> traces;    ///< DOCP vs delay, one per readout bin
    std::vector<FitResult> fits;
    std::vector<ReadoutFit> readout_fits;
    WindowAverage average{};
};

/// `co` and `cross` hold the reductions of the CH2 = R and CH2 = L runs for
/// the same delays, in the same order.
inline PulsedAnalysis analyze_pulsed(std::span<const PulsedReduction> co, std::span<const PulsedReduction> cross,
                                     const AnalysisSpec& spec) {
    if (co.size() != cross.size() || co.empty()) throw Error("analyze_pulsed: need matching non-empty sweeps");
    PulsedAnalysis a;
    for (std::size_t d = 0; d < co.size(); ++d) {
        if (std::abs(co[d].delay - cross[d].delay) > 1e-15) throw Error("analyze_pulsed: delay mismatch");
        a.delays.push_back(co[d].delay);
    }
    const auto& axis = co[0].readout;
    auto fit_opt = DampedCosineOptions::pulsed();
    fit_opt.fixed_alpha = spec.fit_alpha.value_or(1.0);
    fit_opt.model_weights = true;
    for (std::size_t k = 0; k < axis.size(); ++k) {
        const double t2 = axis.center(k);
        if (t2 < spec.readout_start || t2 > spec.readout_end) continue;
        DocpTrace tr;
        for (std::size_t d = 0; d < a.delays.size(); ++d) {
            const double n_co = static_cast<double>(co[d].readout.count(k));
            const double n_cr = static_cast<double>(cross[d].readout.count(k));
            tr.times.push_back(a.delays[d]);
            tr.n_total.push_back(n_co + n_cr);
            tr.valid.push_back(n_co + n_cr > 0.0);
            tr.docp.push_back(n_co + n_cr > 0.0 ? docp_value(n_co, n_cr) : std::numeric_limits<double>::quiet_NaN());
            tr.error.push_back(n_co + n_cr > 0.0 ? docp_error(n_co, n_cr) : std::numeric_limits<double>::quiet_NaN());
        }
        auto fit = fit_damped_cosine(tr, fit_opt);
        a.readout_t2.push_back(t2);
        a.readout_fits.push_back({t2, fit.param("T2star"), fit.param("f"), fit.converged});
        a.traces.push_back(std::move(tr));
        a.fits.push_back(std::move(fit));
    }
    std::vector<ReadoutFit> good;
    for (const auto& r : a.readout_fits)
        if (r.converged) good.push_back(r);
    a.average = window_average(good, spec.readout_start, spec.readout_end);
    return a;
}

} // namespace qdspin
