/**
 * @brief Parameter extraction: linear Zeeman fits, damped-cosine fits of
 * DOCP traces, FFT frequency estimates and readout-window averaging.
 */
#pragma once

#include "qdspin/core.hpp"
#include "qdspin/correlator.hpp"
#include "qdspin/lm.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <numeric>

namespace qdspin {

// ---------------------------------------------------------------------------
// Linear Zeeman fits

struct ZeemanPoint {
    double B;       ///< tesla
    double dE;      ///< eV
    double sigma = 0.0;  ///< eV; 0 means unweighted
};

enum class Intercept : std::uint8_t { free, zero };

struct ZeemanFit {
    double g = 0.0;
    double sigma_g = 0.0;
    double intercept = 0.0;  ///< eV
    double sigma_intercept = 0.0;
    double sse = 0.0;
    std::size_t n = 0;
};

/// Weighted straight line dE = mu_B g B (+ b). Uncertainties are scaled by
/// the residual chi^2 per degree of freedom.
inline ZeemanFit fit_linear_zeeman(std::span<const ZeemanPoint> pts, Intercept mode = Intercept::free) {
    std::vector<double> Bs;
    for (const auto& p : pts) {
        if (!std::isfinite(p.B) || !std::isfinite(p.dE) || p.sigma < 0.0) throw Error("fit_linear_zeeman: invalid point");
        Bs.push_back(p.B);
    }
    std::sort(Bs.begin(), Bs.end());
    const auto distinct = static_cast<std::size_t>(std::unique(Bs.begin(), Bs.end()) - Bs.begin());
    if (mode == Intercept::free && distinct < 2)
        throw Error("fit_linear_zeeman: rank-deficient input, need at least two distinct fields");
    if (mode == Intercept::zero && std::none_of(pts.begin(), pts.end(), [](const ZeemanPoint& p) { return p.B != 0.0; }))
        throw Error("fit_linear_zeeman: rank-deficient input, need a non-zero field");

    const std::size_t k = mode == Intercept::free ? 2 : 1;
    Eigen::MatrixXd X(pts.size(), k);
    Eigen::VectorXd y(pts.size()), sw(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double wi = pts[i].sigma > 0.0 ? 1.0 / pts[i].sigma : 1.0;
        sw(i) = wi;
        X(i, 0) = pts[i].B * wi;
        if (k == 2) X(i, 1) = wi;
        y(i) = pts[i].dE * wi;
    }
    const Eigen::MatrixXd XtX = X.transpose() * X;
    const Eigen::VectorXd beta = XtX.ldlt().solve(X.transpose() * y);
    const double sse = (y - X * beta).squaredNorm();
    const std::size_t dof = pts.size() > k ? pts.size() - k : 0;
    const Eigen::MatrixXd cov = XtX.inverse() * (dof > 0 ? sse / static_cast<double>(dof) : 0.0);

    ZeemanFit f;
    f.g = beta(0) / PhysicalConstants::mu_B;
    f.sigma_g = std::sqrt(std::max(0.0, cov(0, 0))) / PhysicalConstants::mu_B;
    if (k == 2) {
        f.intercept = beta(1);
        f.sigma_intercept = std::sqrt(std::max(0.0, cov(1, 1)));
    }
    f.sse = sse;
    f.n = pts.size();
    return f;
}

/// Outer (H) and inner (V) line separations of a four-line spectrum.
struct FourLineSplitting {
    double B;
    double outer;  ///< delta_e + delta_h, eV
    double inner;  ///< delta_e - delta_h, eV
    double sigma = 0.0;
};

inline FourLineSplitting splittings_from_lines(double B, std::span<const SpectralLine> lines) {
    std::vector<double> h, v;
    for (const auto& l : lines) (l.polarization == Pol::H ? h : v).push_back(l.energy);
    if (h.size() != 2 || v.size() != 2) throw Error("splittings_from_lines: need two H and two V lines");
    return {B, std::abs(h[1] - h[0]), std::abs(v[1] - v[0])};
}

struct FourLineFit {
    double g_e, sigma_g_e;
    double g_h, sigma_g_h;
    ZeemanFit outer, inner;
};

/// g_e and g_h from the field dependence of both splittings:
/// g_outer = g_e + g_h, g_inner = g_e - g_h.
inline FourLineFit fit_four_line(std::span<const FourLineSplitting> pts, Intercept mode = Intercept::free) {
    std::vector<ZeemanPoint> o, i;
    for (const auto& p : pts) {
        o.push_back({p.B, p.outer, p.sigma});
        i.push_back({p.B, p.inner, p.sigma});
    }
    FourLineFit r{};
    r.outer = fit_linear_zeeman(o, mode);
    r.inner = fit_linear_zeeman(i, mode);
    r.g_e = 0.5 * (r.outer.g + r.inner.g);
    r.g_h = 0.5 * (r.outer.g - r.inner.g);
    r.sigma_g_e = r.sigma_g_h = 0.5 * std::hypot(r.outer.sigma_g, r.inner.sigma_g);
    return r;
}

/// Straight-line fit of log(y) against log(x); the slope is the power-law
/// exponent. Used for trends such as dephasing time vs pump rate.
struct LogLinearFit {
    double slope, sigma_slope, intercept;
};

inline LogLinearFit fit_loglog(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw Error("fit_loglog: need at least two points");
    std::vector<ZeemanPoint> pts;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw Error("fit_loglog: values must be positive");
        pts.push_back({std::log(x[i]), std::log(y[i])});
    }
    const auto f = fit_linear_zeeman(pts);
    return {f.g * PhysicalConstants::mu_B, f.sigma_g * PhysicalConstants::mu_B, f.intercept};
}

// ---------------------------------------------------------------------------
// FFT frequency estimate

struct FrequencyEstimate {
    bool oscillation = false;
    double frequency = 0.0;   ///< Gaussian center, Hz
    double sigma = 0.0;       ///< 1 sigma of the center from the Gaussian fit
    double width = 0.0;       ///< Gaussian standard deviation of the peak
    double peak_bin_frequency = 0.0;
};

namespace detail {

struct GaussianPeak {
    std::size_t n_params() const { return 3; }
    double value(double x, std::span<const double> p) const {
        const double z = (x - p[1]) / p[2];
        return p[0] * std::exp(-0.5 * z * z);
    }
    void jacobian(double x, std::span<const double> p, std::span<double> row) const {
        const double z = (x - p[1]) / p[2];
        const double e = std::exp(-0.5 * z * z);
        row[0] = e;
        row[1] = p[0] * e * z / p[2];
        row[2] = p[0] * e * z * z / p[2];
    }
    bool normalize(std::vector<double>& p) const {
        p[2] = std::abs(p[2]);
        return p[2] > 0.0 && std::isfinite(p[0]) && std::isfinite(p[1]);
    }
};

inline bool uniform_grid(std::span<const double> t) {
    if (t.size() < 2) return false;
    const double dt = (t.back() - t.front()) / static_cast<double>(t.size() - 1);
    if (!(dt > 0.0)) return false;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (std::abs(t[i] - t[i - 1] - dt) > 1e-6 * dt) return false;
    return true;
}

} // namespace detail

/// Magnitude spectrum of the mean-removed trace, zero-padded to at least 8x
/// its length. The largest local maximum above the first Fourier bin is
/// refined by a Gaussian fit over its half-maximum lobe. Exact ties go to
/// the lower frequency.
inline FrequencyEstimate fft_frequency(std::span<const double> t, std::span<const double> y) {
    if (t.size() != y.size()) throw Error("fft_frequency: size mismatch");
    if (!detail::uniform_grid(t)) throw Error("fft_frequency: bins must be uniform");
    const std::size_t n = y.size();
    const double dt = (t.back() - t.front()) / static_cast<double>(n - 1);
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double amp = 0.0;
    for (double v : y) amp = std::max(amp, std::abs(v - mean));
    FrequencyEstimate est;
    if (!(amp > 1e-12 * std::max(1.0, std::abs(mean)))) return est;

    const std::size_t pad = std::bit_ceil(8 * n);
    const std::size_t nf = pad / 2 + 1;
    double* in = fftw_alloc_real(pad);
    fftw_complex* out = fftw_alloc_complex(nf);
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(pad), in, out, FFTW_ESTIMATE);
    for (std::size_t i = 0; i < pad; ++i) in[i] = i < n ? (y[i] - mean) / amp : 0.0;
    fftw_execute(plan);
    std::vector<double> mag(nf);
    for (std::size_t k = 0; k < nf; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);

    const double df = 1.0 / (static_cast<double>(pad) * dt);
    const std::size_t k_min = std::max<std::size_t>(1, pad / n);  // first Fourier bin of the unpadded trace
    std::size_t best = 0;
    for (std::size_t k = k_min; k + 1 < nf; ++k)
        if (mag[k] >= mag[k - 1] && mag[k] >= mag[k + 1] && (best == 0 || mag[k] > mag[best])) best = k;
    if (best == 0) return est;
    std::vector<double> tail(mag.begin() + 1, mag.end());
    std::nth_element(tail.begin(), tail.begin() + static_cast<std::ptrdiff_t>(tail.size() / 2), tail.end());
    const double floor = tail[tail.size() / 2];
    if (!(mag[best] > 3.0 * floor)) return est;

    std::size_t lo = best, hi = best;
    while (lo > 1 && mag[lo - 1] > 0.5 * mag[best] && mag[lo - 1] <= mag[lo]) --lo;
    while (hi + 2 < nf && mag[hi + 1] > 0.5 * mag[best] && mag[hi + 1] <= mag[hi]) ++hi;
    if (hi - lo < 2) {
        lo = best > 1 ? best - 1 : best;
        hi = std::min(nf - 1, best + 1);
    }
    std::vector<double> fx, fy, fw;
    for (std::size_t k = lo; k <= hi; ++k) {
        fx.push_back(static_cast<double>(k) * df);
        fy.push_back(mag[k]);
        fw.push_back(1.0);
    }
    const double half_width = std::max(1.0, static_cast<double>(hi - lo) / 2.0) * df;
    est.oscillation = true;
    est.peak_bin_frequency = static_cast<double>(best) * df;
    est.frequency = est.peak_bin_frequency;
    est.width = half_width;
    est.sigma = df;
    if (fx.size() >= 3) {
        auto g = levenberg_marquardt(detail::GaussianPeak{}, fx, fy, fw,
                                     {mag[best], est.peak_bin_frequency, half_width / 1.1774}, {false, false, false});
        if (std::abs(g.params[1] - est.peak_bin_frequency) < (static_cast<double>(hi - lo) + 1.0) * df) {
            est.frequency = g.params[1];
            est.width = g.params[2];
            est.sigma = std::max(g.sigmas[1], 0.0);
        }
    }
    return est;
}

// ---------------------------------------------------------------------------
// Damped cosine

enum class ModelVariant : std::uint8_t {
    pulsed,  ///< C + A0 exp(-((t-t0)/T2*)^alpha) cos(2 pi f (t-t0) + phi), alpha fixed to 1 by default
    cw       ///< same with |t - t0| in the envelope, alpha free, window around t0 excluded
};

/// Parameter order: C, A0, T2*, alpha, f, phi. t0 is a fixed reference.
struct DampedCosineModel {
    static constexpr std::size_t kC = 0, kA0 = 1, kT2 = 2, kAlpha = 3, kF = 4, kPhi = 5;
    static inline const std::vector<std::string> kNames{"C", "A0", "T2star", "alpha", "f", "phi"};

    double t0 = 0.0;

    std::size_t n_params() const { return 6; }

    double value(double t, std::span<const double> p) const {
        const double x = t - t0;
        const double u = std::pow(std::abs(x) / p[kT2], p[kAlpha]);
        return p[kC] + p[kA0] * std::exp(-u) * std::cos(2.0 * std::numbers::pi * p[kF] * x + p[kPhi]);
    }

    void jacobian(double t, std::span<const double> p, std::span<double> row) const {
        const double x = t - t0;
        const double a = std::abs(x);
        const double u = std::pow(a / p[kT2], p[kAlpha]);
        const double e = std::exp(-u);
        const double th = 2.0 * std::numbers::pi * p[kF] * x + p[kPhi];
        const double c = std::cos(th), s = std::sin(th);
        row[kC] = 1.0;
        row[kA0] = e * c;
        row[kT2] = p[kA0] * c * e * p[kAlpha] * u / p[kT2];
        row[kAlpha] = a > 0.0 ? -p[kA0] * c * e * u * std::log(a / p[kT2]) : 0.0;
        row[kF] = -p[kA0] * e * s * 2.0 * std::numbers::pi * x;
        row[kPhi] = -p[kA0] * e * s;
    }

    /// Maps equivalent parameter sets onto A0 >= 0, f >= 0, phi in (-pi, pi].
    bool normalize(std::vector<double>& p) const {
        for (double v : p)
            if (!std::isfinite(v)) return false;
        if (p[kA0] < 0.0) {
            p[kA0] = -p[kA0];
            p[kPhi] += std::numbers::pi;
        }
        if (p[kF] < 0.0) {
            p[kF] = -p[kF];
            p[kPhi] = -p[kPhi];
        }
        p[kPhi] = std::remainder(p[kPhi], 2.0 * std::numbers::pi);
        return p[kT2] > 0.0 && p[kAlpha] > 0.0 && p[kAlpha] <= 3.0;
    }
};

struct DampedCosineOptions {
    ModelVariant variant = ModelVariant::pulsed;
    double t0 = 0.0;
    double exclusion = 0.0;                 ///< drop |t - t0| < exclusion
    std::optional<double> fixed_alpha;      ///< default: 1 for pulsed, free for cw
    std::optional<double> fixed_C;
    std::optional<double> fixed_T2;
    std::optional<double> fixed_f;
    /// Refit with binomial variances (1 - m^2)/N from the fitted curve m
    /// instead of the observed values; needs the trace counts. Observed-value
    /// variances overweight points near |S| = 1 when N is small.
    bool model_weights = false;
    LmOptions lm{};

    static DampedCosineOptions pulsed() {
        DampedCosineOptions o;
        o.variant = ModelVariant::pulsed;
        o.fixed_alpha = 1.0;
        return o;
    }
    static DampedCosineOptions cw(double exclusion = 150e-12) {
        DampedCosineOptions o;
        o.variant = ModelVariant::cw;
        o.exclusion = exclusion;
        return o;
    }
};

/// Points actually entering a fit, with statistical weights.
struct FitData {
    std::vector<double> t, y, w, sigma, n;
};

/// Valid bins outside the exclusion window. The variance has a floor of
/// 1/N^2 so that bins with |S| = 1 keep a finite weight.
inline FitData fit_data(const DocpTrace& tr, double t0, double exclusion) {
    FitData d;
    for (std::size_t i = 0; i < tr.size(); ++i) {
        if (!tr.valid[i] || !std::isfinite(tr.docp[i])) continue;
        if (std::abs(tr.times[i] - t0) < exclusion * (1.0 - 1e-9)) continue;
        double var = std::isfinite(tr.error[i]) ? tr.error[i] * tr.error[i] : 0.0;
        if (tr.n_total[i] > 0.0) var = std::max(var, 1.0 / (tr.n_total[i] * tr.n_total[i]));
        if (!(var > 0.0)) var = 1.0;
        d.t.push_back(tr.times[i]);
        d.y.push_back(tr.docp[i]);
        d.w.push_back(1.0 / var);
        d.sigma.push_back(std::sqrt(var));
        d.n.push_back(tr.n_total[i]);
    }
    return d;
}

/// Builds a trace from plain arrays (unit errors unless given).
inline DocpTrace make_trace(std::span<const double> t, std::span<const double> y, std::span<const double> err = {}) {
    DocpTrace tr;
    tr.times.assign(t.begin(), t.end());
    tr.docp.assign(y.begin(), y.end());
    tr.error = err.empty() ? std::vector<double>(t.size(), 1.0) : std::vector<double>(err.begin(), err.end());
    tr.n_total.assign(t.size(), 0.0);
    tr.valid.assign(t.size(), true);
    return tr;
}

namespace detail {

/// Envelope decay time from the per-period maxima of |y - C|.
inline double envelope_seed(const FitData& d, double C, double f, double t0) {
    const double span = d.t.back() - d.t.front();
    const double fallback = 10.0 * span;
    if (!(f > 0.0) || span * f < 2.0) return fallback;
    const double period = 1.0 / f;
    std::vector<double> tx, ly;
    std::size_t i = 0;
    while (i < d.t.size()) {
        const double start = d.t[i];
        double best = 0.0, tb = start;
        for (; i < d.t.size() && d.t[i] < start + period; ++i) {
            const double r = std::abs(d.y[i] - C);
            if (r > best) {
                best = r;
                tb = d.t[i];
            }
        }
        if (best > 0.0) {
            tx.push_back(std::abs(tb - t0));
            ly.push_back(std::log(best));
        }
    }
    if (tx.size() < 3) return fallback;
    const double mx = std::accumulate(tx.begin(), tx.end(), 0.0) / static_cast<double>(tx.size());
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < tx.size(); ++k) {
        sxy += (tx[k] - mx) * (ly[k] - my);
        sxx += (tx[k] - mx) * (tx[k] - mx);
    }
    const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
    if (!(slope < 0.0)) return fallback;
    return std::clamp(-1.0 / slope, 0.05 * span, fallback);
}

} // namespace detail

/// Seeds: f from fft_frequency, A0 from half the peak-to-peak, C from the
/// mean of the last quarter, T2* from the log of per-period maxima, phi from
/// complex demodulation at the seed frequency.
inline FitResult fit_damped_cosine(const DocpTrace& trace, const DampedCosineOptions& opt) {
    DampedCosineModel model{opt.t0};
    FitData d = fit_data(trace, opt.t0, opt.exclusion);
    std::vector<bool> fixed(6, false);
    const std::optional<double> alpha_fix =
        opt.fixed_alpha ? opt.fixed_alpha : (opt.variant == ModelVariant::pulsed ? std::optional<double>(1.0) : std::nullopt);
    fixed[DampedCosineModel::kAlpha] = alpha_fix.has_value();
    fixed[DampedCosineModel::kC] = opt.fixed_C.has_value();
    fixed[DampedCosineModel::kT2] = opt.fixed_T2.has_value();
    fixed[DampedCosineModel::kF] = opt.fixed_f.has_value();
    const auto n_free = static_cast<std::size_t>(std::count(fixed.begin(), fixed.end(), false));
    if (d.t.size() < 8 * n_free)
        throw Error("fit_damped_cosine: need at least " + std::to_string(8 * n_free) + " valid bins, got " +
                    std::to_string(d.t.size()));

    const std::size_t n = d.t.size();
    const std::size_t q = std::max<std::size_t>(1, n / 4);
    double C = opt.fixed_C.value_or(std::accumulate(d.y.end() - static_cast<std::ptrdiff_t>(q), d.y.end(), 0.0) /
                                    static_cast<double>(q));
    const auto [mn, mx] = std::minmax_element(d.y.begin(), d.y.end());
    const double A0 = 0.5 * (*mx - *mn);

    double f = 0.0;
    bool oscillation = true;
    if (opt.fixed_f) {
        f = *opt.fixed_f;
    } else {
        // The FFT needs a uniform grid: use the full trace, filling invalid and
        // excluded bins with the seed offset.
        std::vector<double> ty(trace.size());
        for (std::size_t i = 0; i < trace.size(); ++i)
            ty[i] = trace.valid[i] && std::isfinite(trace.docp[i]) && std::abs(trace.times[i] - opt.t0) >= opt.exclusion * (1.0 - 1e-9)
                        ? trace.docp[i]
                        : C;
        const auto est = fft_frequency(trace.times, ty);
        oscillation = est.oscillation;
        f = est.frequency;
    }

    if (!oscillation || A0 == 0.0) {
        // Flat data: only the offset carries information.
        std::vector<double> p{C, 0.0, 1.0, 1.0, 0.0, 0.0};
        std::vector<bool> only_c{false, true, true, true, true, true};
        auto r = levenberg_marquardt(model, d.t, d.y, d.w, p, only_c, opt.lm);
        r.names = DampedCosineModel::kNames;
        r.no_oscillation = true;
        return r;
    }

    const double t2_seed = opt.fixed_T2.value_or(detail::envelope_seed(d, C, f, opt.t0));
    cplx z{0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
        const double x = d.t[i] - opt.t0;
        z += d.w[i] * (d.y[i] - C) * std::exp(cplx{0.0, -2.0 * std::numbers::pi * f * x});
    }
    const double phi = std::arg(z);
    const double alpha = alpha_fix.value_or(1.0);

    // A few envelope seeds guard against a poor decay estimate; the lowest
    // SSE wins, ties resolved by seed order.
    std::vector<double> scales{1.0};
    if (!opt.fixed_T2) scales = {1.0, 0.3, 3.0};
    std::optional<FitResult> best;
    for (double s : scales) {
        std::vector<double> p{C, A0, t2_seed * s, alpha, f, phi};
        auto r = levenberg_marquardt(model, d.t, d.y, d.w, p, fixed, opt.lm);
        const bool better = !best || (r.converged && !best->converged) ||
                            (r.converged == best->converged && r.residual_sse < best->residual_sse * (1.0 - 1e-12));
        if (better) best = std::move(r);
    }
    if (opt.model_weights && std::all_of(d.n.begin(), d.n.end(), [](double v) { return v > 0.0; })) {
        for (int pass = 0; pass < 3; ++pass) {
            for (std::size_t i = 0; i < n; ++i) {
                const double m = std::clamp(model.value(d.t[i], best->params), -1.0, 1.0);
                const double var = std::max((1.0 - m * m) / d.n[i], 1.0 / (d.n[i] * d.n[i]));
                d.w[i] = 1.0 / var;
                d.sigma[i] = std::sqrt(var);
            }
            best = levenberg_marquardt(model, d.t, d.y, d.w, best->params, fixed, opt.lm);
        }
    }
    best->names = DampedCosineModel::kNames;
    return *best;
}

// ---------------------------------------------------------------------------
// Readout-window averaging

struct ReadoutFit {
    double t2;       ///< readout time after the second pulse's reference, s
    double T2star;
    double f;
    bool converged = true;
};

struct WindowAverage {
    double mean_T2star, error_T2star;  ///< arithmetic mean over the window
    double rate_T2star, error_rate_T2star;  ///< inverse of the mean decay rate 1/T2*
    double mean_f, error_f;
    std::size_t n;
};

/// Unweighted means and standard errors over readout points with
/// t_start <= t2 <= t_end. Single-bin T2* estimates are skewed towards long
/// times, so the mean decay rate is reported alongside the mean time.
inline WindowAverage window_average(std::span<const ReadoutFit> fits, double t_start, double t_end) {
    std::vector<double> T, G, F;
    for (const auto& r : fits)
        if (r.t2 >= t_start - 1e-15 && r.t2 <= t_end + 1e-15) {
            T.push_back(r.T2star);
            G.push_back(1.0 / r.T2star);
            F.push_back(r.f);
        }
    if (T.empty()) throw Error("window_average: no readout points inside the window");
    if (T.size() < 3) throw Error("window_average: need at least 3 readout points inside the window");
    auto stats = [](const std::vector<double>& v) {
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        return std::pair{m, sd / std::sqrt(static_cast<double>(v.size()))};
    };
    const auto [mt, et] = stats(T);
    const auto [mg, eg] = stats(G);
    const auto [mf, ef] = stats(F);
    return {mt, et, 1.0 / mg, eg / (mg * mg), mf, ef, T.size()};
}

} // namespace qdspin
