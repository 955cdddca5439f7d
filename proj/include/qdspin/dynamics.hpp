/**
 * @brief Closed-form dynamics of the double-Lambda trion system in an
 * in-plane field along x.
 *
 * Each spin-1/2 doublet precesses under H = (delta/2) sigma_x written in its
 * own z basis, delta = mu_B g B_x. Optical transitions follow the z selection
 * rules |T↑> -> |⇑>|L>, |T↓> -> |⇓>|R>. These functions are noise-free (or
 * noise-averaged in closed form) and serve as the oracle for the Monte Carlo
 * engine.
 */
#pragma once

#include "qdspin/core.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace qdspin {

/// 2x2 complex matrix, row-major.
using Mat2 = std::array<std::array<cplx, 2>, 2>;

inline std::array<cplx, 2> apply_matrix(const Mat2& m, const std::array<cplx, 2>& v) {
    return {m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]};
}

inline Mat2 matmul(const Mat2& a, const Mat2& b) {
    Mat2 r{};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
    return r;
}

inline Mat2 adjoint(const Mat2& a) {
    return {{{std::conj(a[0][0]), std::conj(a[1][0])}, {std::conj(a[0][1]), std::conj(a[1][1])}}};
}

/// Free precession exp(-i theta sigma_x / 2) over `duration` seconds.
struct Propagator2 {
    Mat2 matrix;
    double duration;
    Subspace subspace;

    /// Rotation by angle theta = 2 pi f dt about x.
    static Propagator2 rotation(double frequency, double dt, Subspace s) {
        const double half = std::numbers::pi * frequency * dt;
        const double c = std::cos(half);
        const double sn = std::sin(half);
        const cplx off{0.0, -sn};
        return {{{{c, off}, {off, c}}}, dt, s};
    }

    SpinHalfState operator()(const SpinHalfState& psi) const {
        if (psi.basis() != subspace) throw Error("Propagator2: subspace mismatch");
        const auto out = apply_matrix(matrix, psi.amplitudes());
        return SpinHalfState::normalized(out[0], out[1], subspace);
    }
};

/// Precession frequency of a doublet, optionally shifted by a jitter sample.
inline double precession_frequency(const DeviceParams& p, Subspace s, double jitter = 0.0) {
    return larmor_frequency(p.g_for(s), p.B_x) + jitter;
}

/// exp(-i 2 pi f dt sigma_x / 2) applied to `state`, f taken from the
/// subspace named by the state's basis tag. `jitter` (Hz) adds to f.
inline SpinHalfState propagate(const SpinHalfState& state, const DeviceParams& params, double dt,
                               double jitter = 0.0) {
    if (dt < 0.0) throw Error("propagate: negative duration");
    const double f = precession_frequency(params, state.basis(), jitter);
    return Propagator2::rotation(f, dt, state.basis())(state);
}

// ---------------------------------------------------------------------------
// Optical transitions

struct DecayBranch {
    SpinHalfState ground;
    Pol photon;
    double weight;
};

/// The two radiative branches of a trion state under the z selection rules.
inline std::array<DecayBranch, 2> emit_amplitudes(const SpinHalfState& trion) {
    if (trion.basis() != Subspace::trion) throw Error("emit_amplitudes: expected a trion state");
    return {DecayBranch{SpinHalfState::up(Subspace::ground), Pol::L, trion.p_up()},
            DecayBranch{SpinHalfState::down(Subspace::ground), Pol::R, trion.p_down()}};
}

struct ConditionalGround {
    double probability;
    std::optional<SpinHalfState> ground;  ///< empty when probability is zero
};

/// Coherent decay followed by projecting the photon onto `onto`. The
/// emitted state is sum_b a_b |g_b>|pol_b>; projecting leaves
/// sum_b <onto|pol_b> a_b |g_b>.
inline ConditionalGround condition_on_photon(const SpinHalfState& trion, Pol onto) {
    const auto branches = emit_amplitudes(trion);
    const Jones e = jones(onto);
    const cplx up = inner(e, jones(branches[0].photon)) * trion.up_amp();
    const cplx down = inner(e, jones(branches[1].photon)) * trion.down_amp();
    const double p = std::norm(up) + std::norm(down);
    if (p <= 1e-300) return {0.0, std::nullopt};
    return {p, SpinHalfState::normalized(up, down, Subspace::ground)};
}

struct Excitation {
    double probability;
    std::optional<SpinHalfState> trion;
};

/// Spin-selective absorption of a photon with polarization `pol`: the time
/// reverse of the emission rules, |⇑>+L -> |T↑>, |⇓>+R -> |T↓>.
inline Excitation excite(const SpinHalfState& ground, Pol pol) {
    if (ground.basis() != Subspace::ground) throw Error("excite: expected a ground state");
    const Jones e = jones(pol);
    const cplx up = inner(jones(Pol::L), e) * ground.up_amp();
    const cplx down = inner(jones(Pol::R), e) * ground.down_amp();
    const double p = std::norm(up) + std::norm(down);
    if (p <= 1e-300) return {0.0, std::nullopt};
    return {p, SpinHalfState::normalized(up, down, Subspace::trion)};
}

// ---------------------------------------------------------------------------
// Noise-averaged laws

/// Ensemble average of cos(2 pi delta t) over the jitter distribution.
inline double envelope_factor(const NoiseModel& noise, double t) {
    if (t < 0.0) throw Error("envelope_factor: negative time");
    switch (noise.kind) {
    case NoiseKind::none: return 1.0;
    case NoiseKind::lorentzian_jitter: return std::exp(-2.0 * std::numbers::pi * noise.width * t);
    case NoiseKind::gaussian_jitter: {
        const double x = std::numbers::pi * noise.width * t;
        return std::exp(-2.0 * x * x);
    }
    }
    return 1.0;
}

/// 1/e time of envelope_factor; infinite for the noise-free model.
inline double dephasing_time(const NoiseModel& noise) {
    if (noise.kind == NoiseKind::none || noise.width == 0.0) return std::numeric_limits<double>::infinity();
    if (noise.kind == NoiseKind::lorentzian_jitter) return 1.0 / (2.0 * std::numbers::pi * noise.width);
    return 1.0 / (std::numbers::sqrt2 * std::numbers::pi * noise.width);
}

/// Inverse of dephasing_time for a given kind.
inline double noise_width_for(NoiseKind kind, double t2star) {
    if (kind == NoiseKind::lorentzian_jitter) return 1.0 / (2.0 * std::numbers::pi * t2star);
    if (kind == NoiseKind::gaussian_jitter) return 1.0 / (std::numbers::sqrt2 * std::numbers::pi * t2star);
    return 0.0;
}

/// Contrast of co- vs cross-polarized emission right after excitation.
/// Imperfect memory randomizes the trion spin, so the contrast equals p_mem.
inline double memory_contrast(const DeviceParams& p) { return p.p_mem; }

/// Time- and polarization-resolved trion emission,
/// I(t) = exp(-t/T1) * (1 +/- C env(t) cos(2 pi f_e t)) / 2, + for co-polarized.
inline std::vector<double> lifetime_trace(const DeviceParams& params, Pol exc, Pol det,
                                          std::span<const double> t_grid) {
    auto circular = [](Pol p) { return p == Pol::R || p == Pol::L; };
    if (!circular(exc) || !circular(det)) throw Error("lifetime_trace: polarizations must be R or L");
    const double sign = exc == det ? 1.0 : -1.0;
    const double f = larmor_frequency(params.g_e, params.B_x);
    const double c = memory_contrast(params);
    const bool noisy = params.noise.acts_on(Subspace::trion);
    std::vector<double> out;
    out.reserve(t_grid.size());
    double prev = 0.0;
    for (double t : t_grid) {
        if (t < 0.0 || t < prev) throw Error("lifetime_trace: time grid must be ascending and >= 0");
        prev = t;
        const double env = noisy ? envelope_factor(params.noise, t) : 1.0;
        out.push_back(std::exp(-t / params.T1) * 0.5 *
                      (1.0 + sign * c * env * std::cos(2.0 * std::numbers::pi * f * t)));
    }
    return out;
}

/// Probability that a ground spin prepared in |⇓> is found in |⇓> (same) or
/// |⇑> (flipped) after time t of free precession.
inline double ground_return_probability(const DeviceParams& p, double t, bool same) {
    const double x = std::numbers::pi * larmor_frequency(p.g_h, p.B_x) * t;
    return same ? std::cos(x) * std::cos(x) : std::sin(x) * std::sin(x);
}

// ---------------------------------------------------------------------------
// Pumped ground-state evolution (no-jump trajectory)

/// Relative absorption strengths (up, down) of a pump polarization.
inline std::array<double, 2> absorption_weights(Pol pump) {
    const Jones e = jones(pump);
    return {std::norm(inner(jones(Pol::L), e)), std::norm(inner(jones(Pol::R), e))};
}

/// Conditional ground-spin evolution between excitation events under a cw
/// pump of rate r and polarization X:
/// H_eff = (omega/2) sigma_x - (i r/2) diag(w_up, w_down),
/// with w from absorption_weights(X). Returns the normalized state after dt.
inline SpinHalfState pumped_ground_step(const SpinHalfState& psi, double frequency, double pump_rate,
                                        Pol pump, double dt) {
    if (psi.basis() != Subspace::ground) throw Error("pumped_ground_step: expected a ground state");
    if (dt < 0.0) throw Error("pumped_ground_step: negative duration");
    const auto w = absorption_weights(pump);
    const double omega = 2.0 * std::numbers::pi * frequency;
    // H_eff = -i r (w_up + w_down)/4 I + M, M = [[i q, omega/2], [omega/2, -i q]],
    // q = r (w_down - w_up)/4, M^2 = lambda^2 I. The scalar part drops out on
    // normalization.
    const double q = pump_rate * (w[1] - w[0]) / 4.0;
    const cplx lam = std::sqrt(cplx{omega * omega / 4.0 - q * q, 0.0});
    // Long overdamped intervals are split to keep cosh/sinh finite.
    const double growth = std::abs(lam.imag());
    const int pieces = std::max(1, static_cast<int>(std::ceil(dt * growth / 20.0)));
    const double h = dt / pieces;
    const cplx c = std::cos(lam * h);
    const cplx sinc = std::abs(lam * h) < 1e-8 ? cplx{h, 0.0} : std::sin(lam * h) / lam;
    const cplx mi{0.0, -1.0};
    const Mat2 m{{{cplx{0.0, q}, cplx{omega / 2.0, 0.0}}, {cplx{omega / 2.0, 0.0}, cplx{0.0, -q}}}};
    const Mat2 u{{{c + mi * sinc * m[0][0], mi * sinc * m[0][1]}, {mi * sinc * m[1][0], c + mi * sinc * m[1][1]}}};
    auto amp = psi.amplitudes();
    for (int i = 0; i < pieces; ++i) {
        amp = apply_matrix(u, amp);
        const double n = std::sqrt(norm2(amp));
        amp[0] /= n;
        amp[1] /= n;
    }
    return SpinHalfState::normalized(amp[0], amp[1], Subspace::ground);
}

// ---------------------------------------------------------------------------
// High-field four-line spectrum

struct SpectralLine {
    double energy;  ///< eV
    Pol polarization;
};

/// The four transitions E0 +/- (delta_e +/- delta_h)/2. The outer pair is
/// H-polarized, the inner pair V-polarized.
inline std::array<SpectralLine, 4> four_line_spectrum(double e0, double g_e, double g_h, double B) {
    const double de = zeeman_splitting(g_e, B);
    const double dh = zeeman_splitting(g_h, B);
    return {SpectralLine{e0 - (de + dh) / 2.0, Pol::H}, SpectralLine{e0 - (de - dh) / 2.0, Pol::V},
            SpectralLine{e0 + (de - dh) / 2.0, Pol::V}, SpectralLine{e0 + (de + dh) / 2.0, Pol::H}};
}

/// Gaussian-broadened rendering of the lines in one polarization (display only).
inline std::vector<double> render_spectrum(std::span<const SpectralLine> lines, Pol pol, double sigma,
                                           std::span<const double> energy_grid) {
    std::vector<double> out(energy_grid.size(), 0.0);
    for (const auto& line : lines) {
        if (line.polarization != pol) continue;
        for (std::size_t i = 0; i < energy_grid.size(); ++i) {
            const double z = (energy_grid[i] - line.energy) / sigma;
            out[i] += std::exp(-0.5 * z * z);
        }
    }
    return out;
}

} // namespace qdspin
