/**
 * @brief Domain types shared by every qdspin module: physical constants,
 * polarization labels with their Jones vectors, spin-1/2 states and the
 * device parameter set of a positively charged quantum-dot trion.
 *
 * Units inside the library are SI-like throughout: energies in eV, times in
 * seconds, frequencies in Hz, fields in tesla. Conversions to ns/GHz/mT live
 * in the scenario I/O layer only.
 */
#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace qdspin {

using cplx = std::complex<double>;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration; carries the offending field path.
class ConfigError : public Error {
public:
    ConfigError(std::string path, const std::string& what)
        : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

/// CODATA 2018 values. Not configurable.
struct PhysicalConstants {
    static constexpr double mu_B = 5.7883818060e-5;    ///< Bohr magneton, eV/T
    static constexpr double h = 4.135667696e-15;       ///< Planck constant, eV*s
};

// ---------------------------------------------------------------------------
// Polarization

enum class Pol : std::uint8_t { H = 0, V = 1, D = 2, A = 3, R = 4, L = 5 };

inline constexpr std::array<Pol, 6> kAllPols{Pol::H, Pol::V, Pol::D, Pol::A, Pol::R, Pol::L};

using Jones = std::array<cplx, 2>;

inline Jones jones(Pol p) {
    constexpr double s = std::numbers::sqrt2 / 2.0;
    switch (p) {
    case Pol::H: return {cplx{1, 0}, cplx{0, 0}};
    case Pol::V: return {cplx{0, 0}, cplx{1, 0}};
    case Pol::D: return {cplx{s, 0}, cplx{s, 0}};
    case Pol::A: return {cplx{s, 0}, cplx{-s, 0}};
    case Pol::R: return {cplx{s, 0}, cplx{0, -s}};
    case Pol::L: return {cplx{s, 0}, cplx{0, s}};
    }
    throw Error("invalid polarization label");
}

inline constexpr Pol orthogonal(Pol p) {
    switch (p) {
    case Pol::H: return Pol::V;
    case Pol::V: return Pol::H;
    case Pol::D: return Pol::A;
    case Pol::A: return Pol::D;
    case Pol::R: return Pol::L;
    case Pol::L: return Pol::R;
    }
    return p;
}

inline constexpr std::string_view to_string(Pol p) {
    constexpr std::array<std::string_view, 6> names{"H", "V", "D", "A", "R", "L"};
    return names[static_cast<std::size_t>(p)];
}

inline std::optional<Pol> parse_pol(std::string_view s) {
    for (Pol p : kAllPols)
        if (to_string(p) == s) return p;
    return std::nullopt;
}

/// <a|b> with the bra conjugated.
inline cplx inner(const Jones& a, const Jones& b) {
    return std::conj(a[0]) * b[0] + std::conj(a[1]) * b[1];
}

inline double norm2(const Jones& a) { return std::norm(a[0]) + std::norm(a[1]); }

inline constexpr double kNormTolerance = 1e-12;

/// Probability |<onto|state>|^2. Rejects non-normalized input.
inline double project(const Jones& state, Pol onto) {
    if (std::abs(norm2(state) - 1.0) > kNormTolerance)
        throw Error("project: state is not normalized");
    return std::norm(inner(jones(onto), state));
}

// ---------------------------------------------------------------------------
// Spin-1/2 states

/// Which doublet a spin-1/2 amplitude pair lives in. Index 0 is spin up
/// (|⇑> or |T↑>), index 1 is spin down (|⇓> or |T↓>), both along z.
enum class Subspace : std::uint8_t { ground, trion };

class SpinHalfState {
public:
    SpinHalfState(cplx up, cplx down, Subspace basis) : amp_{up, down}, basis_(basis) {
        if (std::abs(norm2(amp_) - 1.0) > kNormTolerance)
            throw Error("SpinHalfState: amplitudes are not normalized");
    }

    static SpinHalfState up(Subspace b) { return {1.0, 0.0, b}; }
    static SpinHalfState down(Subspace b) { return {0.0, 1.0, b}; }

    /// Normalizes an arbitrary non-zero amplitude pair.
    static SpinHalfState normalized(cplx up, cplx down, Subspace b) {
        const double n = std::sqrt(std::norm(up) + std::norm(down));
        if (!(n > 0.0)) throw Error("SpinHalfState: zero amplitude vector");
        return {up / n, down / n, b, Unchecked{}};
    }

    cplx up_amp() const noexcept { return amp_[0]; }
    cplx down_amp() const noexcept { return amp_[1]; }
    const std::array<cplx, 2>& amplitudes() const noexcept { return amp_; }
    Subspace basis() const noexcept { return basis_; }
    double p_up() const noexcept { return std::norm(amp_[0]); }
    double p_down() const noexcept { return std::norm(amp_[1]); }

    /// |<other|this>|^2, the fidelity between two pure states.
    double overlap(const SpinHalfState& other) const noexcept {
        return std::norm(std::conj(other.amp_[0]) * amp_[0] + std::conj(other.amp_[1]) * amp_[1]);
    }

private:
    struct Unchecked {};
    SpinHalfState(cplx up, cplx down, Subspace b, Unchecked) : amp_{up, down}, basis_(b) {}

    std::array<cplx, 2> amp_;
    Subspace basis_;
};

// ---------------------------------------------------------------------------
// Device

enum class NoiseKind : std::uint8_t { none, gaussian_jitter, lorentzian_jitter };
enum class NoiseTarget : std::uint8_t { ground, excited, both };

/// Quasi-static precession-frequency jitter. `width` is sigma_f for the
/// Gaussian kind and the HWHM gamma for the Lorentzian kind, both in Hz.
struct NoiseModel {
    NoiseKind kind = NoiseKind::none;
    double width = 0.0;
    NoiseTarget applies_to = NoiseTarget::ground;

    bool acts_on(Subspace s) const noexcept {
        if (kind == NoiseKind::none) return false;
        if (applies_to == NoiseTarget::both) return true;
        return (s == Subspace::ground) == (applies_to == NoiseTarget::ground);
    }

    friend bool operator==(const NoiseModel&, const NoiseModel&) = default;
};

/// g-factors are magnitudes; T1 in seconds; B_x in tesla.
struct DeviceParams {
    double g_e = 2.09;
    double g_h = 0.35;
    double T1 = 0.2e-9;
    double p_mem = 0.865;
    double B_x = 0.0;
    NoiseModel noise{};

    double g_for(Subspace s) const noexcept { return s == Subspace::ground ? g_h : g_e; }

    /// Throws ConfigError naming the offending field.
    void validate() const {
        if (!std::isfinite(g_e)) throw ConfigError("device.g_e", "must be finite");
        if (!std::isfinite(g_h)) throw ConfigError("device.g_h", "must be finite");
        if (!(T1 > 0.0) || !std::isfinite(T1)) throw ConfigError("device.T1_ns", "must be > 0");
        if (!(p_mem >= 0.0 && p_mem <= 1.0)) throw ConfigError("device.p_mem", "must lie in [0, 1]");
        if (!(B_x >= 0.0) || !std::isfinite(B_x)) throw ConfigError("device.B_x_mT", "must be >= 0");
        if (!(noise.width >= 0.0) || !std::isfinite(noise.width))
            throw ConfigError("device.noise.width_MHz", "must be >= 0");
    }

    friend bool operator==(const DeviceParams&, const DeviceParams&) = default;
};

// ---------------------------------------------------------------------------
// Zeeman / Larmor

/// Delta E = mu_B * g * B, in eV.
inline constexpr double zeeman_splitting(double g, double B) { return PhysicalConstants::mu_B * g * B; }

/// Larmor precession frequency f = Delta E / h, in Hz.
inline constexpr double larmor_frequency(double g, double B) {
    return zeeman_splitting(g, B) / PhysicalConstants::h;
}

/// Time h / (2 Delta E) for a z-eigenstate to rotate into its partner.
/// Returns +infinity ("no precession") when the splitting vanishes.
inline double larmor_halfperiod(double g, double B) {
    const double dE = zeeman_splitting(g, B);
    if (dE == 0.0) return std::numeric_limits<double>::infinity();
    return PhysicalConstants::h / (2.0 * std::abs(dE));
}

inline bool is_no_precession(double halfperiod) { return std::isinf(halfperiod); }

} // namespace qdspin
