/**
 * @brief Stochastic experiment engine. Produces time-tagged, polarization
 * projected detection events for the lifetime, cw autocorrelation, pulsed
 * two-photon heralding and zero-field DOCP protocols.
 *
 * Every shot (laser period, or cw block) draws from its own KeyedEngine
 * stream keyed by (seed, shot), and chunks are merged in shot order, so a run
 * is bit-identical for any worker count.
 */
#pragma once

#include "qdspin/core.hpp"
#include "qdspin/dynamics.hpp"
#include "qdspin/parallel.hpp"
#include "qdspin/random.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

namespace qdspin {

enum class ProtocolKind : std::uint8_t { lifetime, cw_g2, pulsed_2pc, docp_zero_field };

inline constexpr std::string_view to_string(ProtocolKind k) {
    switch (k) {
    case ProtocolKind::lifetime: return "lifetime";
    case ProtocolKind::cw_g2: return "cw_g2";
    case ProtocolKind::pulsed_2pc: return "pulsed_2pc";
    case ProtocolKind::docp_zero_field: return "docp_zero_field";
    }
    return "?";
}

struct ProtocolConfig {
    ProtocolKind kind = ProtocolKind::lifetime;
    std::vector<Pol> exc_pols{Pol::R};         ///< one per pulse (cw: the pump)
    std::vector<Pol> det_pols{Pol::R, Pol::L}; ///< one per channel
    double pulse_delay = 1.6e-9;               ///< pulsed_2pc, s
    double rep_period = 12.5e-9;               ///< 80 MHz laser
    double pump_rate = 5e6;                    ///< cw excitation attempt rate, Hz
    double detection_efficiency = 1.0;
    std::uint64_t n_shots = 100000;            ///< laser periods, or cw blocks
    double block_duration = 1e-3;              ///< cw block length, s
    double redraw_time = 100e-9;               ///< cw jitter redraw interval, s
    double irf_sigma = 0.0;                    ///< Gaussian detector jitter, s
    std::uint64_t rng_seed = 0;

    bool lifetime_like() const noexcept {
        return kind == ProtocolKind::lifetime || kind == ProtocolKind::docp_zero_field;
    }

    /// Total acquisition time covered by the run.
    double span() const noexcept {
        return static_cast<double>(n_shots) * (kind == ProtocolKind::cw_g2 ? block_duration : rep_period);
    }

    void validate(const DeviceParams& device) const {
        auto need = [](bool ok, const char* path, const char* what) {
            if (!ok) throw ConfigError(path, what);
        };
        need(detection_efficiency > 0.0 && detection_efficiency <= 1.0, "protocol.detection_efficiency",
             "must lie in (0, 1]");
        need(n_shots > 0, "protocol.n_shots", "must be > 0");
        need(n_shots <= 0xffffffffULL, "protocol.n_shots", "must fit in 32 bits");
        need(rep_period > 0.0, "protocol.rep_period_ns", "must be > 0");
        need(irf_sigma >= 0.0, "protocol.irf_sigma_ps", "must be >= 0");
        switch (kind) {
        case ProtocolKind::docp_zero_field:
            need(device.B_x == 0.0, "device.B_x_mT", "docp_zero_field requires zero field");
            [[fallthrough]];
        case ProtocolKind::lifetime:
            need(exc_pols.size() == 1, "protocol.exc_pols", "lifetime protocols take exactly one pulse");
            need(det_pols.size() == 1 || det_pols.size() == 2, "protocol.det_pols",
                 "lifetime protocols take one or two channels");
            if (det_pols.size() == 2)
                need(det_pols[1] == orthogonal(det_pols[0]), "protocol.det_pols",
                     "two lifetime channels must form an orthogonal pair (polarizing splitter)");
            break;
        case ProtocolKind::cw_g2:
            need(exc_pols.size() == 1, "protocol.exc_pols", "cw_g2 takes exactly one pump polarization");
            need(det_pols.size() == 2, "protocol.det_pols", "cw_g2 takes exactly two channels");
            need(pump_rate > 0.0, "protocol.pump_rate_MHz", "must be > 0");
            need(block_duration > 0.0, "protocol.block_us", "must be > 0");
            need(redraw_time > 0.0, "protocol.redraw_ns", "must be > 0");
            break;
        case ProtocolKind::pulsed_2pc:
            need(exc_pols.size() == 2, "protocol.exc_pols", "pulsed_2pc requires exactly 2 pulses");
            need(det_pols.size() == 2, "protocol.det_pols", "pulsed_2pc requires exactly 2 channels");
            need(pulse_delay > 0.0, "protocol.pulse_delay_ns", "must be > 0");
            need(pulse_delay < rep_period, "protocol.pulse_delay_ns", "must be shorter than the repetition period");
            break;
        }
    }

    friend bool operator==(const ProtocolConfig&, const ProtocolConfig&) = default;
};

struct DetectionEvent {
    std::uint32_t shot;
    std::uint8_t channel;
    Pol projection;
    double time_tag;  ///< absolute, seconds

    friend bool operator==(const DetectionEvent&, const DetectionEvent&) = default;
};

struct EventRun {
    std::vector<DetectionEvent> events;
    double span = 0.0;  ///< acquisition time, s
};

struct RunOptions {
    unsigned workers = 0;  ///< 0: resolve_workers()
    std::uint64_t chunk_shots = 4096;
};

namespace mc {

inline double sample_jitter(const NoiseModel& noise, KeyedEngine& rng) {
    switch (noise.kind) {
    case NoiseKind::none: return 0.0;
    case NoiseKind::gaussian_jitter: return noise.width == 0.0 ? 0.0 : std::normal_distribution<double>(0.0, noise.width)(rng);
    case NoiseKind::lorentzian_jitter:
        return noise.width == 0.0 ? 0.0 : std::cauchy_distribution<double>(0.0, noise.width)(rng);
    }
    return 0.0;
}

inline double sample_decay(double T1, KeyedEngine& rng) {
    return std::exponential_distribution<double>(1.0 / T1)(rng);
}

/// Maximally mixed hole, drawn as a random z eigenstate.
inline SpinHalfState mixed_ground(KeyedEngine& rng) {
    return rng.uniform() < 0.5 ? SpinHalfState::up(Subspace::ground) : SpinHalfState::down(Subspace::ground);
}

/// Spin-preserving relaxation with probability p_mem, otherwise the trion
/// spin is randomized along z.
inline SpinHalfState apply_memory(const SpinHalfState& trion, double p_mem, KeyedEngine& rng) {
    if (rng.uniform() < p_mem) return trion;
    return rng.uniform() < 0.5 ? SpinHalfState::up(Subspace::trion) : SpinHalfState::down(Subspace::trion);
}

struct PhotonOutcome {
    bool passed;  ///< photon found in the analyzer's pass state
    SpinHalfState ground;
};

/// Measures the emitted photon in the {pass, orthogonal(pass)} basis and
/// returns the matching conditional hole state.
inline PhotonOutcome measure_photon(const SpinHalfState& trion, Pol pass, KeyedEngine& rng) {
    auto c = condition_on_photon(trion, pass);
    if (c.ground && rng.uniform() < c.probability) return {true, *c.ground};
    auto other = condition_on_photon(trion, orthogonal(pass));
    if (!other.ground) return {true, *c.ground};
    return {false, *other.ground};
}

inline double irf(double sigma, KeyedEngine& rng) {
    return sigma > 0.0 ? std::normal_distribution<double>(0.0, sigma)(rng) : 0.0;
}

inline void sort_shot(std::vector<DetectionEvent>& ev, std::size_t from) {
    std::stable_sort(ev.begin() + static_cast<std::ptrdiff_t>(from), ev.end(),
                     [](const DetectionEvent& a, const DetectionEvent& b) { return a.time_tag < b.time_tag; });
}

template <class ShotFn>
EventRun run_sharded(const ProtocolConfig& cfg, const RunOptions& opt, std::uint64_t chunk, ShotFn&& shot_fn) {
    const std::uint64_t n_chunks = (cfg.n_shots + chunk - 1) / chunk;
    auto parts = map_chunks(n_chunks, resolve_workers(opt.workers), [&](std::uint64_t c) {
        std::vector<DetectionEvent> out;
        const std::uint64_t end = std::min(cfg.n_shots, (c + 1) * chunk);
        for (std::uint64_t s = c * chunk; s < end; ++s) {
            const std::size_t from = out.size();
            shot_fn(s, out);
            if (out.size() - from > 1) sort_shot(out, from);
        }
        return out;
    });
    EventRun run;
    run.span = cfg.span();
    std::size_t total = 0;
    for (const auto& p : parts) total += p.size();
    run.events.reserve(total);
    for (auto& p : parts) run.events.insert(run.events.end(), p.begin(), p.end());
    return run;
}

// Stream domains keep the protocols' random sequences disjoint.
inline constexpr std::uint64_t kLifetimeDomain = 1;
inline constexpr std::uint64_t kCwDomain = 2;
inline constexpr std::uint64_t kPulsedDomain = 3;

/// One lifetime shot: excite a mixed hole, relax through the memory
/// channel, precess in the trion doublet until decay, analyze the photon.
inline void lifetime_shot(const DeviceParams& dev, const ProtocolConfig& cfg, std::uint64_t shot,
                          std::vector<DetectionEvent>& out) {
    KeyedEngine rng(cfg.rng_seed, shot, kLifetimeDomain);
    const auto ground = mixed_ground(rng);
    const auto ex = excite(ground, cfg.exc_pols[0]);
    if (!ex.trion || rng.uniform() >= ex.probability) return;
    auto trion = apply_memory(*ex.trion, dev.p_mem, rng);
    const double t_decay = sample_decay(dev.T1, rng);
    const double jitter = dev.noise.acts_on(Subspace::trion) ? sample_jitter(dev.noise, rng) : 0.0;
    trion = propagate(trion, dev, t_decay, jitter);
    const auto photon = measure_photon(trion, cfg.det_pols[0], rng);
    std::uint8_t channel = 0;
    Pol proj = cfg.det_pols[0];
    if (!photon.passed) {
        if (cfg.det_pols.size() < 2) return;
        channel = 1;
        proj = cfg.det_pols[1];
    }
    if (rng.uniform() >= cfg.detection_efficiency) return;
    const double t = static_cast<double>(shot) * cfg.rep_period + t_decay + irf(cfg.irf_sigma, rng);
    out.push_back({static_cast<std::uint32_t>(shot), channel, proj, t});
}

/// Observer for pulsed shots: sees the hole state right after a photon-1
/// detection on CH1. Used by tests to check heralding.
using HeraldHook = std::function<void(std::uint64_t shot, const SpinHalfState& heralded)>;

/// One laser period of the two-pulse protocol. Pulse 1 at t = 0, pulse 2 at
/// the configured delay, both relative to the period's trigger.
inline void pulsed_shot(const DeviceParams& dev, const ProtocolConfig& cfg, std::uint64_t shot,
                        std::vector<DetectionEvent>& out, const HeraldHook* hook = nullptr) {
    KeyedEngine rng(cfg.rng_seed, shot, kPulsedDomain);
    const double base = static_cast<double>(shot) * cfg.rep_period;
    const double jit_g = dev.noise.acts_on(Subspace::ground) ? sample_jitter(dev.noise, rng) : 0.0;
    const double jit_e = dev.noise.acts_on(Subspace::trion) ? sample_jitter(dev.noise, rng) : 0.0;
    auto ground = mixed_ground(rng);
    double free_since = 0.0;

    const auto ex1 = excite(ground, cfg.exc_pols[0]);
    if (ex1.trion && rng.uniform() < ex1.probability) {
        auto trion = apply_memory(*ex1.trion, dev.p_mem, rng);
        const double t1 = sample_decay(dev.T1, rng);
        trion = propagate(trion, dev, t1, jit_e);
        const auto photon = measure_photon(trion, cfg.det_pols[0], rng);
        ground = photon.ground;
        free_since = t1;
        if (photon.passed) {
            if (hook && *hook) (*hook)(shot, ground);
            if (rng.uniform() < cfg.detection_efficiency)
                out.push_back({static_cast<std::uint32_t>(shot), 0, cfg.det_pols[0], base + t1 + irf(cfg.irf_sigma, rng)});
        }
    }
    // A trion still excited when pulse 2 arrives blocks the second absorption.
    if (free_since >= cfg.pulse_delay) return;
    ground = propagate(ground, dev, cfg.pulse_delay - free_since, jit_g);
    const auto ex2 = excite(ground, cfg.exc_pols[1]);
    if (!ex2.trion || rng.uniform() >= ex2.probability) return;
    auto trion = apply_memory(*ex2.trion, dev.p_mem, rng);
    const double t2 = sample_decay(dev.T1, rng);
    trion = propagate(trion, dev, t2, jit_e);
    const auto photon = measure_photon(trion, cfg.det_pols[1], rng);
    if (!photon.passed || rng.uniform() >= cfg.detection_efficiency) return;
    out.push_back({static_cast<std::uint32_t>(shot), 1, cfg.det_pols[1],
                   base + cfg.pulse_delay + t2 + irf(cfg.irf_sigma, rng)});
}

/// One cw block: a continuous trajectory of length block_duration.
///
/// While the hole is in the ground doublet, absorption candidates arrive as a
/// Poisson process of rate pump_rate; a candidate at time t is accepted with
/// the excitation probability of the conditional state, which evolves under
/// the no-jump Hamiltonian in between (Lewis-Shedler thinning of the exact
/// jump process). Frequency jitter is redrawn every redraw_time.
inline void cw_block(const DeviceParams& dev, const ProtocolConfig& cfg, std::uint64_t block,
                     std::vector<DetectionEvent>& out) {
    KeyedEngine rng(cfg.rng_seed, block, kCwDomain);
    const double base = static_cast<double>(block) * cfg.block_duration;
    const double end = cfg.block_duration;
    const Pol pump = cfg.exc_pols[0];
    const double f_g = larmor_frequency(dev.g_h, dev.B_x);
    const bool noisy_g = dev.noise.acts_on(Subspace::ground);
    const bool noisy_e = dev.noise.acts_on(Subspace::trion);
    std::exponential_distribution<double> next_candidate(cfg.pump_rate);

    double jit_g = noisy_g ? sample_jitter(dev.noise, rng) : 0.0;
    double jit_e = noisy_e ? sample_jitter(dev.noise, rng) : 0.0;
    double next_redraw = cfg.redraw_time;
    auto redraw_until = [&](double t) {
        while (next_redraw <= t) {
            if (noisy_g) jit_g = sample_jitter(dev.noise, rng);
            if (noisy_e) jit_e = sample_jitter(dev.noise, rng);
            next_redraw += cfg.redraw_time;
        }
    };

    auto ground = mixed_ground(rng);
    double t = 0.0;
    for (;;) {
        const double candidate = t + next_candidate(rng);
        if (candidate >= end) break;
        while (next_redraw <= candidate) {
            ground = pumped_ground_step(ground, f_g + jit_g, cfg.pump_rate, pump, next_redraw - t);
            t = next_redraw;
            redraw_until(t);
        }
        ground = pumped_ground_step(ground, f_g + jit_g, cfg.pump_rate, pump, candidate - t);
        t = candidate;
        const auto ex = excite(ground, pump);
        if (!ex.trion || rng.uniform() >= ex.probability) continue;

        auto trion = apply_memory(*ex.trion, dev.p_mem, rng);
        const double t_decay = sample_decay(dev.T1, rng);
        trion = propagate(trion, dev, t_decay, jit_e);
        const std::uint8_t channel = rng.uniform() < 0.5 ? 0 : 1;
        const Pol pass = cfg.det_pols[channel];
        const auto photon = measure_photon(trion, pass, rng);
        ground = photon.ground;
        t += t_decay;
        if (t >= end) break;
        redraw_until(t);
        if (photon.passed && rng.uniform() < cfg.detection_efficiency)
            out.push_back({static_cast<std::uint32_t>(block), channel, pass, base + t + irf(cfg.irf_sigma, rng)});
    }
}

} // namespace mc

inline EventRun run_lifetime(const DeviceParams& dev, const ProtocolConfig& cfg, const RunOptions& opt = {}) {
    dev.validate();
    cfg.validate(dev);
    if (!cfg.lifetime_like()) throw ConfigError("protocol.kind", "run_lifetime needs a lifetime protocol");
    return mc::run_sharded(cfg, opt, opt.chunk_shots,
                           [&](std::uint64_t s, std::vector<DetectionEvent>& out) { mc::lifetime_shot(dev, cfg, s, out); });
}

inline EventRun run_pulsed_2pc(const DeviceParams& dev, const ProtocolConfig& cfg, const RunOptions& opt = {}) {
    dev.validate();
    cfg.validate(dev);
    if (cfg.kind != ProtocolKind::pulsed_2pc) throw ConfigError("protocol.kind", "run_pulsed_2pc needs pulsed_2pc");
    return mc::run_sharded(cfg, opt, opt.chunk_shots,
                           [&](std::uint64_t s, std::vector<DetectionEvent>& out) { mc::pulsed_shot(dev, cfg, s, out); });
}

inline EventRun run_cw_g2(const DeviceParams& dev, const ProtocolConfig& cfg, const RunOptions& opt = {}) {
    dev.validate();
    cfg.validate(dev);
    if (cfg.kind != ProtocolKind::cw_g2) throw ConfigError("protocol.kind", "run_cw_g2 needs cw_g2");
    return mc::run_sharded(cfg, opt, 1,
                           [&](std::uint64_t b, std::vector<DetectionEvent>& out) { mc::cw_block(dev, cfg, b, out); });
}

inline EventRun run_protocol(const DeviceParams& dev, const ProtocolConfig& cfg, const RunOptions& opt = {}) {
    switch (cfg.kind) {
    case ProtocolKind::lifetime:
    case ProtocolKind::docp_zero_field: return run_lifetime(dev, cfg, opt);
    case ProtocolKind::cw_g2: return run_cw_g2(dev, cfg, opt);
    case ProtocolKind::pulsed_2pc: return run_pulsed_2pc(dev, cfg, opt);
    }
    throw ConfigError("protocol.kind", "unknown protocol");
}

} // namespace qdspin
