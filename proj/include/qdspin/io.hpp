/**
 * @brief Scenario files, event-stream files and digests.
 *
 * Scenarios are JSON documents with a strict schema: unknown keys are
 * errors, every physical quantity carries its unit in the key name, and the
 * top-level seed is mandatory.
 */
#pragma once

#include "qdspin/analysis.hpp"
#include "qdspin/core.hpp"
#include "qdspin/montecarlo.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <bit>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace qdspin {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Unit conversion

/// Value in the display unit whose parse (`d * si_per_unit`) gives back `si`
/// exactly, using the shortest decimal form that does. Keeps parse and
/// serialize idempotent and the written numbers clean.
inline double to_unit(double si, double si_per_unit) {
    const double raw = si / si_per_unit;
    char buf[40];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, raw);
        const double d = std::strtod(buf, nullptr);
        if (d * si_per_unit == si) return d;
    }
    return raw;
}

// ---------------------------------------------------------------------------
// Digests

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline void put_le(std::string& out, const void* p, std::size_t n) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    out.append(static_cast<const char*>(p), n);
}

inline constexpr std::size_t kEventRecordSize = 14;

inline void append_record(std::string& out, const DetectionEvent& e) {
    const auto code = static_cast<std::uint8_t>(e.projection);
    put_le(out, &e.shot, 4);
    put_le(out, &e.channel, 1);
    put_le(out, &code, 1);
    put_le(out, &e.time_tag, 8);
}

/// SHA-256 of the packed binary records; independent of file format.
inline std::string events_digest(std::span<const DetectionEvent> events) {
    std::string buf;
    buf.reserve(events.size() * kEventRecordSize);
    for (const auto& e : events) append_record(buf, e);
    return sha256_hex(buf);
}

// ---------------------------------------------------------------------------
// Scenario

enum class OutputFormat : std::uint8_t { csv, binary };

/// Parameter lists enumerated by `simulate`, one event file per combination.
struct Sweep {
    std::vector<double> pulse_delays;  ///< s
    std::vector<Pol> ch2_pols;
    std::vector<CwPairing> pairings;
    std::vector<double> fields;        ///< T
    std::vector<double> pump_rates;    ///< Hz

    bool empty() const {
        return pulse_delays.empty() && ch2_pols.empty() && pairings.empty() && fields.empty() && pump_rates.empty();
    }
    friend bool operator==(const Sweep&, const Sweep&) = default;
};

struct Scenario {
    std::uint64_t seed = 0;
    DeviceParams device;
    ProtocolConfig protocol;
    Sweep sweep;
    AnalysisSpec analysis;
    std::string output_dir = "out";
    OutputFormat format = OutputFormat::binary;

    friend bool operator==(const Scenario&, const Scenario&) = default;
};

namespace detail {

inline std::string_view to_string(NoiseKind k) {
    switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::gaussian_jitter: return "gaussian_jitter";
    case NoiseKind::lorentzian_jitter: return "lorentzian_jitter";
    }
    return "?";
}

inline std::string_view to_string(NoiseTarget t) {
    switch (t) {
    case NoiseTarget::ground: return "ground";
    case NoiseTarget::excited: return "excited";
    case NoiseTarget::both: return "both";
    }
    return "?";
}

/// Strict object reader: every key must be consumed, and type errors name
/// the full field path.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string child(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }
    bool has(std::string_view key) const { return j_.contains(key); }

    const json& at(std::string_view key) {
        seen_.insert(std::string(key));
        return j_.at(std::string(key));
    }

    double number(std::string_view key, double def) {
        if (!has(key)) return def;
        const auto& v = at(key);
        if (!v.is_number()) throw ConfigError(child(key), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) throw ConfigError(child(key), "must be finite");
        return d;
    }

    std::uint64_t unsigned_int(std::string_view key, std::uint64_t def, bool required = false) {
        if (!has(key)) {
            if (required) throw ConfigError(child(key), "is required");
            return def;
        }
        const auto& v = at(key);
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
        if (v.is_number_float()) {
            const double d = v.get<double>();
            if (d >= 0.0 && d == std::floor(d) && d < 1.8e19) return static_cast<std::uint64_t>(d);
        }
        throw ConfigError(child(key), "expected a non-negative integer");
    }

    std::string string(std::string_view key, std::string def) {
        if (!has(key)) return def;
        const auto& v = at(key);
        if (!v.is_string()) throw ConfigError(child(key), "expected a string");
        return v.get<std::string>();
    }

    Pol pol(const json& v, const std::string& path) const {
        if (!v.is_string()) throw ConfigError(path, "expected a polarization label");
        auto p = parse_pol(v.get<std::string>());
        if (!p) throw ConfigError(path, "unknown polarization '" + v.get<std::string>() + "' (use H, V, D, A, R or L)");
        return *p;
    }

    std::vector<Pol> pols(std::string_view key, std::vector<Pol> def) {
        if (!has(key)) return def;
        const auto& v = at(key);
        if (!v.is_array()) throw ConfigError(child(key), "expected an array of polarization labels");
        std::vector<Pol> out;
        for (std::size_t i = 0; i < v.size(); ++i) out.push_back(pol(v[i], child(key) + "[" + std::to_string(i) + "]"));
        return out;
    }

    std::vector<double> numbers(std::string_view key) {
        if (!has(key)) return {};
        const auto& v = at(key);
        if (!v.is_array()) throw ConfigError(child(key), "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) throw ConfigError(child(key) + "[" + std::to_string(i) + "]", "expected a number");
            out.push_back(v[i].get<double>());
        }
        return out;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.contains(it.key())) throw ConfigError(child(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline ProtocolKind parse_kind(const std::string& s, const std::string& path) {
    for (auto k : {ProtocolKind::lifetime, ProtocolKind::cw_g2, ProtocolKind::pulsed_2pc, ProtocolKind::docp_zero_field})
        if (qdspin::to_string(k) == s) return k;
    throw ConfigError(path, "unknown protocol kind '" + s + "'");
}

} // namespace detail

inline DeviceParams parse_device(const json& j, const std::string& path = "device") {
    detail::Reader r(j, path);
    DeviceParams d;
    d.g_e = r.number("g_e", d.g_e);
    d.g_h = r.number("g_h", d.g_h);
    d.T1 = r.number("T1_ns", d.T1 * 1e9) * 1e-9;
    d.p_mem = r.number("p_mem", d.p_mem);
    d.B_x = r.number("B_x_mT", d.B_x * 1e3) * 1e-3;
    if (r.has("noise")) {
        detail::Reader n(r.at("noise"), r.child("noise"));
        const auto kind = n.string("kind", "none");
        if (kind == "none") d.noise.kind = NoiseKind::none;
        else if (kind == "gaussian_jitter") d.noise.kind = NoiseKind::gaussian_jitter;
        else if (kind == "lorentzian_jitter") d.noise.kind = NoiseKind::lorentzian_jitter;
        else throw ConfigError(n.child("kind"), "unknown noise kind '" + kind + "'");
        if (n.has("width_MHz") && n.has("T2star_ns"))
            throw ConfigError(n.child("T2star_ns"), "give either width_MHz or T2star_ns, not both");
        d.noise.width = n.number("width_MHz", 0.0) * 1e6;
        if (n.has("T2star_ns")) {
            const double t2 = n.number("T2star_ns", 0.0) * 1e-9;
            if (!(t2 > 0.0)) throw ConfigError(n.child("T2star_ns"), "must be > 0");
            if (d.noise.kind == NoiseKind::none) throw ConfigError(n.child("T2star_ns"), "needs a noise kind");
            d.noise.width = noise_width_for(d.noise.kind, t2);
        }
        const auto target = n.string("applies_to", "ground");
        if (target == "ground") d.noise.applies_to = NoiseTarget::ground;
        else if (target == "excited") d.noise.applies_to = NoiseTarget::excited;
        else if (target == "both") d.noise.applies_to = NoiseTarget::both;
        else throw ConfigError(n.child("applies_to"), "must be ground, excited or both");
        n.finish();
    }
    r.finish();
    return d;
}

inline json device_to_json(const DeviceParams& d) {
    json j;
    j["g_e"] = d.g_e;
    j["g_h"] = d.g_h;
    j["T1_ns"] = to_unit(d.T1, 1e-9);
    j["p_mem"] = d.p_mem;
    j["B_x_mT"] = to_unit(d.B_x, 1e-3);
    j["noise"] = {{"kind", detail::to_string(d.noise.kind)},
                  {"width_MHz", to_unit(d.noise.width, 1e6)},
                  {"applies_to", detail::to_string(d.noise.applies_to)}};
    return j;
}

inline json pols_to_json(const std::vector<Pol>& ps) {
    json a = json::array();
    for (Pol p : ps) a.push_back(std::string(to_string(p)));
    return a;
}

inline json protocol_to_json(const ProtocolConfig& c) {
    json j;
    j["kind"] = std::string(to_string(c.kind));
    j["exc_pols"] = pols_to_json(c.exc_pols);
    j["det_pols"] = pols_to_json(c.det_pols);
    j["pulse_delay_ns"] = to_unit(c.pulse_delay, 1e-9);
    j["rep_period_ns"] = to_unit(c.rep_period, 1e-9);
    j["pump_rate_MHz"] = to_unit(c.pump_rate, 1e6);
    j["detection_efficiency"] = c.detection_efficiency;
    j["n_shots"] = c.n_shots;
    j["block_us"] = to_unit(c.block_duration, 1e-6);
    j["redraw_ns"] = to_unit(c.redraw_time, 1e-9);
    j["irf_sigma_ps"] = to_unit(c.irf_sigma, 1e-12);
    return j;
}

inline std::pair<ProtocolConfig, Sweep> parse_protocol(const json& j, const std::string& path = "protocol") {
    detail::Reader r(j, path);
    ProtocolConfig c;
    if (!r.has("kind")) throw ConfigError(r.child("kind"), "is required");
    c.kind = detail::parse_kind(r.string("kind", ""), r.child("kind"));
    if (c.kind == ProtocolKind::pulsed_2pc) {
        c.exc_pols = {Pol::R, Pol::H};
        c.det_pols = {Pol::R, Pol::R};
    } else if (c.kind == ProtocolKind::cw_g2) {
        c.det_pols = {Pol::R, Pol::R};
    }
    c.exc_pols = r.pols("exc_pols", c.exc_pols);
    c.det_pols = r.pols("det_pols", c.det_pols);
    c.pulse_delay = r.number("pulse_delay_ns", c.pulse_delay * 1e9) * 1e-9;
    c.rep_period = r.number("rep_period_ns", c.rep_period * 1e9) * 1e-9;
    c.pump_rate = r.number("pump_rate_MHz", c.pump_rate * 1e-6) * 1e6;
    c.detection_efficiency = r.number("detection_efficiency", c.detection_efficiency);
    c.n_shots = r.unsigned_int("n_shots", c.n_shots);
    c.block_duration = r.number("block_us", c.block_duration * 1e6) * 1e-6;
    c.redraw_time = r.number("redraw_ns", c.redraw_time * 1e9) * 1e-9;
    c.irf_sigma = r.number("irf_sigma_ps", c.irf_sigma * 1e12) * 1e-12;
    Sweep s;
    if (r.has("sweep")) {
        detail::Reader w(r.at("sweep"), r.child("sweep"));
        for (double v : w.numbers("pulse_delays_ns")) s.pulse_delays.push_back(v * 1e-9);
        s.ch2_pols = w.pols("ch2_pols", {});
        if (w.has("pairings")) {
            const auto& a = w.at("pairings");
            if (!a.is_array()) throw ConfigError(w.child("pairings"), "expected an array of RR/RL");
            for (std::size_t i = 0; i < a.size(); ++i) {
                const auto p = a[i].is_string() ? a[i].get<std::string>() : "";
                if (p == "RR") s.pairings.push_back(CwPairing::RR);
                else if (p == "RL") s.pairings.push_back(CwPairing::RL);
                else throw ConfigError(w.child("pairings") + "[" + std::to_string(i) + "]", "expected RR or RL");
            }
        }
        for (double v : w.numbers("fields_mT")) s.fields.push_back(v * 1e-3);
        for (double v : w.numbers("pump_rates_MHz")) s.pump_rates.push_back(v * 1e6);
        w.finish();
    }
    r.finish();
    return {c, s};
}

inline json sweep_to_json(const Sweep& s) {
    json j = json::object();
    auto scaled = [](const std::vector<double>& v, double k) {
        json a = json::array();
        for (double x : v) a.push_back(to_unit(x, k));
        return a;
    };
    if (!s.pulse_delays.empty()) j["pulse_delays_ns"] = scaled(s.pulse_delays, 1e-9);
    if (!s.ch2_pols.empty()) j["ch2_pols"] = pols_to_json(s.ch2_pols);
    if (!s.pairings.empty()) {
        json a = json::array();
        for (auto p : s.pairings) a.push_back(p == CwPairing::RR ? "RR" : "RL");
        j["pairings"] = a;
    }
    if (!s.fields.empty()) j["fields_mT"] = scaled(s.fields, 1e-3);
    if (!s.pump_rates.empty()) j["pump_rates_MHz"] = scaled(s.pump_rates, 1e6);
    return j;
}

inline AnalysisSpec parse_analysis(const json& j, const std::string& path = "analysis") {
    detail::Reader r(j, path);
    AnalysisSpec a;
    a.bin = r.number("bin_ps", a.bin * 1e12) * 1e-12;
    a.window = r.number("window_ns", a.window * 1e9) * 1e-9;
    a.exclusion = r.number("exclusion_ps", a.exclusion * 1e12) * 1e-12;
    a.trace_exclusion = r.number("trace_exclusion_ns", a.trace_exclusion * 1e9) * 1e-9;
    a.slice_t1 = r.number("slice_t1_ps", a.slice_t1 * 1e12) * 1e-12;
    a.slice_tol_bins = r.number("slice_tol_bins", a.slice_tol_bins);
    if (r.has("readout_window_ps")) {
        const auto w = r.numbers("readout_window_ps");
        if (w.size() != 2 || !(w[1] > w[0])) throw ConfigError(r.child("readout_window_ps"), "expected [start, end] with end > start");
        a.readout_start = w[0] * 1e-12;
        a.readout_end = w[1] * 1e-12;
    }
    if (r.has("fit_alpha")) {
        const auto& v = r.at("fit_alpha");
        if (!v.is_null()) {
            if (!v.is_number()) throw ConfigError(r.child("fit_alpha"), "expected a number or null");
            a.fit_alpha = v.get<double>();
            if (!(*a.fit_alpha > 0.0 && *a.fit_alpha <= 3.0)) throw ConfigError(r.child("fit_alpha"), "must lie in (0, 3]");
        }
    }
    a.max_time = r.number("max_time_ns", a.max_time * 1e9) * 1e-9;
    a.map_delay = r.number("map_delay_ns", a.map_delay * 1e9) * 1e-9;
    r.finish();
    auto need = [&](bool ok, const char* key, const char* what) {
        if (!ok) throw ConfigError(std::string(path) + "." + key, what);
    };
    need(a.bin > 0.0, "bin_ps", "must be > 0");
    need(a.window > a.bin, "window_ns", "must exceed one bin");
    need(a.exclusion >= 0.0, "exclusion_ps", "must be >= 0");
    need(a.max_time > a.bin, "max_time_ns", "must exceed one bin");
    need(a.slice_tol_bins >= 0.0, "slice_tol_bins", "must be >= 0");
    return a;
}

inline json analysis_to_json(const AnalysisSpec& a) {
    json j;
    j["bin_ps"] = to_unit(a.bin, 1e-12);
    j["window_ns"] = to_unit(a.window, 1e-9);
    j["exclusion_ps"] = to_unit(a.exclusion, 1e-12);
    j["trace_exclusion_ns"] = to_unit(a.trace_exclusion, 1e-9);
    j["slice_t1_ps"] = to_unit(a.slice_t1, 1e-12);
    j["slice_tol_bins"] = a.slice_tol_bins;
    j["readout_window_ps"] = {to_unit(a.readout_start, 1e-12), to_unit(a.readout_end, 1e-12)};
    j["fit_alpha"] = a.fit_alpha ? json(*a.fit_alpha) : json(nullptr);
    j["max_time_ns"] = to_unit(a.max_time, 1e-9);
    j["map_delay_ns"] = to_unit(a.map_delay, 1e-9);
    return j;
}

/// Parses and validates a scenario document.
inline Scenario parse_scenario(const json& j) {
    detail::Reader r(j, "");
    Scenario s;
    s.seed = r.unsigned_int("seed", 0, true);
    s.device = r.has("device") ? parse_device(r.at("device")) : DeviceParams{};
    if (!r.has("protocol")) throw ConfigError("protocol", "is required");
    std::tie(s.protocol, s.sweep) = parse_protocol(r.at("protocol"));
    s.protocol.rng_seed = s.seed;
    if (r.has("analysis")) s.analysis = parse_analysis(r.at("analysis"));
    if (r.has("outputs")) {
        detail::Reader o(r.at("outputs"), "outputs");
        s.output_dir = o.string("dir", s.output_dir);
        const auto f = o.string("format", "binary");
        if (f == "csv") s.format = OutputFormat::csv;
        else if (f == "binary") s.format = OutputFormat::binary;
        else throw ConfigError("outputs.format", "must be csv or binary");
        o.finish();
    }
    r.finish();
    s.device.validate();
    s.protocol.validate(s.device);
    for (double B : s.sweep.fields)
        if (!(B >= 0.0)) throw ConfigError("protocol.sweep.fields_mT", "must be >= 0");
    for (double p : s.sweep.pump_rates)
        if (!(p > 0.0)) throw ConfigError("protocol.sweep.pump_rates_MHz", "must be > 0");
    for (double d : s.sweep.pulse_delays)
        if (!(d > 0.0 && d < s.protocol.rep_period))
            throw ConfigError("protocol.sweep.pulse_delays_ns", "must lie in (0, rep_period)");
    return s;
}

inline Scenario parse_scenario_text(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<document>", std::string("malformed JSON: ") + e.what());
    }
    return parse_scenario(j);
}

inline json scenario_to_json(const Scenario& s) {
    json j;
    j["seed"] = s.seed;
    j["device"] = device_to_json(s.device);
    auto p = protocol_to_json(s.protocol);
    if (!s.sweep.empty()) p["sweep"] = sweep_to_json(s.sweep);
    j["protocol"] = p;
    j["analysis"] = analysis_to_json(s.analysis);
    j["outputs"] = {{"dir", s.output_dir}, {"format", s.format == OutputFormat::csv ? "csv" : "binary"}};
    return j;
}

// Output location and format do not change the physics, so they are left out.
inline std::string scenario_digest(const Scenario& s) {
    auto j = scenario_to_json(s);
    j.erase("outputs");
    return sha256_hex(j.dump());
}
inline std::string device_digest(const DeviceParams& d) { return sha256_hex(device_to_json(d).dump()); }

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + p.string());
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view data) {
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + p.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + p.string());
}

inline Scenario load_scenario(const std::filesystem::path& p) { return parse_scenario_text(read_file(p)); }

// ---------------------------------------------------------------------------
// Runs of a scenario

/// One simulate job: the scenario's device/protocol with sweep overrides
/// applied and a seed derived from the base seed and the run index.
struct RunSpec {
    std::size_t index = 0;
    std::string tag;
    DeviceParams device;
    ProtocolConfig protocol;
    json overrides = json::object();
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return KeyedEngine::mix(seed ^ KeyedEngine::mix(index + 0x51ed27ULL));
}

/// Cartesian product of the sweep lists, in field, pump, delay, pairing,
/// CH2-polarization order.
inline std::vector<RunSpec> expand_runs(const Scenario& s) {
    auto or_none = [](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::vector<std::optional<T>> out;
        if (v.empty()) out.push_back(std::nullopt);
        for (const auto& x : v) out.push_back(x);
        return out;
    };
    std::vector<RunSpec> runs;
    auto fmt = [](double v) {
        char b[32];
        std::snprintf(b, sizeof b, "%g", v);
        return std::string(b);
    };
    for (auto B : or_none(s.sweep.fields))
        for (auto pump : or_none(s.sweep.pump_rates))
            for (auto delay : or_none(s.sweep.pulse_delays))
                for (auto pairing : or_none(s.sweep.pairings))
                    for (auto ch2 : or_none(s.sweep.ch2_pols)) {
                        RunSpec r;
                        r.index = runs.size();
                        r.device = s.device;
                        r.protocol = s.protocol;
                        std::string tag;
                        if (B) {
                            r.device.B_x = *B;
                            r.overrides["B_x_mT"] = to_unit(*B, 1e-3);
                            tag += "B" + fmt(*B * 1e3) + "mT_";
                        }
                        if (pump) {
                            r.protocol.pump_rate = *pump;
                            r.overrides["pump_rate_MHz"] = to_unit(*pump, 1e6);
                            tag += "P" + fmt(*pump * 1e-6) + "MHz_";
                        }
                        if (delay) {
                            r.protocol.pulse_delay = *delay;
                            r.overrides["pulse_delay_ns"] = to_unit(*delay, 1e-9);
                            tag += "dt" + fmt(*delay * 1e9) + "ns_";
                        }
                        if (pairing) {
                            const Pol p = *pairing == CwPairing::RR ? Pol::R : Pol::L;
                            r.protocol.det_pols = {p, p};
                            r.overrides["pairing"] = *pairing == CwPairing::RR ? "RR" : "RL";
                            tag += *pairing == CwPairing::RR ? "RR_" : "RL_";
                        }
                        if (ch2) {
                            if (r.protocol.det_pols.size() < 2) throw ConfigError("protocol.sweep.ch2_pols", "needs two channels");
                            r.protocol.det_pols[1] = *ch2;
                            r.overrides["ch2_pol"] = std::string(to_string(*ch2));
                            tag += "ch2" + std::string(to_string(*ch2)) + "_";
                        }
                        r.protocol.rng_seed = derive_seed(s.seed, r.index);
                        r.tag = tag.empty() ? "run" : tag.substr(0, tag.size() - 1);
                        r.device.validate();
                        r.protocol.validate(r.device);
                        runs.push_back(std::move(r));
                    }
    return runs;
}

// ---------------------------------------------------------------------------
// Event files

inline constexpr std::string_view kEventMagic = "QDSPEVT1";

struct EventFile {
    json header;
    std::vector<DetectionEvent> events;

    double span() const { return header.at("span_s").get<double>(); }
    std::string scenario_digest() const { return header.at("scenario_digest").get<std::string>(); }
    DeviceParams device() const { return parse_device(header.at("run").at("device"), "run.device"); }
    ProtocolConfig protocol() const { return parse_protocol(header.at("run").at("protocol"), "run.protocol").first; }
    Scenario scenario() const { return parse_scenario(header.at("scenario")); }
    const json& overrides() const { return header.at("run").at("overrides"); }
};

inline json event_header(const Scenario& s, const RunSpec& r, const EventRun& run) {
    json h;
    h["format"] = "qdspin-events";
    h["version"] = 1;
    h["scenario"] = scenario_to_json(s);
    h["scenario_digest"] = scenario_digest(s);
    h["device_digest"] = device_digest(r.device);
    auto protocol = protocol_to_json(r.protocol);
    h["run"] = {{"index", r.index},          {"tag", r.tag},
                {"seed", r.protocol.rng_seed}, {"overrides", r.overrides},
                {"device", device_to_json(r.device)}, {"protocol", protocol}};
    h["span_s"] = run.span;
    h["event_count"] = run.events.size();
    h["events_digest"] = events_digest(run.events);
    return h;
}

inline std::string serialize_events_binary(const json& header, std::span<const DetectionEvent> events) {
    const std::string hdr = header.dump();
    std::string out(kEventMagic);
    const auto len = static_cast<std::uint32_t>(hdr.size());
    put_le(out, &len, 4);
    out += hdr;
    const auto n = static_cast<std::uint64_t>(events.size());
    put_le(out, &n, 8);
    out.reserve(out.size() + events.size() * kEventRecordSize);
    for (const auto& e : events) append_record(out, e);
    return out;
}

inline std::string serialize_events_csv(const json& header, std::span<const DetectionEvent> events) {
    std::string out = "# qdspin-events v1\n# header: " + header.dump() + "\nshot,channel,projection,time_s\n";
    char buf[96];
    for (const auto& e : events) {
        std::snprintf(buf, sizeof buf, "%u,%u,%s,%.17g\n", e.shot, static_cast<unsigned>(e.channel),
                      std::string(to_string(e.projection)).c_str(), e.time_tag);
        out += buf;
    }
    return out;
}

namespace detail {

template <class T>
T get_le(std::string_view data, std::size_t& pos) {
    if (pos + sizeof(T) > data.size()) throw IoError("event file truncated");
    T v;
    std::memcpy(&v, data.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

inline DetectionEvent checked_event(std::uint32_t shot, unsigned channel, unsigned code, double t) {
    if (code > 5) throw IoError("event file: invalid projection code " + std::to_string(code));
    if (channel > 255) throw IoError("event file: invalid channel");
    if (!std::isfinite(t)) throw IoError("event file: non-finite time tag");
    return {shot, static_cast<std::uint8_t>(channel), static_cast<Pol>(code), t};
}

} // namespace detail

inline EventFile parse_events(std::string_view data) {
    EventFile f;
    if (data.substr(0, kEventMagic.size()) == kEventMagic) {
        std::size_t pos = kEventMagic.size();
        const auto len = detail::get_le<std::uint32_t>(data, pos);
        if (pos + len > data.size()) throw IoError("event file truncated in header");
        try {
            f.header = json::parse(data.substr(pos, len));
        } catch (const json::parse_error&) {
            throw IoError("event file: malformed header");
        }
        pos += len;
        const auto n = detail::get_le<std::uint64_t>(data, pos);
        if (data.size() - pos != n * kEventRecordSize) throw IoError("event file: record count does not match size");
        f.events.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            const auto shot = detail::get_le<std::uint32_t>(data, pos);
            const auto ch = detail::get_le<std::uint8_t>(data, pos);
            const auto code = detail::get_le<std::uint8_t>(data, pos);
            const auto t = detail::get_le<double>(data, pos);
            f.events.push_back(detail::checked_event(shot, ch, code, t));
        }
    } else {
        std::istringstream in{std::string(data)};
        std::string line;
        bool have_header = false, have_columns = false;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line.rfind("# header: ", 0) == 0) {
                try {
                    f.header = json::parse(line.substr(10));
                } catch (const json::parse_error&) {
                    throw IoError("event file: malformed header");
                }
                have_header = true;
                continue;
            }
            if (line[0] == '#') continue;
            if (!have_columns) {
                if (line != "shot,channel,projection,time_s") throw IoError("event file: unexpected column line");
                have_columns = true;
                continue;
            }
            unsigned shot = 0, ch = 0;
            char pol[8] = {};
            double t = 0.0;
            if (std::sscanf(line.c_str(), "%u,%u,%7[^,],%lf", &shot, &ch, pol, &t) != 4)
                throw IoError("event file: malformed record '" + line + "'");
            const auto p = parse_pol(pol);
            if (!p) throw IoError("event file: invalid projection '" + std::string(pol) + "'");
            f.events.push_back(detail::checked_event(shot, ch, static_cast<unsigned>(*p), t));
        }
        if (!have_header) throw IoError("event file: missing header");
    }
    if (!f.header.is_object() || f.header.value("format", "") != "qdspin-events")
        throw IoError("event file: not a qdspin event stream");
    for (const char* key : {"scenario", "scenario_digest", "run", "span_s"})
        if (!f.header.contains(key)) throw IoError(std::string("event file: header lacks '") + key + "'");
    if (f.header.contains("event_count") && f.header["event_count"].get<std::size_t>() != f.events.size())
        throw IoError("event file: event count mismatch");
    return f;
}

inline EventFile load_events(const std::filesystem::path& p) { return parse_events(read_file(p)); }

// ---------------------------------------------------------------------------
// Fit reports

inline json fit_report(const FitResult& r, std::string_view model, std::string_view input_digest) {
    json j;
    j["model"] = model;
    json params = json::object(), sig = json::object();
    for (std::size_t i = 0; i < r.params.size(); ++i) {
        const std::string name = i < r.names.size() ? r.names[i] : "p" + std::to_string(i);
        params[name] = r.params[i];
        sig[name] = r.sigmas[i];
    }
    j["params"] = params;
    j["sigmas"] = sig;
    json fixed = json::array();
    for (std::size_t i = 0; i < r.fixed.size(); ++i)
        if (r.fixed[i]) fixed.push_back(i < r.names.size() ? r.names[i] : std::to_string(i));
    j["fixed"] = fixed;
    json cov = json::array();
    for (Eigen::Index a = 0; a < r.covariance.rows(); ++a) {
        json row = json::array();
        for (Eigen::Index b = 0; b < r.covariance.cols(); ++b) row.push_back(r.covariance(a, b));
        cov.push_back(row);
    }
    j["covariance"] = cov;
    j["residual_sse"] = r.residual_sse;
    j["reduced_chi2"] = r.reduced_chi2();
    j["n_points"] = r.n_points;
    j["n_iterations"] = r.n_iterations;
    j["gradient_norm"] = r.gradient_norm;
    j["converged"] = r.converged;
    j["no_oscillation"] = r.no_oscillation;
    j["input_digest"] = input_digest;
    return j;
}

} // namespace qdspin
