// qdspin: simulate, analyze and fit hole-spin precession experiments.
//
// Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numerical (non-convergence).

#include "qdspin/analysis.hpp"
#include "qdspin/io.hpp"

#include <CLI11.hpp>

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace qdspin;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

std::string strf(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

/// Raised when outputs were written but a fit did not converge.
struct NotConverged : Error {
    using Error::Error;
};

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    unsigned workers = 0;
    std::string out;
    std::string format;
};

void apply_flags(Scenario& s, const CommonFlags& f) {
    if (f.seed) {
        s.seed = *f.seed;
        s.protocol.rng_seed = *f.seed;
    }
    if (!f.out.empty()) s.output_dir = f.out;
    if (f.format == "csv") s.format = OutputFormat::csv;
    else if (f.format == "binary") s.format = OutputFormat::binary;
}

// ---------------------------------------------------------------------------
// Output helpers

class Bundle {
public:
    Bundle(fs::path dir, std::vector<std::string> provenance) : dir_(std::move(dir)), provenance_(std::move(provenance)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
    }

    /// Writes a CSV whose '#' header carries the dataset name and provenance.
    void csv(const std::string& name, const std::string& columns, const std::string& rows,
             const std::vector<std::string>& notes = {}) {
        std::ostringstream os;
        os << "# " << name << '\n';
        for (const auto& p : provenance_) os << "# " << p << '\n';
        for (const auto& n : notes) os << "# " << n << '\n';
        os << columns << '\n' << rows;
        put(name, os.str());
    }
    void json_file(const std::string& name, const json& j) { put(name, j.dump(2) + "\n"); }

    const fs::path& dir() const { return dir_; }
    const std::vector<std::string>& written() const { return written_; }

private:
    void put(const std::string& name, const std::string& data) {
        write_file(dir_ / name, data);
        written_.push_back(name);
    }
    fs::path dir_;
    std::vector<std::string> provenance_;
    std::vector<std::string> written_;
};

std::string row(std::initializer_list<std::string> cells) {
    std::string s;
    for (const auto& c : cells) {
        if (!s.empty()) s += ',';
        s += c;
    }
    return s + '\n';
}

std::string num(double v) { return fmt9(v); }

// ---------------------------------------------------------------------------
// simulate

struct SimulatedFile {
    fs::path path;
    std::string tag;
    std::size_t events;
    std::string digest;
};

std::vector<SimulatedFile> simulate(const Scenario& s, unsigned workers, bool verbose) {
    const auto runs = expand_runs(s);
    const fs::path dir(s.output_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    std::vector<SimulatedFile> files;
    json manifest;
    manifest["scenario_digest"] = scenario_digest(s);
    manifest["runs"] = json::array();
    for (const auto& r : runs) {
        const auto run = run_protocol(r.device, r.protocol, RunOptions{workers});
        const auto header = event_header(s, r, run);
        const bool csv = s.format == OutputFormat::csv;
        const auto name = strf("%03zu_%s.%s", r.index, r.tag.c_str(), csv ? "csv" : "qdsevt");
        write_file(dir / name, csv ? serialize_events_csv(header, run.events) : serialize_events_binary(header, run.events));
        files.push_back({dir / name, r.tag, run.events.size(), header["events_digest"]});
        manifest["runs"].push_back({{"file", name}, {"tag", r.tag}, {"seed", r.protocol.rng_seed},
                                    {"events", run.events.size()}, {"events_digest", header["events_digest"]}});
        if (verbose) std::printf("simulated %-40s %10zu events\n", name.c_str(), run.events.size());
    }
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
    return files;
}

// ---------------------------------------------------------------------------
// analyze

/// One recovered quantity, keyed by name in the analysis summary.
struct Recovered {
    double value = 0.0;
    double sigma = 0.0;
};
using Results = std::map<std::string, Recovered>;

std::string input_digest(const std::vector<EventFile>& files) {
    std::string cat;
    for (const auto& f : files) cat += f.header.at("events_digest").get<std::string>();
    return sha256_hex(cat);
}

std::string key_mt(double B) { return strf("%gmT", B * 1e3); }

Results analyze_lifetime_files(const std::vector<EventFile>& files, const AnalysisSpec& spec, Bundle& out,
                               const std::string& digest) {
    Results res;
    std::string traces;
    std::vector<double> fields;
    std::vector<FitResult> fits;
    bool all_converged = true;
    for (const auto& f : files) {
        const auto dev = f.device();
        const auto proto = f.protocol();
        const auto a = analyze_lifetime(f.events, proto.rep_period, spec);
        const std::string tag = f.header["run"]["tag"];
        for (std::size_t i = 0; i < a.co.size(); ++i) {
            const bool two = a.cross.total() > 0;
            traces += row({tag, num(dev.B_x), num(a.co.center(i)), std::to_string(a.co.count(i)), num(a.co.error(i)),
                           two ? std::to_string(a.cross.count(i)) : "", two ? num(a.cross.error(i)) : "",
                           two && a.docp.valid[i] ? num(a.docp.docp[i]) : "",
                           two && a.docp.valid[i] ? num(a.docp.error[i]) : ""});
        }
        if (a.cross.total() == 0) continue;
        if (dev.B_x == 0.0) {
            const auto d = integrated_docp(a.co.total(), a.cross.total());
            res["docp_" + tag] = {d.value, d.error};
            res["docp_zero_field"] = {d.value, d.error};
            continue;
        }
        if (!a.fit) continue;
        out.json_file("fit_lifetime_" + tag + ".json", fit_report(*a.fit, "lifetime_docp_cosine", digest));
        all_converged = all_converged && a.fit->converged && !a.fit->no_oscillation;
        res["f_e_" + key_mt(dev.B_x)] = {a.fit->param("f"), a.fit->sigma("f")};
        if (a.fit->converged && !a.fit->no_oscillation) {
            fields.push_back(dev.B_x);
            fits.push_back(*a.fit);
        }
    }
    out.csv("fig1d_traces.csv", "run,B_T,t_s,co_counts,co_error,cross_counts,cross_error,docp,docp_error", traces);
    if (fields.size() >= 2) {
        const auto z = zeeman_from_frequencies(fields, fits);
        std::string rows;
        for (const auto& p : z.points) rows += row({num(p.B), num(p.dE), num(p.sigma)});
        out.csv("fig1f_zeeman.csv", "B_T,dE_eV,sigma_eV", rows, {strf("g = %.6g +/- %.3g", z.fit.g, z.fit.sigma_g)});
        out.json_file("fit_zeeman.json", {{"model", "linear_zeeman"},
                                          {"g", z.fit.g},
                                          {"sigma_g", z.fit.sigma_g},
                                          {"intercept_eV", z.fit.intercept},
                                          {"input_digest", digest}});
        res["g_e"] = {z.fit.g, z.fit.sigma_g};
    }
    if (!all_converged) throw NotConverged("a lifetime fit did not converge");
    return res;
}

Results analyze_cw_files(const std::vector<EventFile>& files, const AnalysisSpec& spec, Bundle& out,
                         const std::string& digest) {
    struct Group {
        const EventFile* rr = nullptr;
        const EventFile* rl = nullptr;
    };
    std::map<std::pair<double, double>, Group> groups;
    for (const auto& f : files) {
        const auto proto = f.protocol();
        auto& g = groups[{f.device().B_x, proto.pump_rate}];
        auto& slot = proto.det_pols.at(0) == Pol::L ? g.rl : g.rr;
        if (slot) throw ConfigError("inputs", "two cw runs with the same field, pump and pairing");
        slot = &f;
    }
    Results res;
    std::string corr, docps;
    std::vector<std::array<double, 7>> table;  // B, pump, f, sf, tau, stau, alpha
    bool all_converged = true;
    for (const auto& [key, g] : groups) {
        const auto [B, pump] = key;
        if (!g.rr || !g.rl) throw ConfigError("inputs", "cw analysis needs both RR and RL runs at " + key_mt(B));
        const auto a = analyze_cw(g.rr->events, g.rr->span(), g.rl->events, g.rl->span(), spec);
        const std::string tag = strf("B%gmT_P%gMHz", B * 1e3, pump * 1e-6);
        const auto& h = a.rr.histogram;
        for (std::size_t i = 0; i < h.size(); ++i)
            corr += row({tag, num(h.center(i)), std::to_string(h.count(i)), std::to_string(a.rl.histogram.count(i))});
        for (std::size_t i = 0; i < a.docp.size(); ++i)
            docps += row({tag, num(B), num(pump), num(a.docp.times[i]), a.docp.valid[i] ? num(a.docp.docp[i]) : "",
                          a.docp.valid[i] ? num(a.docp.error[i]) : "", num(a.g_rr.docp[i]), num(a.g_rl.docp[i])});
        auto report = fit_report(a.fit, "cw_damped_cosine", digest);
        report["phase_gap_rad"] = a.phase_gap;
        report["trace_fits"] = {{"RR", fit_report(a.fit_rr, "damped_cosine", digest)},
                                {"RL", fit_report(a.fit_rl, "damped_cosine", digest)}};
        out.json_file("fit_cw_" + tag + ".json", report);
        all_converged = all_converged && a.fit.converged;
        res["f_h_" + tag] = {a.fit.param("f"), a.fit.sigma("f")};
        res["tau_" + tag] = {a.fit.param("T2star"), a.fit.sigma("T2star")};
        res["alpha_" + tag] = {a.fit.param("alpha"), a.fit.sigma("alpha")};
        res["phase_gap_" + tag] = {a.phase_gap, 0.0};
        table.push_back({B, pump, a.fit.param("f"), a.fit.sigma("f"), a.fit.param("T2star"), a.fit.sigma("T2star"),
                         a.fit.param("alpha")});
        if (groups.size() == 1) {
            res["f_h"] = res["f_h_" + tag];
            res["tau"] = res["tau_" + tag];
            res["alpha"] = res["alpha_" + tag];
            res["phase_gap"] = res["phase_gap_" + tag];
        }
    }
    out.csv("fig2a_correlations.csv", "group,tau_s,rr_counts,rl_counts", corr);
    out.csv("fig2b_docp.csv", "group,B_T,pump_Hz,tau_s,docp,error,g_rr,g_rl", docps,
            {"docp from plateau-normalized folded RR and RL correlations"});

    std::set<double> fields, pumps;
    for (const auto& t : table) {
        fields.insert(t[0]);
        pumps.insert(t[1]);
    }
    if (fields.size() >= 2 && pumps.size() == 1) {
        std::string rows;
        for (const auto& t : table) rows += row({num(t[0]), num(t[2]), num(t[3]), num(t[4]), num(t[5])});
        std::vector<ZeemanPoint> pts;
        for (const auto& t : table) pts.push_back({t[0], PhysicalConstants::h * t[2], PhysicalConstants::h * t[3]});
        const auto z = fit_linear_zeeman(pts);
        out.csv("fig2c_frequency_vs_field.csv", "B_T,f_Hz,f_sigma_Hz,tau_s,tau_sigma_s", rows,
                {strf("g_h = %.6g +/- %.3g", z.g, z.sigma_g)});
        res["g_h"] = {z.g, z.sigma_g};
    }
    if (pumps.size() >= 2 && fields.size() == 1) {
        std::string rows, s1;
        std::vector<double> x, y;
        bool decreasing = true;
        for (std::size_t i = 0; i < table.size(); ++i) {
            const auto& t = table[i];
            rows += row({num(t[1]), num(t[4]), num(t[5]), num(t[6])});
            s1 += row({strf("%g", t[1] * 1e-6), strf("%.4g", t[4] * 1e9), strf("%.4g", t[6])});
            x.push_back(t[1]);
            y.push_back(t[4]);
            if (i > 0) decreasing = decreasing && t[4] < table[i - 1][4];
        }
        const auto ll = fit_loglog(x, y);
        out.csv("fig2d_tau_vs_pump.csv", "pump_Hz,tau_s,tau_sigma_s,alpha", rows,
                {strf("log-log slope %.4g +/- %.3g", ll.slope, ll.sigma_slope),
                 std::string("tau strictly decreasing: ") + (decreasing ? "yes" : "no")});
        out.csv("tableS1.csv", "pump_MHz,tau_ns,alpha", s1);
        res["tau_pump_slope"] = {ll.slope, ll.sigma_slope};
        res["tau_decreasing"] = {decreasing ? 1.0 : 0.0, 0.0};
    }
    if (!all_converged) throw NotConverged("a cw fit did not converge");
    return res;
}

Results analyze_pulsed_files(const std::vector<EventFile>& files, const AnalysisSpec& spec, Bundle& out,
                             const std::string& digest) {
    struct Pair {
        const EventFile* co = nullptr;
        const EventFile* cross = nullptr;
    };
    std::map<double, Pair> by_delay;
    for (const auto& f : files) {
        const auto p = f.protocol();
        auto& g = by_delay[p.pulse_delay];
        auto& slot = p.det_pols.at(1) == p.det_pols.at(0) ? g.co : g.cross;
        if (slot) throw ConfigError("inputs", strf("two pulsed runs share delay %g ns and CH2 polarization", p.pulse_delay * 1e9));
        slot = &f;
    }
    std::vector<PulsedReduction> co, cross;
    double map_delay = by_delay.begin()->first;
    for (const auto& [delay, g] : by_delay) {
        if (!g.co || !g.cross)
            throw ConfigError("inputs", strf("pulsed analysis needs co and cross CH2 runs at %g ns", delay * 1e9));
        const double rep = g.co->protocol().rep_period;
        co.push_back(reduce_pulsed(g.co->events, rep, delay, spec));
        cross.push_back(reduce_pulsed(g.cross->events, rep, delay, spec));
        if (std::abs(delay - spec.map_delay) < std::abs(map_delay - spec.map_delay)) map_delay = delay;
    }

    // Full map and slice at the delay closest to the configured one.
    {
        const auto& g = by_delay.at(map_delay);
        const double rep = g.co->protocol().rep_period;
        std::string rows;
        for (const auto* f : {g.co, g.cross}) {
            const auto m = pulsed_map(f->events, rep, map_delay, spec);
            const std::string ch2(to_string(f->protocol().det_pols.at(1)));
            for (std::size_t r = 0; r < m.map.rows(); ++r)
                for (std::size_t c = 0; c < m.map.cols(); ++c)
                    if (m.map.at(r, c) > 0)
                        rows += row({ch2, num(m.map.t1_axis().center(r)), num(m.map.t2_axis().center(c)),
                                     std::to_string(m.map.at(r, c))});
        }
        out.csv("fig3b_map.csv", "ch2,t1_s,t2_s,counts", rows, {strf("pulse delay %g ns", map_delay * 1e9)});
        std::size_t k = 0;
        for (std::size_t i = 0; i < co.size(); ++i)
            if (co[i].delay == map_delay) k = i;
        const auto d = docp(co[k].readout, cross[k].readout);
        std::string s;
        for (std::size_t i = 0; i < d.size(); ++i)
            s += row({num(co[k].readout.center(i)), std::to_string(co[k].readout.count(i)),
                      std::to_string(cross[k].readout.count(i)), d.valid[i] ? num(d.docp[i]) : "",
                      d.valid[i] ? num(d.error[i]) : ""});
        out.csv("fig3c_slice.csv", "t2_after_pulse2_s,co_counts,cross_counts,docp,error", s,
                {strf("t_CH1 = %g ps, pulse delay %g ns", spec.slice_t1 * 1e12, map_delay * 1e9)});
    }

    const auto a = analyze_pulsed(co, cross, spec);
    std::string rows, fits_csv;
    json readout = json::array();
    for (std::size_t i = 0; i < a.traces.size(); ++i) {
        const auto& t = a.traces[i];
        for (std::size_t k = 0; k < t.size(); ++k)
            rows += row({num(a.readout_t2[i]), num(t.times[k]), t.valid[k] ? num(t.docp[k]) : "",
                         t.valid[k] ? num(t.error[k]) : "", num(t.n_total[k])});
        const auto& fr = a.fits[i];
        fits_csv += row({num(a.readout_t2[i]), num(fr.param("T2star")), num(fr.sigma("T2star")), num(fr.param("f")),
                         num(fr.sigma("f")), fr.converged ? "1" : "0"});
        auto rep = fit_report(fr, "pulsed_damped_cosine", digest);
        rep["readout_t2_s"] = a.readout_t2[i];
        readout.push_back(rep);
    }
    out.csv("fig3d_docp_vs_delay.csv", "readout_t2_s,delay_s,docp,error,n_total", rows);
    out.csv("figS7_readout_fits.csv", "readout_t2_s,T2star_s,T2star_sigma_s,f_Hz,f_sigma_Hz,converged", fits_csv,
            {strf("window %g-%g ps over %zu converged fits: T2* from mean rate = %.6g +/- %.3g s, "
                  "mean T2* = %.6g +/- %.3g s, f = %.9g +/- %.3g Hz",
                  spec.readout_start * 1e12, spec.readout_end * 1e12, a.average.n, a.average.rate_T2star,
                  a.average.error_rate_T2star, a.average.mean_T2star, a.average.error_T2star, a.average.mean_f,
                  a.average.error_f)});
    out.json_file("fit_pulsed.json", {{"model", "pulsed_damped_cosine_window_average"},
                                      {"T2star_s", a.average.rate_T2star},
                                      {"T2star_error_s", a.average.error_rate_T2star},
                                      {"T2star_arithmetic_mean_s", a.average.mean_T2star},
                                      {"T2star_arithmetic_mean_error_s", a.average.error_T2star},
                                      {"f_Hz", a.average.mean_f},
                                      {"f_error_Hz", a.average.error_f},
                                      {"n_fits", a.average.n},
                                      {"readout_fits", readout},
                                      {"input_digest", digest}});
    Results res;
    res["f_h"] = {a.average.mean_f, a.average.error_f};
    res["T2star"] = {a.average.rate_T2star, a.average.error_rate_T2star};
    res["T2star_arithmetic_mean"] = {a.average.mean_T2star, a.average.error_T2star};
    res["readout_fits_converged"] = {static_cast<double>(a.average.n), 0.0};
    return res;
}

Results analyze(const std::vector<fs::path>& paths, const std::optional<AnalysisSpec>& override_spec,
                const fs::path& out_dir) {
    if (paths.empty()) throw ConfigError("inputs", "no event files given");
    std::vector<EventFile> files;
    for (const auto& p : paths) {
        auto f = load_events(p);
        if (f.header.contains("events_digest") && f.header["events_digest"] != events_digest(f.events))
            throw IoError(p.string() + ": events do not match the header digest");
        files.push_back(std::move(f));
    }
    const auto sd = files.front().scenario_digest();
    for (std::size_t i = 1; i < files.size(); ++i)
        if (files[i].scenario_digest() != sd)
            throw ConfigError("inputs", paths[i].string() + " comes from a different scenario (digest mismatch)");
    std::sort(files.begin(), files.end(), [](const EventFile& a, const EventFile& b) {
        return a.header["run"]["index"].get<std::size_t>() < b.header["run"]["index"].get<std::size_t>();
    });
    const auto scenario = files.front().scenario();
    const auto spec = override_spec.value_or(scenario.analysis);
    const auto digest = input_digest(files);
    Bundle out(out_dir, {"scenario_digest: " + sd, "input_digest: " + digest});
    const auto kind = scenario.protocol.kind;
    Results res;
    std::exception_ptr late;
    try {
        switch (kind) {
        case ProtocolKind::lifetime:
        case ProtocolKind::docp_zero_field: res = analyze_lifetime_files(files, spec, out, digest); break;
        case ProtocolKind::cw_g2: res = analyze_cw_files(files, spec, out, digest); break;
        case ProtocolKind::pulsed_2pc: res = analyze_pulsed_files(files, spec, out, digest); break;
        }
    } catch (const NotConverged&) {
        late = std::current_exception();
    }
    json summary = json::object();
    for (const auto& [k, v] : res) summary[k] = {{"value", v.value}, {"sigma", v.sigma}};
    out.json_file("analysis.json", {{"scenario_digest", sd},
                                    {"input_digest", digest},
                                    {"protocol", std::string(to_string(kind))},
                                    {"analysis", analysis_to_json(spec)},
                                    {"results", summary},
                                    {"files", out.written()}});
    if (late) std::rethrow_exception(late);
    return res;
}

// ---------------------------------------------------------------------------
// fit and zeeman on plain CSV tables

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    int column(std::string_view name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        return -1;
    }
};

Table read_table(const std::string& text, const std::string& what) {
    Table t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        std::vector<double> v;
        bool numeric = true;
        for (const auto& c : cells) {
            char* end = nullptr;
            const double x = std::strtod(c.c_str(), &end);
            if (c.empty() || end == c.c_str() || *end != '\0') {
                numeric = false;
                break;
            }
            v.push_back(x);
        }
        if (!numeric) {
            if (t.columns.empty() && t.rows.empty()) {
                t.columns = cells;
                continue;
            }
            throw ConfigError(what + ":" + std::to_string(lineno), "non-numeric value");
        }
        if (!t.columns.empty() && v.size() != t.columns.size())
            throw ConfigError(what + ":" + std::to_string(lineno), "expected " + std::to_string(t.columns.size()) + " columns");
        t.rows.push_back(std::move(v));
    }
    if (t.rows.empty()) throw ConfigError(what, "no data rows");
    return t;
}

void emit_json(const json& j, const std::string& path) {
    if (path.empty() || path == "-") std::cout << j.dump(2) << '\n';
    else write_file(path, j.dump(2) + "\n");
}

int cmd_fit(const std::string& input, const std::string& model, double t0_ns, std::optional<double> exclusion_ps,
            const std::string& alpha, bool model_weights, const std::string& out) {
    const auto text = read_file(input);
    const auto t = read_table(text, input);
    std::vector<double> x, y, e, n;
    for (const auto& r : t.rows) {
        if (r.size() < 2) throw ConfigError(input, "need at least time and value columns");
        x.push_back(r[0]);
        y.push_back(r[1]);
        e.push_back(r.size() > 2 ? r[2] : 1.0);
        n.push_back(r.size() > 3 ? r[3] : 0.0);
    }
    auto trace = make_trace(x, y, e);
    trace.n_total = n;
    DampedCosineOptions o;
    if (model == "pulsed") o = DampedCosineOptions::pulsed();
    else if (model == "cw") o = DampedCosineOptions::cw();
    else throw ConfigError("--model", "must be pulsed or cw");
    o.t0 = t0_ns * 1e-9;
    if (exclusion_ps) o.exclusion = *exclusion_ps * 1e-12;
    if (alpha == "free") o.fixed_alpha.reset();
    else if (!alpha.empty()) {
        try {
            o.fixed_alpha = std::stod(alpha);
        } catch (const std::exception&) {
            throw ConfigError("--alpha", "expected a number or 'free'");
        }
        if (!(*o.fixed_alpha > 0.0 && *o.fixed_alpha <= 3.0)) throw ConfigError("--alpha", "must lie in (0, 3]");
    }
    o.model_weights = model_weights;
    const auto r = fit_damped_cosine(trace, o);
    auto rep = fit_report(r, model == "cw" ? "cw_damped_cosine" : "pulsed_damped_cosine", sha256_hex(text));
    rep["t0_s"] = o.t0;
    rep["exclusion_s"] = o.exclusion;
    emit_json(rep, out);
    return r.converged ? 0 : kExitNumerical;
}

json zeeman_table(const Table& t, Intercept mode) {
    const int b = t.column("B_T");
    if (b < 0) throw ConfigError("zeeman", "missing column B_T");
    const int s = t.column("sigma_eV");
    auto sigma = [&](const std::vector<double>& r) { return s >= 0 ? r[static_cast<std::size_t>(s)] : 0.0; };
    const int outer = t.column("outer_eV"), inner = t.column("inner_eV"), de = t.column("dE_eV");
    json j;
    if (outer >= 0 && inner >= 0) {
        std::vector<FourLineSplitting> pts;
        for (const auto& r : t.rows)
            pts.push_back({r[static_cast<std::size_t>(b)], r[static_cast<std::size_t>(outer)],
                           r[static_cast<std::size_t>(inner)], sigma(r)});
        const auto f = fit_four_line(pts, mode);
        j = {{"model", "four_line_zeeman"}, {"g_e", f.g_e}, {"sigma_g_e", f.sigma_g_e}, {"g_h", f.g_h},
             {"sigma_g_h", f.sigma_g_h}, {"g_outer", f.outer.g}, {"g_inner", f.inner.g}};
    } else if (de >= 0) {
        std::vector<ZeemanPoint> pts;
        for (const auto& r : t.rows)
            pts.push_back({r[static_cast<std::size_t>(b)], r[static_cast<std::size_t>(de)], sigma(r)});
        const auto f = fit_linear_zeeman(pts, mode);
        j = {{"model", "linear_zeeman"}, {"g", f.g}, {"sigma_g", f.sigma_g}, {"intercept_eV", f.intercept}};
    } else {
        throw ConfigError("zeeman", "need columns dE_eV, or outer_eV and inner_eV");
    }
    j["intercept_mode"] = mode == Intercept::zero ? "zero" : "free";
    j["n_points"] = t.rows.size();
    return j;
}

// ---------------------------------------------------------------------------
// pipeline presets

struct Comparison {
    std::string quantity, unit;
    std::optional<double> configured;
    std::string result_key;
    double scale = 1.0;  ///< result value -> unit
    std::optional<double> paper, paper_sigma;
};

struct Preset {
    std::string name, description;
    std::function<Scenario(double)> scenario;  ///< argument: shot-count scale
    std::vector<Comparison> table;
};

DeviceParams paper_device() {
    DeviceParams d;
    d.g_e = 2.09;
    d.p_mem = 0.865;
    return d;
}

std::uint64_t scaled(double n, double s) { return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(n * s))); }

Scenario lifetime_scenario(std::vector<double> fields_T, double shots, double scale) {
    Scenario s;
    s.device = paper_device();
    s.protocol.kind = ProtocolKind::lifetime;
    s.protocol.exc_pols = {Pol::R};
    s.protocol.det_pols = {Pol::R, Pol::L};
    s.protocol.n_shots = scaled(shots, scale);
    s.sweep.fields = std::move(fields_T);
    return s;
}

Scenario cw_scenario(double scale) {
    Scenario s;
    s.device = paper_device();
    s.device.g_h = 0.35;
    s.device.B_x = 0.0375;
    s.device.noise = {NoiseKind::lorentzian_jitter, noise_width_for(NoiseKind::lorentzian_jitter, 16.51e-9),
                      NoiseTarget::ground};
    s.protocol.kind = ProtocolKind::cw_g2;
    s.protocol.exc_pols = {Pol::R};
    s.protocol.det_pols = {Pol::R, Pol::R};
    s.protocol.pump_rate = 2e6;
    s.protocol.block_duration = 1e-3;
    s.protocol.n_shots = scaled(4000, scale);
    s.sweep.pairings = {CwPairing::RR, CwPairing::RL};
    s.analysis.bin = 100e-12;
    s.analysis.window = 60e-9;
    return s;
}

std::vector<Preset> presets() {
    const double f_h_cw = larmor_frequency(0.35, 0.0375);
    const double f_h_pulsed = larmor_frequency(0.362, 0.15);
    std::vector<Preset> p;
    p.push_back({"fig1c", "four-line Zeeman spectra vs field -> g_e, g_h",
                 [](double) {
                     Scenario s;
                     s.device = paper_device();
                     s.device.g_e = 2.134;
                     s.device.g_h = 0.367;
                     s.protocol.kind = ProtocolKind::lifetime;
                     s.sweep.fields = {0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
                     return s;
                 },
                 {{"g_e", "", 2.134, "g_e", 1.0, 2.134, 0.016}, {"g_h", "", 0.367, "g_h", 1.0, 0.367, 0.016}}});
    p.push_back({"fig1d", "polarization-resolved lifetime at 0 and 150 mT",
                 [](double k) { return lifetime_scenario({0.0, 0.15}, 1e6, k); },
                 {{"polarization memory", "", 0.865, "docp_zero_field", 1.0, 0.865, 0.001},
                  {"electron precession at 150 mT", "GHz", larmor_frequency(2.09, 0.15) * 1e-9, "f_e_150mT", 1e-9, {}, {}}}});
    p.push_back({"fig1f", "lifetime oscillation frequencies vs field -> g_e",
                 [](double k) { return lifetime_scenario({0.05, 0.10, 0.15}, 1e6, k); },
                 {{"g_e", "", 2.09, "g_e", 1.0, 2.09, 0.03}}});
    p.push_back({"fig2b", "cw RR/RL autocorrelation DOCP at 37.5 mT", cw_scenario,
                 {{"hole precession", "MHz", f_h_cw * 1e-6, "f_h", 1e-6, {}, {}},
                  {"tau", "ns", 16.51, "tau", 1e9, 16.51, 0.06},
                  {"alpha", "", {}, "alpha", 1.0, 1.278, {}},
                  {"RR/RL phase gap", "rad", std::numbers::pi, "phase_gap", 1.0, std::numbers::pi, {}}}});
    p.push_back({"fig2c", "cw hole precession vs field -> g_h",
                 [](double k) {
                     auto s = cw_scenario(k);
                     s.protocol.n_shots = scaled(2000, k);
                     s.sweep.fields = {0.025, 0.0375, 0.05, 0.075};
                     return s;
                 },
                 {{"g_h", "", 0.35, "g_h", 1.0, 0.35, 0.01}}});
    auto fig2d = [](double k) {
        auto s = cw_scenario(k);
        s.protocol.n_shots = scaled(600, k);
        s.sweep.pump_rates = {5e6, 15e6, 40e6, 100e6};
        return s;
    };
    const std::vector<Comparison> fig2d_table{{"tau strictly decreasing with pump", "", 1.0, "tau_decreasing", 1.0, 1.0, {}},
                                              {"log-log slope of tau vs pump", "", {}, "tau_pump_slope", 1.0, {}, {}}};
    p.push_back({"fig2d", "cw dephasing time vs pump rate", fig2d, fig2d_table});
    p.push_back({"tableS1", "same runs as fig2d", fig2d, fig2d_table});
    auto fig3d = [](double k) {
        Scenario s;
        s.device = paper_device();
        s.device.g_h = 0.362;
        s.device.B_x = 0.15;
        s.device.noise = {NoiseKind::lorentzian_jitter, noise_width_for(NoiseKind::lorentzian_jitter, 15.9e-9),
                          NoiseTarget::ground};
        s.protocol.kind = ProtocolKind::pulsed_2pc;
        s.protocol.exc_pols = {Pol::R, Pol::H};
        s.protocol.det_pols = {Pol::R, Pol::R};
        s.protocol.n_shots = scaled(3600000, k);
        for (int i = 0; i <= 49; ++i) s.sweep.pulse_delays.push_back(0.6e-9 + 0.2e-9 * i);
        s.sweep.ch2_pols = {Pol::R, Pol::L};
        return s;
    };
    const std::vector<Comparison> fig3d_table{{"hole precession", "MHz", f_h_pulsed * 1e-6, "f_h", 1e-6, 763.0, 1.0},
                                              {"T2*", "ns", 15.9, "T2star", 1e9, 15.9, 1.7}};
    p.push_back({"fig3d", "heralded pulsed delay sweep at 150 mT", fig3d, fig3d_table});
    p.push_back({"figS7", "same runs as fig3d", fig3d, fig3d_table});
    return p;
}

/// Synthetic four-line spectra: line energies with Gaussian readout noise.
Results run_fig1c(const Scenario& s, Bundle& out) {
    KeyedEngine rng(s.seed, 0, 0x1c);
    std::normal_distribution<double> noise(0.0, 1e-6);  // eV
    const double e0 = 0.8;                                // eV, 1.55 um
    std::string lines, split;
    for (double B : s.sweep.fields) {
        auto ls = four_line_spectrum(e0, s.device.g_e, s.device.g_h, B);
        for (auto& l : ls) {
            l.energy += noise(rng);
            lines += row({num(B), num(l.energy), std::string(to_string(l.polarization))});
        }
        const auto sp = splittings_from_lines(B, ls);
        split += row({num(B), num(sp.outer), num(sp.inner), num(1e-6 * std::sqrt(2.0))});
    }
    out.csv("fig1c_lines.csv", "B_T,energy_eV,polarization", lines, {"line energies with 1 ueV Gaussian noise"});
    out.csv("fig1c_splittings.csv", "B_T,outer_eV,inner_eV,sigma_eV", split);
    const auto j = zeeman_table(read_table(read_file(out.dir() / "fig1c_splittings.csv"), "fig1c_splittings.csv"),
                                Intercept::free);
    out.json_file("fit_zeeman.json", j);
    return {{"g_e", {j["g_e"].get<double>(), j["sigma_g_e"].get<double>()}},
            {"g_h", {j["g_h"].get<double>(), j["sigma_g_h"].get<double>()}}};
}

int run_guarded(const std::function<int()>& body, const std::string& stage = {}) {
    const std::string tag = stage.empty() ? "" : "[" + stage + "] ";
    try {
        return body();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "%sconfig error: %s\n", tag.c_str(), e.what());
        return kExitConfig;
    } catch (const IoError& e) {
        std::fprintf(stderr, "%si/o error: %s\n", tag.c_str(), e.what());
        return kExitIo;
    } catch (const NotConverged& e) {
        std::fprintf(stderr, "%snot converged: %s\n", tag.c_str(), e.what());
        return kExitNumerical;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "%si/o error: malformed header: %s\n", tag.c_str(), e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%serror: %s\n", tag.c_str(), e.what());
        return kExitNumerical;
    }
}

/// Pipeline stages report failures tagged with the stage name and keep the
/// exit code of their cause.
int staged(const std::string& stage, const std::function<int()>& body) { return run_guarded(body, stage); }

int cmd_pipeline(const std::string& name, const CommonFlags& flags, double scale) {
    const auto all = presets();
    const auto it = std::find_if(all.begin(), all.end(), [&](const Preset& p) { return p.name == name; });
    if (it == all.end()) throw ConfigError("preset", "unknown preset '" + name + "' (see --list)");
    auto s = it->scenario(scale);
    s.seed = flags.seed.value_or(2025);
    s.protocol.rng_seed = s.seed;
    const fs::path root = flags.out.empty() ? fs::path("pipeline") / name : fs::path(flags.out);
    s.output_dir = (root / "events").string();
    s.format = flags.format == "csv" ? OutputFormat::csv : OutputFormat::binary;

    Results res;
    int code = 0;
    if (name == "fig1c") {
        Bundle out(root, {"scenario_digest: " + scenario_digest(s)});
        write_file(root / "scenario.json", scenario_to_json(s).dump(2) + "\n");
        res = run_fig1c(s, out);
    } else {
        std::vector<fs::path> paths;
        code = staged("simulate", [&] {
            write_file(root / "scenario.json", scenario_to_json(s).dump(2) + "\n");
            for (const auto& f : simulate(s, flags.workers, true)) paths.push_back(f.path);
            return 0;
        });
        if (code != 0) return code;
        code = staged("analyze", [&] {
            res = analyze(paths, std::nullopt, root / "analysis");
            return 0;
        });
        if (code != 0 && code != kExitNumerical) return code;
    }

    std::string rows;
    std::printf("\n%-34s %-5s %14s %14s %12s %14s\n", "quantity", "unit", "configured", "recovered", "sigma", "paper");
    auto opt = [](std::optional<double> v) { return v ? num(*v) : std::string(); };
    for (const auto& c : it->table) {
        const auto r = res.find(c.result_key);
        const std::optional<double> v = r == res.end() ? std::nullopt : std::optional<double>(r->second.value * c.scale);
        const std::optional<double> sg = r == res.end() ? std::nullopt : std::optional<double>(r->second.sigma * c.scale);
        std::string paper = opt(c.paper);
        if (c.paper_sigma) paper += " +/- " + num(*c.paper_sigma);
        rows += row({c.quantity, c.unit, opt(c.configured), opt(v), opt(sg), opt(c.paper), opt(c.paper_sigma)});
        std::printf("%-34s %-5s %14s %14s %12s %14s\n", c.quantity.c_str(), c.unit.c_str(), opt(c.configured).c_str(),
                    opt(v).c_str(), opt(sg).c_str(), paper.c_str());
    }
    Bundle summary(root, {"preset: " + name, "scenario_digest: " + scenario_digest(s)});
    summary.csv("summary.csv", "quantity,unit,configured,recovered,sigma,paper,paper_sigma", rows);
    std::printf("\nwrote %s\n", (root / "summary.csv").string().c_str());
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"qdspin: hole-spin precession experiments, simulated and analyzed"};
    app.require_subcommand(1);
    CommonFlags flags;
    auto add_common = [&](CLI::App* c, bool sim) {
        c->add_option("--workers", flags.workers, "worker threads (default: QDSPIN_WORKERS or all cores)");
        c->add_option("--out", flags.out, "output directory");
        if (sim) {
            c->add_option("--seed", flags.seed, "override the scenario seed");
            c->add_option("--format", flags.format, "event file format")->check(CLI::IsMember({"csv", "binary"}));
        }
    };

    auto* sim = app.add_subcommand("simulate", "run a scenario and write one event file per run");
    std::string scenario_path;
    sim->add_option("scenario", scenario_path, "scenario JSON")->required();
    add_common(sim, true);

    auto* ana = app.add_subcommand("analyze", "reduce event files to figure datasets and fit reports");
    std::vector<std::string> event_paths;
    std::string analysis_path;
    ana->add_option("events", event_paths, "event files of one scenario")->required();
    ana->add_option("--analysis", analysis_path, "JSON analysis block overriding the scenario's");
    add_common(ana, false);

    auto* fit = app.add_subcommand("fit", "fit a damped cosine to a CSV trace (time_s, value[, error[, n]])");
    std::string fit_input, fit_model = "pulsed", fit_alpha;
    double fit_t0 = 0.0;
    std::optional<double> fit_excl;
    bool fit_weights = false;
    fit->add_option("trace", fit_input, "CSV trace")->required();
    fit->add_option("--model", fit_model, "pulsed or cw")->check(CLI::IsMember({"pulsed", "cw"}));
    fit->add_option("--t0-ns", fit_t0, "reference time");
    fit->add_option("--exclusion-ps", fit_excl, "half-width left out around t0");
    fit->add_option("--alpha", fit_alpha, "fixed stretch exponent, or 'free'");
    fit->add_flag("--model-weights", fit_weights, "binomial weights from the fitted curve (needs the n column)");
    fit->add_option("--out", flags.out, "report path (default stdout)");

    auto* zee = app.add_subcommand("zeeman", "linear Zeeman fit of B_T vs dE_eV, or outer_eV/inner_eV line splittings");
    std::string zee_input, zee_intercept = "free";
    zee->add_option("table", zee_input, "CSV table")->required();
    zee->add_option("--intercept", zee_intercept, "free or zero")->check(CLI::IsMember({"free", "zero"}));
    zee->add_option("--out", flags.out, "report path (default stdout)");

    auto* pipe = app.add_subcommand("pipeline", "simulate, analyze and compare one figure preset");
    std::string preset;
    double scale = 1.0;
    bool list = false;
    pipe->add_option("preset", preset, "preset name");
    pipe->add_flag("--list", list, "list presets");
    pipe->add_option("--scale", scale, "scale factor for shot counts")->check(CLI::PositiveNumber);
    add_common(pipe, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    if (*sim)
        return run_guarded([&] {
            auto s = load_scenario(scenario_path);
            apply_flags(s, flags);
            const auto files = simulate(s, flags.workers, true);
            std::printf("%zu event file(s) in %s\n", files.size(), s.output_dir.c_str());
            return 0;
        });
    if (*ana)
        return run_guarded([&] {
            std::optional<AnalysisSpec> spec;
            if (!analysis_path.empty()) {
                json j;
                try {
                    j = json::parse(read_file(analysis_path));
                } catch (const json::parse_error& e) {
                    throw ConfigError("analysis", std::string("malformed JSON: ") + e.what());
                }
                spec = parse_analysis(j);
            }
            std::vector<fs::path> paths(event_paths.begin(), event_paths.end());
            const fs::path out = flags.out.empty() ? fs::path("analysis") : fs::path(flags.out);
            const auto res = analyze(paths, spec, out);
            for (const auto& [k, v] : res) std::printf("%-36s %.9g +/- %.3g\n", k.c_str(), v.value, v.sigma);
            return 0;
        });
    if (*fit)
        return run_guarded([&] { return cmd_fit(fit_input, fit_model, fit_t0, fit_excl, fit_alpha, fit_weights, flags.out); });
    if (*zee)
        return run_guarded([&] {
            const auto j = zeeman_table(read_table(read_file(zee_input), zee_input),
                                        zee_intercept == "zero" ? Intercept::zero : Intercept::free);
            emit_json(j, flags.out);
            return 0;
        });
    if (*pipe) {
        if (list || preset.empty()) {
            for (const auto& p : presets()) std::printf("%-8s %s\n", p.name.c_str(), p.description.c_str());
            return list ? 0 : kExitConfig;
        }
        return run_guarded([&] { return cmd_pipeline(preset, flags, scale); });
    }
    return 0;
}
