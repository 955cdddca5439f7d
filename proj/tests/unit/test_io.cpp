#include "qdspin/io.hpp"

#include <gtest/gtest.h>

using namespace qdspin;

namespace {

const char* kLifetime = R"({
  "seed": 42,
  "device": {"g_e": 2.09, "g_h": 0.35, "T1_ns": 0.2, "p_mem": 0.865},
  "protocol": {"kind": "lifetime", "exc_pols": ["R"], "det_pols": ["R", "L"], "n_shots": 1000,
               "sweep": {"fields_mT": [0, 50, 150]}},
  "analysis": {"bin_ps": 10, "max_time_ns": 2},
  "outputs": {"dir": "out/lt", "format": "csv"}
})";

const char* kPulsed = R"({
  "seed": 7,
  "device": {"g_h": 0.362, "B_x_mT": 150, "noise": {"kind": "lorentzian_jitter", "T2star_ns": 15.9}},
  "protocol": {"kind": "pulsed_2pc", "n_shots": 500,
               "sweep": {"pulse_delays_ns": [0.6, 1.6], "ch2_pols": ["R", "L"]}}
})";

std::string expect_config_error(const std::string& text) {
    try {
        parse_scenario_text(text);
    } catch (const ConfigError& e) {
        return e.path();
    }
    ADD_FAILURE() << "accepted: " << text;
    return {};
}

} // namespace

TEST(Scenario, ParseSerializeParseIsIdentity) {
    for (const char* text : {kLifetime, kPulsed}) {
        const auto a = parse_scenario_text(text);
        const auto b = parse_scenario(scenario_to_json(a));
        EXPECT_EQ(scenario_to_json(a), scenario_to_json(b));
        EXPECT_EQ(scenario_digest(a), scenario_digest(b));
        const auto c = parse_scenario(scenario_to_json(b));
        EXPECT_EQ(b, c);
    }
}

TEST(Scenario, UnitsConvertedOnInput) {
    const auto s = parse_scenario_text(kLifetime);
    EXPECT_DOUBLE_EQ(s.device.T1, 0.2e-9);
    EXPECT_EQ(s.sweep.fields.size(), 3u);
    EXPECT_DOUBLE_EQ(s.sweep.fields[2], 0.15);
    EXPECT_EQ(s.format, OutputFormat::csv);
    EXPECT_EQ(s.protocol.rng_seed, 42u);
}

TEST(Scenario, StrictAboutKeysAndValues) {
    EXPECT_EQ(expect_config_error(R"({"protocol": {"kind": "lifetime"}})"), "seed");
    EXPECT_EQ(expect_config_error(R"({"seed": 1})"), "protocol");
    EXPECT_EQ(expect_config_error(R"({"seed": 1, "protocol": {"kind": "lifetime"}, "extra": 1})"), "extra");
    EXPECT_EQ(expect_config_error(R"({"seed": 1, "device": {"g_ee": 2}, "protocol": {"kind": "lifetime"}})"),
              "device.g_ee");
    EXPECT_EQ(expect_config_error(R"({"seed": 1, "device": {"p_mem": 1.4}, "protocol": {"kind": "lifetime"}})"),
              "device.p_mem");
    EXPECT_EQ(expect_config_error(R"({"seed": -3, "protocol": {"kind": "lifetime"}})"), "seed");
    EXPECT_EQ(expect_config_error(R"({"seed": 1, "protocol": {"kind": "lifetime", "det_pols": ["R", "X"]}})"),
              "protocol.det_pols[1]");
    EXPECT_EQ(expect_config_error(R"({"seed": 1, "protocol": {"kind": "lifetime"}, "outputs": {"format": "xml"}})"),
              "outputs.format");
    EXPECT_EQ(expect_config_error("{not json"), "<document>");
}

TEST(Scenario, DigestIgnoresOutputLocation) {
    auto a = parse_scenario_text(kLifetime);
    auto b = a;
    b.output_dir = "elsewhere";
    b.format = OutputFormat::binary;
    EXPECT_EQ(scenario_digest(a), scenario_digest(b));
    b.seed = 43;
    EXPECT_NE(scenario_digest(a), scenario_digest(b));
}

TEST(Scenario, ExpandRunsEnumeratesSweep) {
    const auto s = parse_scenario_text(kPulsed);
    const auto runs = expand_runs(s);
    ASSERT_EQ(runs.size(), 4u);
    EXPECT_EQ(runs[0].tag, "dt0.6ns_ch2R");
    EXPECT_EQ(runs[3].tag, "dt1.6ns_ch2L");
    EXPECT_DOUBLE_EQ(runs[3].protocol.pulse_delay, 1.6e-9);
    EXPECT_EQ(runs[3].protocol.det_pols[1], Pol::L);
    std::set<std::uint64_t> seeds;
    for (const auto& r : runs) seeds.insert(r.protocol.rng_seed);
    EXPECT_EQ(seeds.size(), runs.size());
    EXPECT_EQ(expand_runs(s)[2].protocol.rng_seed, runs[2].protocol.rng_seed);
}

TEST(EventFile, BinaryAndCsvRoundTrip) {
    const auto s = parse_scenario_text(kPulsed);
    const auto spec = expand_runs(s)[1];
    const auto run = run_protocol(spec.device, spec.protocol);
    ASSERT_FALSE(run.events.empty());
    const auto header = event_header(s, spec, run);

    const auto bin = parse_events(serialize_events_binary(header, run.events));
    EXPECT_EQ(bin.events, run.events);
    EXPECT_EQ(bin.header, header);
    EXPECT_EQ(bin.protocol().det_pols, spec.protocol.det_pols);

    const auto csv = parse_events(serialize_events_csv(header, run.events));
    EXPECT_EQ(csv.events, run.events);
    EXPECT_EQ(events_digest(csv.events), header.at("events_digest").get<std::string>());
    EXPECT_EQ(csv.scenario(), s);
}

TEST(EventFile, CorruptInputRejected) {
    const auto s = parse_scenario_text(kPulsed);
    const auto spec = expand_runs(s)[0];
    const auto run = run_protocol(spec.device, spec.protocol);
    const auto bin = serialize_events_binary(event_header(s, spec, run), run.events);
    EXPECT_THROW(parse_events(bin.substr(0, bin.size() - 3)), IoError);
    EXPECT_THROW(parse_events(bin.substr(0, 20)), IoError);
    EXPECT_THROW(parse_events("QDSPEVT1garbage"), IoError);
    EXPECT_THROW(parse_events("shot,channel,projection,time_s\n0,0,R,1e-9\n"), IoError);

    auto csv = serialize_events_csv(event_header(s, spec, run), run.events);
    csv += "0,0,Q,1e-9\n";
    EXPECT_THROW(parse_events(csv), IoError);
}
