#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <sstream>

#include "lpm/latcore/errors.hpp"
#include "lpm/pipeline/pipeline.hpp"

using namespace lpm;
using namespace lpm::pipeline;

namespace {

// Max-plus recurrence for a capacity-1 flow line with start gating:
// start[s][k] = max(finish[s][k-1], finish[s-1][k], start[s+1][k-qb]).
struct Oracle {
    std::vector<std::array<double, 3>> start, finish;
};

Oracle flow_line(std::size_t n, std::array<double, 3> lat, std::size_t qb) {
    Oracle o;
    o.start.assign(n, {});
    o.finish.assign(n, {});
    // Gating looks at the downstream start of an earlier chunk, so sweep
    // chunks in order and stages back to front within a chunk.
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t s = 0; s < 3; ++s) {
            double t = 0.0;
            if (k > 0) t = std::max(t, o.finish[k - 1][s]);
            if (s > 0) t = std::max(t, o.finish[k][s - 1]);
            if (qb > 0 && s + 1 < 3 && k >= qb) t = std::max(t, o.start[k - qb][s + 1]);
            o.start[k][s] = t;
            o.finish[k][s] = t + lat[s];
        }
    }
    return o;
}

PipelineConfig config(std::size_t n, std::array<double, 3> lat, std::size_t qb = 2) {
    PipelineConfig c;
    c.n_chunks = n;
    c.latency_ms = lat;
    c.queue_bound = qb;
    return c;
}

}  // namespace

TEST_CASE("paper latencies: first frame at 1580 ms, one chunk per 700 ms") {
    const auto cfg = config(20, {700, 700, 180});
    const auto tr = simulate(cfg);
    CHECK_FALSE(check_trace(tr, cfg).has_value());
    const auto m = metrics(tr);
    CHECK(m.ttfr_ms == 1580.0);
    REQUIRE(m.steady_period_ms.has_value());
    CHECK(*m.steady_period_ms == doctest::Approx(700.0));
    CHECK(m.utilization[0] == doctest::Approx(1.0).epsilon(0.02));
    CHECK(m.utilization[2] == doctest::Approx(0.26).epsilon(0.05));

    const auto slack = realtime_margin(tr);
    for (std::size_t k = 1; k < slack.size(); ++k) {
        CHECK(slack[k] > 0.0);
        CHECK(slack[k] - slack[k - 1] == doctest::Approx(300.0));
    }
}

TEST_CASE("simulation matches the max-plus recurrence") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> lat(0, 900);
    for (int trial = 0; trial < 200; ++trial) {
        const std::array<double, 3> l{double(lat(rng)), double(lat(rng)), double(lat(rng))};
        const std::size_t qb = trial % 4;  // 0 = unbounded
        const std::size_t n = 1 + trial % 12;
        const auto cfg = config(n, l, qb);
        const auto tr = simulate(cfg);
        CHECK_FALSE(check_trace(tr, cfg).has_value());
        const auto o = flow_line(n, l, qb);
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t s = 0; s < 3; ++s) {
                const auto& j = tr.job(std::int64_t(k), Stage(s));
                CHECK(j.t_start == o.start[k][s]);
                CHECK(j.t_finish == o.finish[k][s]);
            }
    }
}

TEST_CASE("steady period tracks the slowest stage") {
    for (const std::array<double, 3> l : {std::array<double, 3>{700, 700, 180}, {350, 350, 180}, {200, 900, 100},
                                          {400, 100, 650}}) {
        const auto m = metrics(simulate(config(20, l)));
        const double slowest = std::max({l[0], l[1], l[2]});
        CHECK(std::abs(*m.steady_period_ms - slowest) <= 0.05 * slowest);
    }
}

TEST_CASE("degenerate latencies") {
    const auto zero = simulate(config(5, {0, 0, 0}));
    for (const auto& j : zero.jobs) CHECK(j.t_finish == 0.0);
    CHECK_FALSE(check_trace(zero, config(5, {0, 0, 0})).has_value());
    const auto slack = realtime_margin(zero);
    for (std::size_t k = 0; k < slack.size(); ++k) CHECK(slack[k] == 1000.0 * double(k));

    const auto m = metrics(simulate(config(1, {700, 700, 180})));
    CHECK_FALSE(m.steady_period_ms.has_value());

    const auto eq = metrics(simulate(config(10, {300, 300, 300})));
    CHECK(eq.utilization[0] == doctest::Approx(eq.utilization[1]));
    CHECK(eq.utilization[1] == doctest::Approx(eq.utilization[2]));

    CHECK_THROWS_AS(metrics(PipelineTrace{}), ContractError);
    CHECK_THROWS_AS(simulate(config(0, {1, 1, 1})), ConfigError);
}

TEST_CASE("latency presets") {
    CHECK(latency_preset("desk") == std::array<double, 3>{700, 700, 180});
    auto cfg = config(10, latency_preset("kernel"));
    const auto m = metrics(simulate(cfg));
    CHECK(m.ttfr_ms == 880.0);
    CHECK(*m.steady_period_ms == doctest::Approx(350.0));
    CHECK_THROWS_AS(latency_preset("gpu"), ConfigError);
}

TEST_CASE("a 1100 ms stage loses real time") {
    const auto slack = realtime_margin(simulate(config(12, {1100, 700, 180})));
    for (std::size_t k = 1; k < slack.size(); ++k) CHECK(slack[k] - slack[k - 1] == doctest::Approx(-100.0));
    CHECK(slack.back() < 0.0);
}

TEST_CASE("check_trace catches broken orderings") {
    const auto cfg = config(4, {100, 100, 50});
    auto tr = simulate(cfg);
    REQUIRE_FALSE(check_trace(tr, cfg).has_value());
    for (auto& j : tr.jobs)
        if (j.chunk_index == 2 && j.stage == Stage::Refiner) {
            j.t_start -= 60;  // before its generator finished
            j.t_enqueue = j.t_start;
        }
    CHECK(check_trace(tr, cfg).has_value());
}

TEST_CASE("playback and lookahead") {
    PipelineConfig cfg = config(12, {700, 700, 180});
    cfg.model_playback = true;
    cfg.lookahead = 2;
    const auto tr = simulate(cfg);
    CHECK_FALSE(check_trace(tr, cfg).has_value());
    CHECK(tr.has_playback);
    for (std::int64_t k = 2; k < 12; ++k)
        CHECK(tr.job(k, Stage::Generator).t_start >= tr.job(k - 2, Stage::Playback).t_start);

    // Playback that never ends: generation stops once it is L chunks ahead.
    RunHooks hooks;
    hooks.latency = [&](Stage s, std::int64_t k) {
        if (s == Stage::Playback) return k == 0 ? 1e12 : 1000.0;
        return cfg.latency_ms[std::size_t(s)];
    };
    bool stuck = false;
    hooks.admit_generator = [&](std::int64_t, double t) {
        stuck = t > 1e9;
        return !stuck;
    };
    const auto st = simulate(cfg, hooks);
    CHECK(st.stage_jobs(Stage::Generator).size() == 3);  // chunks 0..L
}

TEST_CASE("wall clock keeps the same dependency order") {
    const auto cfg = config(6, {30, 20, 10});
    const auto wall = run(cfg, ClockMode::Wall);
    const auto sim = run(cfg, ClockMode::Simulated);
    CHECK_FALSE(check_trace(wall, cfg).has_value());
    CHECK(wall.jobs.size() == sim.jobs.size());
    for (auto s : {Stage::Generator, Stage::Refiner, Stage::Decoder}) {
        const auto w = wall.stage_jobs(s);
        for (std::size_t k = 1; k < w.size(); ++k) CHECK(w[k].t_start >= w[k - 1].t_finish);
    }
    // Wall times trail the simulated ones only by scheduling noise.
    CHECK(metrics(wall).ttfr_ms >= metrics(sim).ttfr_ms);
}

TEST_CASE("trace export") {
    const auto tr = simulate(config(2, {10, 10, 5}));
    std::ostringstream os;
    write_ndjson(os, tr);
    std::istringstream in(os.str());
    int lines = 0;
    for (std::string line; std::getline(in, line);) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("t_start"));
        ++lines;
    }
    CHECK(lines == 6);
    CHECK(stage_from_string("refiner") == Stage::Refiner);
    CHECK_THROWS_AS(stage_from_string("vae"), FormatError);
}
