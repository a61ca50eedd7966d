// pipeline-sim: run the three-stage pipeline under the simulated or wall clock.
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lpm/latcore/errors.hpp"
#include "lpm/pipeline/pipeline.hpp"

namespace {

std::array<double, 3> parse_latencies(const std::string& s) {
    std::array<double, 3> out{};
    std::istringstream in(s);
    std::string part;
    std::size_t i = 0;
    while (std::getline(in, part, ',')) {
        if (i >= 3) throw lpm::ConfigError("--lat takes three comma-separated values");
        out[i++] = std::stod(part);
    }
    if (i != 3) throw lpm::ConfigError("--lat takes three comma-separated values");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Overlapped generator/refiner/decoder pipeline simulator"};
    std::size_t chunks = 20;
    std::string lat;
    std::string preset = "desk";
    std::string clock = "sim";
    std::string trace_path;
    std::size_t lookahead = 0;
    std::size_t queue_bound = 2;
    double chunk_ms = 1000.0;
    app.add_option("--chunks", chunks, "number of chunks")->check(CLI::PositiveNumber);
    app.add_option("--lat", lat, "generator,refiner,decoder latency in ms (overrides --preset)");
    app.add_option("--preset", preset, "desk (700,700,180) or kernel (350,350,180)")
        ->check(CLI::IsMember({"desk", "kernel"}));
    app.add_option("--clock", clock, "sim or wall")->check(CLI::IsMember({"sim", "wall"}));
    app.add_option("--trace", trace_path, "write per-job NDJSON here");
    app.add_option("--lookahead", lookahead, "model playback and cap generation lead (0: off)");
    app.add_option("--queue-bound", queue_bound, "max chunks waiting between stages (0: unbounded)");
    app.add_option("--chunk-ms", chunk_ms, "chunk duration for slack");
    CLI11_PARSE(app, argc, argv);

    try {
        lpm::pipeline::PipelineConfig cfg;
        cfg.n_chunks = chunks;
        cfg.latency_ms = lat.empty() ? lpm::pipeline::latency_preset(preset) : parse_latencies(lat);
        cfg.lookahead = lookahead;
        cfg.model_playback = lookahead > 0;
        cfg.queue_bound = queue_bound;
        cfg.chunk_duration_ms = chunk_ms;
        const auto mode = clock == "sim" ? lpm::pipeline::ClockMode::Simulated : lpm::pipeline::ClockMode::Wall;
        const auto trace = lpm::pipeline::run(cfg, mode);
        if (!trace_path.empty()) {
            std::ofstream out(trace_path);
            lpm::pipeline::write_ndjson(out, trace);
        }
        if (const auto bad = lpm::pipeline::check_trace(trace, cfg)) {
            std::cerr << "dependency violation: " << *bad << '\n';
            return 2;
        }
        auto summary = lpm::pipeline::to_json(lpm::pipeline::metrics(trace));
        const auto slack = lpm::pipeline::realtime_margin(trace, chunk_ms);
        summary["slack_ms"] = slack;
        summary["realtime"] = std::all_of(slack.begin(), slack.end(), [](double s) { return s >= 0.0; });
        std::cout << summary.dump() << '\n';
    } catch (const std::exception& e) {
        std::cerr << "pipeline-sim: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
