#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace lpm::pipeline {

enum class Stage { Generator = 0, Refiner = 1, Decoder = 2, Playback = 3 };
inline constexpr std::size_t kComputeStages = 3;
inline constexpr std::size_t kAllStages = 4;

std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view name);

struct StageSpec {
    Stage stage = Stage::Generator;
    double latency_ms = 0.0;
};

enum class ClockMode { Simulated, Wall };

struct PipelineConfig {
    std::size_t n_chunks = 1;
    std::array<double, kComputeStages> latency_ms{700.0, 700.0, 180.0};
    // Playback as a fourth stage: chunk k plays for chunk_duration_ms once
    // decoded and once chunk k-1 has finished. Discarded chunks play for 0 ms.
    bool model_playback = false;
    double chunk_duration_ms = 1000.0;
    std::size_t discarded_chunks = 0;
    // Generation of chunk k waits until playback of chunk k-L has started
    // (0 disables; needs model_playback).
    std::size_t lookahead = 0;
    // Stage s may start chunk k only once stage s+1 has started chunk
    // k-queue_bound, so at most queue_bound chunks wait between stages (0 = unbounded).
    std::size_t queue_bound = 2;

    void validate() const;
};

// Named stage latencies. "desk": 700/700/180 ms. "kernel": the 1-NFE kernel
// figure of 350 ms on both DiT stages; a what-if, not a wall-clock claim.
std::array<double, kComputeStages> latency_preset(std::string_view name);

struct ChunkJob {
    std::int64_t chunk_index = 0;
    Stage stage = Stage::Generator;
    double t_enqueue = 0.0;  // all cross-stage prerequisites satisfied
    double t_start = 0.0;
    double t_finish = 0.0;
};

struct PipelineTrace {
    std::size_t n_chunks = 0;  // chunks that ran (fewer than configured after a stop)
    bool has_playback = false;
    std::vector<ChunkJob> jobs;  // in completion order

    const ChunkJob& job(std::int64_t chunk, Stage stage) const;
    std::vector<ChunkJob> stage_jobs(Stage stage) const;  // ascending chunk index
};

// Per-job work in wall mode, playback included. Returning ends the job; the
// default sleeps for the stage latency.
using StageWork = std::function<void(Stage, std::int64_t)>;

// Hook run the moment a job is admitted, before its work starts. The
// runtime applies boundary updates here.
using StartHook = std::function<void(Stage, std::int64_t, double t_start_ms)>;
using FinishHook = std::function<void(const ChunkJob&)>;

struct RunHooks {
    StageWork work;
    StartHook on_start;
    FinishHook on_finish;
    // Called when generator chunk k is ready to start at t, before on_start.
    // Returning false ends the run once earlier chunks drain.
    std::function<bool(std::int64_t, double)> admit_generator;
    // Per-job latency in simulated mode; defaults to the configured values.
    std::function<double(Stage, std::int64_t)> latency;
};

// Event-driven simulation: a priority queue of completion events, jobs admitted
// greedily whenever their prerequisites are met.
PipelineTrace simulate(const PipelineConfig& cfg, const RunHooks& hooks = {});

// One thread per stage, real time in ms since start.
PipelineTrace run_wall(const PipelineConfig& cfg, const RunHooks& hooks = {});

PipelineTrace run(const PipelineConfig& cfg, ClockMode clock, const RunHooks& hooks = {});

// Every dependency and capacity rule holds; returns the first violation.
std::optional<std::string> check_trace(const PipelineTrace& trace, const PipelineConfig& cfg);

struct Metrics {
    double ttfr_ms = 0.0;                  // decoder(0) finish
    std::optional<double> steady_period_ms;  // absent for a single chunk
    std::array<double, kComputeStages> utilization{};
};

Metrics metrics(const PipelineTrace& trace);

// slack_k = k * chunk_duration + TTFR - decoder(k).finish
std::vector<double> realtime_margin(const PipelineTrace& trace, double chunk_duration_ms = 1000.0);

nlohmann::json to_json(const ChunkJob& job);
nlohmann::json to_json(const Metrics& m);
void write_ndjson(std::ostream& out, const PipelineTrace& trace);

}  // namespace lpm::pipeline
