#include "lpm/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <limits>
#include <mutex>
#include <ostream>
#include <queue>
#include <thread>

#include "lpm/latcore/errors.hpp"

namespace lpm::pipeline {

namespace {

constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

struct Prereq {
    Stage stage;
    std::int64_t chunk;
    bool on_start;  // needs the prerequisite to have started, not finished
};

std::size_t idx(Stage s) { return static_cast<std::size_t>(s); }

// Cross-stage prerequisites of (s, k). Same-stage order (k-1 finished) is
// implied by capacity 1 and checked separately.
std::vector<Prereq> prerequisites(const PipelineConfig& cfg, Stage s, std::int64_t k) {
    std::vector<Prereq> out;
    const auto b = static_cast<std::int64_t>(cfg.queue_bound);
    switch (s) {
        case Stage::Generator:
            if (cfg.lookahead > 0 && cfg.model_playback && k - static_cast<std::int64_t>(cfg.lookahead) >= 0) {
                out.push_back({Stage::Playback, k - static_cast<std::int64_t>(cfg.lookahead), true});
            }
            if (b > 0 && k - b >= 0) out.push_back({Stage::Refiner, k - b, true});
            break;
        case Stage::Refiner:
            out.push_back({Stage::Generator, k, false});
            if (b > 0 && k - b >= 0) out.push_back({Stage::Decoder, k - b, true});
            break;
        case Stage::Decoder:
            out.push_back({Stage::Refiner, k, false});
            break;
        case Stage::Playback:
            out.push_back({Stage::Decoder, k, false});
            break;
    }
    return out;
}

struct Timeline {
    std::array<std::vector<double>, kAllStages> start;
    std::array<std::vector<double>, kAllStages> finish;

    explicit Timeline(std::size_t n) {
        for (auto& v : start) v.assign(n, kUnset);
        for (auto& v : finish) v.assign(n, kUnset);
    }

    // Time at which the prerequisite is met, or NaN if it is not yet.
    double met_at(const Prereq& p) const {
        return p.on_start ? start[idx(p.stage)][static_cast<std::size_t>(p.chunk)]
                          : finish[idx(p.stage)][static_cast<std::size_t>(p.chunk)];
    }

    // max over prerequisite times; NaN when one is still pending.
    double ready_at(const PipelineConfig& cfg, Stage s, std::int64_t k) const {
        double t = 0.0;
        for (const auto& p : prerequisites(cfg, s, k)) {
            const double m = met_at(p);
            if (std::isnan(m)) return kUnset;
            t = std::max(t, m);
        }
        return t;
    }
};

std::size_t active_stages(const PipelineConfig& cfg) { return cfg.model_playback ? kAllStages : kComputeStages; }

double default_latency(const PipelineConfig& cfg, Stage s, std::int64_t k) {
    if (s == Stage::Playback) {
        return static_cast<std::size_t>(k) < cfg.discarded_chunks ? 0.0 : cfg.chunk_duration_ms;
    }
    return cfg.latency_ms[idx(s)];
}

}  // namespace

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::Generator: return "generator";
        case Stage::Refiner: return "refiner";
        case Stage::Decoder: return "decoder";
        case Stage::Playback: return "playback";
    }
    return "?";
}

Stage stage_from_string(std::string_view name) {
    for (std::size_t i = 0; i < kAllStages; ++i) {
        if (to_string(static_cast<Stage>(i)) == name) return static_cast<Stage>(i);
    }
    throw FormatError("unknown stage '" + std::string(name) + "'");
}

std::array<double, kComputeStages> latency_preset(std::string_view name) {
    if (name == "desk") return {700.0, 700.0, 180.0};
    if (name == "kernel") return {350.0, 350.0, 180.0};
    throw ConfigError("unknown latency preset '" + std::string(name) + "'");
}

void PipelineConfig::validate() const {
    if (n_chunks == 0) throw ConfigError("pipeline: n_chunks must be >= 1");
    for (double l : latency_ms) {
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("pipeline: latencies must be finite and >= 0");
    }
    if (!(chunk_duration_ms > 0.0)) throw ConfigError("pipeline: chunk duration must be positive");
    if (lookahead > 0 && !model_playback) throw ConfigError("pipeline: lookahead needs modeled playback");
}

const ChunkJob& PipelineTrace::job(std::int64_t chunk, Stage stage) const {
    for (const auto& j : jobs) {
        if (j.chunk_index == chunk && j.stage == stage) return j;
    }
    throw ContractError("trace: no job for chunk " + std::to_string(chunk) + " stage " + std::string(to_string(stage)));
}

std::vector<ChunkJob> PipelineTrace::stage_jobs(Stage stage) const {
    std::vector<ChunkJob> out;
    for (const auto& j : jobs) {
        if (j.stage == stage) out.push_back(j);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.chunk_index < b.chunk_index; });
    return out;
}

PipelineTrace simulate(const PipelineConfig& cfg, const RunHooks& hooks) {
    cfg.validate();
    const std::size_t n = cfg.n_chunks;
    const std::size_t n_stages = active_stages(cfg);
    Timeline tl(n);
    std::array<std::size_t, kAllStages> next{};
    std::array<bool, kAllStages> busy{};
    std::array<double, kAllStages> enqueue{};

    struct Event {
        double t;
        std::uint64_t seq;
        std::size_t stage;
        bool operator>(const Event& o) const { return t != o.t ? t > o.t : seq > o.seq; }
    };
    std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
    std::uint64_t seq = 0;
    double now = 0.0;

    PipelineTrace trace;
    trace.n_chunks = n;
    trace.has_playback = cfg.model_playback;

    std::size_t limit = n;
    auto admit = [&] {
        bool progressed = true;
        while (progressed) {
            progressed = false;
            for (std::size_t s = 0; s < n_stages; ++s) {
                if (busy[s] || next[s] >= limit) continue;
                const auto k = static_cast<std::int64_t>(next[s]);
                const double ready = tl.ready_at(cfg, static_cast<Stage>(s), k);
                if (std::isnan(ready) || ready > now) continue;
                if (s == 0 && hooks.admit_generator && !hooks.admit_generator(k, now)) {
                    limit = next[s];
                    progressed = true;
                    continue;
                }
                busy[s] = true;
                enqueue[s] = ready;
                tl.start[s][next[s]] = now;
                if (hooks.on_start) hooks.on_start(static_cast<Stage>(s), k, now);
                const double lat = hooks.latency ? hooks.latency(static_cast<Stage>(s), k)
                                                 : default_latency(cfg, static_cast<Stage>(s), k);
                events.push({now + lat, seq++, s});
                progressed = true;
            }
        }
    };

    admit();
    while (!events.empty()) {
        const Event e = events.top();
        events.pop();
        now = e.t;
        const std::size_t k = next[e.stage];
        tl.finish[e.stage][k] = now;
        trace.jobs.push_back({static_cast<std::int64_t>(k), static_cast<Stage>(e.stage), enqueue[e.stage],
                              tl.start[e.stage][k], now});
        if (hooks.on_finish) hooks.on_finish(trace.jobs.back());
        busy[e.stage] = false;
        ++next[e.stage];
        // Drain simultaneous completions before admitting new work.
        if (!events.empty() && events.top().t == now) continue;
        admit();
    }
    trace.n_chunks = limit;
    for (std::size_t s = 0; s < n_stages; ++s) {
        if (next[s] != limit) throw ContractError("pipeline: simulation deadlocked at stage " + std::string(to_string(static_cast<Stage>(s))));
    }
    return trace;
}

PipelineTrace run_wall(const PipelineConfig& cfg, const RunHooks& hooks) {
    cfg.validate();
    const std::size_t n = cfg.n_chunks;
    const std::size_t n_stages = active_stages(cfg);
    Timeline tl(n);
    std::mutex mu;
    std::condition_variable cv;
    PipelineTrace trace;
    trace.n_chunks = n;
    trace.has_playback = cfg.model_playback;

    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    auto now_ms = [&] { return std::chrono::duration<double, std::milli>(clock::now() - t0).count(); };

    std::size_t limit = n;
    auto worker = [&](std::size_t s) {
        const auto stage = static_cast<Stage>(s);
        for (std::size_t k = 0;; ++k) {
            const auto ki = static_cast<std::int64_t>(k);
            double enq = 0.0;
            double start = 0.0;
            {
                std::unique_lock lock(mu);
                cv.wait(lock, [&] { return k >= limit || !std::isnan(tl.ready_at(cfg, stage, ki)); });
                if (k >= limit) break;
                enq = tl.ready_at(cfg, stage, ki);
                start = std::max(now_ms(), enq);
                if (s == 0 && hooks.admit_generator && !hooks.admit_generator(ki, start)) {
                    limit = k;
                    lock.unlock();
                    cv.notify_all();
                    break;
                }
                tl.start[s][k] = start;
            }
            cv.notify_all();
            if (hooks.on_start) hooks.on_start(stage, ki, start);
            if (hooks.work) {
                hooks.work(stage, ki);
            } else {
                std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(default_latency(cfg, stage, ki)));
            }
            double fin = 0.0;
            {
                std::lock_guard lock(mu);
                fin = std::max(now_ms(), start);
                tl.finish[s][k] = fin;
                trace.jobs.push_back({ki, stage, enq, start, fin});
            }
            if (hooks.on_finish) hooks.on_finish({ki, stage, enq, start, fin});
            cv.notify_all();
        }
    };

    std::vector<std::thread> threads;
    for (std::size_t s = 0; s < n_stages; ++s) threads.emplace_back(worker, s);
    for (auto& t : threads) t.join();
    trace.n_chunks = limit;
    return trace;
}

PipelineTrace run(const PipelineConfig& cfg, ClockMode clock, const RunHooks& hooks) {
    return clock == ClockMode::Simulated ? simulate(cfg, hooks) : run_wall(cfg, hooks);
}

std::optional<std::string> check_trace(const PipelineTrace& trace, const PipelineConfig& cfg) {
    const std::size_t n_stages = trace.has_playback ? kAllStages : kComputeStages;
    if (trace.jobs.size() != trace.n_chunks * n_stages) return "trace: wrong job count";
    Timeline tl(trace.n_chunks);
    for (const auto& j : trace.jobs) {
        if (!(j.t_enqueue <= j.t_start && j.t_start <= j.t_finish)) {
            return "job " + std::to_string(j.chunk_index) + "/" + std::string(to_string(j.stage)) + ": times out of order";
        }
        tl.start[idx(j.stage)][static_cast<std::size_t>(j.chunk_index)] = j.t_start;
        tl.finish[idx(j.stage)][static_cast<std::size_t>(j.chunk_index)] = j.t_finish;
    }
    for (std::size_t s = 0; s < n_stages; ++s) {
        for (std::size_t k = 0; k < trace.n_chunks; ++k) {
            const auto stage = static_cast<Stage>(s);
            const auto ki = static_cast<std::int64_t>(k);
            const double st = tl.start[s][k];
            if (k > 0 && st < tl.finish[s][k - 1]) {
                return std::string(to_string(stage)) + " chunk " + std::to_string(k) + " overlaps its predecessor";
            }
            for (const auto& p : prerequisites(cfg, stage, ki)) {
                if (!(tl.met_at(p) <= st)) {
                    return std::string(to_string(stage)) + " chunk " + std::to_string(k) + " started before " +
                           std::string(to_string(p.stage)) + " chunk " + std::to_string(p.chunk) +
                           (p.on_start ? " started" : " finished");
                }
            }
        }
    }
    return std::nullopt;
}

Metrics metrics(const PipelineTrace& trace) {
    if (trace.jobs.empty()) throw ContractError("metrics: empty trace");
    Metrics m;
    const auto dec = trace.stage_jobs(Stage::Decoder);
    m.ttfr_ms = dec.front().t_finish;
    if (dec.size() >= 2) {
        std::vector<double> diffs;
        for (std::size_t k = 1; k < dec.size(); ++k) diffs.push_back(dec[k].t_finish - dec[k - 1].t_finish);
        const std::size_t take = std::max<std::size_t>(1, diffs.size() / 2);
        double sum = 0.0;
        for (std::size_t i = diffs.size() - take; i < diffs.size(); ++i) sum += diffs[i];
        m.steady_period_ms = sum / static_cast<double>(take);
    }
    for (std::size_t s = 0; s < kComputeStages; ++s) {
        const auto jobs = trace.stage_jobs(static_cast<Stage>(s));
        double busy = 0.0;
        for (const auto& j : jobs) busy += j.t_finish - j.t_start;
        const double span = jobs.back().t_finish - jobs.front().t_start;
        m.utilization[s] = span > 0.0 ? busy / span : 0.0;
    }
    return m;
}

std::vector<double> realtime_margin(const PipelineTrace& trace, double chunk_duration_ms) {
    const auto dec = trace.stage_jobs(Stage::Decoder);
    if (dec.empty()) return {};
    const double ttfr = dec.front().t_finish;
    std::vector<double> out;
    for (std::size_t k = 0; k < dec.size(); ++k) {
        out.push_back(static_cast<double>(k) * chunk_duration_ms + ttfr - dec[k].t_finish);
    }
    return out;
}

nlohmann::json to_json(const ChunkJob& job) {
    return {{"chunk", job.chunk_index},
            {"stage", to_string(job.stage)},
            {"t_enqueue", job.t_enqueue},
            {"t_start", job.t_start},
            {"t_finish", job.t_finish}};
}

nlohmann::json to_json(const Metrics& m) {
    nlohmann::json j;
    j["ttfr_ms"] = m.ttfr_ms;
    j["steady_period_ms"] = m.steady_period_ms ? nlohmann::json(*m.steady_period_ms) : nlohmann::json(nullptr);
    j["utilization"] = {{"generator", m.utilization[0]}, {"refiner", m.utilization[1]}, {"decoder", m.utilization[2]}};
    return j;
}

void write_ndjson(std::ostream& out, const PipelineTrace& trace) {
    for (const auto& j : trace.jobs) out << to_json(j).dump() << '\n';
}

}  // namespace lpm::pipeline
