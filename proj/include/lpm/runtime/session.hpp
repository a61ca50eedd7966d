#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpm/denoise/generate.hpp"
#include "lpm/pipeline/pipeline.hpp"
#include "lpm/runtime/audio.hpp"
#include "lpm/runtime/events.hpp"

namespace lpm::runtime {

struct SessionConfig {
    dit::ModelConfig model;
    std::string model_path;  // optional checkpoint; random weights otherwise
    float model_gain = 0.5f;
    std::uint64_t seed = 0;
    std::size_t n_chunks = 20;  // upper bound, warmup included
    std::array<double, 3> latency_ms{700.0, 700.0, 180.0};
    pipeline::ClockMode clock = pipeline::ClockMode::Simulated;
    bool measured = false;  // wall clock: stage time is the real compute, no padding sleep
    bool client_playback = false;  // wall clock: play_ack(k) marks chunk k as played
    std::size_t lookahead = 2;
    kv::RetentionPolicy retention;
    denoise::TimestepSchedule schedule;
    double grace_ms = 1500.0;
    double chunk_duration_ms = 1000.0;
    std::size_t sample_rate = kDefaultSampleRate;
    std::string prompt;

    void validate() const;
    static SessionConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

// Generation may lead playback by at most L chunks. gen_head is the last
// admitted chunk, play_head the last chunk whose playback started (-1: none).
struct LookaheadGate {
    std::size_t lookahead = 2;
    std::int64_t gen_head = -1;
    std::int64_t play_head = -1;
};

// True iff gen_head - play_head < L, i.e. chunk gen_head + 1 may start.
bool admit_generation(const LookaheadGate& gate);

// Control-plane state: replaced freely between boundaries.
struct RefreshableState {
    SessionState state = SessionState::Warmup;
    std::string prompt;
    Tensor2D text_tokens;
    AudioBuffer speak{kDefaultSampleRate};
    AudioBuffer listen{kDefaultSampleRate};
};

struct StateChange {
    SessionState from = SessionState::Warmup;
    SessionState to = SessionState::Warmup;
    std::int64_t boundary = 0;  // first chunk generated in the new state
    double t_ms = 0.0;
    EventKind cause = EventKind::End;
};

// Events ordered by effective time (arrival, plus the grace period for
// UserSpeechEnd). A UserSpeechStart inside the grace period cancels the end.
class EventQueue {
public:
    explicit EventQueue(double grace_ms) : grace_ms_(grace_ms) {}
    void push(ControlEvent e);
    // Removes and returns every event effective strictly before t_ms.
    std::vector<ControlEvent> take_due(double t_ms);
    std::size_t pending() const { return events_.size(); }

private:
    double effective(const ControlEvent& e) const;
    double grace_ms_;
    std::uint64_t seq_ = 0;
    std::vector<std::pair<std::uint64_t, ControlEvent>> events_;
    std::vector<double> speech_starts_;
};

// Applies due events (in order) to the refreshable state for the boundary
// before chunk `boundary`. Returns the state changes, in order.
std::vector<StateChange> apply_boundary_updates(RefreshableState& st, const std::vector<ControlEvent>& due,
                                                std::int64_t boundary, double t_ms, std::size_t d_cond);

struct ConditioningSnapshot {
    dit::CondBundle cond;
    bool speak_active = false;
    bool listen_active = false;
    bool speak_underrun = false;
    bool listen_underrun = false;
    std::uint64_t text_hash = 0;
};

// Conditioning for chunk k, frozen at its boundary. Speak audio feeds only
// Responding, listen audio Listening and Responding; a stream whose current
// second is missing is muted and flagged.
ConditioningSnapshot build_conditioning(const RefreshableState& st, std::int64_t k, const AudioEncoder& encoder);

struct StageTiming {
    double start = 0.0;
    double finish = 0.0;
};

struct ChunkRecord {
    std::int64_t index = 0;
    SessionState state = SessionState::Warmup;
    bool discarded = false;
    std::uint64_t cond_hash = 0;           // at generation start
    std::uint64_t cond_hash_at_refine = 0;  // what the refiner actually consumed
    std::uint64_t text_hash = 0;
    std::uint64_t latent_hash = 0;
    bool speak_active = false, listen_active = false;
    bool speak_underrun = false, listen_underrun = false;
    denoise::NfeCount nfe;
    StageTiming gen, refine, decode;
    std::vector<std::int64_t> retained;
    std::size_t noisy_floats = 0, clean_floats = 0;
    std::int64_t gen_head = 0, play_head = -1;  // at admission
    bool admitted_within_lookahead = true;

    nlohmann::json to_json() const;  // the "chunk" protocol message
};

struct SessionResult {
    std::vector<ChunkRecord> chunks;
    std::vector<StateChange> transitions;
    pipeline::PipelineTrace pipeline;
    pipeline::Metrics metrics;
    std::size_t lookahead_violations = 0;
    std::size_t isolation_violations = 0;
    SessionState final_state = SessionState::Warmup;
};

nlohmann::json state_message(const StateChange& c);

// One full-duplex session. post() and play_ack() may be called from any
// thread while run() drives generation.
class Session {
public:
    using Sink = std::function<void(const nlohmann::json&)>;

    explicit Session(SessionConfig cfg, Sink sink = {});
    ~Session();
    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    // Throws ProtocolError for events the session cannot take.
    void post(ControlEvent e);
    void play_ack(std::int64_t chunk);
    void request_stop();
    // Milliseconds on the session clock (wall mode; 0 before run()).
    double now_ms() const;

    SessionResult run();

    nlohmann::json snapshot() const;
    const SessionConfig& config() const { return cfg_; }
    const dit::ToyDit& backbone() const { return *backbone_; }

private:
    void emit(const nlohmann::json& msg);
    bool on_admit(std::int64_t k, double t);
    void compute(pipeline::Stage stage, std::int64_t k);
    void on_finish(const pipeline::ChunkJob& job);

    SessionConfig cfg_;
    Sink sink_;
    std::unique_ptr<dit::ToyDit> backbone_;
    std::unique_ptr<dit::ToyDit> refiner_;
    dit::ReferenceSet refs_;
    std::unique_ptr<denoise::ChunkGenerator> gen_;
    AudioEncoder encoder_;

    mutable std::mutex mu_;
    std::mutex emit_mu_;
    std::condition_variable ack_cv_;
    EventQueue queue_;
    RefreshableState refresh_;
    LookaheadGate gate_;
    std::map<std::int64_t, ConditioningSnapshot> snapshots_;
    std::map<std::int64_t, denoise::BackboneResult> handoff_;
    std::map<std::int64_t, ChunkRecord> records_;
    std::vector<StateChange> transitions_;
    std::vector<nlohmann::json> recent_chunks_;  // last emitted chunk messages, for resync
    std::int64_t acked_ = -1;
    std::atomic<bool> stop_{false};
    std::atomic<bool> running_{false};
    std::chrono::steady_clock::time_point t0_{};
    std::size_t lookahead_violations_ = 0;
    std::size_t isolation_violations_ = 0;
};

// Reads an NDJSON event script (blank lines and lines starting with # skipped).
std::vector<ControlEvent> read_script(std::istream& in, std::size_t sample_rate);

// Runs a scripted session and returns every emitted message in order.
SessionResult run_scripted(const SessionConfig& cfg, const std::vector<ControlEvent>& events,
                           std::vector<nlohmann::json>* messages = nullptr);

}  // namespace lpm::runtime
