#include "lpm/runtime/session.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <istream>
#include <sstream>
#include <thread>

#include "lpm/latcore/checkpoint.hpp"
#include "lpm/latcore/errors.hpp"

namespace lpm::runtime {

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

nlohmann::json timing_json(const StageTiming& t) { return {{"start", t.start}, {"finish", t.finish}}; }

}  // namespace

// ---- config ----

void SessionConfig::validate() const {
    model.validate();
    retention.validate();
    schedule.validate();
    if (n_chunks == 0) throw ConfigError("session: chunks must be >= 1");
    for (double l : latency_ms) {
        if (!(l >= 0.0)) throw ConfigError("session: latencies must be >= 0");
    }
    if (!(grace_ms >= 0.0)) throw ConfigError("session: grace_ms must be >= 0");
    if (!(chunk_duration_ms > 0.0)) throw ConfigError("session: chunk duration must be positive");
    if (sample_rate == 0) throw ConfigError("session: sample rate must be positive");
}

SessionConfig SessionConfig::from_json(const nlohmann::json& j) {
    SessionConfig c;
    if (!j.is_object()) throw ConfigError("session config must be an object");
    if (j.contains("model")) c.model = j.at("model").get<dit::ModelConfig>();
    c.model_path = j.value("model_path", c.model_path);
    c.model_gain = j.value("gain", c.model_gain);
    c.seed = j.value("seed", c.seed);
    c.n_chunks = j.value("chunks", c.n_chunks);
    if (j.contains("lat")) {
        const auto lat = j.at("lat").get<std::vector<double>>();
        if (lat.size() != 3) throw ConfigError("session: lat needs three values");
        std::copy(lat.begin(), lat.end(), c.latency_ms.begin());
    }
    const auto clock = j.value("clock", std::string("sim"));
    if (clock == "sim") {
        c.clock = pipeline::ClockMode::Simulated;
    } else if (clock == "wall") {
        c.clock = pipeline::ClockMode::Wall;
    } else {
        throw ConfigError("session: clock must be sim or wall");
    }
    c.measured = j.value("measured", c.measured);
    const auto playback = j.value("playback", std::string("model"));
    if (playback != "model" && playback != "client") throw ConfigError("session: playback must be model or client");
    c.client_playback = playback == "client";
    c.lookahead = j.value("lookahead", c.lookahead);
    c.retention.sink_chunks = j.value("sink", c.retention.sink_chunks);
    c.retention.recent_chunks = j.value("recent", c.retention.recent_chunks);
    if (j.contains("schedule")) {
        const auto s = j.at("schedule").get<std::vector<float>>();
        if (s.size() != 3) throw ConfigError("session: schedule needs T0, T1, T2");
        c.schedule = {s[0], s[1], s[2]};
    }
    c.grace_ms = j.value("grace_ms", c.grace_ms);
    c.chunk_duration_ms = j.value("chunk_ms", c.chunk_duration_ms);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.prompt = j.value("prompt", c.prompt);
    c.validate();
    return c;
}

nlohmann::json SessionConfig::to_json() const {
    return {{"model", model},
            {"model_path", model_path},
            {"gain", model_gain},
            {"seed", seed},
            {"chunks", n_chunks},
            {"lat", latency_ms},
            {"clock", clock == pipeline::ClockMode::Simulated ? "sim" : "wall"},
            {"measured", measured},
            {"playback", client_playback ? "client" : "model"},
            {"lookahead", lookahead},
            {"sink", retention.sink_chunks},
            {"recent", retention.recent_chunks},
            {"schedule", {schedule.t0, schedule.t1, schedule.t2}},
            {"grace_ms", grace_ms},
            {"chunk_ms", chunk_duration_ms},
            {"sample_rate", sample_rate},
            {"prompt", prompt}};
}

bool admit_generation(const LookaheadGate& gate) {
    return gate.gen_head - gate.play_head < static_cast<std::int64_t>(gate.lookahead);
}

// ---- event queue ----

double EventQueue::effective(const ControlEvent& e) const {
    return e.kind == EventKind::UserSpeechEnd ? e.arrival_ms + grace_ms_ : e.arrival_ms;
}

void EventQueue::push(ControlEvent e) {
    if (e.kind == EventKind::UserSpeechStart) speech_starts_.push_back(e.arrival_ms);
    events_.emplace_back(seq_++, std::move(e));
}

std::vector<ControlEvent> EventQueue::take_due(double t_ms) {
    std::vector<std::pair<std::uint64_t, ControlEvent>> due;
    std::vector<std::pair<std::uint64_t, ControlEvent>> keep;
    for (auto& item : events_) {
        (effective(item.second) < t_ms ? due : keep).push_back(std::move(item));
    }
    events_ = std::move(keep);
    std::stable_sort(due.begin(), due.end(), [&](const auto& a, const auto& b) {
        const double ea = effective(a.second);
        const double eb = effective(b.second);
        return ea != eb ? ea < eb : a.first < b.first;
    });
    std::vector<ControlEvent> out;
    for (auto& [seq, e] : due) {
        if (e.kind == EventKind::UserSpeechEnd) {
            // The user spoke again within the grace period: not an end of turn.
            const bool resumed = std::any_of(speech_starts_.begin(), speech_starts_.end(), [&](double s) {
                return s > e.arrival_ms && s <= e.arrival_ms + grace_ms_;
            });
            if (resumed) continue;
        }
        out.push_back(std::move(e));
    }
    return out;
}

// ---- boundary application ----

std::vector<StateChange> apply_boundary_updates(RefreshableState& st, const std::vector<ControlEvent>& due,
                                                std::int64_t boundary, double t_ms, std::size_t d_cond) {
    std::vector<StateChange> changes;
    for (const auto& e : due) {
        if (st.state == SessionState::Terminated) break;
        switch (e.kind) {
            case EventKind::AudioFrame:
                (e.stream == dit::AudioStream::Speak ? st.speak : st.listen).write_block(e.k, e.samples);
                break;
            case EventKind::TextUpdate:
                st.prompt = e.prompt;
                st.text_tokens = encode_text(e.prompt, d_cond);
                break;
            default: {
                const SessionState next = transition(st.state, e.kind);
                if (next != st.state) {
                    changes.push_back({st.state, next, boundary, t_ms, e.kind});
                    st.state = next;
                }
            }
        }
    }
    return changes;
}

ConditioningSnapshot build_conditioning(const RefreshableState& st, std::int64_t k, const AudioEncoder& encoder) {
    ConditioningSnapshot snap;
    snap.cond.text_tokens = st.text_tokens;
    snap.text_hash = hash_tensor(st.text_tokens);
    snap.speak_active = st.state == SessionState::Responding;
    snap.listen_active = st.state == SessionState::Listening || st.state == SessionState::Responding;
    auto fill = [&](const AudioBuffer& buf, bool active, Tensor2D& out, bool& muted, bool& underrun) {
        muted = true;
        if (!active) return;
        try {
            const AudioWindow w = chunk_audio(buf, k);
            if (w.k != k) throw ContractError("conditioning: audio window is not aligned with the chunk");
            out = encoder.encode(w);
            muted = false;
        } catch (const UnderrunError&) {
            underrun = true;
        }
    };
    fill(st.speak, snap.speak_active, snap.cond.speak_audio, snap.cond.speak_muted, snap.speak_underrun);
    fill(st.listen, snap.listen_active, snap.cond.listen_audio, snap.cond.listen_muted, snap.listen_underrun);
    return snap;
}

// ---- records ----

nlohmann::json ChunkRecord::to_json() const {
    return {{"type", "chunk"},
            {"index", index},
            {"state", to_string(state)},
            {"discarded", discarded},
            {"timings", {{"gen", timing_json(gen)}, {"refine", timing_json(refine)}, {"decode", timing_json(decode)}}},
            {"cache", {{"retained", retained}, {"noisy_floats", noisy_floats}, {"clean_floats", clean_floats}}},
            {"latent_hash", hex64(latent_hash)},
            {"cond_hash", hex64(cond_hash)},
            {"cond_hash_at_refine", hex64(cond_hash_at_refine)},
            {"text_hash", hex64(text_hash)},
            {"audio",
             {{"speak", {{"active", speak_active}, {"underrun", speak_underrun}}},
              {"listen", {{"active", listen_active}, {"underrun", listen_underrun}}}}},
            {"nfe", {{"backbone", nfe.backbone}, {"refiner", nfe.refiner}}},
            {"gen_head", gen_head},
            {"play_head", play_head}};
}

nlohmann::json state_message(const StateChange& c) {
    return {{"type", "state"},
            {"from", to_string(c.from)},
            {"to", to_string(c.to)},
            {"boundary", c.boundary},
            {"t", c.t_ms},
            {"cause", to_string(c.cause)}};
}

// ---- session ----

namespace {

std::unique_ptr<dit::ToyDit> make_backbone(const SessionConfig& cfg) {
    if (!cfg.model_path.empty()) {
        auto m = std::make_unique<dit::ToyDit>(dit::ToyDit::from_checkpoint(load_checkpoint(cfg.model_path)));
        return m;
    }
    return std::make_unique<dit::ToyDit>(dit::ToyDit::random(cfg.model, cfg.seed, cfg.model_gain));
}

}  // namespace

Session::Session(SessionConfig cfg, Sink sink)
    : cfg_((cfg.validate(), std::move(cfg))),
      sink_(std::move(sink)),
      backbone_(make_backbone(cfg_)),
      refiner_(std::make_unique<dit::ToyDit>(*backbone_)),
      refs_(denoise::make_reference_set(backbone_->config(), cfg_.seed)),
      encoder_(backbone_->config().d_cond, backbone_->config().audio_fps, denoise::mix_seed(cfg_.seed, 0xa0d10ull)),
      queue_(cfg_.grace_ms) {
    cfg_.model = backbone_->config();
    denoise::GenerationConfig g;
    g.schedule = cfg_.schedule;
    g.retention = cfg_.retention;
    g.seed = cfg_.seed;
    gen_ = std::make_unique<denoise::ChunkGenerator>(*backbone_, *refiner_, g, &refs_);
    refresh_.speak = AudioBuffer(cfg_.sample_rate);
    refresh_.listen = AudioBuffer(cfg_.sample_rate);
    refresh_.prompt = cfg_.prompt;
    refresh_.text_tokens = encode_text(cfg_.prompt, cfg_.model.d_cond);
    gate_.lookahead = cfg_.lookahead;
}

Session::~Session() { request_stop(); }

void Session::emit(const nlohmann::json& msg) {
    std::lock_guard lock(emit_mu_);
    if (sink_) sink_(msg);
}

void Session::post(ControlEvent e) {
    std::lock_guard lock(mu_);
    if (refresh_.state == SessionState::Terminated || stop_) throw ProtocolError("session has ended");
    if (e.kind == EventKind::WarmupComplete) throw ProtocolError("warmup_complete is raised by the runtime only");
    if (e.kind == EventKind::AudioFrame && e.samples.size() > cfg_.sample_rate) {
        throw ProtocolError("audio block for second " + std::to_string(e.k) + " has more than one second of samples");
    }
    queue_.push(std::move(e));
}

void Session::play_ack(std::int64_t chunk) {
    {
        std::lock_guard lock(mu_);
        acked_ = std::max(acked_, chunk);
    }
    ack_cv_.notify_all();
}

void Session::request_stop() {
    stop_ = true;
    ack_cv_.notify_all();
}

double Session::now_ms() const {
    if (!running_) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
}

bool Session::on_admit(std::int64_t k, double t) {
    std::lock_guard lock(mu_);
    if (stop_) return false;
    auto due = queue_.take_due(t);
    if (refresh_.state == SessionState::Warmup && k >= static_cast<std::int64_t>(cfg_.retention.sink_chunks)) {
        ControlEvent done;
        done.kind = EventKind::WarmupComplete;
        done.arrival_ms = t;
        due.insert(due.begin(), done);
    }
    for (const auto& c : apply_boundary_updates(refresh_, due, k, t, cfg_.model.d_cond)) {
        transitions_.push_back(c);
        emit(state_message(c));
    }
    if (refresh_.state == SessionState::Terminated) return false;

    ChunkRecord rec;
    rec.index = k;
    rec.state = refresh_.state;
    rec.discarded = refresh_.state == SessionState::Warmup;
    LookaheadGate before = gate_;
    before.gen_head = k - 1;
    rec.admitted_within_lookahead = cfg_.lookahead == 0 || admit_generation(before);
    if (!rec.admitted_within_lookahead) ++lookahead_violations_;
    gate_.gen_head = k;
    rec.gen_head = k;
    rec.play_head = gate_.play_head;

    auto snap = build_conditioning(refresh_, k, encoder_);
    rec.cond_hash = snap.cond.hash();
    rec.text_hash = snap.text_hash;
    rec.speak_active = snap.speak_active;
    rec.listen_active = snap.listen_active;
    rec.speak_underrun = snap.speak_underrun;
    rec.listen_underrun = snap.listen_underrun;
    snapshots_[k] = std::move(snap);
    records_[k] = std::move(rec);

    // The next window starts at second k-1.
    const auto keep_from = (k - 1) * static_cast<std::int64_t>(cfg_.sample_rate);
    refresh_.speak.trim_before(keep_from);
    refresh_.listen.trim_before(keep_from);
    return true;
}

void Session::compute(pipeline::Stage stage, std::int64_t k) {
    using pipeline::Stage;
    switch (stage) {
        case Stage::Generator: {
            dit::CondBundle cond;
            {
                std::lock_guard lock(mu_);
                cond = snapshots_.at(k).cond;
            }
            auto b = gen_->backbone_phase(k, cond);
            const auto noisy = gen_->noisy_cache().stats().stored_floats;
            std::lock_guard lock(mu_);
            records_.at(k).noisy_floats = noisy;
            handoff_[k] = std::move(b);
            break;
        }
        case Stage::Refiner: {
            denoise::BackboneResult b;
            {
                std::lock_guard lock(mu_);
                b = std::move(handoff_.at(k));
                handoff_.erase(k);
            }
            const auto consumed = b.cond.hash();
            const auto g = gen_->refine_phase(b);
            const auto clean = gen_->clean_cache().stats().stored_floats;
            std::lock_guard lock(mu_);
            auto& rec = records_.at(k);
            rec.cond_hash_at_refine = consumed;
            if (consumed != rec.cond_hash) ++isolation_violations_;
            rec.latent_hash = g.latent_hash;
            rec.nfe = g.nfe;
            rec.retained = g.retained;
            rec.clean_floats = clean;
            break;
        }
        case Stage::Decoder: {
            // Stand-in for the VAE: the latent hash is the decoded artifact.
            std::lock_guard lock(mu_);
            if (snapshots_.at(k).cond.hash() != records_.at(k).cond_hash) ++isolation_violations_;
            snapshots_.erase(k);
            break;
        }
        case Stage::Playback:
            break;
    }
}

void Session::on_finish(const pipeline::ChunkJob& job) {
    nlohmann::json msg;
    {
        std::lock_guard lock(mu_);
        auto it = records_.find(job.chunk_index);
        if (it == records_.end()) return;
        const StageTiming t{job.t_start, job.t_finish};
        switch (job.stage) {
            case pipeline::Stage::Generator: it->second.gen = t; break;
            case pipeline::Stage::Refiner: it->second.refine = t; break;
            case pipeline::Stage::Decoder: it->second.decode = t; break;
            case pipeline::Stage::Playback: return;
        }
        if (job.stage != pipeline::Stage::Decoder) return;
        msg = it->second.to_json();
        recent_chunks_.push_back(msg);
        if (recent_chunks_.size() > 64) recent_chunks_.erase(recent_chunks_.begin());
    }
    emit(msg);
}

SessionResult Session::run() {
    using pipeline::Stage;
    pipeline::PipelineConfig pc;
    pc.n_chunks = cfg_.n_chunks;
    pc.latency_ms = cfg_.latency_ms;
    pc.model_playback = true;
    pc.chunk_duration_ms = cfg_.chunk_duration_ms;
    pc.discarded_chunks = cfg_.retention.sink_chunks;
    pc.lookahead = cfg_.lookahead;

    const bool sim = cfg_.clock == pipeline::ClockMode::Simulated;
    pipeline::RunHooks hooks;
    hooks.admit_generator = [this](std::int64_t k, double t) { return on_admit(k, t); };
    hooks.on_start = [this, sim](Stage s, std::int64_t k, double) {
        if (s == Stage::Playback) {
            std::lock_guard lock(mu_);
            gate_.play_head = k;
            return;
        }
        if (sim) compute(s, k);
    };
    hooks.on_finish = [this](const pipeline::ChunkJob& job) { on_finish(job); };
    if (!sim) {
        hooks.work = [this](Stage s, std::int64_t k) {
            using clock = std::chrono::steady_clock;
            const auto begin = clock::now();
            bool discarded = false;
            {
                std::lock_guard lock(mu_);
                auto it = records_.find(k);
                discarded = it != records_.end() && it->second.discarded;
            }
            if (s == Stage::Playback) {
                if (discarded) return;
                if (cfg_.client_playback) {
                    std::unique_lock lock(mu_);
                    ack_cv_.wait(lock, [&] { return acked_ >= k || stop_; });
                } else {
                    std::unique_lock lock(mu_);
                    ack_cv_.wait_for(lock, std::chrono::duration<double, std::milli>(cfg_.chunk_duration_ms),
                                     [&] { return stop_.load(); });
                }
                return;
            }
            compute(s, k);
            if (!cfg_.measured && !stop_) {
                const auto target = begin + std::chrono::duration_cast<clock::duration>(
                                                std::chrono::duration<double, std::milli>(cfg_.latency_ms[static_cast<std::size_t>(s)]));
                std::this_thread::sleep_until(target);
            }
        };
    }

    t0_ = std::chrono::steady_clock::now();
    running_ = true;
    SessionResult res;
    res.pipeline = pipeline::run(pc, cfg_.clock, hooks);

    std::lock_guard lock(mu_);
    for (auto& [k, rec] : records_) res.chunks.push_back(rec);
    res.transitions = transitions_;
    res.lookahead_violations = lookahead_violations_;
    res.isolation_violations = isolation_violations_;
    res.final_state = refresh_.state;
    nlohmann::json m{{"type", "metrics"}, {"chunks", res.chunks.size()}};
    if (!res.pipeline.jobs.empty()) {
        res.metrics = pipeline::metrics(res.pipeline);
        m.update(pipeline::to_json(res.metrics));
        const auto sink = static_cast<std::int64_t>(cfg_.retention.sink_chunks);
        if (static_cast<std::int64_t>(res.chunks.size()) > sink) {
            m["first_playable_ms"] = res.pipeline.job(sink, Stage::Decoder).t_finish;
        }
    }
    m["lookahead_violations"] = res.lookahead_violations;
    m["isolation_violations"] = res.isolation_violations;
    m["final_state"] = to_string(res.final_state);
    m["peak_floats"] = {{"noisy", gen_->noisy_cache().stats().peak_floats},
                        {"clean", gen_->clean_cache().stats().peak_floats}};
    emit(m);
    running_ = false;
    return res;
}

nlohmann::json Session::snapshot() const {
    std::lock_guard lock(mu_);
    nlohmann::json j{{"type", "snapshot"},
                     {"state", to_string(refresh_.state)},
                     {"next_chunk", gate_.gen_head + 1},
                     {"gen_head", gate_.gen_head},
                     {"play_head", gate_.play_head},
                     {"lookahead", cfg_.lookahead},
                     {"config", cfg_.to_json()}};
    j["chunks"] = recent_chunks_;
    j["transitions"] = nlohmann::json::array();
    for (const auto& c : transitions_) j["transitions"].push_back(state_message(c));
    j["retained"] = records_.empty() ? nlohmann::json::array() : nlohmann::json(records_.rbegin()->second.retained);
    return j;
}

std::vector<ControlEvent> read_script(std::istream& in, std::size_t sample_rate) {
    std::vector<ControlEvent> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        try {
            out.push_back(parse_event(nlohmann::json::parse(line), sample_rate));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("script line " + std::to_string(n) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("script line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

SessionResult run_scripted(const SessionConfig& cfg, const std::vector<ControlEvent>& events,
                           std::vector<nlohmann::json>* messages) {
    Session s(cfg, [messages](const nlohmann::json& m) {
        if (messages != nullptr) messages->push_back(m);
    });
    for (const auto& e : events) s.post(e);
    return s.run();
}

}  // namespace lpm::runtime
