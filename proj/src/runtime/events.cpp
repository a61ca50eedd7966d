#include "lpm/runtime/events.hpp"

#include "lpm/latcore/errors.hpp"
#include "lpm/runtime/audio.hpp"

namespace lpm::runtime {

std::string_view to_string(SessionState s) {
    switch (s) {
        case SessionState::Warmup: return "warmup";
        case SessionState::Idle: return "idle";
        case SessionState::Listening: return "listening";
        case SessionState::Responding: return "responding";
        case SessionState::Terminated: return "terminated";
    }
    return "?";
}

std::string_view to_string(EventKind k) {
    switch (k) {
        case EventKind::AudioFrame: return "audio_frame";
        case EventKind::TextUpdate: return "text_update";
        case EventKind::UserSpeechStart: return "user_speech_start";
        case EventKind::UserSpeechEnd: return "user_speech_end";
        case EventKind::AgentSpeechStart: return "agent_speech_start";
        case EventKind::AgentSpeechEnd: return "agent_speech_end";
        case EventKind::Interrupt: return "interrupt";
        case EventKind::End: return "end";
        case EventKind::WarmupComplete: return "warmup_complete";
    }
    return "?";
}

SessionState state_from_string(std::string_view s) {
    for (auto st : kAllStates) {
        if (to_string(st) == s) return st;
    }
    throw FormatError("unknown state '" + std::string(s) + "'");
}

EventKind event_from_string(std::string_view s) {
    for (auto k : kAllEventKinds) {
        if (to_string(k) == s) return k;
    }
    throw FormatError("unknown event kind '" + std::string(s) + "'");
}

SessionState transition(SessionState state, EventKind event) {
    using S = SessionState;
    using E = EventKind;
    if (state == S::Terminated) return state;
    if (event == E::End) return S::Terminated;
    switch (state) {
        case S::Warmup:
            if (event == E::WarmupComplete) return S::Idle;
            break;
        case S::Idle:
            if (event == E::UserSpeechStart) return S::Listening;
            break;
        case S::Listening:
            if (event == E::AgentSpeechStart) return S::Responding;
            if (event == E::UserSpeechEnd) return S::Idle;  // the runtime delays this event by the grace period
            break;
        case S::Responding:
            if (event == E::Interrupt || event == E::UserSpeechStart) return S::Listening;
            if (event == E::AgentSpeechEnd) return S::Idle;
            break;
        case S::Terminated:
            break;
    }
    return state;
}

ControlEvent parse_event(const nlohmann::json& j, std::size_t sample_rate) {
    if (!j.is_object()) throw FormatError("event: expected an object");
    ControlEvent e;
    e.arrival_ms = j.value("t", 0.0);
    if (!(e.arrival_ms >= 0.0)) throw FormatError("event: negative arrival time");
    e.kind = event_from_string(j.at("kind").get<std::string>());
    if (e.kind == EventKind::WarmupComplete) throw FormatError("event: warmup_complete is internal");
    if (e.kind == EventKind::TextUpdate) e.prompt = j.value("prompt", "");
    if (e.kind == EventKind::AudioFrame) {
        const auto stream = j.value("stream", "listen");
        if (stream == "speak") {
            e.stream = dit::AudioStream::Speak;
        } else if (stream == "listen") {
            e.stream = dit::AudioStream::Listen;
        } else {
            throw FormatError("event: unknown audio stream '" + stream + "'");
        }
        e.k = j.at("k").get<std::int64_t>();
        if (e.k < 0) throw FormatError("event: negative audio step");
        if (j.contains("samples")) {
            e.samples = j.at("samples").get<std::vector<float>>();
        } else if (j.contains("tone")) {
            const auto& t = j.at("tone");
            e.samples = tone(sample_rate, sample_rate, t.value("freq", 220.0), t.value("amp", 0.3),
                             e.k * static_cast<std::int64_t>(sample_rate));
        } else {
            e.samples.assign(sample_rate, 0.0f);
        }
    }
    return e;
}

nlohmann::json to_json(const ControlEvent& e) {
    nlohmann::json j{{"t", e.arrival_ms}, {"kind", to_string(e.kind)}};
    if (e.kind == EventKind::TextUpdate) j["prompt"] = e.prompt;
    if (e.kind == EventKind::AudioFrame) {
        j["stream"] = e.stream == dit::AudioStream::Speak ? "speak" : "listen";
        j["k"] = e.k;
        j["samples"] = e.samples;
    }
    return j;
}

}  // namespace lpm::runtime
