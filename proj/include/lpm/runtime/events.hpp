#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpm/toydit/model.hpp"

namespace lpm::runtime {

enum class SessionState { Warmup, Idle, Listening, Responding, Terminated };

enum class EventKind {
    AudioFrame,
    TextUpdate,
    UserSpeechStart,
    UserSpeechEnd,
    AgentSpeechStart,
    AgentSpeechEnd,
    Interrupt,
    End,
    WarmupComplete,  // raised by the runtime itself once the sink chunks exist
};

inline constexpr SessionState kAllStates[] = {SessionState::Warmup, SessionState::Idle, SessionState::Listening,
                                              SessionState::Responding, SessionState::Terminated};
inline constexpr EventKind kAllEventKinds[] = {EventKind::AudioFrame,       EventKind::TextUpdate,
                                               EventKind::UserSpeechStart,  EventKind::UserSpeechEnd,
                                               EventKind::AgentSpeechStart, EventKind::AgentSpeechEnd,
                                               EventKind::Interrupt,        EventKind::End,
                                               EventKind::WarmupComplete};

std::string_view to_string(SessionState s);
std::string_view to_string(EventKind k);
SessionState state_from_string(std::string_view s);
EventKind event_from_string(std::string_view s);  // snake_case wire names

struct ControlEvent {
    EventKind kind = EventKind::End;
    double arrival_ms = 0.0;
    // AudioFrame: one block of samples for second k of the given stream.
    dit::AudioStream stream = dit::AudioStream::Speak;
    std::int64_t k = 0;
    std::vector<float> samples;
    // TextUpdate
    std::string prompt;
};

// The transition table. Pairs not listed are no-ops; Terminated absorbs.
SessionState transition(SessionState state, EventKind event);

// Parses one script line: {"t": ms, "kind": "...", ...}. Audio lines carry
// "stream", "k" and either "samples" (array) or "tone": {"freq","amp"}.
ControlEvent parse_event(const nlohmann::json& j, std::size_t sample_rate);
nlohmann::json to_json(const ControlEvent& e);

}  // namespace lpm::runtime
