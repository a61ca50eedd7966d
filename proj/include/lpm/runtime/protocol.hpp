#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpm/runtime/session.hpp"

namespace lpm::runtime {

// f32 little-endian samples <-> base64, as carried in "samples_b64".
std::string encode_samples_b64(const std::vector<float>& samples);
std::vector<float> decode_samples_b64(std::string_view b64);

// Parses one client message into a control event. Arrival time comes from
// "t" when present, otherwise `now_ms`. Throws ProtocolError.
ControlEvent client_event(const nlohmann::json& msg, double now_ms, std::size_t sample_rate);

nlohmann::json error_message(std::string_view code, std::string_view detail);

// One client connection's view of the service, independent of transport.
// Every outgoing message is handed to `send` as a single JSON line without
// the newline; send may be called from session threads.
//
// Client messages: start, audio, text, event, play_ack, end, resync.
// A bad message yields an error message and the connection carries on.
class ProtocolSession {
public:
    using Send = std::function<void(std::string)>;

    ProtocolSession(SessionConfig defaults, Send send);
    ~ProtocolSession();
    ProtocolSession(const ProtocolSession&) = delete;
    ProtocolSession& operator=(const ProtocolSession&) = delete;

    // Call once the transport is up: sends the snapshot.
    void open();
    void handle_line(std::string_view line);
    void handle(const nlohmann::json& msg);

    bool running() const;
    // Blocks until the current session (if any) has finished.
    void wait();
    void close();

private:
    void start(const nlohmann::json& msg);
    nlohmann::json snapshot() const;
    void send(const nlohmann::json& msg);
    void reap();

    SessionConfig defaults_;
    Send send_;
    mutable std::mutex mu_;
    std::unique_ptr<Session> session_;
    std::thread runner_;
    bool finished_ = true;
};

}  // namespace lpm::runtime
