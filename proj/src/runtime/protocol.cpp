#include "lpm/runtime/protocol.hpp"

#include <bit>
#include <cstring>

#include <boost/beast/core/detail/base64.hpp>

#include "lpm/latcore/errors.hpp"

namespace lpm::runtime {

namespace b64 = boost::beast::detail::base64;

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

std::string encode_samples_b64(const std::vector<float>& samples) {
    std::string out(b64::encoded_size(samples.size() * sizeof(float)), '\0');
    out.resize(b64::encode(out.data(), samples.data(), samples.size() * sizeof(float)));
    return out;
}

std::vector<float> decode_samples_b64(std::string_view text) {
    if (text.size() % 4 != 0) throw ProtocolError("samples_b64: length is not a multiple of 4");
    std::string bytes(b64::decoded_size(text.size()), '\0');
    std::size_t pad = 0;
    while (pad < 2 && pad < text.size() && text[text.size() - 1 - pad] == '=') ++pad;
    const auto [written, read] = b64::decode(bytes.data(), text.data(), text.size());
    // The decoder stops at the padding.
    if (read < text.size() - pad) throw ProtocolError("samples_b64: invalid base64 at offset " + std::to_string(read));
    if (written % sizeof(float) != 0) throw ProtocolError("samples_b64: byte count is not a multiple of 4");
    std::vector<float> out(written / sizeof(float));
    std::memcpy(out.data(), bytes.data(), written);
    return out;
}

nlohmann::json error_message(std::string_view code, std::string_view detail) {
    return {{"type", "error"}, {"code", code}, {"message", detail}};
}

ControlEvent client_event(const nlohmann::json& msg, double now_ms, std::size_t sample_rate) {
    const auto type = msg.value("type", "");
    nlohmann::json ev = msg;
    ev.erase("type");
    if (!ev.contains("t")) ev["t"] = now_ms;
    if (type == "audio") {
        ev["kind"] = "audio_frame";
        if (!msg.contains("samples_b64")) throw ProtocolError("audio: samples_b64 is required");
        ev["samples"] = decode_samples_b64(msg.at("samples_b64").get<std::string>());
        ev.erase("samples_b64");
        if (!msg.contains("stream")) throw ProtocolError("audio: stream is required");
        if (!msg.contains("k")) throw ProtocolError("audio: k is required");
    } else if (type == "text") {
        ev["kind"] = "text_update";
        if (!msg.contains("prompt")) throw ProtocolError("text: prompt is required");
    } else if (type == "end") {
        ev["kind"] = "end";
    } else if (type == "event") {
        const auto kind = msg.value("kind", "");
        if (kind == "audio_frame" || kind == "text_update") {
            throw ProtocolError("event: send " + kind + " as an audio or text message");
        }
    } else {
        throw ProtocolError("unknown message type '" + type + "'");
    }
    try {
        return parse_event(ev, sample_rate);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string(type) + ": " + e.what());
    } catch (const FormatError& e) {
        throw ProtocolError(e.what());
    } catch (const ConfigError& e) {
        throw ProtocolError(e.what());
    }
}

ProtocolSession::ProtocolSession(SessionConfig defaults, Send send)
    : defaults_(std::move(defaults)), send_(std::move(send)) {}

ProtocolSession::~ProtocolSession() { close(); }

void ProtocolSession::send(const nlohmann::json& msg) {
    if (send_) send_(msg.dump());
}

void ProtocolSession::open() { send(snapshot()); }

nlohmann::json ProtocolSession::snapshot() const {
    std::lock_guard lock(mu_);
    if (session_) return session_->snapshot();
    return {{"type", "snapshot"},
            {"state", nullptr},
            {"next_chunk", 0},
            {"gen_head", -1},
            {"play_head", -1},
            {"lookahead", defaults_.lookahead},
            {"config", defaults_.to_json()},
            {"chunks", nlohmann::json::array()},
            {"transitions", nlohmann::json::array()},
            {"retained", nlohmann::json::array()}};
}

bool ProtocolSession::running() const {
    std::lock_guard lock(mu_);
    return session_ && !finished_;
}

void ProtocolSession::reap() {
    // Caller holds no lock; the runner never takes mu_ while finishing.
    if (runner_.joinable()) runner_.join();
}

void ProtocolSession::wait() { reap(); }

void ProtocolSession::close() {
    {
        std::lock_guard lock(mu_);
        if (session_) session_->request_stop();
    }
    reap();
}

void ProtocolSession::start(const nlohmann::json& msg) {
    {
        std::lock_guard lock(mu_);
        if (session_ && !finished_) throw ProtocolError("start: a session is already running");
    }
    reap();
    nlohmann::json cfg_json = defaults_.to_json();
    if (msg.contains("config")) {
        if (!msg.at("config").is_object()) throw ProtocolError("start: config must be an object");
        cfg_json.merge_patch(msg.at("config"));
    }
    SessionConfig cfg;
    std::vector<ControlEvent> script;
    try {
        cfg = SessionConfig::from_json(cfg_json);
        if (msg.contains("script")) {
            for (const auto& line : msg.at("script")) script.push_back(parse_event(line, cfg.sample_rate));
        }
    } catch (const std::exception& e) {
        throw ProtocolError(std::string("start: ") + e.what());
    }
    auto session = std::make_unique<Session>(cfg, [this](const nlohmann::json& m) { send(m); });
    for (auto& e : script) session->post(std::move(e));
    Session* raw = session.get();
    {
        std::lock_guard lock(mu_);
        session_ = std::move(session);
        finished_ = false;
    }
    send({{"type", "started"}, {"config", cfg.to_json()}});
    runner_ = std::thread([this, raw] {
        try {
            raw->run();
        } catch (const std::exception& e) {
            send(error_message("session_failed", e.what()));
        }
        std::lock_guard lock(mu_);
        finished_ = true;
    });
}

void ProtocolSession::handle_line(std::string_view line) {
    if (line.find_first_not_of(" \t\r\n") == std::string_view::npos) return;
    nlohmann::json msg;
    try {
        msg = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        send(error_message("bad_json", e.what()));
        return;
    }
    handle(msg);
}

void ProtocolSession::handle(const nlohmann::json& msg) {
    try {
        if (!msg.is_object() || !msg.contains("type") || !msg.at("type").is_string()) {
            throw ProtocolError("message needs a string \"type\"");
        }
        const auto type = msg.at("type").get<std::string>();
        if (type == "start") return start(msg);
        if (type == "resync") return send(snapshot());
        std::lock_guard lock(mu_);
        if (!session_) throw ProtocolError(type + ": no session; send start first");
        if (type == "play_ack") {
            if (!msg.contains("chunk") || !msg.at("chunk").is_number_integer()) {
                throw ProtocolError("play_ack: integer chunk is required");
            }
            session_->play_ack(msg.at("chunk").get<std::int64_t>());
            return;
        }
        session_->post(client_event(msg, session_->now_ms(), session_->config().sample_rate));
    } catch (const ProtocolError& e) {
        send(error_message("protocol", e.what()));
    }
}

}  // namespace lpm::runtime
