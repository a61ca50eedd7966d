#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <condition_variable>
#include <cstring>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast.hpp>

#include "lpm/latcore/errors.hpp"
#include "lpm/runtime/protocol.hpp"
#include "lpm/runtime/server.hpp"
#include "support.hpp"

using namespace lpm;
using namespace lpm::runtime;
namespace asio = boost::asio;
namespace beast = boost::beast;
using tcp = asio::ip::tcp;

namespace {

// Plain RFC 4648 encoder over the raw bytes.
std::string ref_base64(const std::vector<float>& v) {
    static const char* A = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::vector<unsigned char> b(v.size() * 4);
    if (!v.empty()) std::memcpy(b.data(), v.data(), b.size());
    std::string out;
    for (std::size_t i = 0; i < b.size(); i += 3) {
        const std::size_t n = std::min<std::size_t>(3, b.size() - i);
        std::uint32_t w = std::uint32_t(b[i]) << 16;
        if (n > 1) w |= std::uint32_t(b[i + 1]) << 8;
        if (n > 2) w |= b[i + 2];
        out += A[(w >> 18) & 63];
        out += A[(w >> 12) & 63];
        out += n > 1 ? A[(w >> 6) & 63] : '=';
        out += n > 2 ? A[w & 63] : '=';
    }
    return out;
}

nlohmann::json small_config(std::size_t chunks, const char* clock = "sim") {
    return {{"model", testing::tiny_config()}, {"chunks", chunks}, {"sample_rate", 800},
            {"clock", clock}, {"seed", 4}};
}

// Collects outgoing lines from any thread.
struct Outbox {
    std::mutex mu;
    std::condition_variable cv;
    std::vector<nlohmann::json> msgs;

    ProtocolSession::Send sender() {
        return [this](std::string line) {
            std::lock_guard lock(mu);
            msgs.push_back(nlohmann::json::parse(line));
            cv.notify_all();
        };
    }
    std::vector<nlohmann::json> of_type(const std::string& type) {
        std::lock_guard lock(mu);
        std::vector<nlohmann::json> out;
        for (const auto& m : msgs)
            if (m.at("type") == type) out.push_back(m);
        return out;
    }
    bool wait_for(const std::string& type) {
        std::unique_lock lock(mu);
        return cv.wait_for(lock, std::chrono::seconds(30), [&] {
            for (const auto& m : msgs)
                if (m.at("type") == type) return true;
            return false;
        });
    }
};

}  // namespace

TEST_CASE("base64 samples match a reference encoder and round trip") {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n;
    for (std::size_t len = 0; len < 9; ++len) {
        std::vector<float> v(len);
        for (float& x : v) x = n(rng);
        const auto text = encode_samples_b64(v);
        CHECK(text == ref_base64(v));
        CHECK(decode_samples_b64(text) == v);
    }
    CHECK(encode_samples_b64({1.0f}) == "AACAPw==");  // 00 00 80 3f
    CHECK_THROWS_AS(decode_samples_b64("abc"), ProtocolError);
    CHECK_THROWS_AS(decode_samples_b64("AA*AAAAA"), ProtocolError);
    CHECK_THROWS_AS(decode_samples_b64("AAA="), ProtocolError);  // two bytes
}

TEST_CASE("client messages become control events") {
    const std::vector<float> s(800, 0.5f);
    const auto a = client_event({{"type", "audio"}, {"stream", "speak"}, {"k", 2}, {"samples_b64", encode_samples_b64(s)}},
                                42.0, 800);
    CHECK(a.kind == EventKind::AudioFrame);
    CHECK(a.stream == dit::AudioStream::Speak);
    CHECK(a.samples == s);
    CHECK(a.arrival_ms == 42.0);
    CHECK(client_event({{"type", "text"}, {"prompt", "hi"}, {"t", 7}}, 42.0, 800).arrival_ms == 7.0);
    CHECK(client_event({{"type", "event"}, {"kind", "interrupt"}}, 0, 800).kind == EventKind::Interrupt);
    CHECK(client_event({{"type", "end"}}, 0, 800).kind == EventKind::End);

    for (const auto& bad : {nlohmann::json{{"type", "audio"}, {"k", 0}, {"samples_b64", ""}},
                            nlohmann::json{{"type", "audio"}, {"stream", "speak"}, {"k", 0}},
                            nlohmann::json{{"type", "text"}},
                            nlohmann::json{{"type", "event"}, {"kind", "text_update"}},
                            nlohmann::json{{"type", "event"}, {"kind", "warmup_complete"}},
                            nlohmann::json{{"type", "event"}, {"kind", "sneeze"}},
                            nlohmann::json{{"type", "jump"}}}) {
        CHECK_THROWS_AS(client_event(bad, 0, 800), ProtocolError);
    }
}

TEST_CASE("protocol session: snapshot, errors, a full simulated run") {
    Outbox box;
    ProtocolSession ps(SessionConfig{}, box.sender());
    ps.open();
    REQUIRE(box.msgs.size() == 1);
    CHECK(box.msgs[0].at("type") == "snapshot");
    CHECK(box.msgs[0].at("state").is_null());

    ps.handle_line("{not json");
    ps.handle_line("   ");
    ps.handle_line(R"({"type":"text","prompt":"x"})");
    ps.handle_line(R"({"kind":"end"})");
    ps.handle_line(R"({"type":"start","config":{"clock":"sundial"}})");
    const auto errors = box.of_type("error");
    REQUIRE(errors.size() == 4);
    CHECK(errors[0].at("code") == "bad_json");
    CHECK(errors[1].at("code") == "protocol");

    nlohmann::json start{{"type", "start"}, {"config", small_config(7)}};
    start["script"] = nlohmann::json::array({{{"t", 2500}, {"kind", "user_speech_start"}}});
    ps.handle(start);
    ps.wait();
    CHECK(box.of_type("started").size() == 1);
    const auto chunks = box.of_type("chunk");
    REQUIRE(chunks.size() == 7);
    for (std::size_t k = 0; k < 7; ++k) CHECK(chunks[k].at("index") == k);
    const auto states = box.of_type("state");
    REQUIRE(states.size() == 2);
    CHECK(states[1].at("to") == "listening");
    const auto metrics = box.of_type("metrics");
    REQUIRE(metrics.size() == 1);
    CHECK(metrics[0].at("isolation_violations") == 0);

    // Resync replays the finished session's view.
    ps.handle_line(R"({"type":"resync"})");
    const auto snaps = box.of_type("snapshot");
    REQUIRE(snaps.size() == 2);
    CHECK(snaps[1].at("chunks").size() == 7);
    CHECK(snaps[1].at("transitions").size() == 2);
}

TEST_CASE("protocol session on the wall clock: live events, duplicate start, end") {
    Outbox box;
    ProtocolSession ps(SessionConfig{}, box.sender());
    auto cfg = small_config(40, "wall");
    cfg["lat"] = {20, 20, 5};
    cfg["chunk_ms"] = 25;
    ps.handle({{"type", "start"}, {"config", cfg}});
    ps.handle({{"type", "start"}, {"config", cfg}});
    {
        const auto errs = box.of_type("error");
        REQUIRE(errs.size() == 1);
        CHECK(std::string(errs[0].at("message")).find("already running") != std::string::npos);
    }
    CHECK(ps.running());
    ps.handle({{"type", "audio"}, {"stream", "listen"}, {"k", 1}, {"samples_b64", encode_samples_b64(std::vector<float>(800))}});
    ps.handle({{"type", "play_ack"}, {"chunk", 0}});
    ps.handle({{"type", "play_ack"}, {"chunk", "zero"}});
    CHECK(box.of_type("error").size() == 2);
    REQUIRE(box.wait_for("chunk"));
    ps.handle({{"type", "end"}});
    ps.wait();
    CHECK_FALSE(ps.running());
    const auto metrics = box.of_type("metrics");
    REQUIRE(metrics.size() == 1);
    CHECK(metrics[0].at("final_state") == "terminated");
    CHECK(box.of_type("chunk").size() < 40);
}

TEST_CASE("endpoint parsing") {
    CHECK(parse_endpoint("0.0.0.0:9000").host == "0.0.0.0");
    CHECK(parse_endpoint(":9001").port == 9001);
    CHECK(parse_endpoint("9002").port == 9002);
    CHECK_THROWS(parse_endpoint("host:notaport"));
}

TEST_CASE("server: NDJSON socket, WebSocket and HTTP") {
    asio::io_context io;
    ServerOptions opts;
    opts.ndjson = Endpoint{};
    opts.ws = Endpoint{};
    Server srv(io, opts);
    std::thread loop([&] { io.run(); });
    const auto start = nlohmann::json{{"type", "start"}, {"config", small_config(5)}}.dump();

    SUBCASE("ndjson") {
        asio::io_context cio;
        tcp::socket sock(cio);
        sock.connect({asio::ip::make_address("127.0.0.1"), srv.ndjson_port()});
        asio::streambuf buf;
        auto read_line = [&] {
            asio::read_until(sock, buf, '\n');
            std::istream in(&buf);
            std::string line;
            std::getline(in, line);
            return nlohmann::json::parse(line);
        };
        CHECK(read_line().at("type") == "snapshot");
        asio::write(sock, asio::buffer("garbage\n" + start + "\n"));
        CHECK(read_line().at("code") == "bad_json");
        CHECK(read_line().at("type") == "started");
        int chunks = 0;
        for (;;) {
            const auto m = read_line();
            if (m.at("type") == "chunk") ++chunks;
            if (m.at("type") == "metrics") break;
        }
        CHECK(chunks == 5);
    }

    SUBCASE("websocket") {
        asio::io_context cio;
        beast::websocket::stream<tcp::socket> ws(cio);
        ws.next_layer().connect({asio::ip::make_address("127.0.0.1"), srv.ws_port()});
        ws.handshake("127.0.0.1", "/");
        beast::flat_buffer buf;
        auto read_msg = [&] {
            buf.clear();
            ws.read(buf);
            return nlohmann::json::parse(beast::buffers_to_string(buf.data()));
        };
        CHECK(read_msg().at("type") == "snapshot");
        ws.write(asio::buffer(start));
        CHECK(read_msg().at("type") == "started");
        int chunks = 0;
        for (;;) {
            const auto m = read_msg();
            if (m.at("type") == "chunk") ++chunks;
            if (m.at("type") == "metrics") break;
        }
        CHECK(chunks == 5);
        ws.close(beast::websocket::close_code::normal);
    }

    SUBCASE("plain http without a static dir") {
        asio::io_context cio;
        beast::tcp_stream stream(cio);
        stream.connect(tcp::endpoint{asio::ip::make_address("127.0.0.1"), srv.ws_port()});
        beast::http::request<beast::http::empty_body> req{beast::http::verb::get, "/index.html", 11};
        req.set(beast::http::field::host, "127.0.0.1");
        beast::http::write(stream, req);
        beast::flat_buffer buf;
        beast::http::response<beast::http::string_body> res;
        beast::http::read(stream, buf, res);
        CHECK(res.result() == beast::http::status::not_found);
    }

    asio::post(io, [&] { srv.stop(); });
    loop.join();
}
