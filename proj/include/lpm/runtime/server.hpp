#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>

#include "lpm/runtime/session.hpp"

namespace boost::asio {
class io_context;
}

namespace lpm::runtime {

struct Endpoint {
    std::string host = "127.0.0.1";
    unsigned short port = 0;  // 0 picks a free port
};

// "host:port", ":port" or "port".
Endpoint parse_endpoint(const std::string& addr);

struct ServerOptions {
    std::optional<Endpoint> ndjson;  // newline-delimited JSON over TCP
    std::optional<Endpoint> ws;      // WebSocket, plus static files over plain HTTP
    std::string static_dir;          // empty: HTTP requests get 404
    SessionConfig defaults;          // merged under each start message's config
};

// Each connection gets its own ProtocolSession. Runs on the caller's
// io_context; call io.run() from one thread.
class Server {
public:
    Server(boost::asio::io_context& io, ServerOptions opts);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    unsigned short ndjson_port() const;
    unsigned short ws_port() const;
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace lpm::runtime
