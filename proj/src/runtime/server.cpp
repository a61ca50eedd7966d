#include "lpm/runtime/server.hpp"

#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "lpm/latcore/errors.hpp"
#include "lpm/runtime/protocol.hpp"

namespace lpm::runtime {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

Endpoint parse_endpoint(const std::string& addr) {
    Endpoint ep;
    const auto colon = addr.rfind(':');
    std::string port = addr;
    if (colon != std::string::npos) {
        if (colon > 0) ep.host = addr.substr(0, colon);
        port = addr.substr(colon + 1);
    }
    try {
        std::size_t used = 0;
        const int p = std::stoi(port, &used);
        if (used != port.size() || p < 0 || p > 65535) throw std::out_of_range("port");
        ep.port = static_cast<unsigned short>(p);
    } catch (const std::exception&) {
        throw ConfigError("bad address '" + addr + "' (want host:port)");
    }
    return ep;
}

namespace {

// Queues outgoing lines and writes them one at a time on the io thread.
template <typename Derived>
class Connection : public std::enable_shared_from_this<Derived> {
public:
    explicit Connection(asio::io_context& io) : io_(io) {}

protected:
    ProtocolSession::Send sender() {
        std::weak_ptr<Derived> weak = this->shared_from_this();
        asio::io_context& io = io_;
        return [weak, &io](std::string line) {
            asio::post(io, [weak, line = std::move(line)]() mutable {
                if (auto self = weak.lock()) self->enqueue(std::move(line));
            });
        };
    }

    void enqueue(std::string line) {
        if (closed_) return;
        queue_.push_back(std::move(line));
        if (queue_.size() == 1) static_cast<Derived*>(this)->write_front();
    }

    void wrote(beast::error_code ec) {
        if (ec) return shutdown();
        queue_.pop_front();
        if (!queue_.empty()) static_cast<Derived*>(this)->write_front();
    }

    void shutdown() {
        if (closed_) return;
        closed_ = true;
        if (protocol_) protocol_->close();
    }

    asio::io_context& io_;
    std::deque<std::string> queue_;
    std::unique_ptr<ProtocolSession> protocol_;
    bool closed_ = false;

    template <typename>
    friend class Connection;
};

class NdjsonConnection : public Connection<NdjsonConnection> {
public:
    NdjsonConnection(asio::io_context& io, tcp::socket socket, const SessionConfig& defaults)
        : Connection(io), socket_(std::move(socket)), defaults_(defaults) {}

    void start() {
        protocol_ = std::make_unique<ProtocolSession>(defaults_, sender());
        protocol_->open();
        read();
    }

    void write_front() {
        asio::async_write(socket_, asio::buffer(queue_.front()),
                          [self = shared_from_this()](beast::error_code ec, std::size_t) { self->wrote(ec); });
    }

private:
    friend class Connection<NdjsonConnection>;

    void enqueue(std::string line) {
        line.push_back('\n');
        Connection::enqueue(std::move(line));
    }

    void read() {
        asio::async_read_until(socket_, buf_, '\n', [self = shared_from_this()](beast::error_code ec, std::size_t n) {
            if (ec) return self->shutdown();
            std::string line(asio::buffers_begin(self->buf_.data()), asio::buffers_begin(self->buf_.data()) + n);
            self->buf_.consume(n);
            self->protocol_->handle_line(line);
            self->read();
        });
    }

    tcp::socket socket_;
    asio::streambuf buf_;
    SessionConfig defaults_;
};

std::string_view mime_type(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".html") return "text/html";
    if (ext == ".js" || ext == ".mjs") return "application/javascript";
    if (ext == ".css") return "text/css";
    if (ext == ".json") return "application/json";
    if (ext == ".svg") return "image/svg+xml";
    if (ext == ".png") return "image/png";
    return "application/octet-stream";
}

class WsConnection : public Connection<WsConnection> {
public:
    WsConnection(asio::io_context& io, tcp::socket socket, const SessionConfig& defaults, std::string static_dir)
        : Connection(io), http_(std::move(socket)), defaults_(defaults), static_dir_(std::move(static_dir)) {}

    void start() {
        http::async_read(http_, buf_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return;
            if (websocket::is_upgrade(self->req_)) return self->accept();
            self->serve_file();
        });
    }

    void write_front() {
        ws_->text(true);
        ws_->async_write(asio::buffer(queue_.front()),
                         [self = shared_from_this()](beast::error_code ec, std::size_t) { self->wrote(ec); });
    }

private:
    void accept() {
        ws_.emplace(std::move(http_));
        ws_->async_accept(req_, [self = shared_from_this()](beast::error_code ec) {
            if (ec) return;
            self->protocol_ = std::make_unique<ProtocolSession>(self->defaults_, self->sender());
            self->protocol_->open();
            self->read();
        });
    }

    void read() {
        ws_->async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return self->shutdown();
            std::istringstream in(beast::buffers_to_string(self->buf_.data()));
            self->buf_.consume(self->buf_.size());
            for (std::string line; std::getline(in, line);) self->protocol_->handle_line(line);
            self->read();
        });
    }

    void serve_file() {
        namespace fs = std::filesystem;
        auto res = std::make_shared<http::response<http::string_body>>();
        res->version(req_.version());
        res->keep_alive(false);
        std::string target(req_.target());
        if (const auto q = target.find('?'); q != std::string::npos) target.resize(q);
        if (target.empty() || target.back() == '/') target += "index.html";
        const bool unsafe = target.find("..") != std::string::npos;
        const fs::path path = fs::path(static_dir_) / fs::path(target).relative_path();
        std::ifstream in(path, std::ios::binary);
        if (static_dir_.empty() || unsafe || req_.method() != http::verb::get || !in) {
            res->result(http::status::not_found);
            res->set(http::field::content_type, "text/plain");
            res->body() = "not found\n";
        } else {
            std::ostringstream body;
            body << in.rdbuf();
            res->result(http::status::ok);
            res->set(http::field::content_type, std::string(mime_type(path)));
            res->body() = body.str();
        }
        res->prepare_payload();
        http::async_write(http_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
            beast::error_code ignored;
            self->http_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        });
    }

    beast::tcp_stream http_;
    std::optional<websocket::stream<beast::tcp_stream>> ws_;
    beast::flat_buffer buf_;
    http::request<http::string_body> req_;
    SessionConfig defaults_;
    std::string static_dir_;
};

tcp::endpoint resolve(const Endpoint& ep) { return {asio::ip::make_address(ep.host), ep.port}; }

}  // namespace

struct Server::Impl {
    Impl(asio::io_context& io, ServerOptions o) : io(io), opts(std::move(o)) {}

    void accept_ndjson() {
        ndjson->async_accept([this](beast::error_code ec, tcp::socket s) {
            if (ec) return;
            std::make_shared<NdjsonConnection>(io, std::move(s), opts.defaults)->start();
            accept_ndjson();
        });
    }

    void accept_ws() {
        ws->async_accept([this](beast::error_code ec, tcp::socket s) {
            if (ec) return;
            std::make_shared<WsConnection>(io, std::move(s), opts.defaults, opts.static_dir)->start();
            accept_ws();
        });
    }

    asio::io_context& io;
    ServerOptions opts;
    std::optional<tcp::acceptor> ndjson;
    std::optional<tcp::acceptor> ws;
};

Server::Server(asio::io_context& io, ServerOptions opts) : impl_(std::make_unique<Impl>(io, std::move(opts))) {
    if (!impl_->opts.ndjson && !impl_->opts.ws) throw ConfigError("server: nothing to listen on");
    if (impl_->opts.ndjson) {
        impl_->ndjson.emplace(io, resolve(*impl_->opts.ndjson));
        impl_->accept_ndjson();
    }
    if (impl_->opts.ws) {
        impl_->ws.emplace(io, resolve(*impl_->opts.ws));
        impl_->accept_ws();
    }
}

Server::~Server() = default;

unsigned short Server::ndjson_port() const { return impl_->ndjson ? impl_->ndjson->local_endpoint().port() : 0; }
unsigned short Server::ws_port() const { return impl_->ws ? impl_->ws->local_endpoint().port() : 0; }

void Server::stop() {
    beast::error_code ignored;
    if (impl_->ndjson) impl_->ndjson->close(ignored);
    if (impl_->ws) impl_->ws->close(ignored);
}

}  // namespace lpm::runtime
