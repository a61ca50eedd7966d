// lpm-serve: the session protocol over NDJSON/TCP and WebSocket.
//
//   lpm-serve --listen 127.0.0.1:7070 --ws 127.0.0.1:7071 [--static console/dist]

#include <csignal>
#include <fstream>
#include <iostream>

#include <boost/asio.hpp>
#include <CLI11.hpp>

#include "lpm/runtime/server.hpp"

using namespace lpm::runtime;

int main(int argc, char** argv) {
    CLI::App app{"Serve live sessions over NDJSON and WebSocket"};
    std::string listen, ws, static_dir, config_path;
    bool sim = false;
    app.add_option("--listen", listen, "NDJSON/TCP address host:port");
    app.add_option("--ws", ws, "WebSocket (and static HTTP) address host:port");
    app.add_option("--static", static_dir, "Directory served over plain HTTP on the --ws port");
    app.add_option("--config", config_path, "JSON file with default session config");
    app.add_flag("--sim", sim, "Default to the simulated clock instead of wall clock");
    CLI11_PARSE(app, argc, argv);
    if (listen.empty() && ws.empty()) {
        std::cerr << "lpm-serve: give --listen and/or --ws\n";
        return 2;
    }
    try {
        nlohmann::json defaults = {{"clock", sim ? "sim" : "wall"}};
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw std::runtime_error("cannot open " + config_path);
            defaults.merge_patch(nlohmann::json::parse(in));
        }
        ServerOptions opts;
        opts.defaults = SessionConfig::from_json(defaults);
        if (!listen.empty()) opts.ndjson = parse_endpoint(listen);
        if (!ws.empty()) opts.ws = parse_endpoint(ws);
        opts.static_dir = static_dir;

        boost::asio::io_context io;
        Server server(io, opts);
        boost::asio::signal_set signals(io, SIGINT, SIGTERM);
        signals.async_wait([&](auto, int) {
            server.stop();
            io.stop();
        });
        if (opts.ndjson) std::cerr << "ndjson on " << opts.ndjson->host << ':' << server.ndjson_port() << '\n';
        if (opts.ws) std::cerr << "websocket on " << opts.ws->host << ':' << server.ws_port() << '\n';
        io.run();
    } catch (const std::exception& e) {
        std::cerr << "lpm-serve: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
