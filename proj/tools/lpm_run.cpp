// lpm-run: drive a scripted full-duplex session and write its message trace.
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lpm/latcore/errors.hpp"
#include "lpm/runtime/session.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Scripted streaming session"};
    std::string script;
    std::string out_path;
    std::string lat = "700,700,180";
    std::string clock = "sim";
    std::string config_path;
    std::size_t chunks = 20;
    std::uint64_t seed = 0;
    app.add_option("--script", script, "NDJSON event script")->check(CLI::ExistingFile);
    app.add_option("--chunks", chunks, "max chunks, warmup included")->check(CLI::PositiveNumber);
    app.add_option("--lat", lat, "generator,refiner,decoder latency in ms");
    app.add_option("--seed", seed, "weights and noise seed");
    app.add_option("--clock", clock, "sim or wall")->check(CLI::IsMember({"sim", "wall"}));
    app.add_option("--config", config_path, "session config JSON (flags override it)")->check(CLI::ExistingFile);
    app.add_option("--out", out_path, "trace NDJSON (stdout if omitted)");
    CLI11_PARSE(app, argc, argv);

    try {
        nlohmann::json cfg_json = nlohmann::json::object();
        if (!config_path.empty()) cfg_json = nlohmann::json::parse(std::ifstream(config_path));
        cfg_json["chunks"] = chunks;
        cfg_json["seed"] = seed;
        cfg_json["clock"] = clock;
        std::vector<double> lats;
        std::istringstream in(lat);
        for (std::string part; std::getline(in, part, ',');) lats.push_back(std::stod(part));
        cfg_json["lat"] = lats;
        const auto cfg = lpm::runtime::SessionConfig::from_json(cfg_json);

        std::vector<lpm::runtime::ControlEvent> events;
        if (!script.empty()) {
            std::ifstream f(script);
            events = lpm::runtime::read_script(f, cfg.sample_rate);
        }

        std::ofstream file;
        std::ostream* out = &std::cout;
        if (!out_path.empty()) {
            file.open(out_path);
            if (!file) throw lpm::FormatError("cannot open " + out_path);
            out = &file;
        }
        lpm::runtime::Session session(cfg, [out](const nlohmann::json& m) { *out << m.dump() << '\n'; });
        for (auto& e : events) session.post(std::move(e));
        const auto res = session.run();
        std::cerr << "chunks " << res.chunks.size() << ", final state " << lpm::runtime::to_string(res.final_state)
                  << ", ttfr " << res.metrics.ttfr_ms << " ms\n";
        return res.lookahead_violations == 0 && res.isolation_violations == 0 ? 0 : 3;
    } catch (const std::exception& e) {
        std::cerr << "lpm-run: " << e.what() << '\n';
        return 1;
    }
}
