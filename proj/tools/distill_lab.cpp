// distill-lab: the four-stage curriculum on the toy mixture teacher.
//
//   distill-lab --stage 1|2|3|4 --seed S --out ckpt/
//   distill-lab --all --seed S --out ckpt/
//
// Stage N > 1 resumes from stage N-1's checkpoints in the same directory.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "lpm/distill/lab.hpp"
#include "lpm/latcore/errors.hpp"

namespace fs = std::filesystem;
using namespace lpm;
using namespace lpm::distill;

namespace {

fs::path ckpt_path(const fs::path& dir, int stage, const std::string& role) {
    return dir / ("stage" + std::to_string(stage) + "_" + role + ".ckpt");
}

Net load_net(const fs::path& p) {
    if (!fs::exists(p)) throw ConfigError("missing checkpoint " + p.string() + " (run the previous stage first)");
    return net_from_checkpoint(load_checkpoint(p));
}

void append_curve(const fs::path& dir, const StageReport& rep) {
    const fs::path p = dir / "curves.csv";
    const bool fresh = !fs::exists(p) || rep.stage == 1;
    std::ofstream out(p, fresh ? std::ios::trunc : std::ios::app);
    write_curve_csv(out, {rep}, fresh);
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream out(p);
    out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Four-stage distillation curriculum on an analytic mixture teacher"};
    int stage = 0;
    bool all = false;
    std::uint64_t seed = 0;
    std::string out_dir = "ckpt";
    double scale = 1.0;
    std::size_t eval_n = 0;
    std::vector<std::size_t> steps;
    app.add_option("--stage", stage, "Run one stage (1-4)")->check(CLI::Range(1, 4));
    app.add_flag("--all", all, "Run the full curriculum");
    app.add_option("--seed", seed, "Seed");
    app.add_option("--out", out_dir, "Checkpoint directory");
    app.add_option("--steps-scale", scale, "Multiply every stage's step budget")->check(CLI::PositiveNumber);
    app.add_option("--steps", steps, "Step budgets for stages 1-4")->expected(4)->delimiter(',');
    app.add_option("--eval-rollouts", eval_n, "Rollouts per evaluation (default from config)");
    CLI11_PARSE(app, argc, argv);
    if (all == (stage != 0)) {
        std::cerr << "distill-lab: give exactly one of --stage or --all\n";
        return 2;
    }

    LabConfig cfg;
    cfg.seed = seed;
    for (auto* s : {&cfg.steps1, &cfg.steps2, &cfg.steps3, &cfg.steps4}) {
        *s = static_cast<std::size_t>(static_cast<double>(*s) * scale);
    }
    if (!steps.empty()) {
        cfg.steps1 = steps[0];
        cfg.steps2 = steps[1];
        cfg.steps3 = steps[2];
        cfg.steps4 = steps[3];
    }
    if (eval_n) cfg.eval_rollouts = eval_n;
    const fs::path dir(out_dir);
    fs::create_directories(dir);

    try {
        if (all) {
            const CurriculumResult r = run_curriculum(cfg);
            save_checkpoint(ckpt_path(dir, 1, "backbone"), to_checkpoint(r.backbone1, "backbone", cfg));
            save_checkpoint(ckpt_path(dir, 2, "backbone"), to_checkpoint(r.backbone2, "backbone", cfg));
            save_checkpoint(ckpt_path(dir, 3, "backbone"), to_checkpoint(r.backbone3, "backbone", cfg));
            save_checkpoint(ckpt_path(dir, 4, "refiner"), to_checkpoint(r.refiner, "refiner", cfg));
            save_checkpoint(ckpt_path(dir, 4, "fake"), to_checkpoint(r.fake, "fake", cfg));
            std::ofstream curves(dir / "curves.csv");
            write_curve_csv(curves, r.reports);
            const auto summary = r.summary();
            write_json(dir / "report.json", summary);
            std::cout << summary.dump() << '\n';
            return 0;
        }

        const Lab lab(cfg);
        const std::uint64_t es = eval_seed(cfg);
        StageReport rep;
        EvalReport ev;
        if (stage == 1) {
            Net backbone = make_net(cfg.hidden, cfg.seed * 2 + 11);
            rep = lab.stage1(backbone);
            save_checkpoint(ckpt_path(dir, 1, "backbone"), to_checkpoint(backbone, "backbone", cfg));
            ev = eval_rollouts(cfg.teacher, cfg.levels, backbone, nullptr, cfg.eval_rollouts, cfg.eval_chunks, es);
        } else if (stage == 2 || stage == 3) {
            Net backbone = load_net(ckpt_path(dir, stage - 1, "backbone"));
            Net fake = stage == 2 ? make_net(cfg.hidden, cfg.seed * 2 + 12) : load_net(ckpt_path(dir, 2, "fake"));
            rep = stage == 2 ? lab.stage2(backbone, fake) : lab.stage3(backbone, fake);
            save_checkpoint(ckpt_path(dir, stage, "backbone"), to_checkpoint(backbone, "backbone", cfg));
            save_checkpoint(ckpt_path(dir, stage, "fake"), to_checkpoint(fake, "fake", cfg));
            ev = eval_rollouts(cfg.teacher, cfg.levels, backbone, nullptr, cfg.eval_rollouts, cfg.eval_chunks, es);
        } else {
            const Net backbone = load_net(ckpt_path(dir, 3, "backbone"));
            Net fake = load_net(ckpt_path(dir, 3, "fake"));
            Net refiner = backbone;
            rep = lab.stage4(backbone, refiner, fake);
            save_checkpoint(ckpt_path(dir, 4, "refiner"), to_checkpoint(refiner, "refiner", cfg));
            save_checkpoint(ckpt_path(dir, 4, "fake"), to_checkpoint(fake, "fake", cfg));
            ev = eval_rollouts(cfg.teacher, cfg.levels, backbone, &refiner, cfg.eval_rollouts, cfg.eval_chunks, es);
        }
        append_curve(dir, rep);
        nlohmann::json j = {{"stage", stage}, {"seconds", rep.seconds}, {"eval", ev.to_json()}};
        if (stage == 1) j["heldout"] = {rep.initial_heldout, rep.final_heldout};
        write_json(dir / ("stage" + std::to_string(stage) + "_eval.json"), j);
        std::cout << j.dump() << '\n';
    } catch (const std::exception& e) {
        std::cerr << "distill-lab: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
