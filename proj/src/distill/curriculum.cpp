#include <chrono>

#include "lpm/distill/lab.hpp"

namespace lpm::distill {

std::uint64_t eval_seed(const LabConfig& cfg) { return cfg.seed * 7919 + 0x6576616cull; }

nlohmann::json CurriculumResult::summary() const {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& r : reports) {
        stages.push_back({{"stage", r.stage}, {"seconds", r.seconds}, {"batches", r.lineage.size()}});
    }
    const double d2 = stage2_backbone.drift;
    const double d3 = stage3_backbone.drift;
    return {{"seconds", seconds},
            {"stages", stages},
            {"stage2_backbone", stage2_backbone.to_json()},
            {"stage3_backbone", stage3_backbone.to_json()},
            {"full_stack", full_stack.to_json()},
            {"drift_improvement", d2 > 0.0 ? (d2 - d3) / d2 : 0.0},
            {"backbone_frozen", backbone_hash_before_refiner == backbone_hash_after_refiner},
            {"refiner_init_matches", refiner_init_matches}};
}

CurriculumResult run_curriculum(const LabConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const Lab lab(cfg);
    CurriculumResult out;
    Net backbone = make_net(cfg.hidden, cfg.seed * 2 + 11);
    Net fake = make_net(cfg.hidden, cfg.seed * 2 + 12);

    out.reports.push_back(lab.stage1(backbone));
    out.backbone1 = backbone;
    out.reports.push_back(lab.stage2(backbone, fake));
    out.backbone2 = backbone;
    out.reports.push_back(lab.stage3(backbone, fake));
    out.backbone3 = backbone;

    Net refiner = backbone;  // clone, then finetune
    out.refiner_init_matches = weight_hash(refiner) == weight_hash(backbone);
    out.backbone_hash_before_refiner = weight_hash(backbone);
    out.reports.push_back(lab.stage4(backbone, refiner, fake));
    out.backbone_hash_after_refiner = weight_hash(backbone);
    out.refiner = refiner;
    out.fake = fake;

    const std::uint64_t es = eval_seed(cfg);
    out.stage2_backbone =
        eval_rollouts(cfg.teacher, cfg.levels, out.backbone2, nullptr, cfg.eval_rollouts, cfg.eval_chunks, es);
    out.stage3_backbone =
        eval_rollouts(cfg.teacher, cfg.levels, out.backbone3, nullptr, cfg.eval_rollouts, cfg.eval_chunks, es);
    out.full_stack =
        eval_rollouts(cfg.teacher, cfg.levels, out.backbone3, &out.refiner, cfg.eval_rollouts, cfg.eval_chunks, es);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

}  // namespace lpm::distill
